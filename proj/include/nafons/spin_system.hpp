#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace nafons {

struct Spin {
  std::string label;
  std::string species;  // isotope tag, e.g. "1H", "19F"
};

// Ordered collection of spin-1/2 sites. The order fixes the tensor-product
// basis: spin 0 is the leftmost Kronecker factor (most significant bit of
// the basis index), and Z|0> = +|0>.
class SpinSystem {
 public:
  SpinSystem() = default;
  explicit SpinSystem(std::vector<Spin> spins);  // throws on duplicate labels / empty fields

  int size() const { return static_cast<int>(spins_.size()); }
  const Spin& spin(int i) const { return spins_.at(static_cast<std::size_t>(i)); }
  const std::vector<Spin>& spins() const { return spins_; }

  // -1 when the label is absent.
  int index_of(const std::string& label) const;

  bool homonuclear(int j, int k) const { return spin(j).species == spin(k).species; }

  bool has_species(const std::string& species) const;
  std::vector<int> sites_of_species(const std::string& species) const;
  // Unique species tags in first-appearance order.
  std::vector<std::string> species_tags() const;

 private:
  std::vector<Spin> spins_;
};

// Chemical shifts and coupling tables, all in Hz. Coupling matrices are
// symmetric with zero diagonal.
struct HamiltonianParams {
  Eigen::VectorXd shifts_hz;
  Eigen::MatrixXd dipolar_hz;
  Eigen::MatrixXd scalar_hz;

  static HamiltonianParams zeros(int n_spins);
  // Throws std::invalid_argument on dimension mismatch, asymmetry, nonzero
  // diagonal, or non-finite entries.
  void validate(int n_spins) const;
};

enum class ParamKind { Shift, Dipolar, Scalar };

// Addresses one scalar inside HamiltonianParams. For couplings j < k.
struct ParamId {
  ParamKind kind = ParamKind::Shift;
  int j = 0;
  int k = 0;

  bool operator==(const ParamId&) const = default;
};

// Canonical enumeration: shifts 0..N-1, then dipolar upper triangle in
// row-major (j,k) order, then the scalar upper triangle.
std::vector<ParamId> canonical_params(int n_spins);

double get_param(const HamiltonianParams& p, const ParamId& id);
void set_param(HamiltonianParams& p, const ParamId& id, double value_hz);
std::string param_name(const SpinSystem& sys, const ParamId& id);

}  // namespace nafons
