#include "nafons/spin_system.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace nafons {

SpinSystem::SpinSystem(std::vector<Spin> spins) : spins_(std::move(spins)) {
  if (spins_.empty()) throw std::invalid_argument("spin system must contain at least one spin");
  std::set<std::string> seen;
  for (const Spin& s : spins_) {
    if (s.label.empty()) throw std::invalid_argument("spin label must be non-empty");
    if (s.species.empty())
      throw std::invalid_argument("spin '" + s.label + "' has an empty species tag");
    if (!seen.insert(s.label).second)
      throw std::invalid_argument("duplicate spin label '" + s.label + "'");
  }
}

int SpinSystem::index_of(const std::string& label) const {
  for (int i = 0; i < size(); ++i)
    if (spins_[static_cast<std::size_t>(i)].label == label) return i;
  return -1;
}

bool SpinSystem::has_species(const std::string& species) const {
  return std::any_of(spins_.begin(), spins_.end(),
                     [&](const Spin& s) { return s.species == species; });
}

std::vector<int> SpinSystem::sites_of_species(const std::string& species) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i)
    if (spins_[static_cast<std::size_t>(i)].species == species) out.push_back(i);
  return out;
}

std::vector<std::string> SpinSystem::species_tags() const {
  std::vector<std::string> tags;
  for (const Spin& s : spins_)
    if (std::find(tags.begin(), tags.end(), s.species) == tags.end()) tags.push_back(s.species);
  return tags;
}

HamiltonianParams HamiltonianParams::zeros(int n_spins) {
  HamiltonianParams p;
  p.shifts_hz = Eigen::VectorXd::Zero(n_spins);
  p.dipolar_hz = Eigen::MatrixXd::Zero(n_spins, n_spins);
  p.scalar_hz = Eigen::MatrixXd::Zero(n_spins, n_spins);
  return p;
}

namespace {

void check_coupling_matrix(const Eigen::MatrixXd& m, int n, const char* name) {
  if (m.rows() != n || m.cols() != n)
    throw std::invalid_argument(std::string(name) + " matrix has wrong dimensions");
  for (int j = 0; j < n; ++j) {
    if (m(j, j) != 0.0)
      throw std::invalid_argument(std::string(name) + " matrix has a nonzero diagonal");
    for (int k = 0; k < n; ++k) {
      if (!std::isfinite(m(j, k)))
        throw std::invalid_argument(std::string(name) + " matrix has a non-finite entry");
      if (m(j, k) != m(k, j))
        throw std::invalid_argument(std::string(name) + " matrix is not symmetric");
    }
  }
}

}  // namespace

void HamiltonianParams::validate(int n_spins) const {
  if (shifts_hz.size() != n_spins)
    throw std::invalid_argument("shift vector length does not match spin count");
  for (int j = 0; j < n_spins; ++j)
    if (!std::isfinite(shifts_hz[j])) throw std::invalid_argument("non-finite chemical shift");
  check_coupling_matrix(dipolar_hz, n_spins, "dipolar");
  check_coupling_matrix(scalar_hz, n_spins, "scalar");
}

std::vector<ParamId> canonical_params(int n_spins) {
  std::vector<ParamId> out;
  for (int j = 0; j < n_spins; ++j) out.push_back({ParamKind::Shift, j, 0});
  for (int j = 0; j < n_spins; ++j)
    for (int k = j + 1; k < n_spins; ++k) out.push_back({ParamKind::Dipolar, j, k});
  for (int j = 0; j < n_spins; ++j)
    for (int k = j + 1; k < n_spins; ++k) out.push_back({ParamKind::Scalar, j, k});
  return out;
}

double get_param(const HamiltonianParams& p, const ParamId& id) {
  switch (id.kind) {
    case ParamKind::Shift: return p.shifts_hz[id.j];
    case ParamKind::Dipolar: return p.dipolar_hz(id.j, id.k);
    case ParamKind::Scalar: return p.scalar_hz(id.j, id.k);
  }
  throw std::logic_error("unreachable");
}

void set_param(HamiltonianParams& p, const ParamId& id, double value_hz) {
  switch (id.kind) {
    case ParamKind::Shift: p.shifts_hz[id.j] = value_hz; return;
    case ParamKind::Dipolar:
      p.dipolar_hz(id.j, id.k) = value_hz;
      p.dipolar_hz(id.k, id.j) = value_hz;
      return;
    case ParamKind::Scalar:
      p.scalar_hz(id.j, id.k) = value_hz;
      p.scalar_hz(id.k, id.j) = value_hz;
      return;
  }
  throw std::logic_error("unreachable");
}

std::string param_name(const SpinSystem& sys, const ParamId& id) {
  switch (id.kind) {
    case ParamKind::Shift: return "shift " + sys.spin(id.j).label;
    case ParamKind::Dipolar:
      return "dipolar " + sys.spin(id.j).label + " " + sys.spin(id.k).label;
    case ParamKind::Scalar:
      return "scalar " + sys.spin(id.j).label + " " + sys.spin(id.k).label;
  }
  throw std::logic_error("unreachable");
}

}  // namespace nafons
