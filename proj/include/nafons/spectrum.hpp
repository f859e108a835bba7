#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nafons/operators.hpp"
#include "nafons/spin_system.hpp"

namespace nafons {

// Full spectral decomposition of a Hermitian operator. Energies ascend;
// eigenvector phases are canonicalized (largest-magnitude entry real and
// positive) and degenerate clusters are ordered lexicographically so the
// decomposition is a deterministic function of the matrix.
struct EigenSystem {
  Eigen::VectorXd energies;   // rad/s
  Eigen::MatrixXcd vectors;   // columns are eigenvectors
  int dim() const { return static_cast<int>(energies.size()); }
};

EigenSystem diagonalize(const Eigen::MatrixXcd& h, double hermiticity_tol = 1e-9);

// One single-quantum line: freq_hz = (E_from - E_to) / (2*pi).
struct Transition {
  double freq_hz = 0.0;
  double integral = 0.0;
  int from_idx = 0;
  int to_idx = 0;
  int coherence_order = 1;
  // Per-spin share of the detected amplitude, used to mix T2* widths for
  // line-shape synthesis. Empty unless attach_spin_weights ran.
  std::vector<double> spin_weight;
};

inline constexpr double kDropRelDefault = 1e-10;

// High-temperature thermal intensities: integral = |<p|detect|q>|^2 in the
// eigenbasis. Lines below drop_rel * max are discarded. z_diag, when given,
// supplies the detected-species Z diagonal for coherence-order labels.
std::vector<Transition> stick_spectrum_thermal(const EigenSystem& eig,
                                               const Eigen::MatrixXcd& detect,
                                               double drop_rel = kDropRelDefault,
                                               const Eigen::VectorXd* z_diag = nullptr);

// Spectrum from a prepared state: the line (p,q) carries amplitude
// rho~_qp * detect~_pq (eigenbasis); integral = |amplitude|.
std::vector<Transition> stick_spectrum_from_state(const EigenSystem& eig,
                                                  const Eigen::MatrixXcd& rho0,
                                                  const Eigen::MatrixXcd& detect,
                                                  double drop_rel = kDropRelDefault,
                                                  const Eigen::VectorXd* z_diag = nullptr);

// Frequencies of the n largest-integral transitions, sorted ascending.
// Integral ties break toward lower frequency. If fewer than n transitions
// exist, returns all (sorted) and sets *short_count. Throws on empty input.
std::vector<double> top_n_sorted(std::span<const Transition> transitions, std::size_t n,
                                 bool* short_count = nullptr);

// Same selection, but returning the transitions themselves (for assignment
// reporting and analytic Jacobians).
std::vector<Transition> top_n_transitions(std::span<const Transition> transitions, std::size_t n,
                                          bool* short_count = nullptr);

// Fills Transition::spin_weight with |<p|sigma+_j|q>|^2 shares over the
// observed spins.
void attach_spin_weights(std::vector<Transition>& transitions, const EigenSystem& eig,
                         const SpinSystem& sys, const std::string& observe);

// Sums integrals of lines closer than tol_hz (used when comparing spectra
// that contain exactly coincident lines).
std::vector<Transition> merge_coincident(std::span<const Transition> transitions, double tol_hz);

// Effective transverse decoherence times, one per spin, seconds.
struct LineWidths {
  std::vector<double> t2star_s;
  void validate() const;  // all > 0
};

// Digitized trace on a uniform, strictly increasing axis.
struct SampledSpectrum {
  Eigen::VectorXd freq_hz;
  Eigen::VectorXd intensity;
  void validate() const;
  double spacing() const { return freq_hz.size() > 1 ? freq_hz[1] - freq_hz[0] : 0.0; }
};

Eigen::VectorXd make_axis(double lo_hz, double hi_hz, int points);

// Sum of Lorentzians I(nu) = sum_k integral_k * lam_k / (lam_k^2 + (nu-f_k)^2)
// with per-line half width lam_k = sum_j c_j / (pi * T2*_j) mixed from the
// transition's spin weights. Transitions must carry spin weights.
SampledSpectrum synth_lineshape(std::span<const Transition> transitions, const LineWidths& widths,
                                const Eigen::VectorXd& axis_hz);

// Hellmann-Feynman eigenvalue derivatives dE_k/d(theta_m), rad/s per Hz.
// Columns follow the supplied derivative operators. degenerate_flagged is
// set when any adjacent gap is below 1e-8 * ||H|| (scale = max |E|); callers
// should then prefer finite differences.
struct GradientResult {
  Eigen::MatrixXd dE_dtheta;  // dim x n_params
  bool degenerate_flagged = false;
};

GradientResult eigenvalue_gradients(const EigenSystem& eig,
                                    const std::vector<Eigen::MatrixXcd>& d_ops);

// Canonical-parameter version (shifts, dipolar upper triangle, scalar upper
// triangle of sys).
GradientResult eigenvalue_gradients(const EigenSystem& eig, const SpinSystem& sys);

// ---- High-level simulation plumbing shared by the CLI, fit, and refine ----

// Transition-selective preparation: coherence |E_i><E_j| of the species
// sub-Hamiltonian, tensored with identity on the remaining spins.
struct PrepSpec {
  int i = 0;
  int j = 0;
  std::string species;
};

struct SimRequest {
  SpinSystem sys;
  HamiltonianParams params;
  std::string observe;
  bool decouple = false;           // restrict to the observed species
  std::optional<PrepSpec> prep;    // eigenpair coherence (implies coupled system)
  double drop_rel = kDropRelDefault;
  int max_spins = kDefaultMaxSpins;
};

struct SimResult {
  SpinSystem sim_sys;              // system actually simulated
  std::vector<int> site_map;       // sim_sys site -> original site
  EigenSystem eig;
  std::vector<Transition> transitions;  // spin weights attached
};

SimResult simulate_transitions(const SimRequest& req);

}  // namespace nafons
