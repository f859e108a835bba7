#include "nafons/spectrum.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <numeric>
#include <set>
#include <stdexcept>

#include <Eigen/Eigenvalues>

namespace nafons {

namespace {

using cplx = std::complex<double>;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Rotate each eigenvector so its largest-magnitude entry is real positive;
// makes the decomposition reproducible up to degenerate ordering.
void canonicalize_phases(Eigen::MatrixXcd& vecs) {
  for (Eigen::Index c = 0; c < vecs.cols(); ++c) {
    Eigen::Index imax = 0;
    double best = -1.0;
    for (Eigen::Index r = 0; r < vecs.rows(); ++r) {
      const double a = std::abs(vecs(r, c));
      if (a > best + 1e-15) {
        best = a;
        imax = r;
      }
    }
    const cplx v = vecs(imax, c);
    if (std::abs(v) > 0) vecs.col(c) *= std::conj(v) / std::abs(v);
  }
}

bool lex_less(const Eigen::VectorXcd& a, const Eigen::VectorXcd& b) {
  constexpr double tol = 1e-12;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (a[i].real() < b[i].real() - tol) return true;
    if (a[i].real() > b[i].real() + tol) return false;
    if (a[i].imag() < b[i].imag() - tol) return true;
    if (a[i].imag() > b[i].imag() + tol) return false;
  }
  return false;
}

}  // namespace

EigenSystem diagonalize(const Eigen::MatrixXcd& h, double hermiticity_tol) {
  if (h.rows() != h.cols()) throw std::invalid_argument("matrix is not square");
  const double scale = std::max(1.0, h.cwiseAbs().maxCoeff());
  if ((h - h.adjoint()).cwiseAbs().maxCoeff() > hermiticity_tol * scale)
    throw std::invalid_argument("matrix is not Hermitian");

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> solver(h);
  if (solver.info() != Eigen::Success)
    throw std::runtime_error("eigensolver failed to converge");

  EigenSystem out;
  out.energies = solver.eigenvalues();
  out.vectors = solver.eigenvectors();
  canonicalize_phases(out.vectors);

  // Deterministic order inside degenerate clusters.
  const double e_scale = std::max(out.energies.cwiseAbs().maxCoeff(), 1e-300);
  const double cluster_tol = 1e-11 * e_scale;
  Eigen::Index lo = 0;
  while (lo < out.energies.size()) {
    Eigen::Index hi = lo + 1;
    while (hi < out.energies.size() && out.energies[hi] - out.energies[hi - 1] <= cluster_tol) ++hi;
    if (hi - lo > 1) {
      std::vector<Eigen::Index> order(static_cast<std::size_t>(hi - lo));
      std::iota(order.begin(), order.end(), lo);
      std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
        return lex_less(out.vectors.col(a), out.vectors.col(b));
      });
      Eigen::MatrixXcd block(out.vectors.rows(), hi - lo);
      Eigen::VectorXd energies(hi - lo);
      for (Eigen::Index i = 0; i < hi - lo; ++i) {
        block.col(i) = out.vectors.col(order[static_cast<std::size_t>(i)]);
        energies[i] = out.energies[order[static_cast<std::size_t>(i)]];
      }
      out.vectors.middleCols(lo, hi - lo) = block;
      out.energies.segment(lo, hi - lo) = energies;
    }
    lo = hi;
  }
  return out;
}

namespace {

std::vector<Transition> lines_from_amplitudes(const EigenSystem& eig,
                                              const Eigen::MatrixXcd& amps, double drop_rel,
                                              const Eigen::VectorXd* z_diag) {
  const int dim = eig.dim();
  Eigen::VectorXd m_obs;
  if (z_diag) {
    // <Z_obs> per eigenstate; eigenstates of the internal Hamiltonian have
    // sharp per-species magnetization, so rounding is safe.
    m_obs.resize(dim);
    for (int k = 0; k < dim; ++k) {
      double z = 0.0;
      for (int b = 0; b < dim; ++b) z += std::norm(eig.vectors(b, k)) * (*z_diag)[b];
      m_obs[k] = z;
    }
  }

  double max_integral = 0.0;
  for (int p = 0; p < dim; ++p)
    for (int q = 0; q < dim; ++q) max_integral = std::max(max_integral, std::abs(amps(p, q)));

  std::vector<Transition> out;
  if (max_integral <= 0.0) return out;
  const double cutoff = drop_rel * max_integral;
  for (int p = 0; p < dim; ++p) {
    for (int q = 0; q < dim; ++q) {
      const double a = std::abs(amps(p, q));
      if (a < cutoff || a == 0.0) continue;
      Transition t;
      t.freq_hz = (eig.energies[p] - eig.energies[q]) / kTwoPi;
      t.integral = a;
      t.from_idx = p;
      t.to_idx = q;
      t.coherence_order = z_diag ? static_cast<int>(std::lround((m_obs[p] - m_obs[q]) / 2.0)) : 1;
      out.push_back(std::move(t));
    }
  }
  return out;
}

}  // namespace

std::vector<Transition> stick_spectrum_thermal(const EigenSystem& eig,
                                               const Eigen::MatrixXcd& detect, double drop_rel,
                                               const Eigen::VectorXd* z_diag) {
  if (detect.rows() != eig.dim() || detect.cols() != eig.dim())
    throw std::invalid_argument("detection operator dimension mismatch");
  const Eigen::MatrixXcd d_eig = eig.vectors.adjoint() * detect * eig.vectors;
  Eigen::MatrixXcd amps(eig.dim(), eig.dim());
  for (int p = 0; p < eig.dim(); ++p)
    for (int q = 0; q < eig.dim(); ++q) amps(p, q) = std::norm(d_eig(p, q));
  return lines_from_amplitudes(eig, amps, drop_rel, z_diag);
}

std::vector<Transition> stick_spectrum_from_state(const EigenSystem& eig,
                                                  const Eigen::MatrixXcd& rho0,
                                                  const Eigen::MatrixXcd& detect, double drop_rel,
                                                  const Eigen::VectorXd* z_diag) {
  if (detect.rows() != eig.dim() || detect.cols() != eig.dim() || rho0.rows() != eig.dim() ||
      rho0.cols() != eig.dim())
    throw std::invalid_argument("state or detection operator dimension mismatch");
  const Eigen::MatrixXcd d_eig = eig.vectors.adjoint() * detect * eig.vectors;
  const Eigen::MatrixXcd rho_eig = eig.vectors.adjoint() * rho0 * eig.vectors;
  Eigen::MatrixXcd amps(eig.dim(), eig.dim());
  for (int p = 0; p < eig.dim(); ++p)
    for (int q = 0; q < eig.dim(); ++q) amps(p, q) = rho_eig(q, p) * d_eig(p, q);
  return lines_from_amplitudes(eig, amps, drop_rel, z_diag);
}

namespace {

// Total order used for top-n selection: integral desc, then frequency asc,
// then eigenstate indices, so selection is deterministic under exact ties.
bool stronger(const Transition& a, const Transition& b) {
  if (a.integral != b.integral) return a.integral > b.integral;
  if (a.freq_hz != b.freq_hz) return a.freq_hz < b.freq_hz;
  if (a.from_idx != b.from_idx) return a.from_idx < b.from_idx;
  return a.to_idx < b.to_idx;
}

}  // namespace

std::vector<Transition> top_n_transitions(std::span<const Transition> transitions, std::size_t n,
                                          bool* short_count) {
  if (transitions.empty()) throw std::invalid_argument("empty transition list");
  if (n < 1) throw std::invalid_argument("selection count must be >= 1");
  std::vector<Transition> sorted(transitions.begin(), transitions.end());
  std::sort(sorted.begin(), sorted.end(), stronger);
  const bool short_flag = sorted.size() < n;
  if (short_count) *short_count = short_flag;
  if (!short_flag) sorted.resize(n);
  std::sort(sorted.begin(), sorted.end(),
            [](const Transition& a, const Transition& b) { return a.freq_hz < b.freq_hz; });
  return sorted;
}

std::vector<double> top_n_sorted(std::span<const Transition> transitions, std::size_t n,
                                 bool* short_count) {
  const std::vector<Transition> sel = top_n_transitions(transitions, n, short_count);
  std::vector<double> freqs(sel.size());
  for (std::size_t i = 0; i < sel.size(); ++i) freqs[i] = sel[i].freq_hz;
  return freqs;
}

void attach_spin_weights(std::vector<Transition>& transitions, const EigenSystem& eig,
                         const SpinSystem& sys, const std::string& observe) {
  const std::vector<int> sites = sys.sites_of_species(observe);
  std::vector<Eigen::MatrixXcd> site_ops;
  site_ops.reserve(sites.size());
  for (int s : sites)
    site_ops.push_back(eig.vectors.adjoint() * single_spin_raising(s, sys.size()) * eig.vectors);

  for (Transition& t : transitions) {
    std::vector<double> w(static_cast<std::size_t>(sys.size()), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < sites.size(); ++i) {
      const double a = std::norm(site_ops[i](t.from_idx, t.to_idx));
      w[static_cast<std::size_t>(sites[i])] = a;
      total += a;
    }
    if (total > 0.0)
      for (double& v : w) v /= total;
    t.spin_weight = std::move(w);
  }
}

std::vector<Transition> merge_coincident(std::span<const Transition> transitions, double tol_hz) {
  std::vector<Transition> sorted(transitions.begin(), transitions.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const Transition& a, const Transition& b) { return a.freq_hz < b.freq_hz; });
  std::vector<Transition> out;
  for (const Transition& t : sorted) {
    if (!out.empty() && t.freq_hz - out.back().freq_hz <= tol_hz) {
      Transition& m = out.back();
      const double wsum = m.integral + t.integral;
      m.freq_hz = (m.freq_hz * m.integral + t.freq_hz * t.integral) / wsum;
      m.integral = wsum;
    } else {
      out.push_back(t);
    }
  }
  return out;
}

void LineWidths::validate() const {
  if (t2star_s.empty()) throw std::invalid_argument("no T2* values given");
  for (double t : t2star_s)
    if (!(t > 0.0)) throw std::invalid_argument("T2* values must be positive");
}

void SampledSpectrum::validate() const {
  if (freq_hz.size() != intensity.size())
    throw std::invalid_argument("axis and intensity lengths differ");
  if (freq_hz.size() < 2) throw std::invalid_argument("spectrum needs at least two samples");
  const double d0 = freq_hz[1] - freq_hz[0];
  if (!(d0 > 0)) throw std::invalid_argument("frequency axis must be strictly increasing");
  for (Eigen::Index i = 1; i < freq_hz.size(); ++i) {
    const double d = freq_hz[i] - freq_hz[i - 1];
    if (!(d > 0)) throw std::invalid_argument("frequency axis must be strictly increasing");
    if (std::abs(d - d0) > 1e-9 * std::abs(d0))
      throw std::invalid_argument("frequency axis must be uniform");
  }
}

Eigen::VectorXd make_axis(double lo_hz, double hi_hz, int points) {
  if (points < 2) throw std::invalid_argument("axis needs at least two points");
  if (!(hi_hz > lo_hz)) throw std::invalid_argument("axis upper bound must exceed lower bound");
  return Eigen::VectorXd::LinSpaced(points, lo_hz, hi_hz);
}

SampledSpectrum synth_lineshape(std::span<const Transition> transitions, const LineWidths& widths,
                                const Eigen::VectorXd& axis_hz) {
  widths.validate();
  SampledSpectrum out;
  out.freq_hz = axis_hz;
  out.intensity = Eigen::VectorXd::Zero(axis_hz.size());
  for (const Transition& t : transitions) {
    if (t.spin_weight.size() != widths.t2star_s.size())
      throw std::invalid_argument(
          "transition lacks per-spin weights matching the T2* list; "
          "attach_spin_weights must run on the same system");
    double lam = 0.0;
    for (std::size_t j = 0; j < widths.t2star_s.size(); ++j)
      lam += t.spin_weight[j] / (std::numbers::pi * widths.t2star_s[j]);
    if (lam <= 0.0) continue;  // no detected-spin character, nothing to draw
    for (Eigen::Index i = 0; i < axis_hz.size(); ++i) {
      const double d = axis_hz[i] - t.freq_hz;
      out.intensity[i] += t.integral * lam / (lam * lam + d * d);
    }
  }
  out.validate();
  return out;
}

GradientResult eigenvalue_gradients(const EigenSystem& eig,
                                    const std::vector<Eigen::MatrixXcd>& d_ops) {
  GradientResult res;
  const int dim = eig.dim();
  res.dE_dtheta.resize(dim, static_cast<Eigen::Index>(d_ops.size()));
  for (std::size_t m = 0; m < d_ops.size(); ++m) {
    if (d_ops[m].rows() != dim || d_ops[m].cols() != dim)
      throw std::invalid_argument("derivative operator dimension mismatch");
    const Eigen::MatrixXcd tmp = d_ops[m] * eig.vectors;
    for (int k = 0; k < dim; ++k)
      res.dE_dtheta(k, static_cast<Eigen::Index>(m)) =
          (eig.vectors.col(k).adjoint() * tmp.col(k))(0).real();
  }
  const double scale = std::max(eig.energies.cwiseAbs().maxCoeff(), 1.0);
  for (int k = 1; k < dim; ++k)
    if (eig.energies[k] - eig.energies[k - 1] < 1e-8 * scale) {
      res.degenerate_flagged = true;
      break;
    }
  return res;
}

GradientResult eigenvalue_gradients(const EigenSystem& eig, const SpinSystem& sys) {
  std::vector<Eigen::MatrixXcd> d_ops;
  for (const ParamId& id : canonical_params(sys.size()))
    d_ops.push_back(param_derivative_operator(sys, id));
  return eigenvalue_gradients(eig, d_ops);
}

SimResult simulate_transitions(const SimRequest& req) {
  req.params.validate(req.sys.size());
  if (!req.sys.has_species(req.observe))
    throw std::invalid_argument("observed species '" + req.observe + "' not present");
  if (req.prep && req.decouple)
    throw std::invalid_argument("transition-selective preparation requires the coupled system");

  SimResult res;
  if (req.decouple) {
    auto [sub_sys, sub_params] = restrict_to_species(req.sys, req.params, {req.observe});
    res.site_map = restriction_sites(req.sys, {req.observe});
    res.sim_sys = std::move(sub_sys);
    res.eig = diagonalize(build_hamiltonian(res.sim_sys, sub_params, req.max_spins));
    const Eigen::MatrixXcd detect = detection_operator(res.sim_sys, req.observe, req.max_spins);
    const Eigen::VectorXd z = species_z_diagonal(res.sim_sys, req.observe);
    res.transitions = stick_spectrum_thermal(res.eig, detect, req.drop_rel, &z);
  } else {
    res.sim_sys = req.sys;
    res.site_map.resize(static_cast<std::size_t>(req.sys.size()));
    for (int i = 0; i < req.sys.size(); ++i) res.site_map[static_cast<std::size_t>(i)] = i;
    res.eig = diagonalize(build_hamiltonian(req.sys, req.params, req.max_spins));
    const Eigen::MatrixXcd detect = detection_operator(req.sys, req.observe, req.max_spins);
    const Eigen::VectorXd z = species_z_diagonal(req.sys, req.observe);
    if (req.prep) {
      const PrepSpec& prep = *req.prep;
      if (!req.sys.has_species(prep.species))
        throw std::invalid_argument("preparation species '" + prep.species + "' not present");
      auto [sub_sys, sub_params] = restrict_to_species(req.sys, req.params, {prep.species});
      const EigenSystem sub_eig = diagonalize(build_hamiltonian(sub_sys, sub_params, req.max_spins));
      if (prep.i < 0 || prep.i >= sub_eig.dim() || prep.j < 0 || prep.j >= sub_eig.dim())
        throw std::invalid_argument("preparation eigenstate index out of range");
      const Eigen::MatrixXcd rho_sub =
          sub_eig.vectors.col(prep.i) * sub_eig.vectors.col(prep.j).adjoint();
      const Eigen::MatrixXcd rho_full = embed_operator(
          rho_sub, restriction_sites(req.sys, {prep.species}), req.sys.size(), req.max_spins);
      res.transitions = stick_spectrum_from_state(res.eig, rho_full, detect, req.drop_rel, &z);
    } else {
      res.transitions = stick_spectrum_thermal(res.eig, detect, req.drop_rel, &z);
    }
  }
  attach_spin_weights(res.transitions, res.eig, res.sim_sys, req.observe);
  return res;
}

}  // namespace nafons
