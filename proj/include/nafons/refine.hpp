#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nafons/fit.hpp"
#include "nafons/spectrum.hpp"

namespace nafons {

// One digitized spectrum entering the line-shape refinement.
struct RefineTarget {
  std::string observe;
  bool decouple = false;
  SampledSpectrum exp;
};

struct RefineCfg {
  double param_window_frac = 0.01;  // Hamiltonian params stay inside +-frac*max(|v|,10 Hz)
  double param_window_floor_hz = 10.0;
  double t2_lo_s = 1e-4;
  double t2_hi_s = 10.0;
  int max_iters = 200;
  int max_rejects = 20;             // consecutive rejected steps before giving up
};

struct RefineResult {
  HamiltonianParams params;
  LineWidths widths;
  std::vector<double> rel_param_change;            // canonical order, |dx|/max(|x|,floor)
  double rss = 0.0;
  std::vector<std::pair<double, double>> amp_base;  // per spectrum, closed-form
  bool diverged = false;
  int iters = 0;
};

// Least squares on the sampled line shape: free variables are the per-spin
// T2* and all Hamiltonian parameters, the latter hard-constrained to a
// +-1% window around x_star; per-spectrum amplitude and baseline are solved
// in closed form each iteration.
RefineResult lineshape_refine(const SpinSystem& sys, const HamiltonianParams& x_star,
                              const std::vector<RefineTarget>& targets,
                              const LineWidths& t2_init, const RefineCfg& cfg = {});

struct ErrorEstimate {
  std::vector<double> std_hz;  // per free parameter of the problem
  int trials_requested = 0;
  int trials_used = 0;
  int failures = 0;
  double noise_sigma_hz = 0.0;
};

// Monte-Carlo error bars: each trial adds i.i.d. gaussian noise of the given
// sigma to every experimental frequency, re-runs a warm-started local solve
// from x_star, and the per-parameter sample standard deviation over the
// refitted values is reported. Trials whose refit residual stays above
// 5*sigma + tol per line are dropped; more than 50% failures aborts.
ErrorEstimate estimate_errors(const FitProblem& prob, const Eigen::VectorXd& x_star,
                              double noise_sigma_hz, int trials, std::uint64_t seed,
                              const LocalSolveCfg& solver = {});

}  // namespace nafons
