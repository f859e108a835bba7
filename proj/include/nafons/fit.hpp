#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nafons/peaks.hpp"
#include "nafons/rng.hpp"
#include "nafons/spectrum.hpp"
#include "nafons/spin_system.hpp"

namespace nafons {

// One spectrum to be matched: sorted experimental frequencies plus the
// simulation recipe that produces the candidate lines.
struct SpectrumTarget {
  PeakList exp_peaks;
  std::string observe;
  bool decouple = false;
  std::optional<PrepSpec> prep;
  std::size_t n = 0;  // selection count; 0 means exp_peaks.size()

  std::size_t line_count() const { return n > 0 ? n : exp_peaks.size(); }
};

struct Bounds {
  double lo = 0.0;
  double hi = 0.0;
};

struct FitProblem {
  SpinSystem sys;
  HamiltonianParams fixed;             // baseline values; free entries are overwritten by x
  std::vector<ParamId> free_params;
  std::vector<Bounds> bounds;          // one per free param, lo < hi
  std::vector<SpectrumTarget> targets;

  std::size_t total_lines() const;
  void validate() const;
  HamiltonianParams assemble(const Eigen::VectorXd& x) const;
  Eigen::VectorXd clamp(const Eigen::VectorXd& x, bool* clamped = nullptr) const;
};

struct WeightVector {
  Eigen::VectorXd w;  // entries >= 0; 0/1 masks in normal operation
};

// i.i.d. entries: 0 with probability p_zero, else 1; an all-zero draw is
// rejected and redrawn.
WeightVector sample_weights(std::size_t n, double p_zero, Rng& rng);

// Short transition counts are signalled, not hidden: the objective returns
// this penalty plus deficit^2 so the landscape stays finite.
inline constexpr double kShortCountPenalty = 1e12;

struct ObjectiveEval {
  double value = 0.0;                  // f_w(x), Hz^2
  Eigen::VectorXd residuals;           // exp - sim, concatenated over targets
  Eigen::VectorXd sim_freqs;
  bool short_count = false;
  bool clamped = false;
};

// f_w(x) = sum_j w_j (Fexp_j - Fsim_j)^2 summed over targets; w = nullptr
// means all ones. x outside bounds is clamped and flagged.
ObjectiveEval objective(const Eigen::VectorXd& x, const FitProblem& prob,
                        const WeightVector* w = nullptr);

struct LocalSolveCfg {
  int max_lm_iters = 60;
  double lm_lambda0 = 1e-3;
  double pattern_step_hz = 10.0;
  double pattern_tol_hz = 1e-3;
  int max_outer_cycles = 3;       // (gradient stage, pattern stage) alternations
  long max_evals = 400000;
  double fd_step_hz = 1e-4;       // finite-difference fallback near degeneracies
};

struct LocalSolveResult {
  Eigen::VectorXd x;
  double f = 0.0;
  long evals = 0;
  bool eval_cap_hit = false;
};

// Bound-constrained minimizer of f_w: damped Gauss-Newton steps driven by
// Hellmann-Feynman frequency gradients (finite differences near
// degeneracies), then a coordinate pattern search (step halved on failure,
// terminating at pattern_tol_hz) to cross the kinks left by top-n
// re-selection and re-sorting.
LocalSolveResult local_solve(const FitProblem& prob, const Eigen::VectorXd& x0,
                             const WeightVector* w = nullptr, const LocalSolveCfg& cfg = {});

enum class FitMode { Loop, RandomWalk };

struct NafonsCfg {
  int loops = 50;                  // M perturbation rounds per restart
  double p_zero = 0.5;
  std::uint64_t seed = 0;
  double tol_hz = 0.05;            // per-line RMS convergence tolerance
  int certificate_draws = 10;      // consecutive random-weight checks at x*
  double max_wall_time_s = 600.0;
  int restarts = 1;
  FitMode mode = FitMode::Loop;
  int threads = 1;                 // >1 disables the serial early stop
  LocalSolveCfg solver;
};

struct RestartOutcome {
  int restart = 0;
  bool converged = false;
  int loops_used = 0;
  double rms_hz = 0.0;
  double residual_hz2 = 0.0;
  long evals = 0;
};

struct AssignedLine {
  double exp_hz = 0.0;
  double sim_hz = 0.0;
  int from_idx = 0;
  int to_idx = 0;
};

struct FitResult {
  Eigen::VectorXd x_star;
  HamiltonianParams fitted_params;
  double residual_unweighted = 0.0;           // f(x*), Hz^2
  double rms_per_line_hz = 0.0;
  std::vector<double> per_target_rss;
  std::vector<std::vector<AssignedLine>> assignment;  // per target, exp order
  int loops_used = 0;
  std::uint64_t seed = 0;
  bool converged = false;
  bool wall_time_exceeded = false;
  std::vector<RestartOutcome> restart_table;
};

// The perturbation loop: an unweighted solve, then up to M rounds of
// {draw 0/1 weights; solve f_w; re-solve f}, converged once the per-line RMS
// is below tol_hz and K fresh random-weight objectives at x* all stay below
// n * tol_hz^2. Restart 0 starts at x0 (clamped); further restarts start
// uniformly inside the bounds. Best unweighted residual wins, ties to the
// earlier restart.
FitResult nafons_fit(const FitProblem& prob, const NafonsCfg& cfg,
                     const Eigen::VectorXd* x0 = nullptr);

// Joint transition-selective problem: frees every heteronuclear dipolar
// coupling (bounds +-2500 Hz) plus the prep-species shifts inside
// +-shift_window_hz of their known values (window 0 keeps them fixed).
// Throws if a prep eigenpair produces no observable lines at `known`.
FitProblem build_joint_hetero_problem(const SpinSystem& sys, const HamiltonianParams& known,
                                      const std::vector<std::pair<PrepSpec, PeakList>>& subspectra,
                                      double shift_window_hz = 50.0,
                                      double coupling_bound_hz = 2500.0);

}  // namespace nafons
