#include "nafons/fit.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <thread>

#include <Eigen/Cholesky>

namespace nafons {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::string species_key(const std::set<std::string>& keep) {
  std::string k;
  for (const std::string& s : keep) k += s + ",";
  return k;
}

}  // namespace

std::size_t FitProblem::total_lines() const {
  std::size_t n = 0;
  for (const SpectrumTarget& t : targets) n += t.line_count();
  return n;
}

void FitProblem::validate() const {
  fixed.validate(sys.size());
  if (free_params.empty()) throw std::invalid_argument("no free parameters");
  if (bounds.size() != free_params.size())
    throw std::invalid_argument("bounds count does not match free parameter count");
  for (std::size_t i = 0; i < free_params.size(); ++i) {
    const ParamId& id = free_params[i];
    if (id.j < 0 || id.j >= sys.size() ||
        (id.kind != ParamKind::Shift && (id.k <= id.j || id.k >= sys.size())))
      throw std::invalid_argument("free parameter addresses an invalid spin index");
    for (std::size_t l = i + 1; l < free_params.size(); ++l)
      if (free_params[l] == id) throw std::invalid_argument("duplicate free parameter");
    if (!(bounds[i].lo < bounds[i].hi))
      throw std::invalid_argument("parameter bounds must satisfy lo < hi");
  }
  if (targets.empty()) throw std::invalid_argument("no spectrum targets");
  for (const SpectrumTarget& t : targets) {
    t.exp_peaks.validate();
    if (t.exp_peaks.size() == 0) throw std::invalid_argument("target has no experimental peaks");
    if (t.n != 0 && t.n != t.exp_peaks.size())
      throw std::invalid_argument("target selection count differs from its peak count");
    if (!sys.has_species(t.observe))
      throw std::invalid_argument("target observes species '" + t.observe + "' not in system");
    if (t.prep && t.decouple)
      throw std::invalid_argument("prepared targets must use the coupled system");
  }
}

HamiltonianParams FitProblem::assemble(const Eigen::VectorXd& x) const {
  if (x.size() != static_cast<Eigen::Index>(free_params.size()))
    throw std::invalid_argument("parameter vector length mismatch");
  HamiltonianParams p = fixed;
  for (std::size_t i = 0; i < free_params.size(); ++i)
    set_param(p, free_params[i], x[static_cast<Eigen::Index>(i)]);
  return p;
}

Eigen::VectorXd FitProblem::clamp(const Eigen::VectorXd& x, bool* clamped) const {
  Eigen::VectorXd out = x;
  bool any = false;
  for (std::size_t i = 0; i < bounds.size(); ++i) {
    const Eigen::Index e = static_cast<Eigen::Index>(i);
    if (out[e] < bounds[i].lo) {
      out[e] = bounds[i].lo;
      any = true;
    } else if (out[e] > bounds[i].hi) {
      out[e] = bounds[i].hi;
      any = true;
    }
  }
  if (clamped) *clamped = any;
  return out;
}

WeightVector sample_weights(std::size_t n, double p_zero, Rng& rng) {
  if (n < 1) throw std::invalid_argument("weight vector needs at least one entry");
  if (p_zero < 0.0 || p_zero >= 1.0) throw std::invalid_argument("p_zero must lie in [0, 1)");
  WeightVector wv;
  wv.w.resize(static_cast<Eigen::Index>(n));
  // All-zero masks are rejected and redrawn; each rejected draw consumes n
  // Bernoulli deviates from the stream.
  while (true) {
    bool any = false;
    for (Eigen::Index i = 0; i < wv.w.size(); ++i) {
      const bool zero = rng.bernoulli(p_zero);
      wv.w[i] = zero ? 0.0 : 1.0;
      any = any || !zero;
    }
    if (any) return wv;
  }
}

// ---------------------------------------------------------------------------
// Problem evaluator: shares diagonalizations between targets that live on the
// same (restricted or full) system, and provides analytic frequency
// Jacobians via Hellmann-Feynman eigenvalue derivatives.
// ---------------------------------------------------------------------------

namespace {

struct ViewPlan {
  std::set<std::string> keep;  // empty set = full system
  SpinSystem sys;
  std::vector<int> sites;  // view site -> problem site
  std::map<std::string, Eigen::MatrixXcd> detect;
  std::map<std::string, Eigen::VectorXd> z_diag;
  // One derivative operator per free parameter; nullopt when the parameter
  // only touches spins dropped by the restriction (derivative is zero).
  std::vector<std::optional<Eigen::MatrixXcd>> d_ops;
};

struct PrepPlan {
  std::string species;
  SpinSystem sys;
  std::vector<int> sites;
};

struct ViewEval {
  EigenSystem eig;
  std::map<std::string, Eigen::MatrixXcd> d_eig;  // detection in the eigenbasis
  HamiltonianParams params;                       // view-local parameters
};

struct TargetSelection {
  std::vector<Transition> lines;  // the selected top-n, ascending frequency
  bool short_count = false;
  std::size_t deficit = 0;
};

class ProblemEvaluator {
 public:
  explicit ProblemEvaluator(const FitProblem& prob) : prob_(prob) {
    prob.validate();
    for (const SpectrumTarget& t : prob.targets) {
      std::set<std::string> keep;
      if (t.decouple) keep.insert(t.observe);
      target_view_.push_back(ensure_view(keep, t.observe));
      target_prep_.push_back(t.prep ? ensure_prep(t.prep->species) : -1);
    }
  }

  struct Detail {
    ObjectiveEval pub;
    std::vector<TargetSelection> selected;
    std::vector<ViewEval> views;   // indexed like views_
    bool degenerate = false;       // any view flagged near-degenerate
  };

  long evals() const { return evals_; }

  Detail evaluate(const Eigen::VectorXd& x_in, const WeightVector* w) {
    ++evals_;
    Detail d;
    const Eigen::VectorXd x = prob_.clamp(x_in, &d.pub.clamped);
    const HamiltonianParams params = prob_.assemble(x);

    d.views.resize(views_.size());
    std::vector<bool> view_done(views_.size(), false);
    std::vector<EigenSystem> prep_eig(preps_.size());
    std::vector<bool> prep_done(preps_.size(), false);

    const std::size_t n_total = prob_.total_lines();
    d.pub.residuals = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_total));
    d.pub.sim_freqs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_total));

    std::size_t deficit = 0;
    Eigen::Index row = 0;
    for (std::size_t ti = 0; ti < prob_.targets.size(); ++ti) {
      const SpectrumTarget& t = prob_.targets[ti];
      const int vi = target_view_[ti];
      if (!view_done[static_cast<std::size_t>(vi)]) {
        eval_view(vi, params, d.views[static_cast<std::size_t>(vi)]);
        view_done[static_cast<std::size_t>(vi)] = true;
      }
      const ViewEval& ve = d.views[static_cast<std::size_t>(vi)];

      std::vector<Transition> lines;
      if (t.prep) {
        const int pi = target_prep_[ti];
        if (!prep_done[static_cast<std::size_t>(pi)]) {
          prep_eig[static_cast<std::size_t>(pi)] = eval_prep(pi, params);
          prep_done[static_cast<std::size_t>(pi)] = true;
        }
        lines = prepared_lines(ve, prep_eig[static_cast<std::size_t>(pi)],
                               preps_[static_cast<std::size_t>(pi)], *t.prep, t.observe);
      } else {
        lines = thermal_lines(ve, t.observe, vi);
      }

      TargetSelection sel;
      const std::size_t want = t.line_count();
      if (lines.empty()) {
        sel.short_count = true;
        sel.deficit = want;
      } else {
        sel.lines = top_n_transitions(lines, want, &sel.short_count);
        sel.deficit = sel.short_count ? want - sel.lines.size() : 0;
      }
      deficit += sel.deficit;

      for (std::size_t j = 0; j < want; ++j) {
        const double sim = j < sel.lines.size() ? sel.lines[j].freq_hz : 0.0;
        const double r = j < sel.lines.size() ? t.exp_peaks.freqs_hz[j] - sim : 0.0;
        d.pub.sim_freqs[row] = sim;
        d.pub.residuals[row] = r;
        ++row;
      }
      d.selected.push_back(std::move(sel));
    }

    if (deficit > 0) {
      d.pub.short_count = true;
      d.pub.value = kShortCountPenalty + static_cast<double>(deficit * deficit);
    } else {
      double f = 0.0;
      for (Eigen::Index j = 0; j < d.pub.residuals.size(); ++j) {
        const double wj = w ? w->w[j] : 1.0;
        f += wj * d.pub.residuals[j] * d.pub.residuals[j];
      }
      d.pub.value = f;
    }
    for (const ViewEval& ve : d.views) {
      if (ve.eig.dim() == 0) continue;
      const double scale = std::max(ve.eig.energies.cwiseAbs().maxCoeff(), 1.0);
      for (int k = 1; k < ve.eig.dim(); ++k)
        if (ve.eig.energies[k] - ve.eig.energies[k - 1] < 1e-8 * scale) d.degenerate = true;
    }
    return d;
  }

  // d(sim_freq)/d(free param); rows follow the concatenated residual layout
  // of `detail`. Hellmann-Feynman on each view; the caller supplies the
  // evaluation detail produced at the same x.
  Eigen::MatrixXd analytic_jacobian(const Detail& detail) {
    const std::size_t n_par = prob_.free_params.size();
    Eigen::MatrixXd jac =
        Eigen::MatrixXd::Zero(detail.pub.residuals.size(), static_cast<Eigen::Index>(n_par));
    // dE columns per view, computed lazily.
    std::vector<std::optional<Eigen::MatrixXd>> dE(views_.size());
    Eigen::Index row = 0;
    for (std::size_t ti = 0; ti < prob_.targets.size(); ++ti) {
      const int vi = target_view_[ti];
      const std::size_t vs = static_cast<std::size_t>(vi);
      const TargetSelection& sel = detail.selected[ti];
      if (!dE[vs]) {
        const ViewEval& ve = detail.views[vs];
        const ViewPlan& vp = views_[vs];
        Eigen::MatrixXd m(ve.eig.dim(), static_cast<Eigen::Index>(n_par));
        m.setZero();
        for (std::size_t pi = 0; pi < n_par; ++pi) {
          if (!vp.d_ops[pi]) continue;
          const Eigen::MatrixXcd tmp = (*vp.d_ops[pi]) * ve.eig.vectors;
          for (int k = 0; k < ve.eig.dim(); ++k)
            m(k, static_cast<Eigen::Index>(pi)) =
                (ve.eig.vectors.col(k).adjoint() * tmp.col(k))(0).real();
        }
        dE[vs] = std::move(m);
      }
      const Eigen::MatrixXd& de = *dE[vs];
      for (std::size_t j = 0; j < prob_.targets[ti].line_count(); ++j) {
        if (j < sel.lines.size()) {
          const Transition& tr = sel.lines[j];
          for (std::size_t pi = 0; pi < n_par; ++pi)
            jac(row, static_cast<Eigen::Index>(pi)) =
                (de(tr.from_idx, static_cast<Eigen::Index>(pi)) -
                 de(tr.to_idx, static_cast<Eigen::Index>(pi))) /
                kTwoPi;
        }
        ++row;
      }
    }
    return jac;
  }

  // Central finite differences of the selected sorted frequencies; used when
  // a view is near-degenerate and Hellmann-Feynman is unreliable.
  Eigen::MatrixXd fd_jacobian(const Eigen::VectorXd& x, double step_hz) {
    const std::size_t n_par = prob_.free_params.size();
    Eigen::MatrixXd jac(static_cast<Eigen::Index>(prob_.total_lines()),
                        static_cast<Eigen::Index>(n_par));
    jac.setZero();
    for (std::size_t pi = 0; pi < n_par; ++pi) {
      Eigen::VectorXd xp = x, xm = x;
      xp[static_cast<Eigen::Index>(pi)] += step_hz;
      xm[static_cast<Eigen::Index>(pi)] -= step_hz;
      const Detail dp = evaluate(xp, nullptr);
      const Detail dm = evaluate(xm, nullptr);
      if (dp.pub.short_count || dm.pub.short_count) continue;  // leave column zero
      jac.col(static_cast<Eigen::Index>(pi)) =
          (dp.pub.sim_freqs - dm.pub.sim_freqs) / (2.0 * step_hz);
    }
    return jac;
  }

 private:
  int ensure_view(const std::set<std::string>& keep, const std::string& observe) {
    for (std::size_t i = 0; i < views_.size(); ++i) {
      if (species_key(views_[i].keep) == species_key(keep)) {
        ensure_detect(views_[i], observe);
        return static_cast<int>(i);
      }
    }
    ViewPlan vp;
    vp.keep = keep;
    if (keep.empty()) {
      vp.sys = prob_.sys;
      vp.sites.resize(static_cast<std::size_t>(prob_.sys.size()));
      std::iota(vp.sites.begin(), vp.sites.end(), 0);
    } else {
      auto [sub, sub_params] = restrict_to_species(prob_.sys, prob_.fixed, keep);
      vp.sys = std::move(sub);
      vp.sites = restriction_sites(prob_.sys, keep);
    }
    // Free-parameter derivative operators in view coordinates.
    std::map<int, int> to_view;
    for (std::size_t a = 0; a < vp.sites.size(); ++a)
      to_view[vp.sites[a]] = static_cast<int>(a);
    for (const ParamId& id : prob_.free_params) {
      ParamId local = id;
      bool present = to_view.count(id.j) > 0;
      if (present) local.j = to_view[id.j];
      if (id.kind != ParamKind::Shift) {
        present = present && to_view.count(id.k) > 0;
        if (present) local.k = to_view[id.k];
      }
      if (present)
        vp.d_ops.emplace_back(param_derivative_operator(vp.sys, local));
      else
        vp.d_ops.emplace_back(std::nullopt);
    }
    ensure_detect(vp, observe);
    views_.push_back(std::move(vp));
    return static_cast<int>(views_.size()) - 1;
  }

  void ensure_detect(ViewPlan& vp, const std::string& observe) {
    if (vp.detect.count(observe)) return;
    vp.detect[observe] = detection_operator(vp.sys, observe);
    vp.z_diag[observe] = species_z_diagonal(vp.sys, observe);
  }

  int ensure_prep(const std::string& species) {
    for (std::size_t i = 0; i < preps_.size(); ++i)
      if (preps_[i].species == species) return static_cast<int>(i);
    PrepPlan pp;
    pp.species = species;
    auto [sub, sub_params] = restrict_to_species(prob_.sys, prob_.fixed, {species});
    pp.sys = std::move(sub);
    pp.sites = restriction_sites(prob_.sys, {species});
    preps_.push_back(std::move(pp));
    return static_cast<int>(preps_.size()) - 1;
  }

  void eval_view(int vi, const HamiltonianParams& params, ViewEval& out) {
    const ViewPlan& vp = views_[static_cast<std::size_t>(vi)];
    if (vp.keep.empty()) {
      out.params = params;
    } else {
      out.params = restrict_to_species(prob_.sys, params, vp.keep).second;
    }
    out.eig = diagonalize(build_hamiltonian(vp.sys, out.params));
    for (const auto& [observe, detect] : vp.detect)
      out.d_eig[observe] = out.eig.vectors.adjoint() * detect * out.eig.vectors;
  }

  EigenSystem eval_prep(int pi, const HamiltonianParams& params) {
    const PrepPlan& pp = preps_[static_cast<std::size_t>(pi)];
    const HamiltonianParams sub = restrict_to_species(prob_.sys, params, {pp.species}).second;
    return diagonalize(build_hamiltonian(pp.sys, sub));
  }

  std::vector<Transition> thermal_lines(const ViewEval& ve, const std::string& observe, int vi) {
    const ViewPlan& vp = views_[static_cast<std::size_t>(vi)];
    const Eigen::MatrixXcd& d_eig = ve.d_eig.at(observe);
    const Eigen::VectorXd& z = vp.z_diag.at(observe);
    const int dim = ve.eig.dim();
    Eigen::VectorXd m_obs(dim);
    for (int k = 0; k < dim; ++k) {
      double zk = 0.0;
      for (int b = 0; b < dim; ++b) zk += std::norm(ve.eig.vectors(b, k)) * z[b];
      m_obs[k] = zk;
    }
    double max_a = 0.0;
    for (int p = 0; p < dim; ++p)
      for (int q = 0; q < dim; ++q) max_a = std::max(max_a, std::norm(d_eig(p, q)));
    std::vector<Transition> out;
    if (max_a <= 0.0) return out;
    const double cutoff = kDropRelDefault * max_a;
    for (int p = 0; p < dim; ++p)
      for (int q = 0; q < dim; ++q) {
        const double a = std::norm(d_eig(p, q));
        if (a < cutoff || a == 0.0) continue;
        Transition t;
        t.freq_hz = (ve.eig.energies[p] - ve.eig.energies[q]) / kTwoPi;
        t.integral = a;
        t.from_idx = p;
        t.to_idx = q;
        t.coherence_order = static_cast<int>(std::lround((m_obs[p] - m_obs[q]) / 2.0));
        out.push_back(std::move(t));
      }
    return out;
  }

  // Prepared-state lines computed via the rank decomposition of
  // |E_i><E_j| (x) I: cheaper than forming the embedded density matrix.
  std::vector<Transition> prepared_lines(const ViewEval& ve, const EigenSystem& sub_eig,
                                         const PrepPlan& pp, const PrepSpec& prep,
                                         const std::string& observe) {
    if (prep.i < 0 || prep.i >= sub_eig.dim() || prep.j < 0 || prep.j >= sub_eig.dim())
      throw std::invalid_argument("preparation eigenstate index out of range");
    const int n_full = prob_.sys.size();
    const int dim = ve.eig.dim();
    const int n_sub = static_cast<int>(pp.sites.size());
    const int sub_dim = 1 << n_sub;
    const int spec_dim = dim / sub_dim;

    // Spectator sites, ascending.
    std::vector<int> spect_sites;
    for (int s = 0; s < n_full; ++s)
      if (std::find(pp.sites.begin(), pp.sites.end(), s) == pp.sites.end())
        spect_sites.push_back(s);

    auto full_index = [&](int sub_bits, int spect_bits) {
      int b = 0;
      for (int a = 0; a < n_sub; ++a)
        if ((sub_bits >> (n_sub - 1 - a)) & 1) b |= 1 << (n_full - 1 - pp.sites[static_cast<std::size_t>(a)]);
      for (std::size_t a = 0; a < spect_sites.size(); ++a)
        if ((spect_bits >> (static_cast<int>(spect_sites.size()) - 1 - static_cast<int>(a))) & 1)
          b |= 1 << (n_full - 1 - spect_sites[a]);
      return b;
    };

    // rho = sum_f (v_i (x) e_f)(v_j (x) e_f)^dagger; transform each factor.
    Eigen::MatrixXcd u(dim, spec_dim), v(dim, spec_dim);
    u.setZero();
    v.setZero();
    for (int f = 0; f < spec_dim; ++f)
      for (int sb = 0; sb < sub_dim; ++sb) {
        const int b = full_index(sb, f);
        u(b, f) = sub_eig.vectors(sb, prep.i);
        v(b, f) = sub_eig.vectors(sb, prep.j);
      }
    const Eigen::MatrixXcd ut = ve.eig.vectors.adjoint() * u;  // dim x spec_dim
    const Eigen::MatrixXcd vt = ve.eig.vectors.adjoint() * v;
    // rho_eig(q,p) = sum_f ut(q,f) conj(vt(p,f))
    const Eigen::MatrixXcd rho_eig = ut * vt.adjoint();

    const Eigen::MatrixXcd& d_eig = ve.d_eig.at(observe);

    Eigen::MatrixXd amp(dim, dim);
    double max_a = 0.0;
    for (int p = 0; p < dim; ++p)
      for (int q = 0; q < dim; ++q) {
        const double a = std::abs(rho_eig(q, p) * d_eig(p, q));
        amp(p, q) = a;
        max_a = std::max(max_a, a);
      }
    std::vector<Transition> out;
    if (max_a <= 0.0) return out;
    const double cutoff = kDropRelDefault * max_a;
    for (int p = 0; p < dim; ++p)
      for (int q = 0; q < dim; ++q) {
        if (amp(p, q) < cutoff || amp(p, q) == 0.0) continue;
        Transition t;
        t.freq_hz = (ve.eig.energies[p] - ve.eig.energies[q]) / kTwoPi;
        t.integral = amp(p, q);
        t.from_idx = p;
        t.to_idx = q;
        out.push_back(std::move(t));
      }
    return out;
  }

  const FitProblem& prob_;
  std::vector<ViewPlan> views_;
  std::vector<PrepPlan> preps_;
  std::vector<int> target_view_;
  std::vector<int> target_prep_;
  long evals_ = 0;
};

}  // namespace

ObjectiveEval objective(const Eigen::VectorXd& x, const FitProblem& prob, const WeightVector* w) {
  if (w && w->w.size() != static_cast<Eigen::Index>(prob.total_lines()))
    throw std::invalid_argument("weight vector length does not match total line count");
  if (w && (w->w.array() < 0.0).any())
    throw std::invalid_argument("weights must be non-negative");
  if (w && w->w.maxCoeff() <= 0.0) throw std::invalid_argument("weights must not be all zero");
  ProblemEvaluator ev(prob);
  return ev.evaluate(x, w).pub;
}

// ---------------------------------------------------------------------------
// Local solver: damped Gauss-Newton then coordinate pattern search.
// ---------------------------------------------------------------------------

namespace {

struct SolveState {
  ProblemEvaluator* ev;
  const FitProblem* prob;
  const WeightVector* w;
  LocalSolveCfg cfg;
  long eval_budget;
  bool cap_hit = false;

  double value(const Eigen::VectorXd& x) {
    return ev->evaluate(x, w).pub.value;
  }
  bool budget_left() {
    if (ev->evals() >= eval_budget) cap_hit = true;
    return !cap_hit;
  }
};

void lm_stage(SolveState& st, Eigen::VectorXd& x, double& fx) {
  double lambda = st.cfg.lm_lambda0;
  int stall = 0;
  for (int iter = 0; iter < st.cfg.max_lm_iters && st.budget_left(); ++iter) {
    ProblemEvaluator::Detail d = st.ev->evaluate(x, st.w);
    if (d.pub.short_count) return;  // penalty region: leave it to pattern search
    fx = std::min(fx, d.pub.value);

    Eigen::MatrixXd jac = d.degenerate ? st.ev->fd_jacobian(x, st.cfg.fd_step_hz)
                                       : st.ev->analytic_jacobian(d);
    const Eigen::Index n_par = jac.cols();
    Eigen::VectorXd wr = d.pub.residuals;
    Eigen::MatrixXd wj = jac;
    if (st.w)
      for (Eigen::Index r = 0; r < wr.size(); ++r) {
        const double sw = std::sqrt(st.w->w[r]);
        wr[r] *= sw;
        wj.row(r) *= sw;
      }
    const Eigen::MatrixXd a = wj.transpose() * wj;
    const Eigen::VectorXd g = wj.transpose() * wr;
    if (g.cwiseAbs().maxCoeff() < 1e-14) return;

    bool accepted = false;
    for (int tries = 0; tries < 12 && st.budget_left(); ++tries) {
      Eigen::MatrixXd damped = a;
      for (Eigen::Index i = 0; i < n_par; ++i)
        damped(i, i) += lambda * std::max(a(i, i), 1e-12) + 1e-12;
      const Eigen::VectorXd delta = damped.ldlt().solve(g);
      if (!delta.allFinite()) {
        lambda *= 4.0;
        continue;
      }
      const Eigen::VectorXd xt = st.prob->clamp(x + delta);
      const double ft = st.value(xt);
      if (ft < fx) {
        x = xt;
        fx = ft;
        lambda = std::max(lambda / 3.0, 1e-12);
        accepted = true;
        break;
      }
      lambda *= 4.0;
      if (lambda > 1e10) break;
    }
    if (!accepted) {
      if (++stall >= 2) return;
    } else {
      stall = 0;
      if (fx < 1e-24) return;
    }
  }
}

bool pattern_stage(SolveState& st, Eigen::VectorXd& x, double& fx) {
  const Eigen::Index n_par = x.size();
  double step = st.cfg.pattern_step_hz;
  bool moved_any = false;
  while (step >= st.cfg.pattern_tol_hz && st.budget_left()) {
    bool improved = false;
    for (Eigen::Index i = 0; i < n_par && st.budget_left(); ++i) {
      for (const double s : {step, -step}) {
        Eigen::VectorXd xt = x;
        xt[i] = std::clamp(xt[i] + s, st.prob->bounds[static_cast<std::size_t>(i)].lo,
                           st.prob->bounds[static_cast<std::size_t>(i)].hi);
        if (xt[i] == x[i]) continue;
        const double ft = st.value(xt);
        if (ft < fx) {
          x = xt;
          fx = ft;
          improved = true;
          moved_any = true;
          break;  // keep sweeping from the updated point
        }
      }
    }
    if (!improved) step *= 0.5;
  }
  return moved_any;
}

LocalSolveResult local_solve_impl(ProblemEvaluator& ev, const FitProblem& prob,
                                  const Eigen::VectorXd& x0, const WeightVector* w,
                                  const LocalSolveCfg& cfg) {
  SolveState st{&ev, &prob, w, cfg, ev.evals() + cfg.max_evals};
  LocalSolveResult res;
  res.x = prob.clamp(x0);
  res.f = st.value(res.x);
  for (int cycle = 0; cycle < cfg.max_outer_cycles && st.budget_left(); ++cycle) {
    lm_stage(st, res.x, res.f);
    const bool moved = pattern_stage(st, res.x, res.f);
    if (!moved) break;
  }
  res.eval_cap_hit = st.cap_hit;
  return res;
}

}  // namespace

LocalSolveResult local_solve(const FitProblem& prob, const Eigen::VectorXd& x0,
                             const WeightVector* w, const LocalSolveCfg& cfg) {
  ProblemEvaluator ev(prob);
  LocalSolveResult res = local_solve_impl(ev, prob, x0, w, cfg);
  res.evals = ev.evals();
  return res;
}

// ---------------------------------------------------------------------------
// The perturbation loop.
// ---------------------------------------------------------------------------

namespace {

struct RestartResult {
  Eigen::VectorXd x;
  double f = std::numeric_limits<double>::infinity();
  bool converged = false;
  int loops_used = 0;
  long evals = 0;
  double rms = std::numeric_limits<double>::infinity();
};

double rms_per_line(double f, std::size_t n) {
  return std::sqrt(std::max(f, 0.0) / static_cast<double>(std::max<std::size_t>(n, 1)));
}

// Random-weight optimality certificate: K fresh masks, each f_w below
// n * tol^2. Draws stop at the first failure.
bool certificate(ProblemEvaluator& ev, const FitProblem& prob, const Eigen::VectorXd& x,
                 double tol_hz, int k_draws, double p_zero, Rng& rng) {
  const std::size_t n = prob.total_lines();
  const double level = static_cast<double>(n) * tol_hz * tol_hz;
  for (int k = 0; k < k_draws; ++k) {
    const WeightVector w = sample_weights(n, p_zero, rng);
    if (ev.evaluate(x, &w).pub.value >= level) return false;
  }
  return true;
}

using Clock = std::chrono::steady_clock;

// One restart of the loop-mode optimization. Stream draw order per restart:
// start jitter (restarts > 0), then per round one weight mask, then the
// certificate masks whenever the RMS test passes.
RestartResult run_restart_loop(const FitProblem& prob, const NafonsCfg& cfg,
                               const Eigen::VectorXd& x_start, Rng rng,
                               Clock::time_point deadline, bool* timed_out) {
  ProblemEvaluator ev(prob);
  const std::size_t n = prob.total_lines();

  RestartResult rr;
  LocalSolveResult cur = local_solve_impl(ev, prob, x_start, nullptr, cfg.solver);
  rr.x = cur.x;
  rr.f = cur.f;
  rr.rms = rms_per_line(rr.f, n);
  if (rr.rms < cfg.tol_hz &&
      certificate(ev, prob, rr.x, cfg.tol_hz, cfg.certificate_draws, cfg.p_zero, rng))
    rr.converged = true;

  for (int m = 1; m <= cfg.loops && !rr.converged; ++m) {
    if (Clock::now() > deadline) {
      *timed_out = true;
      break;
    }
    const WeightVector w = sample_weights(n, cfg.p_zero, rng);
    const LocalSolveResult perturbed = local_solve_impl(ev, prob, rr.x, &w, cfg.solver);
    const LocalSolveResult plain = local_solve_impl(ev, prob, perturbed.x, nullptr, cfg.solver);
    rr.loops_used = m;
    // Best-so-far checkpoint on the unweighted objective never worsens.
    if (plain.f < rr.f) {
      rr.x = plain.x;
      rr.f = plain.f;
      rr.rms = rms_per_line(rr.f, n);
    }
    if (rr.rms < cfg.tol_hz &&
        certificate(ev, prob, rr.x, cfg.tol_hz, cfg.certificate_draws, cfg.p_zero, rng))
      rr.converged = true;
  }
  rr.evals = ev.evals();
  return rr;
}

// Random-walk variant: single accepted descent moves, alternating between f
// and a freshly drawn f_w.
RestartResult run_restart_walk(const FitProblem& prob, const NafonsCfg& cfg, int restart,
                               const Eigen::VectorXd& x_start, Clock::time_point deadline,
                               bool* timed_out) {
  ProblemEvaluator ev(prob);
  Rng rng = Rng::stream(cfg.seed, static_cast<std::uint64_t>(restart));
  const std::size_t n = prob.total_lines();

  RestartResult rr;
  rr.x = prob.clamp(x_start);
  rr.f = ev.evaluate(rr.x, nullptr).pub.value;
  rr.rms = rms_per_line(rr.f, n);

  LocalSolveCfg step_cfg = cfg.solver;
  step_cfg.max_lm_iters = 1;
  step_cfg.max_outer_cycles = 1;

  double walk_step = cfg.solver.pattern_step_hz;
  auto one_step = [&](const WeightVector* w, Eigen::VectorXd& x) {
    // Try one damped Gauss-Newton move; if it fails, one pattern sweep.
    SolveState st{&ev, &prob, w, step_cfg, ev.evals() + 4000};
    double fx = st.value(x);
    Eigen::VectorXd xt = x;
    lm_stage(st, xt, fx);
    if (xt != x) {
      x = xt;
      return;
    }
    LocalSolveCfg sweep = step_cfg;
    sweep.pattern_step_hz = walk_step;
    sweep.pattern_tol_hz = walk_step;  // exactly one step size per call
    SolveState st2{&ev, &prob, w, sweep, ev.evals() + 4000};
    if (!pattern_stage(st2, x, fx)) walk_step = std::max(0.5 * walk_step, cfg.solver.pattern_tol_hz);
  };

  const int step_rounds = std::max(cfg.loops, 1) * 40;  // single steps, not full solves
  for (int m = 1; m <= step_rounds && !rr.converged; ++m) {
    if (Clock::now() > deadline) {
      *timed_out = true;
      break;
    }
    Eigen::VectorXd x = rr.x;
    one_step(nullptr, x);
    const WeightVector w = sample_weights(n, cfg.p_zero, rng);
    one_step(&w, x);
    const double f = ev.evaluate(x, nullptr).pub.value;
    rr.loops_used = m;
    if (f < rr.f) {
      rr.x = x;
      rr.f = f;
      rr.rms = rms_per_line(rr.f, n);
    }
    if (rr.rms < cfg.tol_hz) {
      // Polish, then certify.
      const LocalSolveResult pol = local_solve_impl(ev, prob, rr.x, nullptr, cfg.solver);
      if (pol.f < rr.f) {
        rr.x = pol.x;
        rr.f = pol.f;
        rr.rms = rms_per_line(rr.f, n);
      }
      if (certificate(ev, prob, rr.x, cfg.tol_hz, cfg.certificate_draws, cfg.p_zero, rng))
        rr.converged = true;
    }
  }
  rr.evals = ev.evals();
  return rr;
}

}  // namespace

FitResult nafons_fit(const FitProblem& prob, const NafonsCfg& cfg, const Eigen::VectorXd* x0) {
  prob.validate();
  if (cfg.loops < 0) throw std::invalid_argument("loop count must be >= 0");
  if (cfg.restarts < 1) throw std::invalid_argument("restart count must be >= 1");
  const std::size_t n_par = prob.free_params.size();
  Eigen::VectorXd base = x0 ? *x0 : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_par));
  if (base.size() != static_cast<Eigen::Index>(n_par))
    throw std::invalid_argument("start vector length mismatch");

  const auto t_start = Clock::now();
  const auto deadline =
      t_start + std::chrono::duration_cast<Clock::duration>(
                    std::chrono::duration<double>(cfg.max_wall_time_s));

  // Start points: restart 0 at the caller's x0, the rest uniform in the box.
  std::vector<Eigen::VectorXd> starts;
  for (int r = 0; r < cfg.restarts; ++r) {
    if (r == 0) {
      starts.push_back(prob.clamp(base));
    } else {
      Rng rng = Rng::stream(cfg.seed, static_cast<std::uint64_t>(r));
      Eigen::VectorXd x(static_cast<Eigen::Index>(n_par));
      for (std::size_t i = 0; i < n_par; ++i)
        x[static_cast<Eigen::Index>(i)] = rng.uniform(prob.bounds[i].lo, prob.bounds[i].hi);
      starts.push_back(std::move(x));
    }
  }
  // Restarts > 0 must re-derive the same stream: run_restart_* recreates
  // Rng::stream(seed, r), so consume the jitter draws there too.

  bool timed_out = false;
  std::vector<RestartResult> results(static_cast<std::size_t>(cfg.restarts));
  std::vector<bool> ran(static_cast<std::size_t>(cfg.restarts), false);

  auto run_one = [&](int r, bool* local_timeout) {
    Rng jitter = Rng::stream(cfg.seed, static_cast<std::uint64_t>(r));
    Eigen::VectorXd start = starts[static_cast<std::size_t>(r)];
    if (r > 0)
      for (std::size_t i = 0; i < n_par; ++i) (void)jitter.uniform01();  // skip jitter draws
    (void)jitter;
    return cfg.mode == FitMode::Loop
               ? run_restart_loop(prob, cfg, r, start, deadline, local_timeout)
               : run_restart_walk(prob, cfg, r, start, deadline, local_timeout);
  };

  if (cfg.threads <= 1) {
    for (int r = 0; r < cfg.restarts; ++r) {
      bool to = false;
      results[static_cast<std::size_t>(r)] = run_one(r, &to);
      ran[static_cast<std::size_t>(r)] = true;
      timed_out = timed_out || to;
      if (results[static_cast<std::size_t>(r)].converged) break;  // certificate reached
      if (Clock::now() > deadline) {
        timed_out = true;
        break;
      }
    }
  } else {
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    std::atomic<bool> any_timeout{false};
    const int workers = std::min(cfg.threads, cfg.restarts);
    for (int t = 0; t < workers; ++t)
      pool.emplace_back([&] {
        while (true) {
          const int r = next.fetch_add(1);
          if (r >= cfg.restarts) return;
          bool to = false;
          results[static_cast<std::size_t>(r)] = run_one(r, &to);
          ran[static_cast<std::size_t>(r)] = true;
          if (to) any_timeout = true;
        }
      });
    for (std::thread& t : pool) t.join();
    timed_out = any_timeout;
  }

  // Best unweighted residual wins; ties to the earlier restart.
  int best = -1;
  for (int r = 0; r < cfg.restarts; ++r) {
    if (!ran[static_cast<std::size_t>(r)]) continue;
    if (best < 0 || results[static_cast<std::size_t>(r)].f < results[static_cast<std::size_t>(best)].f)
      best = r;
  }
  if (best < 0) throw std::runtime_error("no restart executed");

  const RestartResult& win = results[static_cast<std::size_t>(best)];

  FitResult out;
  out.x_star = win.x;
  out.fitted_params = prob.assemble(win.x);
  out.seed = cfg.seed;
  out.loops_used = win.loops_used;
  out.converged = win.converged;
  out.wall_time_exceeded = timed_out && !win.converged;

  // Final bookkeeping pass at x*.
  ProblemEvaluator ev(prob);
  const ProblemEvaluator::Detail detail = ev.evaluate(win.x, nullptr);
  out.residual_unweighted = detail.pub.value;
  out.rms_per_line_hz = rms_per_line(detail.pub.value, prob.total_lines());
  Eigen::Index row = 0;
  for (std::size_t ti = 0; ti < prob.targets.size(); ++ti) {
    const SpectrumTarget& t = prob.targets[ti];
    std::vector<AssignedLine> lines;
    double rss = 0.0;
    for (std::size_t j = 0; j < t.line_count(); ++j, ++row) {
      AssignedLine al;
      al.exp_hz = t.exp_peaks.freqs_hz[j];
      al.sim_hz = detail.pub.sim_freqs[row];
      if (j < detail.selected[ti].lines.size()) {
        al.from_idx = detail.selected[ti].lines[j].from_idx;
        al.to_idx = detail.selected[ti].lines[j].to_idx;
      }
      rss += detail.pub.residuals[row] * detail.pub.residuals[row];
      lines.push_back(al);
    }
    out.per_target_rss.push_back(rss);
    out.assignment.push_back(std::move(lines));
  }

  for (int r = 0; r < cfg.restarts; ++r) {
    if (!ran[static_cast<std::size_t>(r)]) continue;
    const RestartResult& rr = results[static_cast<std::size_t>(r)];
    out.restart_table.push_back(
        {r, rr.converged, rr.loops_used, rr.rms, rr.f, rr.evals});
  }
  return out;
}

FitProblem build_joint_hetero_problem(const SpinSystem& sys, const HamiltonianParams& known,
                                      const std::vector<std::pair<PrepSpec, PeakList>>& subspectra,
                                      double shift_window_hz, double coupling_bound_hz) {
  known.validate(sys.size());
  if (subspectra.empty()) throw std::invalid_argument("no subspectra given");
  if (shift_window_hz < 0.0) throw std::invalid_argument("shift window must be >= 0");

  FitProblem prob;
  prob.sys = sys;
  prob.fixed = known;

  // Every heteronuclear dipolar coupling is free.
  for (int j = 0; j < sys.size(); ++j)
    for (int k = j + 1; k < sys.size(); ++k)
      if (!sys.homonuclear(j, k)) {
        prob.free_params.push_back({ParamKind::Dipolar, j, k});
        prob.bounds.push_back({-coupling_bound_hz, coupling_bound_hz});
      }
  if (prob.free_params.empty())
    throw std::invalid_argument("system has no heteronuclear pairs to fit");

  // Prep-species shifts float inside the window around their known values.
  if (shift_window_hz > 0.0) {
    std::set<std::string> prep_species;
    for (const auto& [prep, peaks] : subspectra) prep_species.insert(prep.species);
    for (const std::string& s : prep_species)
      for (int site : sys.sites_of_species(s)) {
        prob.free_params.push_back({ParamKind::Shift, site, 0});
        prob.bounds.push_back(
            {known.shifts_hz[site] - shift_window_hz, known.shifts_hz[site] + shift_window_hz});
      }
  }

  for (const auto& [prep, peaks] : subspectra) {
    peaks.validate();
    if (peaks.size() == 0) throw std::invalid_argument("subspectrum has no peaks");
    // The prep must produce observable lines at the known parameters.
    SimRequest req;
    req.sys = sys;
    req.params = known;
    req.observe = prep.species;
    req.prep = prep;
    const SimResult sim = simulate_transitions(req);
    if (sim.transitions.empty())
      throw std::invalid_argument("preparation eigenpair (" + std::to_string(prep.i) + "," +
                                  std::to_string(prep.j) + ") produces no observable lines");
    SpectrumTarget t;
    t.exp_peaks = peaks;
    t.observe = prep.species;
    t.decouple = false;
    t.prep = prep;
    t.n = peaks.size();
    prob.targets.push_back(std::move(t));
  }
  prob.validate();
  return prob;
}

}  // namespace nafons
