#include "kqr/solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "kqr/loss.hpp"

namespace kqr {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr long kFittedRefreshEvery = 200;  // incremental fitted values drift otherwise

void validate_config(const SolverConfig& cfg) {
  if (cfg.gamma_init <= 0.0) throw input_error("solver config: gamma_init must be positive");
  if (cfg.gamma_shrink <= 0.0 || cfg.gamma_shrink >= 1.0)
    throw input_error("solver config: gamma_shrink must lie in (0,1)");
  if (cfg.max_outer_gamma_steps < 1) throw input_error("solver config: need at least one smoothing round");
  if (cfg.max_apgd_iters < 1) throw input_error("solver config: need at least one inner iteration");
  if (cfg.apgd_tol <= 0.0 || cfg.kkt_tol <= 0.0 || cfg.singular_band_tol < 0.0)
    throw input_error("solver config: tolerances must be positive");
  if (cfg.certificate_check_every < 0)
    throw input_error("solver config: certificate_check_every must be nonnegative");
}

void validate_problem(const VectorXd& y, const EigenDecomposition& eig, double tau, double lambda) {
  if (y.size() != eig.n()) throw input_error("solve: y and kernel dimensions disagree");
  if (!y.allFinite()) throw input_error("solve: y contains non-finite values");
  if (tau <= 0.0 || tau >= 1.0) throw input_error("solve: tau must lie in (0,1)");
  if (lambda <= 0.0) throw input_error("solve: lambda must be positive");
}

std::vector<int> merge_sets(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> out;
  out.reserve(a.size() + b.size());
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

// Inner iterations keep alpha in the eigenbasis of K: one transform of z in
// and one transform of the fitted increment out per step.
class SpectralEngine {
 public:
  SpectralEngine(const EigenDecomposition& eig, double lambda) : eig_(eig), lambda_(lambda) {}

  void update(double gamma) {
    factors_ = make_spectral_factors(eig_, gamma, lambda_);
    lam_pil_ = eig_.lambda.cwiseProduct(factors_.pil);
  }

  void apply(const VectorXd& z, const VectorXd& a, double& xb, VectorXd& xa, VectorXd& xu) const {
    const double n = static_cast<double>(eig_.n());
    VectorXd t = eig_.U.transpose() * z;
    t.noalias() -= (n * lambda_) * a;
    const double s = z.sum();
    xb = factors_.g * (s - factors_.vl.dot(t));
    xa = factors_.pil.cwiseProduct(t) - xb * factors_.v_eig;
    xu.noalias() = eig_.U * lam_pil_.cwiseProduct(t).eval();
    xu.array() += xb;
    xu.noalias() -= xb * factors_.kv;
  }

  VectorXd fitted_of(double b, const VectorXd& a) const {
    VectorXd u = eig_.U * eig_.lambda.cwiseProduct(a).eval();
    u.array() += b;
    return u;
  }

  VectorXd to_internal(const VectorXd& alpha) const { return eig_.U.transpose() * alpha; }
  VectorXd to_alpha(const VectorXd& a) const { return eig_.U * a; }

  // theta has the interpolation targets already substituted; alpha becomes
  // K^{-1} theta so the new fit equals b + theta elementwise.
  void interpolate(const VectorXd& theta, VectorXd& a) const {
    a = (eig_.U.transpose() * theta).cwiseQuotient(eig_.lambda);
  }

  const EigenDecomposition& eig() const { return eig_; }

 private:
  const EigenDecomposition& eig_;
  double lambda_;
  SpectralFactors factors_;
  VectorXd lam_pil_;
};

// Timing baseline: assembles P afresh and LDLT-factorizes it at every
// smoothing level, then backsolves per iteration. Produces the same iterates
// as the eigenbasis engine.
class DenseEngine {
 public:
  DenseEngine(const EigenDecomposition& eig, const MatrixXd& K, double lambda)
      : eig_(eig), K_(K), lambda_(lambda) {}

  void update(double gamma) {
    MatrixXd P = make_apgd_system_matrix(K_, gamma, lambda_);
    // K^2 leaves the numerically null block of K at rounding scale, where
    // factorization noise would otherwise amplify unboundedly at small
    // gamma * lambda. The shift exceeds that noise yet stays far below every
    // resolved curvature, so it only caps the step in unresolved directions.
    P.diagonal().array() += 1e-13 * P.trace();
    ldlt_.compute(P);
    if (ldlt_.info() != Eigen::Success)
      throw numerical_error("dense refactorization failed");
  }

  void apply(const VectorXd& z, const VectorXd& a, double& xb, VectorXd& xa, VectorXd& xu) const {
    const auto n = K_.rows();
    VectorXd w = z - (static_cast<double>(n) * lambda_) * a;
    VectorXd zeta(n + 1);
    zeta(0) = z.sum();
    zeta.tail(n).noalias() = K_ * w;
    VectorXd x = ldlt_.solve(zeta);
    xb = x(0);
    xa = x.tail(n);
    xu.noalias() = K_ * xa;
    xu.array() += xb;
  }

  VectorXd fitted_of(double b, const VectorXd& a) const {
    VectorXd u = K_ * a;
    u.array() += b;
    return u;
  }

  VectorXd to_internal(const VectorXd& alpha) const { return alpha; }
  VectorXd to_alpha(const VectorXd& a) const { return a; }

  void interpolate(const VectorXd& theta, VectorXd& a) const {
    VectorXd coeffs = (eig_.U.transpose() * theta).cwiseQuotient(eig_.lambda);
    a.noalias() = eig_.U * coeffs;
  }

  const EigenDecomposition& eig() const { return eig_; }

 private:
  const EigenDecomposition& eig_;
  const MatrixXd& K_;
  double lambda_;
  Eigen::LDLT<MatrixXd> ldlt_;
};

struct LoopState {
  double b = 0.0, b_prev = 0.0;
  VectorXd a, a_prev;
  VectorXd u, u_prev;
  double c = 1.0;
};

template <class Engine>
void refresh_fitted(const Engine& eng, LoopState& st) {
  st.u = eng.fitted_of(st.b, st.a);
  st.u_prev = eng.fitted_of(st.b_prev, st.a_prev);
}

void reset_momentum(LoopState& st) {
  st.b_prev = st.b;
  st.a_prev = st.a;
  st.u_prev = st.u;
  st.c = 1.0;
}

// Exact interpolation on the set: residuals there become exactly zero, which
// keeps later set expansions supersets of the current set.
template <class Engine>
void project_state(const Engine& eng, const VectorXd& y, const std::vector<int>& set,
                   LoopState& st) {
  double shift = 0.0;
  for (int i : set) shift += y(i) - st.u(i);
  const double b_new = st.b + shift / (static_cast<double>(set.size()) + 1.0);
  VectorXd theta = st.u.array() - st.b;
  for (int i : set) theta(i) = y(i) - b_new;
  VectorXd a_new;
  eng.interpolate(theta, a_new);
  // Wide-band rounds can sweep in more points than the kernel resolves, and
  // interpolating those would blow the coefficients up by the inverse floor.
  // The projection is a small refinement or nothing.
  if ((a_new - st.a).norm() > 10.0 * (1.0 + st.a.norm())) return;
  st.b = b_new;
  st.a = std::move(a_new);
  st.u = theta.array() + b_new;
  reset_momentum(st);
}

template <class Engine>
double engine_step(const Engine& eng, LoopState& st, const VectorXd& y, double tau,
                   double gamma, VectorXd& z, VectorXd& xa, VectorXd& xu) {
  const auto n = y.size();
  const double c_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * st.c * st.c));
  const double omega = (st.c - 1.0) / c_next;

  const double b_bar = st.b + omega * (st.b - st.b_prev);
  VectorXd a_bar = st.a + omega * (st.a - st.a_prev);
  VectorXd u_bar = st.u + omega * (st.u - st.u_prev);

  z.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) z(i) = smoothed_check_deriv(y(i) - u_bar(i), tau, gamma);

  double xb = 0.0;
  eng.apply(z, a_bar, xb, xa, xu);

  st.b_prev = st.b;
  st.a_prev.swap(st.a);
  st.u_prev.swap(st.u);
  st.b = b_bar + 2.0 * gamma * xb;
  st.a = a_bar + 2.0 * gamma * xa;
  st.u = u_bar + 2.0 * gamma * xu;
  st.c = c_next;

  const double change = (st.u - st.u_prev).lpNorm<Eigen::Infinity>();
  if (!std::isfinite(change)) throw numerical_error("accelerated iteration diverged");
  return change;
}

// Scores one iterate the way the returned solution is scored: floored-basis
// energy is dropped, residuals on the singular set are zeroed exactly, and
// the certificate's minimizing dual supplies a second representative that is
// adopted when it also certifies and lowers the objective. Returns the
// certificate residual of the representative left in alpha.
double certify_representative(const VectorXd& y, const MatrixXd& K_true,
                              const EigenDecomposition& eig, double tau, double lambda,
                              const SolverConfig& cfg, const std::vector<int>& shat, double b,
                              VectorXd& alpha) {
  detail::drop_floored_components(eig, alpha);
  detail::correct_singular_residuals(K_true, y, b, alpha, shat);
  VectorXd s_dual;
  double kkt = kkt_residual(y, K_true, b, alpha, tau, lambda, cfg.singular_band_tol, &s_dual);
  // At a stationary point the weights equal the dual values over n lambda up
  // to a kernel null-space shift, so the certified dual yields a second
  // representative that carries no amplified small-eigendirection energy.
  VectorXd alpha_dual = s_dual / (static_cast<double>(y.size()) * lambda);
  detail::correct_singular_residuals(K_true, y, b, alpha_dual, shat);
  const double kkt_dual =
      kkt_residual(y, K_true, b, alpha_dual, tau, lambda, cfg.singular_band_tol);
  const bool cert_cur = kkt <= cfg.kkt_tol;
  if (kkt_dual <= cfg.kkt_tol &&
      (!cert_cur || kqr_objective(b, alpha_dual, y, K_true, lambda, tau) <
                        kqr_objective(b, alpha, y, K_true, lambda, tau))) {
    alpha = std::move(alpha_dual);
    kkt = kkt_dual;
  }
  return kkt;
}

template <class Engine, class Probe>
ApgdResult engine_run(const Engine& eng, LoopState& st, const VectorXd& y, double tau,
                      double gamma, const SolverConfig& cfg, const std::vector<int>& set,
                      double tol, Probe&& probe) {
  ApgdResult res;
  VectorXd z, xa, xu;
  for (long it = 1; it <= cfg.max_apgd_iters; ++it) {
    const double change = engine_step(eng, st, y, tau, gamma, z, xa, xu);
    res.iterations = it;
    res.last_change = change;
    if (cfg.project_every_iter && !set.empty()) project_state(eng, y, set, st);
    if (change <= tol) {
      res.converged = true;
      return res;
    }
    if (cfg.certificate_check_every > 0 && it % cfg.certificate_check_every == 0 && probe()) {
      res.converged = true;
      return res;
    }
    if (it % kFittedRefreshEvery == 0) refresh_fitted(eng, st);
  }
  return res;
}

template <class Engine>
KqrSolution engine_solve(Engine& eng, const VectorXd& y, const MatrixXd& K_true, double tau,
                         double lambda, const SolverConfig& cfg, double b0,
                         const VectorXd& alpha0) {
  const auto n = y.size();
  LoopState st;
  st.b = b0;
  st.a = eng.to_internal(alpha0);
  st.u = eng.fitted_of(st.b, st.a);
  reset_momentum(st);

  KqrSolution sol;
  double gamma = cfg.gamma_init;
  for (int round = 0; round < cfg.max_outer_gamma_steps; ++round) {
    eng.update(gamma);
    reset_momentum(st);
    const double round_tol = cfg.apgd_tol;
    std::vector<int> shat;
    std::vector<int> pending;
    bool early = false;
    bool saturated = false;
    double last_probe_kkt = std::numeric_limits<double>::infinity();
    // The sweep only has to resolve residuals far enough to read off the
    // singular band and hand the projection a certifiable point, so the probe
    // samples both between iterations: a set that grew interrupts the sweep
    // for the usual project-and-restart, and a stable set is scored by the
    // certificate on a projected scratch copy. A certificate that stalls above
    // tolerance is pinned by the smoothing width itself, and the round yields
    // to the next width instead of polishing the surrogate further.
    auto probe = [&]() {
      refresh_fitted(eng, st);
      std::vector<int> grown = merge_sets(shat, expand_singular_set(y - st.u, gamma));
      if (grown != shat) {
        pending = std::move(grown);
        last_probe_kkt = std::numeric_limits<double>::infinity();
        return true;
      }
      LoopState trial = st;
      project_state(eng, y, shat, trial);
      VectorXd alpha = eng.to_alpha(trial.a);
      const double kkt =
          certify_representative(y, K_true, eng.eig(), tau, lambda, cfg, shat, trial.b, alpha);
      if (kkt <= cfg.kkt_tol) {
        sol.b = trial.b;
        sol.alpha = std::move(alpha);
        sol.kkt_residual = kkt;
        early = true;
        return true;
      }
      if (std::abs(kkt - last_probe_kkt) <= 0.01 * kkt) {
        saturated = true;
        return true;
      }
      last_probe_kkt = kkt;
      return false;
    };
    for (Eigen::Index pass = 0; pass <= n; ++pass) {
      ApgdResult run = engine_run(eng, st, y, tau, gamma, cfg, shat, round_tol, probe);
      sol.apgd_iterations += run.iterations;
      if (early || saturated) break;
      if (!pending.empty()) {
        shat = std::move(pending);
        pending.clear();
        if (cfg.set_observer) cfg.set_observer(round, shat);
        project_state(eng, y, shat, st);
        reset_momentum(st);
        continue;
      }
      refresh_fitted(eng, st);
      project_state(eng, y, shat, st);
      std::vector<int> grown = merge_sets(shat, expand_singular_set(y - st.u, gamma));
      if (cfg.set_observer) cfg.set_observer(round, grown);
      if (grown == shat) break;
      shat = std::move(grown);
      reset_momentum(st);
    }
    sol.singular_set = shat;
    sol.gamma_final = gamma;
    sol.gamma_rounds = round + 1;
    if (!early) {
      sol.b = st.b;
      sol.alpha = eng.to_alpha(st.a);
      sol.kkt_residual =
          certify_representative(y, K_true, eng.eig(), tau, lambda, cfg, shat, sol.b, sol.alpha);
    }
    if (sol.kkt_residual <= cfg.kkt_tol) {
      sol.certified = true;
      break;
    }
    gamma *= cfg.gamma_shrink;
  }
  sol.objective = kqr_objective(sol.b, sol.alpha, y, K_true, lambda, tau);
  return sol;
}

}  // namespace

SpectralFactors make_spectral_factors(const EigenDecomposition& eig, double gamma, double lambda) {
  if (gamma <= 0.0) throw input_error("spectral factors: gamma must be positive");
  if (lambda <= 0.0) throw input_error("spectral factors: lambda must be positive");
  const auto n = eig.n();
  if (n == 0) throw input_error("spectral factors: empty decomposition");
  SpectralFactors f;
  f.eig = &eig;
  f.gamma = gamma;
  f.lambda = lambda;
  const double shift = 2.0 * static_cast<double>(n) * gamma * lambda;
  f.pil = (eig.lambda.array() + shift).inverse();
  f.ut1 = eig.U.transpose() * VectorXd::Ones(n);
  f.v_eig = f.pil.cwiseProduct(f.ut1);
  f.vl = eig.lambda.cwiseProduct(f.v_eig);
  f.kv = eig.U * f.vl;
  const double denom = static_cast<double>(n) - f.vl.dot(f.ut1);
  if (denom <= 1e-12 * static_cast<double>(n))
    throw numerical_error("spectral factors: intercept pivot lost positivity");
  f.g = 1.0 / denom;
  return f;
}

InverseApplyResult spectral_apply_inverse(const SpectralFactors& f, const VectorXd& z,
                                          const VectorXd& alpha) {
  if (f.eig == nullptr) throw input_error("spectral apply: factors not initialized");
  const auto n = f.eig->n();
  if (z.size() != n || alpha.size() != n) throw input_error("spectral apply: size mismatch");
  const double nl = static_cast<double>(n) * f.lambda;
  VectorXd w = z - nl * alpha;
  VectorXd t = f.eig->U.transpose() * w;
  InverseApplyResult out;
  out.b = f.g * (z.sum() - f.vl.dot(t));
  VectorXd coef = f.pil.cwiseProduct(t) - out.b * f.v_eig;
  MatrixXd both(n, 2);
  both.col(0) = coef;
  both.col(1) = f.eig->lambda.cwiseProduct(coef);
  MatrixXd mapped = f.eig->U * both;
  out.alpha = mapped.col(0);
  out.fitted = mapped.col(1).array() + out.b;
  return out;
}

MatrixXd make_apgd_system_matrix(const MatrixXd& K, double gamma, double lambda) {
  const auto n = K.rows();
  if (K.cols() != n) throw input_error("system matrix: K must be square");
  MatrixXd P(n + 1, n + 1);
  VectorXd k1 = K.rowwise().sum();
  P(0, 0) = static_cast<double>(n);
  P.row(0).tail(n) = k1.transpose();
  P.col(0).tail(n) = k1;
  P.block(1, 1, n, n).noalias() = K * K;
  P.block(1, 1, n, n) += (2.0 * static_cast<double>(n) * gamma * lambda) * K;
  return P;
}

VectorXd make_apgd_system_rhs(const MatrixXd& K, const VectorXd& z, const VectorXd& alpha,
                              double lambda) {
  const auto n = K.rows();
  if (z.size() != n || alpha.size() != n) throw input_error("system rhs: size mismatch");
  VectorXd zeta(n + 1);
  zeta(0) = z.sum();
  zeta.tail(n).noalias() = K * (z - static_cast<double>(n) * lambda * alpha);
  return zeta;
}

ApgdState make_apgd_state(const EigenDecomposition& eig, double b, const VectorXd& alpha) {
  if (alpha.size() != eig.n()) throw input_error("apgd state: alpha size mismatch");
  ApgdState st;
  st.b = st.b_prev = b;
  st.alpha = st.alpha_prev = alpha;
  VectorXd u = eig.U * eig.lambda.cwiseProduct(eig.U.transpose() * alpha).eval();
  u.array() += b;
  st.fitted = st.fitted_prev = u;
  return st;
}

double apgd_step(ApgdState& st, const SpectralFactors& f, const VectorXd& y, double tau) {
  if (f.eig == nullptr) throw input_error("apgd step: factors not initialized");
  const auto n = y.size();
  if (st.alpha.size() != n) throw input_error("apgd step: size mismatch");
  const double c_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * st.momentum_c * st.momentum_c));
  const double omega = (st.momentum_c - 1.0) / c_next;
  const double b_bar = st.b + omega * (st.b - st.b_prev);
  VectorXd a_bar = st.alpha + omega * (st.alpha - st.alpha_prev);
  VectorXd u_bar = st.fitted + omega * (st.fitted - st.fitted_prev);
  VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i)
    z(i) = smoothed_check_deriv(y(i) - u_bar(i), tau, f.gamma);
  InverseApplyResult inc = spectral_apply_inverse(f, z, a_bar);
  st.b_prev = st.b;
  st.alpha_prev.swap(st.alpha);
  st.fitted_prev.swap(st.fitted);
  st.b = b_bar + 2.0 * f.gamma * inc.b;
  st.alpha = a_bar + 2.0 * f.gamma * inc.alpha;
  st.fitted = u_bar + 2.0 * f.gamma * inc.fitted;
  st.momentum_c = c_next;
  st.iter += 1;
  const double change = (st.fitted - st.fitted_prev).lpNorm<Eigen::Infinity>();
  if (!std::isfinite(change)) throw numerical_error("accelerated iteration diverged");
  return change;
}

ApgdResult apgd_run(ApgdState& st, const SpectralFactors& f, const VectorXd& y, double tau,
                    const SolverConfig& cfg) {
  validate_config(cfg);
  ApgdResult res;
  for (long it = 1; it <= cfg.max_apgd_iters; ++it) {
    res.last_change = apgd_step(st, f, y, tau);
    res.iterations = it;
    if (res.last_change <= cfg.apgd_tol) {
      res.converged = true;
      return res;
    }
    if (it % kFittedRefreshEvery == 0) {
      const auto& eig = *f.eig;
      st.fitted = eig.U * eig.lambda.cwiseProduct(eig.U.transpose() * st.alpha).eval();
      st.fitted.array() += st.b;
      st.fitted_prev = eig.U * eig.lambda.cwiseProduct(eig.U.transpose() * st.alpha_prev).eval();
      st.fitted_prev.array() += st.b_prev;
    }
  }
  return res;
}

ProjectionResult project_onto_constraints(const VectorXd& y, const EigenDecomposition& eig,
                                          double b, const VectorXd& alpha,
                                          const std::vector<int>& set) {
  const auto n = eig.n();
  if (y.size() != n || alpha.size() != n)
    throw input_error("projection: size mismatch");
  for (int i : set)
    if (i < 0 || i >= n) throw input_error("projection: set index out of range");
  VectorXd u = eig.U * eig.lambda.cwiseProduct(eig.U.transpose() * alpha).eval();
  u.array() += b;
  double shift = 0.0;
  for (int i : set) shift += y(i) - u(i);
  ProjectionResult out;
  out.b = b + shift / (static_cast<double>(set.size()) + 1.0);
  VectorXd theta = u.array() - b;
  for (int i : set) theta(i) = y(i) - out.b;
  out.alpha = eig.U * (eig.U.transpose() * theta).cwiseQuotient(eig.lambda).eval();
  return out;
}

std::vector<int> expand_singular_set(const VectorXd& residuals, double gamma) {
  if (gamma < 0.0) throw input_error("set expansion: gamma must be nonnegative");
  std::vector<int> out;
  for (Eigen::Index i = 0; i < residuals.size(); ++i)
    if (std::abs(residuals(i)) <= gamma) out.push_back(static_cast<int>(i));
  return out;
}

double dual_stationarity_gap(const MatrixXd& K, const VectorXd& r, double tau,
                             const VectorXd& alpha_target, double b_target, double band_tol,
                             VectorXd* dual_out) {
  const auto n = r.size();
  if (K.rows() != n || K.cols() != n || alpha_target.size() != n)
    throw input_error("stationarity gap: size mismatch");
  if (tau <= 0.0 || tau >= 1.0) throw input_error("stationarity gap: tau must lie in (0,1)");

  const double lo = tau - 1.0, hi = tau;
  VectorXd s(n);
  std::vector<int> active;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::abs(r(i)) <= band_tol) {
      active.push_back(static_cast<int>(i));
      s(i) = tau - 0.5;
    } else {
      s(i) = (r(i) < 0.0) ? lo : hi;
    }
  }

  const double nd = static_cast<double>(n);
  const int m = static_cast<int>(active.size());
  if (m > 0) {
    // Bounded least squares over the banded coordinates: minimize
    // |K s - n alpha_target|^2 + (sum s - n b_target)^2 with off-band entries
    // pinned at their one-sided subgradients. An active-set method terminates
    // finitely and is exact for interior minimizers, where coordinate descent
    // stalls on near-collinear kernel columns. The final point is feasible,
    // so the returned gap is always a valid upper bound.
    MatrixXd KA(n, m);
    for (int j = 0; j < m; ++j) KA.col(j) = K.col(active[j]);
    VectorXd s_fixed = s;
    for (int j = 0; j < m; ++j) s_fixed(active[j]) = 0.0;
    const VectorXd c = K * s_fixed - nd * alpha_target;
    const double d = s_fixed.sum() - nd * b_target;
    MatrixXd H = KA.transpose() * KA;
    H.array() += 1.0;
    H.diagonal().array() += 1e-14 * H.trace();
    VectorXd g0 = KA.transpose() * c;
    g0.array() += d;
    const double release_tol = 1e-12 * (1.0 + g0.lpNorm<Eigen::Infinity>());

    VectorXd x = VectorXd::Constant(m, tau - 0.5);
    std::vector<int> state(m, 0);  // 0 free, -1 at lower bound, +1 at upper
    const int max_rounds = 20 * m + 50;
    for (int round = 0; round < max_rounds; ++round) {
      std::vector<int> free_idx;
      for (int j = 0; j < m; ++j)
        if (state[j] == 0) free_idx.push_back(j);
      if (!free_idx.empty()) {
        const int mf = static_cast<int>(free_idx.size());
        MatrixXd Hff(mf, mf);
        VectorXd rhs(mf);
        for (int a = 0; a < mf; ++a) {
          for (int bj = 0; bj < mf; ++bj) Hff(a, bj) = H(free_idx[a], free_idx[bj]);
          double acc = g0(free_idx[a]);
          for (int j = 0; j < m; ++j)
            if (state[j] != 0) acc += H(free_idx[a], j) * x(j);
          rhs(a) = -acc;
        }
        const VectorXd xf = Eigen::LDLT<MatrixXd>(Hff).solve(rhs);
        // Move from the current feasible point toward the subspace minimizer,
        // stopping at the first bound crossing and clamping that coordinate.
        double t = 1.0;
        int blocker = -1, blocker_side = 0;
        for (int a = 0; a < mf; ++a) {
          const double cur = x(free_idx[a]), tgt = xf(a);
          if (tgt < lo && tgt < cur) {
            const double tt = (lo - cur) / (tgt - cur);
            if (tt < t) t = tt, blocker = a, blocker_side = -1;
          } else if (tgt > hi && tgt > cur) {
            const double tt = (hi - cur) / (tgt - cur);
            if (tt < t) t = tt, blocker = a, blocker_side = 1;
          }
        }
        for (int a = 0; a < mf; ++a) {
          const int j = free_idx[a];
          x(j) = std::min(hi, std::max(lo, x(j) + t * (xf(a) - x(j))));
        }
        if (blocker >= 0) {
          const int j = free_idx[blocker];
          state[j] = blocker_side;
          x(j) = blocker_side < 0 ? lo : hi;
          continue;
        }
      }
      // Free coordinates sit at their subspace minimizer; release the worst
      // clamped coordinate whose bound multiplier has the wrong sign.
      const VectorXd w = H * x + g0;
      int worst = -1;
      double worst_v = release_tol;
      for (int j = 0; j < m; ++j) {
        const double v = (state[j] == -1) ? -w(j) : (state[j] == 1 ? w(j) : 0.0);
        if (v > worst_v) worst_v = v, worst = j;
      }
      if (worst < 0) break;
      state[worst] = 0;
    }
    for (int j = 0; j < m; ++j) s(active[j]) = std::min(hi, std::max(lo, x(j)));
  }

  const VectorXd E = K * s - nd * alpha_target;
  const double F = s.sum() - nd * b_target;
  if (dual_out) *dual_out = s;
  return std::max(E.lpNorm<Eigen::Infinity>(), std::abs(F)) / nd;
}

double kkt_residual(const VectorXd& y, const MatrixXd& K, double b, const VectorXd& alpha,
                    double tau, double lambda, double band_tol, VectorXd* dual_out) {
  const auto n = y.size();
  if (K.rows() != n || K.cols() != n || alpha.size() != n)
    throw input_error("kkt residual: size mismatch");
  VectorXd Ka = K * alpha;
  VectorXd r = y - Ka;
  r.array() -= b;
  return dual_stationarity_gap(K, r, tau, lambda * Ka, 0.0, band_tol, dual_out);
}

namespace detail {

void drop_floored_components(const EigenDecomposition& eig, VectorXd& alpha) {
  // lambda is sorted nonincreasing, so lambda(0) is the largest eigenvalue and
  // the floor entries sit at exactly kEigFloorRel times it.
  const double cut = kEigFloorRel * eig.lambda(0) * (1.0 + 1e-12);
  VectorXd c = eig.U.transpose() * alpha;
  bool any = false;
  for (Eigen::Index j = 0; j < c.size(); ++j) {
    if (eig.lambda(j) <= cut && c(j) != 0.0) {
      c(j) = 0.0;
      any = true;
    }
  }
  if (any) alpha.noalias() = eig.U * c;
}

void correct_singular_residuals(const MatrixXd& K, const VectorXd& y, double b, VectorXd& alpha,
                                const std::vector<int>& set) {
  const int m = static_cast<int>(set.size());
  if (m == 0) return;
  MatrixXd Kss(m, m);
  for (int a = 0; a < m; ++a)
    for (int c = 0; c < m; ++c) Kss(a, c) = K(set[a], set[c]);
  Eigen::LDLT<MatrixXd> ldlt(Kss);
  if (ldlt.info() != Eigen::Success) return;
  // One refinement pass tightens the correction when Kss is ill-conditioned.
  for (int pass = 0; pass < 2; ++pass) {
    VectorXd Ka = K * alpha;
    VectorXd r(m);
    for (int j = 0; j < m; ++j) r(j) = y(set[j]) - b - Ka(set[j]);
    VectorXd delta = ldlt.solve(r);
    if (!delta.allFinite()) return;
    if (delta.lpNorm<Eigen::Infinity>() > 1e3 * (1.0 + alpha.lpNorm<Eigen::Infinity>())) return;
    for (int j = 0; j < m; ++j) alpha(set[j]) += delta(j);
  }
}

}  // namespace detail

KqrSolution solve_kqr(const VectorXd& y, const MatrixXd& K, const EigenDecomposition& eig,
                      double tau, double lambda, const SolverConfig& cfg) {
  validate_config(cfg);
  validate_problem(y, eig, tau, lambda);
  if (K.rows() != eig.n() || K.cols() != eig.n())
    throw input_error("solve: K and decomposition dimensions disagree");
  SpectralEngine eng(eig, lambda);
  return engine_solve(eng, y, K, tau, lambda, cfg, empirical_quantile(y, tau),
                      VectorXd::Zero(y.size()));
}

PathResult solve_kqr_path(const VectorXd& y, const MatrixXd& K, const EigenDecomposition& eig,
                          double tau, const VectorXd& lambdas, const SolverConfig& cfg,
                          PathStrategy strategy) {
  validate_config(cfg);
  if (lambdas.size() == 0) throw input_error("path: empty lambda grid");
  for (Eigen::Index i = 0; i < lambdas.size(); ++i)
    if (lambdas(i) <= 0.0) throw input_error("path: lambdas must be positive");
  validate_problem(y, eig, tau, lambdas(0));
  if (K.rows() != eig.n() || K.cols() != eig.n())
    throw input_error("path: K and decomposition dimensions disagree");

  PathResult out;
  out.lambdas = lambdas;
  out.solutions.reserve(static_cast<std::size_t>(lambdas.size()));

  // The baseline operates on the same floored kernel the eigenbasis path
  // sees, so the two strategies solve identical systems.
  MatrixXd K_floored;
  if (strategy == PathStrategy::dense_refactor)
    K_floored = eig.U * eig.lambda.asDiagonal() * eig.U.transpose();

  double b0 = empirical_quantile(y, tau);
  VectorXd alpha0 = VectorXd::Zero(y.size());
  double gamma_resume = 0.0;
  for (Eigen::Index i = 0; i < lambdas.size(); ++i) {
    const double lambda = lambdas(i);
    auto run = [&](const SolverConfig& c) {
      if (strategy == PathStrategy::spectral) {
        SpectralEngine eng(eig, lambda);
        return engine_solve(eng, y, K, tau, lambda, c, b0, alpha0);
      }
      DenseEngine eng(eig, K_floored, lambda);
      return engine_solve(eng, y, K, tau, lambda, c, b0, alpha0);
    };
    KqrSolution sol;
    // A certified neighbor pins down the smoothing level that exposes the
    // active structure, so the next solve rejoins the schedule one step above
    // it instead of replaying the wide levels. Certification still gates every
    // entry; a miss replays the full schedule before the entry is flagged.
    if (gamma_resume > 0.0 && gamma_resume < cfg.gamma_init) {
      SolverConfig resumed = cfg;
      resumed.gamma_init = std::min(gamma_resume / cfg.gamma_shrink, cfg.gamma_init);
      sol = run(resumed);
      if (!sol.certified) sol = run(cfg);
    } else {
      sol = run(cfg);
    }
    gamma_resume = sol.certified ? sol.gamma_final : 0.0;
    b0 = sol.b;
    alpha0 = sol.alpha;
    out.solutions.push_back(std::move(sol));
  }
  return out;
}

VectorXd make_default_lambda_grid() {
  const int count = 50;
  VectorXd grid(count);
  const double hi = 0.0, lo = -4.0;  // log10 endpoints
  for (int i = 0; i < count; ++i)
    grid(i) = std::pow(10.0, hi + (lo - hi) * static_cast<double>(i) / (count - 1));
  return grid;
}

}  // namespace kqr
