#include "kqr/noncross.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "kqr/loss.hpp"

namespace kqr {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr long kFittedRefreshEvery = 200;

void validate_nckqr_problem(const NckqrProblem& prob) {
  validate_taus(prob.taus);
  if (prob.lambda1 < 0.0) throw input_error("non-crossing: lambda1 must be nonnegative");
  if (prob.lambda2 <= 0.0) throw input_error("non-crossing: lambda2 must be positive");
  if (prob.eta <= 0.0) throw input_error("non-crossing: eta must be positive");
}

struct MultiState {
  VectorXd bs;  // T
  MatrixXd a;   // n x T, alpha columns in the eigenbasis
  MatrixXd u;   // n x T fitted values
};

double q_objective(const MultiState& st, const EigenDecomposition& eig, const VectorXd& y,
                   const NckqrProblem& prob, double gamma, double eta) {
  const auto T = st.bs.size();
  VectorXd ridges(T);
  for (Eigen::Index t = 0; t < T; ++t)
    ridges(t) =
        0.5 * prob.lambda2 * (eig.lambda.array() * st.a.col(t).array().square()).sum();
  return smoothed_nckqr_objective_from_fitted(st.u, y, prob.taus, ridges, prob.lambda1, eta,
                                              gamma);
}

void refresh_fitted(const EigenDecomposition& eig, MultiState& st) {
  for (Eigen::Index t = 0; t < st.bs.size(); ++t) {
    st.u.col(t) = eig.U * eig.lambda.cwiseProduct(st.a.col(t)).eval();
    st.u.col(t).array() += st.bs(t);
  }
}

// One simultaneous majorize-minimize sweep from a frozen derivative snapshot.
// Descent is guaranteed by the majorizer; an increase beyond rounding noise
// indicates a broken precondition and throws.
double mm_sweep(const SigmaFactors& f, const EigenDecomposition& eig, const VectorXd& y,
                const NckqrProblem& prob, double eta, MultiState& st, double& max_increase,
                double* obj_out = nullptr) {
  const auto n = y.size();
  const auto T = prob.taus.size();
  const double gamma = f.gamma;
  const double nd = static_cast<double>(n);
  const double obj_before = q_objective(st, eig, y, prob, gamma, eta);
  MmVectors mv = compute_mm_vectors(st.u, y, prob.taus, gamma, eta);

  MatrixXd m(n, T);
  for (Eigen::Index t = 0; t < T; ++t) {
    m.col(t) = mv.z.col(t);
    if (prob.lambda1 > 0.0) {
      if (t + 1 < T) m.col(t) -= (nd * prob.lambda1) * mv.q.col(t);
      if (t > 0) m.col(t) += (nd * prob.lambda1) * mv.q.col(t - 1);
    }
  }

  double change = 0.0;
  for (Eigen::Index t = 0; t < T; ++t) {
    const double rho_b = m.col(t).sum();
    VectorXd t2 = eig.U.transpose() * m.col(t);
    t2.noalias() -= (nd * prob.lambda2) * st.a.col(t);
    VectorXd rho_eig = eig.lambda.cwiseProduct(t2);
    const double xb = f.g * (rho_b - f.c_eig.cwiseProduct(f.pi_inv).dot(rho_eig));
    VectorXd xa = f.pi_inv.cwiseProduct(rho_eig - xb * f.c_eig);
    VectorXd du = eig.U * eig.lambda.cwiseProduct(xa).eval();
    du.array() += xb;
    st.bs(t) += 2.0 * gamma * xb;
    st.a.col(t) += 2.0 * gamma * xa;
    st.u.col(t) += 2.0 * gamma * du;
    change = std::max(change, 2.0 * gamma * du.lpNorm<Eigen::Infinity>());
  }
  if (!std::isfinite(change)) throw numerical_error("majorize-minimize sweep diverged");

  const double obj_after = q_objective(st, eig, y, prob, gamma, eta);
  const double increase = obj_after - obj_before;
  max_increase = std::max(max_increase, increase);
  if (increase > 1e-10 * (1.0 + std::abs(obj_before)))
    throw majorization_error("majorize-minimize sweep increased the smoothed objective");
  if (obj_out != nullptr) *obj_out = obj_after;
  return change;
}

void project_level(const EigenDecomposition& eig, const VectorXd& y, const std::vector<int>& set,
                   double& b, Eigen::Ref<VectorXd> a, Eigen::Ref<VectorXd> u) {
  double shift = 0.0;
  for (int i : set) shift += y(i) - u(i);
  const double b_new = b + shift / (static_cast<double>(set.size()) + 1.0);
  VectorXd theta = u.array() - b;
  for (int i : set) theta(i) = y(i) - b_new;
  VectorXd a_new = (eig.U.transpose() * theta).cwiseQuotient(eig.lambda);
  // Wide-band rounds can sweep in more points than the kernel resolves, and
  // interpolating those would blow the coefficients up by the inverse floor.
  // The projection is a small refinement or nothing.
  if ((a_new - a).norm() > 10.0 * (1.0 + a.norm())) return;
  a = a_new;
  u = theta.array() + b_new;
  b = b_new;
}

}  // namespace

SigmaFactors make_sigma_factors(const EigenDecomposition& eig, double gamma,
                                const NckqrProblem& prob, double ridge_eps) {
  validate_nckqr_problem(prob);
  if (gamma <= 0.0) throw input_error("majorizer factors: gamma must be positive");
  if (prob.eta < gamma)
    throw input_error("majorizer factors: eta must be at least gamma");
  if (ridge_eps < 0.0) throw input_error("majorizer factors: ridge_eps must be nonnegative");
  const auto n = eig.n();
  if (n == 0) throw input_error("majorizer factors: empty decomposition");
  const double nd = static_cast<double>(n);

  SigmaFactors f;
  f.eig = &eig;
  f.gamma = gamma;
  f.lambda1 = prob.lambda1;
  f.lambda2 = prob.lambda2;
  f.A = 4.0 * prob.lambda1 * nd + 1.0;
  f.eps_n = prob.lambda1 * ridge_eps * nd;
  f.pi_inv = (f.A * eig.lambda.array().square() +
              (2.0 * nd * gamma * prob.lambda2) * eig.lambda.array() + f.eps_n)
                 .inverse();
  f.ut1 = eig.U.transpose() * VectorXd::Ones(n);
  f.c_eig = f.A * eig.lambda.cwiseProduct(f.ut1);
  const double head = f.A * nd + f.eps_n;
  const double denom = head - f.c_eig.cwiseProduct(f.pi_inv).dot(f.c_eig);
  if (denom <= 1e-12 * head)
    throw numerical_error("majorizer factors: intercept pivot lost positivity");
  f.g = 1.0 / denom;
  return f;
}

InverseApplyResult sigma_apply_inverse(const SigmaFactors& f, double rho_b,
                                       const VectorXd& rho_alpha) {
  if (f.eig == nullptr) throw input_error("majorizer apply: factors not initialized");
  const auto n = f.eig->n();
  if (rho_alpha.size() != n) throw input_error("majorizer apply: size mismatch");
  VectorXd rho_eig = f.eig->U.transpose() * rho_alpha;
  InverseApplyResult out;
  out.b = f.g * (rho_b - f.c_eig.cwiseProduct(f.pi_inv).dot(rho_eig));
  VectorXd xa = f.pi_inv.cwiseProduct(rho_eig - out.b * f.c_eig);
  MatrixXd both(n, 2);
  both.col(0) = xa;
  both.col(1) = f.eig->lambda.cwiseProduct(xa);
  MatrixXd mapped = f.eig->U * both;
  out.alpha = mapped.col(0);
  out.fitted = mapped.col(1).array() + out.b;
  return out;
}

MmVectors compute_mm_vectors(const MatrixXd& fitted, const VectorXd& y, const VectorXd& taus,
                             double gamma, double eta) {
  const auto n = y.size();
  const auto T = taus.size();
  if (fitted.rows() != n || fitted.cols() != T)
    throw input_error("mm vectors: fitted must be n x T");
  if (gamma <= 0.0 || eta <= 0.0) throw input_error("mm vectors: widths must be positive");
  MmVectors mv;
  mv.z.resize(n, T);
  mv.q.resize(n, T > 0 ? T - 1 : 0);
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index i = 0; i < n; ++i)
      mv.z(i, t) = smoothed_check_deriv(y(i) - fitted(i, t), taus(t), gamma);
  for (Eigen::Index t = 0; t + 1 < T; ++t)
    for (Eigen::Index i = 0; i < n; ++i)
      mv.q(i, t) = smooth_relu_deriv(fitted(i, t) - fitted(i, t + 1), eta);
  return mv;
}

MmState make_mm_state(const EigenDecomposition& eig, const VectorXd& bs,
                      const MatrixXd& alphas) {
  const auto n = eig.n();
  if (alphas.rows() != n || alphas.cols() != bs.size())
    throw input_error("mm state: alphas must be n x T");
  MmState st;
  st.bs = bs;
  st.alphas = alphas;
  st.fitted.resize(n, bs.size());
  for (Eigen::Index t = 0; t < bs.size(); ++t) {
    st.fitted.col(t) =
        eig.U * eig.lambda.cwiseProduct(eig.U.transpose() * alphas.col(t)).eval();
    st.fitted.col(t).array() += bs(t);
  }
  return st;
}

double mm_step(MmState& state, const SigmaFactors& f, const VectorXd& y,
               const NckqrProblem& prob) {
  if (f.eig == nullptr) throw input_error("mm step: factors not initialized");
  const auto& eig = *f.eig;
  const auto n = eig.n();
  const auto T = prob.taus.size();
  if (y.size() != n || state.alphas.rows() != n || state.alphas.cols() != T ||
      state.bs.size() != T)
    throw input_error("mm step: size mismatch");
  MultiState st;
  st.bs = state.bs;
  st.a.resize(n, T);
  for (Eigen::Index t = 0; t < T; ++t) st.a.col(t) = eig.U.transpose() * state.alphas.col(t);
  st.u = state.fitted;
  double max_increase = 0.0;
  const double change = mm_sweep(f, eig, y, prob, prob.eta, st, max_increase);
  state.bs = st.bs;
  for (Eigen::Index t = 0; t < T; ++t) state.alphas.col(t) = eig.U * st.a.col(t);
  state.fitted = st.u;
  state.iter += 1;
  return change;
}

std::vector<ProjectionResult> project_multi(const VectorXd& y, const EigenDecomposition& eig,
                                            const VectorXd& bs, const MatrixXd& alphas,
                                            const std::vector<std::vector<int>>& sets) {
  const auto T = bs.size();
  if (alphas.cols() != T || static_cast<Eigen::Index>(sets.size()) != T)
    throw input_error("projection: need one set per level");
  std::vector<ProjectionResult> out;
  out.reserve(sets.size());
  for (Eigen::Index t = 0; t < T; ++t)
    out.push_back(project_onto_constraints(y, eig, bs(t), alphas.col(t), sets[t]));
  return out;
}

std::vector<std::vector<int>> expand_sets_multi(const MatrixXd& residuals, double gamma) {
  std::vector<std::vector<int>> out;
  out.reserve(static_cast<std::size_t>(residuals.cols()));
  for (Eigen::Index t = 0; t < residuals.cols(); ++t)
    out.push_back(expand_singular_set(residuals.col(t), gamma));
  return out;
}

double nckqr_kkt_residual(const VectorXd& y, const MatrixXd& K, const VectorXd& bs,
                          const MatrixXd& alphas, const NckqrProblem& prob, double band_tol) {
  validate_nckqr_problem(prob);
  const auto n = y.size();
  const auto T = prob.taus.size();
  if (K.rows() != n || K.cols() != n || alphas.rows() != n || alphas.cols() != T ||
      bs.size() != T)
    throw input_error("kkt residual: size mismatch");
  MatrixXd u(n, T);
  for (Eigen::Index t = 0; t < T; ++t) {
    u.col(t).noalias() = K * alphas.col(t);
    u.col(t).array() += bs(t);
  }
  MatrixXd q = MatrixXd::Zero(n, T + 1);  // columns 0 and T stay zero
  for (Eigen::Index t = 0; t + 1 < T; ++t)
    for (Eigen::Index i = 0; i < n; ++i)
      q(i, t + 1) = smooth_relu_deriv(u(i, t) - u(i, t + 1), prob.eta);

  double worst = 0.0;
  for (Eigen::Index t = 0; t < T; ++t) {
    VectorXd dq = q.col(t + 1) - q.col(t);
    VectorXd alpha_target = prob.lambda2 * (u.col(t).array() - bs(t)).matrix();
    if (prob.lambda1 > 0.0) alpha_target.noalias() += prob.lambda1 * (K * dq);
    const double b_target = prob.lambda1 * dq.sum();
    VectorXd r = y - u.col(t);
    worst = std::max(
        worst, dual_stationarity_gap(K, r, prob.taus(t), alpha_target, b_target, band_tol));
  }
  return worst;
}

double crossing_magnitude(const MatrixXd& fitted) {
  double total = 0.0;
  for (Eigen::Index t = 0; t + 1 < fitted.cols(); ++t)
    total += (fitted.col(t) - fitted.col(t + 1)).cwiseMax(0.0).sum();
  return total;
}

NckqrSolution solve_nckqr(const VectorXd& y, const MatrixXd& K, const EigenDecomposition& eig,
                          const NckqrProblem& prob, const SolverConfig& cfg) {
  validate_nckqr_problem(prob);
  if (y.size() != eig.n()) throw input_error("non-crossing solve: y and kernel dimensions disagree");
  if (!y.allFinite()) throw input_error("non-crossing solve: y contains non-finite values");
  if (K.rows() != eig.n() || K.cols() != eig.n())
    throw input_error("non-crossing solve: K and decomposition dimensions disagree");
  if (cfg.gamma_init <= 0.0 || cfg.gamma_shrink <= 0.0 || cfg.gamma_shrink >= 1.0 ||
      cfg.max_outer_gamma_steps < 1 || cfg.max_apgd_iters < 1 || cfg.apgd_tol <= 0.0 ||
      cfg.kkt_tol <= 0.0 || cfg.eta_floor <= 0.0)
    throw input_error("non-crossing solve: invalid solver configuration");

  const auto n = y.size();
  const auto T = prob.taus.size();
  const double eta_target = std::max(prob.eta, cfg.eta_floor);

  MultiState st;
  st.bs.resize(T);
  for (Eigen::Index t = 0; t < T; ++t) st.bs(t) = empirical_quantile(y, prob.taus(t));
  st.a = MatrixXd::Zero(n, T);
  st.u.resize(n, T);
  for (Eigen::Index t = 0; t < T; ++t) st.u.col(t).setConstant(st.bs(t));

  NckqrSolution sol;
  double gamma = cfg.gamma_init;
  for (int round = 0; round < cfg.max_outer_gamma_steps; ++round) {
    NckqrProblem round_prob = prob;
    round_prob.eta = std::max(gamma, eta_target);
    SigmaFactors f = make_sigma_factors(eig, gamma, round_prob, cfg.ridge_eps);
    // The certificate reads hinge multipliers through V', whose slope grows as
    // the widths shrink, so deeper rounds need proportionally tighter sweeps.
    const double round_tol = cfg.apgd_tol * std::sqrt(gamma / cfg.gamma_init);
    std::vector<std::vector<int>> sets(static_cast<std::size_t>(T));
    for (Eigen::Index pass = 0; pass <= n; ++pass) {
      // Momentum over majorized sweeps. The plain iteration contracts like
      // 1 - O(gamma) per sweep, far too slowly at small widths; extrapolation
      // restores the accelerated rate. A candidate that raises the objective
      // is discarded for a plain sweep, keeping the iterate sequence monotone.
      MultiState prev = st;
      double c_mom = 1.0;
      double f_cur = q_objective(st, eig, y, round_prob, gamma, round_prob.eta);
      for (long it = 1; it <= cfg.max_apgd_iters; ++it) {
        const double c_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * c_mom * c_mom));
        const double omega = (c_mom - 1.0) / c_next;
        MultiState cand;
        cand.bs = st.bs + omega * (st.bs - prev.bs);
        cand.a = st.a + omega * (st.a - prev.a);
        cand.u = st.u + omega * (st.u - prev.u);
        double f_cand = 0.0;
        double change =
            mm_sweep(f, eig, y, round_prob, round_prob.eta, cand, sol.max_mm_increase, &f_cand);
        sol.mm_iterations += 1;
        if (f_cand <= f_cur + 1e-12 * (1.0 + std::abs(f_cur))) {
          prev = std::move(st);
          st = std::move(cand);
          c_mom = c_next;
          f_cur = f_cand;
        } else {
          prev = st;
          change =
              mm_sweep(f, eig, y, round_prob, round_prob.eta, st, sol.max_mm_increase, &f_cur);
          sol.mm_iterations += 1;
          c_mom = 1.0;
        }
        if (change <= round_tol) break;
        if (it % kFittedRefreshEvery == 0) {
          refresh_fitted(eig, st);
          refresh_fitted(eig, prev);
        }
      }
      refresh_fitted(eig, st);
      bool stable = true;
      for (Eigen::Index t = 0; t < T; ++t) {
        project_level(eig, y, sets[static_cast<std::size_t>(t)], st.bs(t), st.a.col(t),
                      st.u.col(t));
        std::vector<int> grown;
        {
          std::vector<int> expanded = expand_singular_set(y - st.u.col(t), gamma);
          std::set_union(sets[static_cast<std::size_t>(t)].begin(),
                         sets[static_cast<std::size_t>(t)].end(), expanded.begin(),
                         expanded.end(), std::back_inserter(grown));
        }
        if (grown != sets[static_cast<std::size_t>(t)]) stable = false;
        sets[static_cast<std::size_t>(t)] = std::move(grown);
      }
      if (stable) break;
    }

    sol.bs = st.bs;
    sol.alphas.resize(n, T);
    sol.fitted.resize(n, T);
    sol.singular_sets = sets;
    sol.gamma_final = gamma;
    sol.gamma_rounds = round + 1;
    NckqrProblem cert_prob = prob;
    cert_prob.eta = eta_target;
    for (Eigen::Index t = 0; t < T; ++t) {
      VectorXd col = eig.U * st.a.col(t);
      detail::drop_floored_components(eig, col);
      detail::correct_singular_residuals(K, y, sol.bs(t), col,
                                         sets[static_cast<std::size_t>(t)]);
      sol.alphas.col(t) = col;
      sol.fitted.col(t) = (K * col).array() + sol.bs(t);
    }
    sol.kkt_residual =
        nckqr_kkt_residual(y, K, sol.bs, sol.alphas, cert_prob, cfg.singular_band_tol);
    if (sol.kkt_residual <= cfg.kkt_tol) {
      sol.certified = true;
      break;
    }
    gamma *= cfg.gamma_shrink;
  }

  sol.eta_final = eta_target;
  sol.objective = nckqr_objective(sol.bs, sol.alphas, y, K, prob.taus, prob.lambda1,
                                  prob.lambda2, eta_target);
  sol.crossing_magnitude = crossing_magnitude(sol.fitted);
  return sol;
}

}  // namespace kqr
