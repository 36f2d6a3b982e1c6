#include "kqr/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "kqr/loss.hpp"

namespace kqr {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// (1 K)^T diag(d) (1 K) assembled as one (n+1) x (n+1) block.
MatrixXd weighted_design_gram(const MatrixXd& K, const VectorXd& d) {
  const Eigen::Index n = K.rows();
  MatrixXd out(n + 1, n + 1);
  VectorXd Kd = K * d;
  out(0, 0) = d.sum();
  out.row(0).tail(n) = Kd.transpose();
  out.col(0).tail(n) = Kd;
  out.block(1, 1, n, n) = K * d.asDiagonal() * K;
  return out;
}

struct SmoothProblem {
  std::function<double(const VectorXd&)> value;
  std::function<VectorXd(const VectorXd&)> gradient;
  std::function<MatrixXd(const VectorXd&)> hessian;
};

struct StageResult {
  double objective = 0.0;
  double gradient_norm = 0.0;
  long iterations = 0;
  bool converged = false;
};

// Damped Newton with Armijo backtracking. Near machine precision the
// objective decrease drops below rounding noise, so steps whose predicted
// decrease is under the noise floor are accepted on gradient reduction.
StageResult damped_newton(const SmoothProblem& prob, VectorXd& x, double grad_tol_rel,
                          long max_iters) {
  StageResult res;
  double f = prob.value(x);
  VectorXd g = prob.gradient(x);
  double mu = 0.0;
  for (long it = 0; it < max_iters; ++it) {
    res.objective = f;
    res.gradient_norm = g.lpNorm<Eigen::Infinity>();
    if (res.gradient_norm <= grad_tol_rel * (1.0 + std::abs(f))) {
      res.converged = true;
      res.iterations = it;
      return res;
    }
    MatrixXd H = prob.hessian(x);
    const double scale = std::max(1.0, H.diagonal().cwiseAbs().maxCoeff());
    bool stepped = false;
    for (int attempt = 0; attempt < 60 && !stepped; ++attempt) {
      MatrixXd Hd = H;
      if (mu > 0.0) Hd.diagonal().array() += mu;
      Eigen::LDLT<MatrixXd> ldlt(Hd);
      if (ldlt.info() != Eigen::Success) {
        mu = std::max(mu * 10.0, 1e-12 * scale);
        continue;
      }
      VectorXd dir = ldlt.solve(-g);
      const double slope = g.dot(dir);
      if (!dir.allFinite() || slope >= 0.0) {
        mu = std::max(mu * 10.0, 1e-12 * scale);
        continue;
      }
      const double noise_floor = 1e-14 * (1.0 + std::abs(f));
      // The Newton decrement bounds the attainable decrease. Once it falls
      // under rounding noise on an undamped step the iterate is stationary at
      // working precision; the raw gradient cannot certify this because its
      // evaluation error grows like eps / gamma.
      if (mu == 0.0 && -slope <= noise_floor) {
        res.objective = f;
        res.gradient_norm = g.lpNorm<Eigen::Infinity>();
        res.iterations = it;
        res.converged = true;
        return res;
      }
      double t = 1.0;
      for (int ls = 0; ls < 50; ++ls) {
        VectorXd cand = x + t * dir;
        const double fc = prob.value(cand);
        const bool tiny_pred = (-slope * t) <= noise_floor;
        bool accept = false;
        if (std::isfinite(fc) && fc <= f + 1e-4 * t * slope) accept = true;
        if (!accept && tiny_pred && std::isfinite(fc)) {
          VectorXd gc = prob.gradient(cand);
          if (gc.lpNorm<Eigen::Infinity>() <= g.lpNorm<Eigen::Infinity>()) {
            x = cand;
            f = fc;
            g = gc;
            stepped = true;
            break;
          }
        }
        if (accept) {
          x = cand;
          f = fc;
          g = prob.gradient(x);
          stepped = true;
          break;
        }
        t *= 0.5;
      }
      if (!stepped) mu = std::max(mu * 10.0, 1e-12 * scale);
    }
    if (!stepped) {
      res.iterations = it;
      return res;
    }
    mu *= 0.1;
    if (mu < 1e-300) mu = 0.0;
  }
  res.objective = f;
  res.gradient_norm = g.lpNorm<Eigen::Infinity>();
  res.iterations = max_iters;
  res.converged = res.gradient_norm <= grad_tol_rel * (1.0 + std::abs(f));
  return res;
}

// Barzilai-Borwein descent with Armijo safeguard; last resort when Newton
// stalls. Capped at one million iterations and reported as a fallback.
StageResult bb_fallback(const SmoothProblem& prob, VectorXd& x, double grad_tol_rel,
                        long max_iters) {
  StageResult res;
  double f = prob.value(x);
  VectorXd g = prob.gradient(x);
  double step = 1.0 / std::max(1.0, g.lpNorm<Eigen::Infinity>());
  VectorXd x_prev = x, g_prev = g;
  for (long it = 0; it < max_iters; ++it) {
    res.objective = f;
    res.gradient_norm = g.lpNorm<Eigen::Infinity>();
    if (res.gradient_norm <= grad_tol_rel * (1.0 + std::abs(f))) {
      res.converged = true;
      res.iterations = it;
      return res;
    }
    if (it > 0) {
      VectorXd s = x - x_prev;
      VectorXd dg = g - g_prev;
      const double sy = s.dot(dg);
      if (sy > 0.0) step = std::max(1e-16, std::min(1e12, s.squaredNorm() / sy));
    }
    x_prev = x;
    g_prev = g;
    double t = step;
    for (int ls = 0; ls < 80; ++ls) {
      VectorXd cand = x - t * g;
      const double fc = prob.value(cand);
      if (std::isfinite(fc) && fc <= f - 1e-4 * t * g.squaredNorm()) {
        x = cand;
        f = fc;
        break;
      }
      t *= 0.5;
    }
    if ((x - x_prev).lpNorm<Eigen::Infinity>() == 0.0) {
      // No step between 2^0 and 2^-80 times the BB length moved the objective
      // by one ulp; the point is flat to rounding noise along the gradient.
      res.iterations = it;
      res.converged = true;
      return res;
    }
    g = prob.gradient(x);
  }
  res.objective = f;
  res.gradient_norm = g.lpNorm<Eigen::Infinity>();
  res.iterations = max_iters;
  res.converged = res.gradient_norm <= grad_tol_rel * (1.0 + std::abs(f));
  return res;
}

std::vector<double> gamma_schedule(double gamma_final) {
  std::vector<double> out;
  double g = 1.0;
  if (gamma_final >= 1.0) return {gamma_final};
  while (g > gamma_final) {
    out.push_back(g);
    g *= 0.25;
  }
  out.push_back(gamma_final);
  return out;
}

OracleReport run_continuation(const std::function<SmoothProblem(double)>& make_problem,
                              VectorXd& x, double gamma_final, double grad_tol_rel) {
  OracleReport rep;
  const auto gammas = gamma_schedule(gamma_final);
  StageResult last;
  for (double gamma : gammas) {
    SmoothProblem prob = make_problem(gamma);
    last = damped_newton(prob, x, grad_tol_rel, 500);
    rep.iterations += last.iterations;
    if (!last.converged) {
      StageResult fb = bb_fallback(prob, x, grad_tol_rel, 1000000 - rep.iterations);
      rep.iterations += fb.iterations;
      rep.used_fallback = true;
      last = fb;
      if (!last.converged) break;
    }
  }
  rep.objective = last.objective;
  rep.gradient_norm = last.gradient_norm;
  rep.converged = last.converged;
  rep.final_gamma = gammas.back();
  return rep;
}

}  // namespace

VectorXd dense_solve(const MatrixXd& A, const VectorXd& rhs) {
  if (A.rows() != A.cols() || A.rows() != rhs.size())
    throw input_error("dense_solve: dimension mismatch");
  Eigen::LDLT<MatrixXd> ldlt(A);
  if (ldlt.info() != Eigen::Success) throw numerical_error("dense_solve: factorization failed");
  VectorXd x = ldlt.solve(rhs);
  const double resid = (A * x - rhs).lpNorm<Eigen::Infinity>();
  if (!x.allFinite() || resid > 1e-9 * (1.0 + rhs.lpNorm<Eigen::Infinity>()))
    throw numerical_error("dense_solve: residual too large, matrix near singular");
  return x;
}

OracleReport reference_kqr_optimum(const VectorXd& y, const MatrixXd& K, double tau,
                                   double lambda, double gamma_final, double grad_tol_rel) {
  const Eigen::Index n = y.size();
  if (K.rows() != n || K.cols() != n) throw input_error("reference_kqr_optimum: K must be n x n");
  if (tau <= 0.0 || tau >= 1.0) throw input_error("reference_kqr_optimum: tau must lie in (0,1)");
  if (lambda < 0.0) throw input_error("reference_kqr_optimum: lambda must be nonnegative");
  const double inv_n = 1.0 / static_cast<double>(n);

  auto make_problem = [&](double gamma) {
    SmoothProblem prob;
    prob.value = [&, gamma](const VectorXd& x) {
      return smoothed_kqr_objective(x(0), x.tail(n), y, K, lambda, tau, gamma);
    };
    prob.gradient = [&, gamma](const VectorXd& x) {
      VectorXd r = y - VectorXd::Constant(n, x(0)) - K * x.tail(n);
      VectorXd z(n);
      for (Eigen::Index i = 0; i < n; ++i) z(i) = smoothed_check_deriv(r(i), tau, gamma);
      VectorXd g(n + 1);
      g(0) = -inv_n * z.sum();
      g.tail(n) = K * (lambda * x.tail(n) - inv_n * z);
      return g;
    };
    prob.hessian = [&, gamma](const VectorXd& x) {
      VectorXd r = y - VectorXd::Constant(n, x(0)) - K * x.tail(n);
      VectorXd d = (r.array().abs() <= gamma).cast<double>() / (2.0 * gamma);
      MatrixXd H = inv_n * weighted_design_gram(K, d);
      H.block(1, 1, n, n) += lambda * K;
      return H;
    };
    return prob;
  };

  VectorXd x(n + 1);
  x(0) = empirical_quantile(y, tau);
  x.tail(n).setZero();
  OracleReport rep = run_continuation(make_problem, x, gamma_final, grad_tol_rel);
  rep.bs = x.head(1);
  rep.alphas = x.tail(n);
  return rep;
}

OracleReport reference_nckqr_optimum(const VectorXd& y, const MatrixXd& K, const VectorXd& taus,
                                     double lambda1, double lambda2, double eta_target,
                                     double gamma_final, double grad_tol_rel) {
  const Eigen::Index n = y.size();
  const Eigen::Index T = taus.size();
  if (K.rows() != n || K.cols() != n)
    throw input_error("reference_nckqr_optimum: K must be n x n");
  validate_taus(taus);
  if (lambda1 < 0.0 || lambda2 < 0.0)
    throw input_error("reference_nckqr_optimum: penalties must be nonnegative");
  if (eta_target <= 0.0) throw input_error("reference_nckqr_optimum: eta must be positive");
  const double inv_n = 1.0 / static_cast<double>(n);
  const Eigen::Index dim = T * (n + 1);
  auto b_of = [&](const VectorXd& x, Eigen::Index t) { return x(t * (n + 1)); };
  auto a_of = [&](const VectorXd& x, Eigen::Index t) { return x.segment(t * (n + 1) + 1, n); };

  auto make_problem = [&](double gamma) {
    const double eta = std::max(gamma, eta_target);
    SmoothProblem prob;
    auto fitted = [&, gamma](const VectorXd& x) {
      MatrixXd u(n, T);
      for (Eigen::Index t = 0; t < T; ++t)
        u.col(t) = VectorXd::Constant(n, b_of(x, t)) + K * a_of(x, t);
      return u;
    };
    prob.value = [&, gamma, eta](const VectorXd& x) {
      VectorXd bs(T);
      MatrixXd al(n, T);
      for (Eigen::Index t = 0; t < T; ++t) {
        bs(t) = b_of(x, t);
        al.col(t) = a_of(x, t);
      }
      return smoothed_nckqr_objective(bs, al, y, K, taus, lambda1, lambda2, eta, gamma);
    };
    prob.gradient = [&, gamma, eta, fitted](const VectorXd& x) {
      MatrixXd u = fitted(x);
      MatrixXd q = MatrixXd::Zero(n, T + 1);  // columns 0 and T stay zero
      for (Eigen::Index t = 0; t + 1 < T; ++t)
        for (Eigen::Index i = 0; i < n; ++i)
          q(i, t + 1) = smooth_relu_deriv(u(i, t) - u(i, t + 1), eta);
      VectorXd g(dim);
      for (Eigen::Index t = 0; t < T; ++t) {
        VectorXd z(n);
        for (Eigen::Index i = 0; i < n; ++i)
          z(i) = smoothed_check_deriv(y(i) - u(i, t), taus(t), gamma);
        VectorXd dq = q.col(t + 1) - q.col(t);
        g(t * (n + 1)) = -inv_n * z.sum() + lambda1 * dq.sum();
        g.segment(t * (n + 1) + 1, n) =
            K * (lambda2 * a_of(x, t) - inv_n * z + lambda1 * dq);
      }
      return g;
    };
    prob.hessian = [&, gamma, eta, fitted](const VectorXd& x) {
      MatrixXd u = fitted(x);
      MatrixXd H = MatrixXd::Zero(dim, dim);
      for (Eigen::Index t = 0; t < T; ++t) {
        VectorXd d(n);
        for (Eigen::Index i = 0; i < n; ++i)
          d(i) = (std::abs(y(i) - u(i, t)) <= gamma) ? 1.0 / (2.0 * gamma) : 0.0;
        H.block(t * (n + 1), t * (n + 1), n + 1, n + 1) = inv_n * weighted_design_gram(K, d);
        H.block(t * (n + 1) + 1, t * (n + 1) + 1, n, n) += lambda2 * K;
      }
      for (Eigen::Index t = 0; t + 1 < T; ++t) {
        VectorXd dv(n);
        for (Eigen::Index i = 0; i < n; ++i)
          dv(i) = (std::abs(u(i, t) - u(i, t + 1)) <= eta) ? 1.0 / (2.0 * eta) : 0.0;
        MatrixXd block = lambda1 * weighted_design_gram(K, dv);
        H.block(t * (n + 1), t * (n + 1), n + 1, n + 1) += block;
        H.block((t + 1) * (n + 1), (t + 1) * (n + 1), n + 1, n + 1) += block;
        H.block(t * (n + 1), (t + 1) * (n + 1), n + 1, n + 1) -= block;
        H.block((t + 1) * (n + 1), t * (n + 1), n + 1, n + 1) -= block;
      }
      return H;
    };
    return prob;
  };

  VectorXd x(dim);
  for (Eigen::Index t = 0; t < T; ++t) {
    x(t * (n + 1)) = empirical_quantile(y, taus(t));
    x.segment(t * (n + 1) + 1, n).setZero();
  }
  OracleReport rep = run_continuation(make_problem, x, gamma_final, grad_tol_rel);
  rep.bs.resize(T);
  rep.alphas.resize(n, T);
  for (Eigen::Index t = 0; t < T; ++t) {
    rep.bs(t) = b_of(x, t);
    rep.alphas.col(t) = a_of(x, t);
  }
  return rep;
}

}  // namespace kqr
