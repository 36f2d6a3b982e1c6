#include "kqr/loss.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace kqr {

void validate_taus(const Eigen::VectorXd& taus) {
  if (taus.size() < 1) throw input_error("quantile levels: need at least one");
  for (Eigen::Index t = 0; t < taus.size(); ++t) {
    if (!(taus(t) > 0.0 && taus(t) < 1.0))
      throw input_error("quantile level " + std::to_string(taus(t)) + " outside (0,1)");
    if (t > 0 && !(taus(t) > taus(t - 1)))
      throw input_error("quantile levels must be strictly increasing");
  }
}

static void check_dims(const Eigen::VectorXd& alpha, const Eigen::VectorXd& y,
                       const Eigen::MatrixXd& K) {
  if (K.rows() != K.cols() || alpha.size() != K.rows() || y.size() != K.rows())
    throw input_error("objective: dimension mismatch");
}

double kqr_objective_from_residuals(const Eigen::VectorXd& residuals, double tau, double ridge) {
  KahanSum s;
  for (Eigen::Index i = 0; i < residuals.size(); ++i) s.add(check_loss(residuals(i), tau));
  return s.value() / static_cast<double>(residuals.size()) + ridge;
}

double smoothed_kqr_objective_from_residuals(const Eigen::VectorXd& residuals, double tau,
                                             double gamma, double ridge) {
  KahanSum s;
  for (Eigen::Index i = 0; i < residuals.size(); ++i) s.add(smoothed_check(residuals(i), tau, gamma));
  return s.value() / static_cast<double>(residuals.size()) + ridge;
}

double kqr_objective(double b, const Eigen::VectorXd& alpha, const Eigen::VectorXd& y,
                     const Eigen::MatrixXd& K, double lambda, double tau) {
  check_dims(alpha, y, K);
  if (lambda < 0.0) throw input_error("objective: lambda must be nonnegative");
  const Eigen::VectorXd Ka = K * alpha;
  const Eigen::VectorXd r = y.array() - b - Ka.array();
  return kqr_objective_from_residuals(r, tau, 0.5 * lambda * alpha.dot(Ka));
}

double smoothed_kqr_objective(double b, const Eigen::VectorXd& alpha, const Eigen::VectorXd& y,
                              const Eigen::MatrixXd& K, double lambda, double tau, double gamma) {
  check_dims(alpha, y, K);
  if (lambda < 0.0) throw input_error("objective: lambda must be nonnegative");
  if (!(gamma > 0.0)) throw input_error("objective: gamma must be positive");
  const Eigen::VectorXd Ka = K * alpha;
  const Eigen::VectorXd r = y.array() - b - Ka.array();
  return smoothed_kqr_objective_from_residuals(r, tau, gamma, 0.5 * lambda * alpha.dot(Ka));
}

// Shared Q / Q^gamma body; gamma <= 0 selects the exact check loss.
static double nckqr_objective_impl(const Eigen::VectorXd& bs, const Eigen::MatrixXd& alphas,
                                   const Eigen::VectorXd& y, const Eigen::MatrixXd& K,
                                   const Eigen::VectorXd& taus, double lambda1, double lambda2,
                                   double eta, double gamma) {
  validate_taus(taus);
  const Eigen::Index T = taus.size();
  const Eigen::Index n = y.size();
  if (bs.size() != T || alphas.cols() != T || alphas.rows() != n || K.rows() != n || K.cols() != n)
    throw input_error("nckqr objective: dimension mismatch");
  if (lambda1 < 0.0) throw input_error("nckqr objective: lambda1 must be nonnegative");
  if (!(lambda2 > 0.0)) throw input_error("nckqr objective: lambda2 must be positive");
  if (!(eta > 0.0)) throw input_error("nckqr objective: eta must be positive");

  Eigen::MatrixXd u(n, T);
  Eigen::VectorXd ridge(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    const Eigen::VectorXd Ka = K * alphas.col(t);
    u.col(t) = Ka.array() + bs(t);
    ridge(t) = 0.5 * lambda2 * alphas.col(t).dot(Ka);
  }

  KahanSum total;
  for (Eigen::Index t = 0; t < T; ++t) {
    KahanSum loss;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double r = y(i) - u(i, t);
      loss.add(gamma > 0.0 ? smoothed_check(r, taus(t), gamma) : check_loss(r, taus(t)));
    }
    total.add(loss.value() / static_cast<double>(n));
    total.add(ridge(t));
  }
  for (Eigen::Index t = 0; t + 1 < T; ++t) {
    KahanSum pen;
    for (Eigen::Index i = 0; i < n; ++i) pen.add(smooth_relu(u(i, t) - u(i, t + 1), eta));
    total.add(lambda1 * pen.value());
  }
  return total.value();
}

double nckqr_objective(const Eigen::VectorXd& bs, const Eigen::MatrixXd& alphas,
                       const Eigen::VectorXd& y, const Eigen::MatrixXd& K,
                       const Eigen::VectorXd& taus, double lambda1, double lambda2, double eta) {
  return nckqr_objective_impl(bs, alphas, y, K, taus, lambda1, lambda2, eta, 0.0);
}

double smoothed_nckqr_objective(const Eigen::VectorXd& bs, const Eigen::MatrixXd& alphas,
                                const Eigen::VectorXd& y, const Eigen::MatrixXd& K,
                                const Eigen::VectorXd& taus, double lambda1, double lambda2,
                                double eta, double gamma) {
  if (!(gamma > 0.0)) throw input_error("nckqr objective: gamma must be positive");
  return nckqr_objective_impl(bs, alphas, y, K, taus, lambda1, lambda2, eta, gamma);
}

double smoothed_nckqr_objective_from_fitted(const Eigen::MatrixXd& u, const Eigen::VectorXd& y,
                                            const Eigen::VectorXd& taus,
                                            const Eigen::VectorXd& ridge_terms, double lambda1,
                                            double eta, double gamma) {
  const Eigen::Index T = taus.size();
  const Eigen::Index n = y.size();
  KahanSum total;
  for (Eigen::Index t = 0; t < T; ++t) {
    KahanSum loss;
    for (Eigen::Index i = 0; i < n; ++i) loss.add(smoothed_check(y(i) - u(i, t), taus(t), gamma));
    total.add(loss.value() / static_cast<double>(n));
    total.add(ridge_terms(t));
  }
  for (Eigen::Index t = 0; t + 1 < T; ++t) {
    KahanSum pen;
    for (Eigen::Index i = 0; i < n; ++i) pen.add(smooth_relu(u(i, t) - u(i, t + 1), eta));
    total.add(lambda1 * pen.value());
  }
  return total.value();
}


double empirical_quantile(const Eigen::VectorXd& y, double tau) {
  if (y.size() == 0) throw input_error("empirical quantile: empty sample");
  if (tau <= 0.0 || tau >= 1.0) throw input_error("empirical quantile: tau must lie in (0,1)");
  std::vector<double> v(y.data(), y.data() + y.size());
  std::sort(v.begin(), v.end());
  const double pos = tau * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return (1.0 - frac) * v[lo] + frac * v[hi];
}

}  // namespace kqr
