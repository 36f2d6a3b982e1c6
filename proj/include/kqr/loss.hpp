#pragma once

#include <Eigen/Dense>

#include "kqr/errors.hpp"

namespace kqr {

// Quantile level, 0 < tau < 1.
struct QuantileLevel {
  double tau;
};

// Smoothing half-widths: gamma for the check loss, eta for the smooth ReLU.
struct SmoothingParams {
  double gamma = 1.0;
  double eta = 1e-5;
};

// Check loss rho_tau(t) = t(tau - I(t<0)).
inline double check_loss(double t, double tau) { return t < 0.0 ? (tau - 1.0) * t : tau * t; }

// gamma-smoothed check loss H_{gamma,tau}. C^1, satisfies 0 <= H - rho <= gamma/4.
// Branch boundaries |t| = gamma use the middle branch; all branches agree there.
inline double smoothed_check(double t, double tau, double gamma) {
  if (t > gamma) return tau * t;
  if (t < -gamma) return (tau - 1.0) * t;
  return t * t / (4.0 * gamma) + t * (tau - 0.5) + gamma / 4.0;
}

// H'_{gamma,tau}; ranges over [tau-1, tau], Lipschitz with constant 1/(2 gamma).
inline double smoothed_check_deriv(double t, double tau, double gamma) {
  if (t > gamma) return tau;
  if (t < -gamma) return tau - 1.0;
  return t / (2.0 * gamma) + tau - 0.5;
}

// Smooth ReLU V_eta: 0 left of -eta, t right of eta, quadratic bridge between.
inline double smooth_relu(double t, double eta) {
  if (t > eta) return t;
  if (t < -eta) return 0.0;
  return t * t / (4.0 * eta) + 0.5 * t + eta / 4.0;
}

// V'_eta in [0, 1].
inline double smooth_relu_deriv(double t, double eta) {
  if (t > eta) return 1.0;
  if (t < -eta) return 0.0;
  return t / (2.0 * eta) + 0.5;
}

// Compensated accumulator. Path solvers compare objective deltas near
// tolerance, so naive summation error is not acceptable at large n.
struct KahanSum {
  double s = 0.0;
  double c = 0.0;
  void add(double x) {
    const double y = x - c;
    const double t = s + y;
    c = (t - s) - y;
    s = t;
  }
  double value() const { return s; }
};

// G(b, alpha) = (1/n) sum rho_tau(y_i - b - K_i'alpha) + (lambda/2) alpha'K alpha.
double kqr_objective(double b, const Eigen::VectorXd& alpha, const Eigen::VectorXd& y,
                     const Eigen::MatrixXd& K, double lambda, double tau);

// G^gamma: check loss replaced by its gamma-smoothed version.
double smoothed_kqr_objective(double b, const Eigen::VectorXd& alpha, const Eigen::VectorXd& y,
                              const Eigen::MatrixXd& K, double lambda, double tau, double gamma);

// Residual-based forms used by the solvers, which track fitted values
// incrementally. residual_i = y_i - b - K_i'alpha, ridge = (lambda/2) a'Ka.
double kqr_objective_from_residuals(const Eigen::VectorXd& residuals, double tau, double ridge);
double smoothed_kqr_objective_from_residuals(const Eigen::VectorXd& residuals, double tau,
                                             double gamma, double ridge);

// Q of the non-crossing problem: per-level check loss, per-level ridge, and
// the smooth-ReLU crossing penalty between adjacent levels.
// bs(t), alphas.col(t) hold level t; taus must be strictly increasing.
double nckqr_objective(const Eigen::VectorXd& bs, const Eigen::MatrixXd& alphas,
                       const Eigen::VectorXd& y, const Eigen::MatrixXd& K,
                       const Eigen::VectorXd& taus, double lambda1, double lambda2, double eta);

// Q^gamma: check losses smoothed at gamma, crossing penalty kept at width eta.
double smoothed_nckqr_objective(const Eigen::VectorXd& bs, const Eigen::MatrixXd& alphas,
                                const Eigen::VectorXd& y, const Eigen::MatrixXd& K,
                                const Eigen::VectorXd& taus, double lambda1, double lambda2,
                                double eta, double gamma);

// Q^gamma from per-level fitted values u.col(t) = b_t 1 + K alpha_t and the
// per-level ridge terms; avoids re-multiplying by K inside iteration loops.
double smoothed_nckqr_objective_from_fitted(const Eigen::MatrixXd& u, const Eigen::VectorXd& y,
                                            const Eigen::VectorXd& taus,
                                            const Eigen::VectorXd& ridge_terms, double lambda1,
                                            double eta, double gamma);

void validate_taus(const Eigen::VectorXd& taus);

// Linear-interpolation sample quantile, used for intercept warm starts.
double empirical_quantile(const Eigen::VectorXd& y, double tau);

}  // namespace kqr
