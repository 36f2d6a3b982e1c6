#pragma once

#include <Eigen/Dense>

#include "kqr/errors.hpp"

namespace kqr {

// Result of a reference optimization. On success (converged = true) the
// gradient norm satisfies gradient_norm <= grad_tol_rel * (1 + |objective|).
struct OracleReport {
  double objective = 0.0;              // smoothed objective at the returned point
  Eigen::VectorXd bs;                  // intercepts, one per level (size 1 for KQR)
  Eigen::MatrixXd alphas;              // n x T coefficient columns
  double gradient_norm = 0.0;          // max-norm of the final gradient
  long iterations = 0;                 // total Newton/fallback iterations
  bool converged = false;
  bool used_fallback = false;          // Newton failed, first-order fallback ran
  double final_gamma = 0.0;
};

// Dense symmetric solve via LDLT factorization; the arbiter for the spectral
// formulas. Kept entirely apart from the production eigenbasis code path.
// Post: ||A x - rhs||_inf <= 1e-9 * (1 + ||rhs||_inf), else numerical error.
Eigen::VectorXd dense_solve(const Eigen::MatrixXd& A, const Eigen::VectorXd& rhs);

// Minimizes G^gamma by damped Newton with dense solves, following a gamma
// continuation 1 -> gamma_final by quartering. n <= 100 expected.
OracleReport reference_kqr_optimum(const Eigen::VectorXd& y, const Eigen::MatrixXd& K, double tau,
                                   double lambda, double gamma_final = 1e-10,
                                   double grad_tol_rel = 1e-11);

// Same for Q^gamma. The smooth-ReLU width follows eta = max(gamma, eta_target)
// along the continuation and ends at eta_target.
OracleReport reference_nckqr_optimum(const Eigen::VectorXd& y, const Eigen::MatrixXd& K,
                                     const Eigen::VectorXd& taus, double lambda1, double lambda2,
                                     double eta_target, double gamma_final = 1e-10,
                                     double grad_tol_rel = 1e-11);

}  // namespace kqr
