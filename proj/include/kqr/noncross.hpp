#pragma once

#include <Eigen/Dense>
#include <vector>

#include "kqr/errors.hpp"
#include "kqr/kernel.hpp"
#include "kqr/solver.hpp"

namespace kqr {

// Joint estimation across quantile levels with a smooth hinge penalty on
// adjacent fitted-value inversions.
struct NckqrProblem {
  Eigen::VectorXd taus;   // strictly increasing, each in (0,1)
  double lambda1 = 0.0;   // non-crossing penalty weight
  double lambda2 = 0.1;   // kernel ridge weight
  double eta = 1e-5;      // smooth hinge width
};

// Cached quantities for applying the per-level majorizer
// Sigma = [[n A + e, A 1'K], [A K 1, A K^2 + 2 n gamma lambda2 K + e I]]
// in the eigenbasis, with A = 4 lambda1 n + 1 and e = lambda1 ridge_eps n.
// Valid for one (gamma, eta) round; requires eta >= gamma.
struct SigmaFactors {
  const EigenDecomposition* eig = nullptr;
  double gamma = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double A = 1.0;
  double eps_n = 0.0;
  Eigen::VectorXd pi_inv;  // 1 / (A lam^2 + 2 n gamma lambda2 lam + e)
  Eigen::VectorXd ut1;     // U' 1
  Eigen::VectorXd c_eig;   // A lam .* ut1, the intercept cross column
  double g = 0.0;          // inverse Schur complement of the intercept row
};

SigmaFactors make_sigma_factors(const EigenDecomposition& eig, double gamma,
                                const NckqrProblem& problem, double ridge_eps);

// Solves Sigma x = (rho_b; rho_alpha) for one level.
InverseApplyResult sigma_apply_inverse(const SigmaFactors& factors, double rho_b,
                                       const Eigen::VectorXd& rho_alpha);

// Pointwise derivative stacks driving one majorize-minimize sweep: z holds
// the smoothed check derivatives per level, q the smooth hinge derivatives
// of adjacent fitted differences.
struct MmVectors {
  Eigen::MatrixXd z;  // n x T
  Eigen::MatrixXd q;  // n x (T-1), column t is V'(u_t - u_{t+1})
};

MmVectors compute_mm_vectors(const Eigen::MatrixXd& fitted, const Eigen::VectorXd& y,
                             const Eigen::VectorXd& taus, double gamma, double eta);

struct MmState {
  Eigen::VectorXd bs;      // T
  Eigen::MatrixXd alphas;  // n x T
  Eigen::MatrixXd fitted;  // n x T
  long iter = 0;
};

MmState make_mm_state(const EigenDecomposition& eig, const Eigen::VectorXd& bs,
                      const Eigen::MatrixXd& alphas);

// One simultaneous update of every level from a shared derivative snapshot.
// Returns the max-norm fitted change. The majorizer guarantees descent of the
// smoothed objective; an increase beyond rounding tolerance throws.
double mm_step(MmState& state, const SigmaFactors& factors, const Eigen::VectorXd& y,
               const NckqrProblem& problem);

// Per-level exact interpolation, sharing the single-level projection rule.
std::vector<ProjectionResult> project_multi(const Eigen::VectorXd& y,
                                            const EigenDecomposition& eig,
                                            const Eigen::VectorXd& bs,
                                            const Eigen::MatrixXd& alphas,
                                            const std::vector<std::vector<int>>& sets);

// Column t of residuals yields the indices with |residual| <= gamma.
std::vector<std::vector<int>> expand_sets_multi(const Eigen::MatrixXd& residuals, double gamma);

// Max-norm violation of the per-level subgradient conditions, with the hinge
// coupling evaluated at the given fit.
double nckqr_kkt_residual(const Eigen::VectorXd& y, const Eigen::MatrixXd& K,
                          const Eigen::VectorXd& bs, const Eigen::MatrixXd& alphas,
                          const NckqrProblem& problem, double band_tol);

// Sum of positive adjacent-level inversions max(0, u_t - u_{t+1}).
double crossing_magnitude(const Eigen::MatrixXd& fitted);

struct NckqrSolution {
  Eigen::VectorXd bs;
  Eigen::MatrixXd alphas;
  Eigen::MatrixXd fitted;
  std::vector<std::vector<int>> singular_sets;
  double kkt_residual = 0.0;
  double objective = 0.0;           // exact check loss plus hinge penalty at eta
  double crossing_magnitude = 0.0;  // on the training fit
  double max_mm_increase = 0.0;     // worst smoothed-objective increase observed
  double gamma_final = 0.0;
  double eta_final = 0.0;
  long mm_iterations = 0;
  int gamma_rounds = 0;
  bool certified = false;
};

// Smoothing rounds shrink gamma while eta follows max(gamma, eta_target)
// with eta_target = max(problem.eta, config.eta_floor), so the majorizer
// precondition eta >= gamma holds on every round.
NckqrSolution solve_nckqr(const Eigen::VectorXd& y, const Eigen::MatrixXd& K,
                          const EigenDecomposition& eig, const NckqrProblem& problem,
                          const SolverConfig& config = {});

inline NckqrSolution solve_nckqr(const Eigen::VectorXd& y, const KernelModel& model,
                                 const NckqrProblem& problem, const SolverConfig& config = {}) {
  return solve_nckqr(y, model.K, model.eig, problem, config);
}

}  // namespace kqr
