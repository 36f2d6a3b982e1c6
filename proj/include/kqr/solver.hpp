#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "kqr/errors.hpp"
#include "kqr/kernel.hpp"

namespace kqr {

struct SolverConfig {
  double gamma_init = 1.0;
  double gamma_shrink = 0.25;
  double eta_floor = 1e-5;           // smallest smooth-relu width for non-crossing fits
  int max_outer_gamma_steps = 12;
  long max_apgd_iters = 20000;       // per inner run; also caps MM iterations
  double apgd_tol = 1e-8;            // max-norm fitted-value change between iterates
  double kkt_tol = 1e-5;
  long certificate_check_every = 200;  // inner iterations between certificate probes; 0 probes only at round ends
  double singular_band_tol = 1e-8;   // residual band treated as interpolated
  double ridge_eps = 1e-3;           // epsilon in the non-crossing majorizer
  bool project_every_iter = false;   // interpolate after every accelerated step
  // Called after each set-expansion round with the smoothing round index and
  // the current singular set (0-based, sorted).
  std::function<void(int, const std::vector<int>&)> set_observer;
};

// Cached quantities for applying P^{-1} in the eigenbasis of K, where
// P = [[n, 1'K], [K1, K^2 + 2 n gamma lambda K]]. Valid for one
// (gamma, lambda) pair; holds a pointer into the caller's decomposition.
struct SpectralFactors {
  const EigenDecomposition* eig = nullptr;
  double gamma = 0.0;
  double lambda = 0.0;
  Eigen::VectorXd pil;    // 1 / (lam_j + 2 n gamma lambda), equals Pi^{-1} Lambda
  Eigen::VectorXd ut1;    // U' 1
  Eigen::VectorXd v_eig;  // pil .* ut1, eigen coordinates of v
  Eigen::VectorXd vl;     // lam .* v_eig, for the crossing inner product v'Kw
  Eigen::VectorXd kv;     // K v, reused by fitted-value updates
  double g = 0.0;         // inverse Schur complement of the intercept row
};

SpectralFactors make_spectral_factors(const EigenDecomposition& eig, double gamma, double lambda);

struct InverseApplyResult {
  double b = 0.0;
  Eigen::VectorXd alpha;
  Eigen::VectorXd fitted;  // b 1 + K alpha for the returned increment
};

// Solves P x = zeta(z, alpha) with zeta = (1'z; K(z - n lambda alpha)).
InverseApplyResult spectral_apply_inverse(const SpectralFactors& factors,
                                          const Eigen::VectorXd& z, const Eigen::VectorXd& alpha);

// Dense counterparts used by the refactorization baseline and by tests.
Eigen::MatrixXd make_apgd_system_matrix(const Eigen::MatrixXd& K, double gamma, double lambda);
Eigen::VectorXd make_apgd_system_rhs(const Eigen::MatrixXd& K, const Eigen::VectorXd& z,
                                     const Eigen::VectorXd& alpha, double lambda);

// One accelerated proximal step on the gamma-smoothed objective. State fields
// hold the current and previous iterates plus their fitted values; fitted
// values are advanced incrementally.
struct ApgdState {
  double b = 0.0;
  double b_prev = 0.0;
  Eigen::VectorXd alpha;
  Eigen::VectorXd alpha_prev;
  Eigen::VectorXd fitted;
  Eigen::VectorXd fitted_prev;
  double momentum_c = 1.0;
  long iter = 0;
};

ApgdState make_apgd_state(const EigenDecomposition& eig, double b, const Eigen::VectorXd& alpha);

// Returns the max-norm fitted-value change of the step.
double apgd_step(ApgdState& state, const SpectralFactors& factors, const Eigen::VectorXd& y,
                 double tau);

struct ApgdResult {
  long iterations = 0;
  bool converged = false;
  double last_change = 0.0;
};

ApgdResult apgd_run(ApgdState& state, const SpectralFactors& factors, const Eigen::VectorXd& y,
                    double tau, const SolverConfig& config);

struct ProjectionResult {
  double b = 0.0;
  Eigen::VectorXd alpha;
};

// Interpolates y exactly on the index set: the intercept absorbs the mean
// residual over the set and alpha solves K alpha = theta with theta equal to
// y - b on the set and to the current fit elsewhere. Idempotent.
ProjectionResult project_onto_constraints(const Eigen::VectorXd& y, const EigenDecomposition& eig,
                                          double b, const Eigen::VectorXd& alpha,
                                          const std::vector<int>& set);

// Indices with |residual| <= gamma, 0-based and sorted.
std::vector<int> expand_singular_set(const Eigen::VectorXd& residuals, double gamma);

// Box-constrained least squares over the dual values of residuals inside the
// band: inactive duals are pinned at tau - 1{r<0}, banded ones range over
// [tau - 1, tau]. Measures the best attainable violation of
// (1/n) K s = alpha_target and (1/n) 1's = b_target in max norm. When
// dual_out is given it receives the minimizing dual vector s.
double dual_stationarity_gap(const Eigen::MatrixXd& K, const Eigen::VectorXd& residuals,
                             double tau, const Eigen::VectorXd& alpha_target, double b_target,
                             double band_tol, Eigen::VectorXd* dual_out = nullptr);

// Max-norm violation of the subgradient stationarity conditions. Residuals
// within band_tol of zero get a free dual value in [tau - 1, tau]; the free
// values are chosen by box-constrained least squares and reported through
// dual_out when given.
double kkt_residual(const Eigen::VectorXd& y, const Eigen::MatrixXd& K, double b,
                    const Eigen::VectorXd& alpha, double tau, double lambda, double band_tol,
                    Eigen::VectorXd* dual_out = nullptr);

struct KqrSolution {
  double b = 0.0;
  Eigen::VectorXd alpha;
  std::vector<int> singular_set;  // 0-based, sorted
  double kkt_residual = 0.0;
  double objective = 0.0;         // exact check-loss objective at the solution
  double gamma_final = 0.0;
  long apgd_iterations = 0;
  int gamma_rounds = 0;
  bool certified = false;
};

KqrSolution solve_kqr(const Eigen::VectorXd& y, const Eigen::MatrixXd& K,
                      const EigenDecomposition& eig, double tau, double lambda,
                      const SolverConfig& config = {});

inline KqrSolution solve_kqr(const Eigen::VectorXd& y, const KernelModel& model, double tau,
                             double lambda, const SolverConfig& config = {}) {
  return solve_kqr(y, model.K, model.eig, tau, lambda, config);
}

// The dense strategy assembles and LDLT-factorizes P afresh for every
// (gamma, lambda) pair; it exists as the timing baseline for the eigenbasis
// path and must produce the same solutions.
enum class PathStrategy { spectral, dense_refactor };

struct PathResult {
  Eigen::VectorXd lambdas;
  std::vector<KqrSolution> solutions;
};

PathResult solve_kqr_path(const Eigen::VectorXd& y, const Eigen::MatrixXd& K,
                          const EigenDecomposition& eig, double tau,
                          const Eigen::VectorXd& lambdas, const SolverConfig& config = {},
                          PathStrategy strategy = PathStrategy::spectral);

// 50 logarithmically spaced values from 1 down to 1e-4.
Eigen::VectorXd make_default_lambda_grid();

namespace detail {

// Coefficients along floored eigendirections are artifacts of the in-loop
// pseudo-solves: the fit is blind to them while the ridge term charges for
// them in full. Dropping that energy never raises the ridge and moves the
// fitted values by at most the floored spectrum times the dropped mass.
void drop_floored_components(const EigenDecomposition& eig, Eigen::VectorXd& alpha);

// The in-loop projection interpolates in the floored eigenbasis, which leaves
// residue on the set under the true kernel. This output-side polish solves the
// small principal subsystem K[set,set] so the set residuals vanish under K
// itself; skipped when the subsystem is too ill-conditioned to help.
void correct_singular_residuals(const Eigen::MatrixXd& K, const Eigen::VectorXd& y, double b,
                                Eigen::VectorXd& alpha, const std::vector<int>& set);

}  // namespace detail

}  // namespace kqr
