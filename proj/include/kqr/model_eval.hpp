#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "kqr/kernel.hpp"
#include "kqr/noncross.hpp"
#include "kqr/solver.hpp"

namespace kqr {

// Quantile predictions b + k(x, X_train)' alpha at new points.
Eigen::VectorXd predict(const Eigen::MatrixXd& X_train, const KernelSpec& spec, double b,
                        const Eigen::VectorXd& alpha, const Eigen::MatrixXd& X_new);

// Mean check loss of predictions against observed responses.
double pinball_loss(const Eigen::VectorXd& y, const Eigen::VectorXd& predictions, double tau);

struct CvResult {
  Eigen::VectorXd lambdas;
  Eigen::VectorXd mean_losses;  // held-out pinball loss per lambda
  Eigen::MatrixXd fold_losses;  // lambdas x folds
  int best_index = 0;
  double best_lambda = 0.0;
  double best_loss = 0.0;
};

// K-fold cross validation over a lambda grid. The kernel bandwidth in spec is
// fixed by the caller and shared by every fold; folds come from a seeded
// shuffle with round-robin assignment. Ties keep the earliest grid entry, so
// a descending grid prefers the stronger penalty.
CvResult cross_validate(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double tau,
                        const Eigen::VectorXd& lambdas, int folds, std::uint64_t seed,
                        const KernelSpec& spec, const SolverConfig& config = {});

struct NckqrCvResult {
  Eigen::VectorXd lambda2s;
  Eigen::VectorXd mean_losses;  // pinball loss averaged over levels and folds
  Eigen::MatrixXd fold_losses;
  int best_index = 0;
  double best_lambda2 = 0.0;
  double best_loss = 0.0;
};

NckqrCvResult cross_validate_nckqr(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                   const Eigen::VectorXd& taus, double lambda1,
                                   const Eigen::VectorXd& lambda2s, double eta, int folds,
                                   std::uint64_t seed, const KernelSpec& spec,
                                   const SolverConfig& config = {});

}  // namespace kqr
