#include "kqr/model_eval.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

#include "kqr/loss.hpp"

namespace kqr {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Deterministic Fisher-Yates; std::shuffle is not pinned down across
// standard libraries.
std::vector<int> shuffled_indices(Eigen::Index n, std::uint64_t seed) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 eng(seed);
  for (std::size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1], idx[eng() % i]);
  return idx;
}

std::vector<int> fold_assignment(Eigen::Index n, int folds, std::uint64_t seed) {
  const std::vector<int> order = shuffled_indices(n, seed);
  std::vector<int> fold_of(static_cast<std::size_t>(n));
  for (std::size_t pos = 0; pos < order.size(); ++pos)
    fold_of[static_cast<std::size_t>(order[pos])] = static_cast<int>(pos % folds);
  return fold_of;
}

struct FoldSplit {
  MatrixXd X_train, X_test;
  VectorXd y_train, y_test;
};

FoldSplit split_fold(const MatrixXd& X, const VectorXd& y, const std::vector<int>& fold_of,
                     int fold) {
  std::vector<int> tr, te;
  for (std::size_t i = 0; i < fold_of.size(); ++i)
    (fold_of[i] == fold ? te : tr).push_back(static_cast<int>(i));
  FoldSplit out;
  out.X_train.resize(tr.size(), X.cols());
  out.y_train.resize(tr.size());
  out.X_test.resize(te.size(), X.cols());
  out.y_test.resize(te.size());
  for (std::size_t i = 0; i < tr.size(); ++i) {
    out.X_train.row(i) = X.row(tr[i]);
    out.y_train(i) = y(tr[i]);
  }
  for (std::size_t i = 0; i < te.size(); ++i) {
    out.X_test.row(i) = X.row(te[i]);
    out.y_test(i) = y(te[i]);
  }
  return out;
}

void validate_cv_inputs(const MatrixXd& X, const VectorXd& y, int folds) {
  if (X.rows() != y.size()) throw input_error("cross validation: X and y row counts disagree");
  if (folds < 2) throw input_error("cross validation: need at least two folds");
  if (folds > X.rows()) throw input_error("cross validation: more folds than observations");
}

}  // namespace

VectorXd predict(const MatrixXd& X_train, const KernelSpec& spec, double b,
                 const VectorXd& alpha, const MatrixXd& X_new) {
  if (X_train.rows() != alpha.size())
    throw input_error("predict: alpha length must match training rows");
  if (X_new.cols() != X_train.cols())
    throw input_error("predict: feature dimensions disagree");
  MatrixXd K_cross = build_cross_kernel_matrix(X_new, X_train, spec);
  VectorXd out = K_cross * alpha;
  out.array() += b;
  return out;
}

double pinball_loss(const VectorXd& y, const VectorXd& predictions, double tau) {
  if (y.size() != predictions.size()) throw input_error("pinball loss: size mismatch");
  if (y.size() == 0) throw input_error("pinball loss: empty sample");
  if (tau <= 0.0 || tau >= 1.0) throw input_error("pinball loss: tau must lie in (0,1)");
  KahanSum acc;
  for (Eigen::Index i = 0; i < y.size(); ++i) acc.add(check_loss(y(i) - predictions(i), tau));
  return acc.value() / static_cast<double>(y.size());
}

CvResult cross_validate(const MatrixXd& X, const VectorXd& y, double tau,
                        const VectorXd& lambdas, int folds, std::uint64_t seed,
                        const KernelSpec& spec, const SolverConfig& cfg) {
  validate_cv_inputs(X, y, folds);
  if (lambdas.size() == 0) throw input_error("cross validation: empty lambda grid");

  CvResult res;
  res.lambdas = lambdas;
  res.fold_losses = MatrixXd::Zero(lambdas.size(), folds);
  const std::vector<int> fold_of = fold_assignment(X.rows(), folds, seed);

  for (int fold = 0; fold < folds; ++fold) {
    FoldSplit sp = split_fold(X, y, fold_of, fold);
    KernelModel km = build_kernel_model(sp.X_train, spec);
    PathResult path = solve_kqr_path(sp.y_train, km.K, km.eig, tau, lambdas, cfg);
    MatrixXd K_cross = build_cross_kernel_matrix(sp.X_test, sp.X_train, spec);
    for (Eigen::Index i = 0; i < lambdas.size(); ++i) {
      const KqrSolution& sol = path.solutions[static_cast<std::size_t>(i)];
      VectorXd pred = K_cross * sol.alpha;
      pred.array() += sol.b;
      res.fold_losses(i, fold) = pinball_loss(sp.y_test, pred, tau);
    }
  }

  res.mean_losses = res.fold_losses.rowwise().mean();
  res.best_index = 0;
  for (Eigen::Index i = 1; i < lambdas.size(); ++i)
    if (res.mean_losses(i) < res.mean_losses(res.best_index))
      res.best_index = static_cast<int>(i);
  res.best_lambda = lambdas(res.best_index);
  res.best_loss = res.mean_losses(res.best_index);
  return res;
}

NckqrCvResult cross_validate_nckqr(const MatrixXd& X, const VectorXd& y, const VectorXd& taus,
                                   double lambda1, const VectorXd& lambda2s, double eta,
                                   int folds, std::uint64_t seed, const KernelSpec& spec,
                                   const SolverConfig& cfg) {
  validate_cv_inputs(X, y, folds);
  validate_taus(taus);
  if (lambda2s.size() == 0) throw input_error("cross validation: empty lambda2 grid");

  NckqrCvResult res;
  res.lambda2s = lambda2s;
  res.fold_losses = MatrixXd::Zero(lambda2s.size(), folds);
  const std::vector<int> fold_of = fold_assignment(X.rows(), folds, seed);

  for (int fold = 0; fold < folds; ++fold) {
    FoldSplit sp = split_fold(X, y, fold_of, fold);
    KernelModel km = build_kernel_model(sp.X_train, spec);
    MatrixXd K_cross = build_cross_kernel_matrix(sp.X_test, sp.X_train, spec);
    for (Eigen::Index i = 0; i < lambda2s.size(); ++i) {
      NckqrProblem prob;
      prob.taus = taus;
      prob.lambda1 = lambda1;
      prob.lambda2 = lambda2s(i);
      prob.eta = eta;
      NckqrSolution sol = solve_nckqr(sp.y_train, km.K, km.eig, prob, cfg);
      KahanSum acc;
      for (Eigen::Index t = 0; t < taus.size(); ++t) {
        VectorXd pred = K_cross * sol.alphas.col(t);
        pred.array() += sol.bs(t);
        acc.add(pinball_loss(sp.y_test, pred, taus(t)));
      }
      res.fold_losses(i, fold) = acc.value() / static_cast<double>(taus.size());
    }
  }

  res.mean_losses = res.fold_losses.rowwise().mean();
  res.best_index = 0;
  for (Eigen::Index i = 1; i < lambda2s.size(); ++i)
    if (res.mean_losses(i) < res.mean_losses(res.best_index))
      res.best_index = static_cast<int>(i);
  res.best_lambda2 = lambda2s(res.best_index);
  res.best_loss = res.mean_losses(res.best_index);
  return res;
}

}  // namespace kqr
