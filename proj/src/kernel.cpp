#include "kqr/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace kqr {

double rbf_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& x_prime, double sigma) {
  if (x.size() != x_prime.size())
    throw input_error("rbf_kernel: dimension mismatch (" + std::to_string(x.size()) + " vs " +
                      std::to_string(x_prime.size()) + ")");
  if (!(sigma > 0.0)) throw input_error("rbf_kernel: sigma must be positive");
  const double d2 = (x - x_prime).squaredNorm();
  return std::exp(-d2 / (2.0 * sigma * sigma));
}

double kernel_value(const Eigen::VectorXd& x, const Eigen::VectorXd& x_prime, const KernelSpec& spec) {
  if (spec.kind == KernelKind::rbf) return rbf_kernel(x, x_prime, spec.sigma);
  if (x.size() != x_prime.size()) throw input_error("kernel_value: dimension mismatch");
  return x.dot(x_prime);
}

Eigen::MatrixXd build_kernel_matrix(const Eigen::MatrixXd& X, const KernelSpec& spec) {
  const Eigen::Index n = X.rows();
  if (n < 1) throw input_error("build_kernel_matrix: need at least one row");
  if (!X.allFinite()) throw input_error("build_kernel_matrix: non-finite input");
  if (spec.kind == KernelKind::rbf && !(spec.sigma > 0.0))
    throw input_error("build_kernel_matrix: sigma must be positive");

  Eigen::MatrixXd K(n, n);
  const double inv2s2 =
      spec.kind == KernelKind::rbf ? 1.0 / (2.0 * spec.sigma * spec.sigma) : 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    K(i, i) = spec.kind == KernelKind::rbf ? 1.0 : X.row(i).squaredNorm();
    for (Eigen::Index j = i + 1; j < n; ++j) {
      double kij;
      if (spec.kind == KernelKind::rbf) {
        const double d2 = (X.row(i) - X.row(j)).squaredNorm();
        kij = std::exp(-d2 * inv2s2);
      } else {
        kij = X.row(i).dot(X.row(j));
      }
      K(i, j) = kij;
      K(j, i) = kij;
    }
  }
  return K;
}

Eigen::MatrixXd build_cross_kernel_matrix(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                                          const KernelSpec& spec) {
  if (A.cols() != B.cols()) throw input_error("build_cross_kernel_matrix: column mismatch");
  if (!A.allFinite() || !B.allFinite())
    throw input_error("build_cross_kernel_matrix: non-finite input");
  Eigen::MatrixXd K(A.rows(), B.rows());
  if (spec.kind == KernelKind::linear) {
    K = A * B.transpose();
    return K;
  }
  if (!(spec.sigma > 0.0)) throw input_error("build_cross_kernel_matrix: sigma must be positive");
  const double inv2s2 = 1.0 / (2.0 * spec.sigma * spec.sigma);
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < B.rows(); ++j)
      K(i, j) = std::exp(-(A.row(i) - B.row(j)).squaredNorm() * inv2s2);
  return K;
}

double median_heuristic_bandwidth(const Eigen::MatrixXd& X) {
  const Eigen::Index n = X.rows();
  if (n < 2) throw input_error("median_heuristic_bandwidth: need at least two rows");
  std::vector<double> dists;
  dists.reserve(static_cast<size_t>(n) * (n - 1) / 2);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      dists.push_back((X.row(i) - X.row(j)).norm());
  std::sort(dists.begin(), dists.end());
  if (dists.back() == 0.0)
    throw input_error("median_heuristic_bandwidth: all pairwise distances are zero");
  const size_t m = dists.size();
  // Even count takes the midpoint of the two central order statistics.
  return m % 2 == 1 ? dists[m / 2] : 0.5 * (dists[m / 2 - 1] + dists[m / 2]);
}

EigenDecomposition eigendecompose(const Eigen::MatrixXd& K) {
  if (K.rows() != K.cols()) throw input_error("eigendecompose: matrix not square");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(K);
  if (es.info() != Eigen::Success)
    throw numerical_error("eigendecompose: eigensolver did not converge (n=" +
                          std::to_string(K.rows()) + ")");
  const Eigen::Index n = K.rows();
  EigenDecomposition eig;
  eig.U.resize(n, n);
  eig.lambda.resize(n);
  // Eigen returns ascending order; store nonincreasing.
  for (Eigen::Index j = 0; j < n; ++j) {
    eig.U.col(j) = es.eigenvectors().col(n - 1 - j);
    eig.lambda(j) = es.eigenvalues()(n - 1 - j);
  }
  const double lam_max = eig.lambda(0);
  if (!(lam_max > 0.0))
    throw numerical_error("eigendecompose: kernel matrix has no positive eigenvalue");
  const double floor_val = kEigFloorRel * lam_max;
  eig.lambda = eig.lambda.cwiseMax(floor_val);
  return eig;
}

KernelModel build_kernel_model(const Eigen::MatrixXd& X, const KernelSpec& spec) {
  KernelModel model;
  model.spec = spec;
  model.K = build_kernel_matrix(X, spec);
  model.eig = eigendecompose(model.K);
  return model;
}

}  // namespace kqr
