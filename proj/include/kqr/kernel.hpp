#pragma once

#include <Eigen/Dense>

#include "kqr/errors.hpp"

namespace kqr {

enum class KernelKind { rbf, linear };

// Kernel family and its bandwidth. sigma is ignored for the linear kernel.
struct KernelSpec {
  KernelKind kind = KernelKind::rbf;
  double sigma = 1.0;
};

// Eigenvalues below eig_floor_rel * lambda_max are clamped to the floor so
// that K-pseudo-solves and the spectral denominators stay well posed.
inline constexpr double kEigFloorRel = 1e-10;

// K = U diag(lambda) U' with orthonormal U and floored, nonincreasing lambda.
struct EigenDecomposition {
  Eigen::MatrixXd U;
  Eigen::VectorXd lambda;

  Eigen::Index n() const { return lambda.size(); }
};

// exp(-||x - x'||^2 / (2 sigma^2)); equals 1 iff x == x'.
double rbf_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& x_prime, double sigma);

// Kernel value under spec (RBF or plain inner product).
double kernel_value(const Eigen::VectorXd& x, const Eigen::VectorXd& x_prime, const KernelSpec& spec);

// n x n symmetric kernel matrix; upper triangle computed and mirrored, so
// symmetry is exact. RBF diagonal is exactly 1.
Eigen::MatrixXd build_kernel_matrix(const Eigen::MatrixXd& X, const KernelSpec& spec);

// Cross-kernel matrix K[i][j] = K(A_i, B_j), rows of A against rows of B.
Eigen::MatrixXd build_cross_kernel_matrix(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                                          const KernelSpec& spec);

// Median of all n(n-1)/2 pairwise Euclidean row distances.
// Throws degenerate-data error when every pairwise distance is zero.
double median_heuristic_bandwidth(const Eigen::MatrixXd& X);

// Symmetric eigendecomposition with eigenvalues floored at
// kEigFloorRel * lambda_max and sorted nonincreasing.
EigenDecomposition eigendecompose(const Eigen::MatrixXd& K);

// Kernel spec, kernel matrix, and its eigendecomposition, computed once and
// shared read-only by every solve.
struct KernelModel {
  KernelSpec spec;
  Eigen::MatrixXd K;
  EigenDecomposition eig;

  Eigen::Index n() const { return K.rows(); }
};

KernelModel build_kernel_model(const Eigen::MatrixXd& X, const KernelSpec& spec);

}  // namespace kqr
