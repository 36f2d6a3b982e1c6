#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "kqr/errors.hpp"
#include "kqr/kernel.hpp"

namespace kqr {

struct Dataset {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  std::vector<std::string> column_names;  // empty when the file had no header
};

// Comma-separated values with an auto-detected header row; the last column is
// the response. Unparsable or missing cells raise input errors that name the
// row and column.
Dataset load_csv(const std::string& path);
void save_csv(const std::string& path, const Dataset& data);

struct StandardizationStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd sd;
};

// Column means and sample standard deviations; constant columns get unit
// scale so they standardize to zero instead of dividing by zero.
StandardizationStats compute_standardization(const Eigen::MatrixXd& X);
void apply_standardization(Eigen::MatrixXd& X, const StandardizationStats& stats);

// Uniform and normal variates built from the raw 64-bit stream, so identical
// seeds give identical data on every standard library.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : eng_(seed) {}
  double uniform();  // [0, 1), 53-bit resolution
  double normal();   // standard normal via Box-Muller

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Correlated Gaussian features with geometrically decaying signs-alternating
// coefficients; the signal is scaled to the requested signal-to-noise ratio
// against unit Gaussian noise.
Dataset simulate_friedman(int n, int p, double snr, std::uint64_t seed);

// Two uniform features driving a ratio of Gaussian bumps, unit noise.
Dataset simulate_yuan(int n, std::uint64_t seed);

// One uniform feature; a sine mean with noise scale growing in x.
Dataset simulate_heteroscedastic(int n, std::uint64_t seed);

// On-disk fitted model, format_version 1. Multi-level fits store one
// intercept and coefficient column per quantile level.
struct SavedModel {
  std::string model_type;  // "kqr" or "nckqr"
  KernelSpec kernel;
  bool standardized = false;
  StandardizationStats stats;  // empty vectors when standardized is false
  Eigen::VectorXd taus;
  double lambda = 0.0;   // kqr
  double lambda1 = 0.0;  // nckqr
  double lambda2 = 0.0;  // nckqr
  double eta = 0.0;      // nckqr
  Eigen::VectorXd bs;
  Eigen::MatrixXd alphas;   // n x T
  Eigen::MatrixXd x_train;  // in model coordinates (post standardization)
};

void save_model(const std::string& path, const SavedModel& model);
SavedModel load_model(const std::string& path);

// Writes through a temporary file in the same directory plus rename, so
// readers never observe partial content.
void write_file_atomic(const std::string& path, const std::string& content);

}  // namespace kqr
