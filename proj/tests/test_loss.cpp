#include <Eigen/Dense>
#include <cmath>

#include "doctest.h"
#include "kqr/loss.hpp"
#include "test_support.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST_SUITE("loss") {

TEST_CASE("check loss pins both slopes") {
  CHECK(kqr::check_loss(2.0, 0.3) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(kqr::check_loss(-2.0, 0.3) == doctest::Approx(1.4).epsilon(1e-15));
  CHECK(kqr::check_loss(0.0, 0.3) == 0.0);
}

TEST_CASE("smoothed check sandwich holds over scales") {
  kqr::RngStream rng(17);
  for (int trial = 0; trial < 20000; ++trial) {
    const double gamma = std::pow(10.0, -6.0 * rng.uniform());
    const double tau = 0.01 + 0.98 * rng.uniform();
    const double t = (rng.uniform() - 0.5) * 10.0 * std::pow(10.0, 3.0 * rng.uniform() - 1.5) * gamma;
    const double diff = kqr::smoothed_check(t, tau, gamma) - kqr::check_loss(t, tau);
    CHECK(diff >= -1e-16);
    CHECK(diff <= gamma / 4.0 * (1.0 + 1e-12) + 1e-300);
  }
}

TEST_CASE("smoothed check branches agree at the seams") {
  const double tau = 0.3, gamma = 0.5;
  const double middle_hi = gamma * gamma / (4.0 * gamma) + gamma * (tau - 0.5) + gamma / 4.0;
  CHECK(kqr::smoothed_check(gamma, tau, gamma) == doctest::Approx(middle_hi).epsilon(1e-15));
  CHECK(middle_hi == doctest::Approx(tau * gamma).epsilon(1e-15));
  const double middle_lo = gamma * gamma / (4.0 * gamma) - gamma * (tau - 0.5) + gamma / 4.0;
  CHECK(kqr::smoothed_check(-gamma, tau, gamma) == doctest::Approx(middle_lo).epsilon(1e-15));
  CHECK(middle_lo == doctest::Approx((tau - 1.0) * (-gamma)).epsilon(1e-15));
  CHECK(kqr::smoothed_check_deriv(gamma, tau, gamma) == doctest::Approx(tau).epsilon(1e-15));
  CHECK(kqr::smoothed_check_deriv(-gamma, tau, gamma) == doctest::Approx(tau - 1.0).epsilon(1e-15));
  CHECK(kqr::smoothed_check(0.0, tau, gamma) == doctest::Approx(gamma / 4.0).epsilon(1e-15));
}

TEST_CASE("smoothed check derivative matches finite differences") {
  const double h = 1e-7;
  for (double tau : {0.1, 0.5, 0.9}) {
    for (double gamma : {0.25, 1.0}) {
      for (double t : {-3.0, -0.4, -0.05, 0.0, 0.02, 0.7, 2.5}) {
        const double fd = (kqr::smoothed_check(t + h, tau, gamma) -
                           kqr::smoothed_check(t - h, tau, gamma)) /
                          (2.0 * h);
        CHECK(kqr::smoothed_check_deriv(t, tau, gamma) == doctest::Approx(fd).epsilon(1e-6));
        const double d = kqr::smoothed_check_deriv(t, tau, gamma);
        CHECK(d >= tau - 1.0 - 1e-15);
        CHECK(d <= tau + 1e-15);
      }
    }
  }
}

TEST_CASE("smooth relu bridges zero and identity") {
  const double eta = 0.25;
  CHECK(kqr::smooth_relu(1.0, eta) == 1.0);
  CHECK(kqr::smooth_relu(-1.0, eta) == 0.0);
  CHECK(kqr::smooth_relu(0.0, eta) == doctest::Approx(eta / 4.0).epsilon(1e-15));
  CHECK(kqr::smooth_relu(eta, eta) == doctest::Approx(eta).epsilon(1e-15));
  CHECK(kqr::smooth_relu(-eta, eta) == doctest::Approx(0.0).epsilon(1e-15));
  kqr::RngStream rng(3);
  for (int trial = 0; trial < 5000; ++trial) {
    const double t = (rng.uniform() - 0.5) * 4.0;
    const double diff = kqr::smooth_relu(t, eta) - std::max(0.0, t);
    CHECK(diff >= -1e-16);
    CHECK(diff <= eta / 4.0 + 1e-16);
    const double d = kqr::smooth_relu_deriv(t, eta);
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
  }
}

TEST_CASE("kqr objective on a frozen two point problem") {
  VectorXd y(2), alpha(2);
  y << 1.0, -1.0;
  alpha << 0.25, -0.25;
  MatrixXd K = MatrixXd::Identity(2, 2);
  const double b = 0.5, lambda = 0.5, tau = 0.3;
  CHECK(kqr::kqr_objective(b, alpha, y, K, lambda, tau) ==
        doctest::Approx(0.50625).epsilon(1e-15));
  CHECK(kqr::smoothed_kqr_objective(b, alpha, y, K, lambda, tau, 0.5) ==
        doctest::Approx(0.521875).epsilon(1e-15));
  VectorXd r = y - VectorXd::Constant(2, b) - K * alpha;
  const double ridge = 0.5 * lambda * alpha.dot(K * alpha);
  CHECK(kqr::kqr_objective_from_residuals(r, tau, ridge) ==
        doctest::Approx(0.50625).epsilon(1e-15));
  CHECK(kqr::smoothed_kqr_objective_from_residuals(r, tau, 0.5, ridge) ==
        doctest::Approx(0.521875).epsilon(1e-15));
}

TEST_CASE("nckqr objective on a frozen crossing pair") {
  VectorXd y(1);
  y << 0.0;
  MatrixXd K = MatrixXd::Identity(1, 1);
  VectorXd taus(2);
  taus << 0.25, 0.75;
  VectorXd bs(2);
  bs << 1.0, 0.0;
  MatrixXd alphas = MatrixXd::Zero(1, 2);
  const double lambda1 = 2.0, lambda2 = 1.0, eta = 0.5;
  CHECK(kqr::nckqr_objective(bs, alphas, y, K, taus, lambda1, lambda2, eta) ==
        doctest::Approx(2.75).epsilon(1e-15));
  CHECK(kqr::smoothed_nckqr_objective(bs, alphas, y, K, taus, lambda1, lambda2, eta, 0.5) ==
        doctest::Approx(2.875).epsilon(1e-15));
  MatrixXd u(1, 2);
  u << 1.0, 0.0;
  VectorXd ridges = VectorXd::Zero(2);
  CHECK(kqr::smoothed_nckqr_objective_from_fitted(u, y, taus, ridges, lambda1, eta, 0.5) ==
        doctest::Approx(2.875).epsilon(1e-15));
}

TEST_CASE("nckqr objective decouples without the crossing penalty") {
  test_support::Instance inst = test_support::synthetic_instance(8, 33);
  VectorXd taus(3);
  taus << 0.2, 0.5, 0.8;
  kqr::RngStream rng(34);
  VectorXd bs(3);
  MatrixXd alphas(8, 3);
  for (int t = 0; t < 3; ++t) {
    bs(t) = rng.normal();
    for (int i = 0; i < 8; ++i) alphas(i, t) = 0.3 * rng.normal();
  }
  const double lambda2 = 0.4;
  double sum = 0.0;
  for (int t = 0; t < 3; ++t)
    sum += kqr::kqr_objective(bs(t), alphas.col(t), inst.y, inst.K, lambda2, taus(t));
  const double joint = kqr::nckqr_objective(bs, alphas, inst.y, inst.K, taus, 0.0, lambda2, 1e-4);
  CHECK(joint == doctest::Approx(sum).epsilon(1e-13));
}

TEST_CASE("tau validation") {
  VectorXd good(3);
  good << 0.1, 0.5, 0.9;
  CHECK_NOTHROW(kqr::validate_taus(good));
  VectorXd empty(0);
  CHECK_THROWS_AS(kqr::validate_taus(empty), kqr::input_error);
  VectorXd unsorted(2);
  unsorted << 0.5, 0.4;
  CHECK_THROWS_AS(kqr::validate_taus(unsorted), kqr::input_error);
  VectorXd duplicated(2);
  duplicated << 0.5, 0.5;
  CHECK_THROWS_AS(kqr::validate_taus(duplicated), kqr::input_error);
  VectorXd out_of_range(1);
  out_of_range << 1.0;
  CHECK_THROWS_AS(kqr::validate_taus(out_of_range), kqr::input_error);
}

TEST_CASE("empirical quantile interpolates order statistics") {
  VectorXd y(3);
  y << 3.0, 1.0, 2.0;
  CHECK(kqr::empirical_quantile(y, 0.5) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(kqr::empirical_quantile(y, 0.25) == doctest::Approx(1.5).epsilon(1e-15));
  VectorXd quad(4);
  quad << 1.0, 2.0, 3.0, 4.0;
  CHECK(kqr::empirical_quantile(quad, 0.5) == doctest::Approx(2.5).epsilon(1e-15));
  VectorXd single(1);
  single << 7.0;
  CHECK(kqr::empirical_quantile(single, 0.3) == doctest::Approx(7.0).epsilon(1e-15));
  VectorXd empty(0);
  CHECK_THROWS_AS(kqr::empirical_quantile(empty, 0.5), kqr::input_error);
  CHECK_THROWS_AS(kqr::empirical_quantile(y, 0.0), kqr::input_error);
}

TEST_CASE("kahan accumulator keeps small addends") {
  kqr::KahanSum acc;
  acc.add(1.0);
  for (int i = 0; i < 10; ++i) acc.add(1e-16);
  acc.add(-1.0);
  // Naive left-to-right summation returns exactly zero here.
  CHECK(acc.value() > 5e-16);
  CHECK(acc.value() < 2e-15);
}

}  // TEST_SUITE
