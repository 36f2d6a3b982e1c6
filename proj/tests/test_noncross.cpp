#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "kqr/loss.hpp"
#include "kqr/noncross.hpp"
#include "kqr/oracle.hpp"
#include "kqr/solver.hpp"
#include "test_support.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

kqr::NckqrProblem two_level_problem(double lambda1, double lambda2, double eta) {
  kqr::NckqrProblem prob;
  prob.taus.resize(2);
  prob.taus << 0.25, 0.75;
  prob.lambda1 = lambda1;
  prob.lambda2 = lambda2;
  prob.eta = eta;
  return prob;
}

}  // namespace

TEST_SUITE("noncross") {

TEST_CASE("majorizer factors reduce to the single level system at lambda1 zero") {
  test_support::Instance inst = test_support::synthetic_instance(10, 71);
  const double gamma = 0.25, lambda2 = 0.3;
  kqr::NckqrProblem prob = two_level_problem(0.0, lambda2, 0.5);
  kqr::SigmaFactors f = kqr::make_sigma_factors(inst.eig, gamma, prob, 1e-3);
  CHECK(f.A == 1.0);
  CHECK(f.eps_n == 0.0);
  kqr::SpectralFactors sp = kqr::make_spectral_factors(inst.eig, gamma, lambda2);
  kqr::RngStream rng(72);
  VectorXd z(10), alpha(10);
  for (int i = 0; i < 10; ++i) {
    z(i) = rng.uniform() - 0.4;
    alpha(i) = 0.3 * rng.normal();
  }
  VectorXd rhs = kqr::make_apgd_system_rhs(inst.K, z, alpha, lambda2);
  kqr::InverseApplyResult via_sigma = kqr::sigma_apply_inverse(f, rhs(0), rhs.tail(10));
  kqr::InverseApplyResult via_spectral = kqr::spectral_apply_inverse(sp, z, alpha);
  CHECK(std::abs(via_sigma.b - via_spectral.b) <= 1e-10);
  CHECK((via_sigma.alpha - via_spectral.alpha).lpNorm<Eigen::Infinity>() <= 1e-10);
  CHECK((via_sigma.fitted - via_spectral.fitted).lpNorm<Eigen::Infinity>() <= 1e-10);
}

TEST_CASE("majorizer apply agrees with the dense arbiter under coupling") {
  const int n = 12;
  test_support::Instance inst = test_support::synthetic_instance(n, 81);
  const double gamma = 0.2, lambda1 = 0.7, lambda2 = 0.3, ridge_eps = 1e-3;
  kqr::NckqrProblem prob = two_level_problem(lambda1, lambda2, 0.4);
  kqr::SigmaFactors f = kqr::make_sigma_factors(inst.eig, gamma, prob, ridge_eps);
  const double nd = static_cast<double>(n);
  const double A = 4.0 * lambda1 * nd + 1.0;
  const double e = lambda1 * ridge_eps * nd;
  CHECK(f.A == doctest::Approx(A).epsilon(1e-15));
  CHECK(f.eps_n == doctest::Approx(e).epsilon(1e-15));

  MatrixXd sigma(n + 1, n + 1);
  VectorXd k1 = inst.K.rowwise().sum();
  sigma(0, 0) = nd * A + e;
  sigma.row(0).tail(n) = (A * k1).transpose();
  sigma.col(0).tail(n) = A * k1;
  sigma.block(1, 1, n, n) = A * inst.K * inst.K +
                            (2.0 * nd * gamma * lambda2) * inst.K +
                            e * MatrixXd::Identity(n, n);

  kqr::RngStream rng(82);
  VectorXd rho(n + 1);
  for (int i = 0; i <= n; ++i) rho(i) = rng.normal();
  VectorXd x = kqr::dense_solve(sigma, rho);
  kqr::InverseApplyResult r = kqr::sigma_apply_inverse(f, rho(0), rho.tail(n));
  const double scale = 1.0 + x.lpNorm<Eigen::Infinity>();
  CHECK(std::abs(r.b - x(0)) / scale <= 1e-8);
  CHECK((r.alpha - x.tail(n)).lpNorm<Eigen::Infinity>() / scale <= 1e-8);
}

TEST_CASE("derivative stacks on a frozen two level fit") {
  MatrixXd fitted(2, 2);
  fitted << 0.0, 1.0, 2.0, 0.0;
  VectorXd y(2);
  y << 0.5, 1.0;
  VectorXd taus(2);
  taus << 0.25, 0.75;
  kqr::MmVectors mv = kqr::compute_mm_vectors(fitted, y, taus, 0.5, 0.25);
  CHECK(mv.z(0, 0) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(mv.z(1, 0) == doctest::Approx(-0.75).epsilon(1e-15));
  CHECK(mv.z(0, 1) == doctest::Approx(-0.25).epsilon(1e-15));
  CHECK(mv.z(1, 1) == doctest::Approx(0.75).epsilon(1e-15));
  REQUIRE(mv.q.cols() == 1);
  CHECK(mv.q(0, 0) == 0.0);
  CHECK(mv.q(1, 0) == 1.0);
}

TEST_CASE("mm step descends the smoothed objective from a rough start") {
  test_support::Instance inst = test_support::synthetic_instance(12, 91);
  kqr::NckqrProblem prob = two_level_problem(0.8, 0.2, 0.5);
  const double gamma = 0.25;
  kqr::SigmaFactors f = kqr::make_sigma_factors(inst.eig, gamma, prob, 1e-3);
  kqr::RngStream rng(92);
  VectorXd bs(2);
  bs << 0.5, -0.5;  // deliberately inverted levels
  MatrixXd alphas(12, 2);
  for (int t = 0; t < 2; ++t)
    for (int i = 0; i < 12; ++i) alphas(i, t) = 0.3 * rng.normal();
  kqr::MmState st = kqr::make_mm_state(inst.eig, bs, alphas);
  double prev = kqr::smoothed_nckqr_objective(st.bs, st.alphas, inst.y, inst.K, prob.taus,
                                              prob.lambda1, prob.lambda2, prob.eta, gamma);
  for (int sweep = 0; sweep < 25; ++sweep) {
    CHECK_NOTHROW(kqr::mm_step(st, f, inst.y, prob));
    const double now = kqr::smoothed_nckqr_objective(st.bs, st.alphas, inst.y, inst.K, prob.taus,
                                                     prob.lambda1, prob.lambda2, prob.eta, gamma);
    CHECK(now <= prev + 1e-10 * (1.0 + std::abs(prev)));
    prev = now;
  }
  CHECK(st.iter == 25);
}

TEST_CASE("mm step is stationary at the smoothed optimum") {
  test_support::Instance inst = test_support::synthetic_instance(15, 93);
  kqr::NckqrProblem prob = two_level_problem(0.6, 0.3, 0.5);
  const double gamma = 0.2;
  kqr::OracleReport rep = kqr::reference_nckqr_optimum(inst.y, inst.K, prob.taus, prob.lambda1,
                                                       prob.lambda2, prob.eta, gamma, 1e-13);
  REQUIRE(rep.converged);
  kqr::SigmaFactors f = kqr::make_sigma_factors(inst.eig, gamma, prob, 1e-3);
  kqr::MmState st = kqr::make_mm_state(inst.eig, rep.bs, rep.alphas);
  const double change = kqr::mm_step(st, f, inst.y, prob);
  CHECK(change <= 1e-6);
  CHECK((st.bs - rep.bs).lpNorm<Eigen::Infinity>() <= 1e-6);
  CHECK((st.alphas - rep.alphas).lpNorm<Eigen::Infinity>() <= 1e-6);
}

TEST_CASE("solver is certified and matches the reference objective") {
  test_support::RbfInstance inst = test_support::rbf_instance(15, 5, 103);
  for (double lambda1 : {0.0, 1.0}) {
    kqr::NckqrProblem prob = two_level_problem(lambda1, 0.1, 1e-5);
    kqr::NckqrSolution sol = kqr::solve_nckqr(inst.y, inst.model, prob);
    CHECK(sol.certified);
    CHECK(sol.kkt_residual <= 1e-5);
    CHECK(sol.max_mm_increase <= 1e-9);
    kqr::OracleReport rep = kqr::reference_nckqr_optimum(inst.y, inst.model.K, prob.taus, lambda1,
                                                         prob.lambda2, sol.eta_final);
    REQUIRE(rep.converged);
    CHECK(std::abs(sol.objective - rep.objective) <= 1e-6 * (1.0 + std::abs(rep.objective)));
  }
}

TEST_CASE("large crossing penalty collapses inversions") {
  kqr::Dataset data = kqr::simulate_heteroscedastic(80, 7);
  kqr::KernelSpec spec;
  // A quarter of the median bandwidth with a light ridge makes the levels
  // wiggly enough that independent fits genuinely cross.
  spec.sigma = 0.25 * kqr::median_heuristic_bandwidth(data.X);
  kqr::KernelModel model = kqr::build_kernel_model(data.X, spec);
  kqr::NckqrProblem prob;
  prob.taus.resize(3);
  prob.taus << 0.1, 0.5, 0.9;
  prob.lambda2 = 1e-4;
  prob.lambda1 = 0.0;
  kqr::SolverConfig cfg;
  cfg.max_outer_gamma_steps = 8;
  cfg.max_apgd_iters = 4000;
  kqr::NckqrSolution base = kqr::solve_nckqr(data.y, model, prob, cfg);
  prob.lambda1 = 1e4;
  kqr::NckqrSolution tight = kqr::solve_nckqr(data.y, model, prob, cfg);
  REQUIRE(base.crossing_magnitude > 1e-8);
  CHECK(tight.crossing_magnitude <= base.crossing_magnitude / 100.0);
}

TEST_CASE("lambda1 zero reproduces independent single level fits") {
  test_support::RbfInstance inst = test_support::rbf_instance(20, 5, 111);
  kqr::NckqrProblem prob;
  prob.taus.resize(3);
  prob.taus << 0.2, 0.5, 0.8;
  prob.lambda1 = 0.0;
  prob.lambda2 = 0.2;
  kqr::NckqrSolution joint = kqr::solve_nckqr(inst.y, inst.model, prob);
  for (int t = 0; t < 3; ++t) {
    kqr::KqrSolution single = kqr::solve_kqr(inst.y, inst.model, prob.taus(t), prob.lambda2);
    const double joint_level = kqr::kqr_objective(joint.bs(t), joint.alphas.col(t), inst.y,
                                                  inst.model.K, prob.lambda2, prob.taus(t));
    CHECK(std::abs(joint_level - single.objective) <= 1e-6 * (1.0 + std::abs(single.objective)));
  }
}

TEST_CASE("crossing magnitude sums positive inversions") {
  MatrixXd fitted(2, 2);
  fitted << 1.0, 0.0, 0.0, 1.0;
  CHECK(kqr::crossing_magnitude(fitted) == doctest::Approx(1.0).epsilon(1e-15));
  MatrixXd ordered(2, 2);
  ordered << 0.0, 1.0, -1.0, 2.0;
  CHECK(kqr::crossing_magnitude(ordered) == 0.0);
}

TEST_CASE("per level projection and expansion delegate to the single level rules") {
  test_support::Instance inst = test_support::synthetic_instance(9, 121);
  kqr::RngStream rng(122);
  VectorXd bs(2);
  bs << 0.1, 0.9;
  MatrixXd alphas(9, 2);
  for (int t = 0; t < 2; ++t)
    for (int i = 0; i < 9; ++i) alphas(i, t) = 0.2 * rng.normal();
  std::vector<std::vector<int>> sets{{0, 4}, {2}};
  std::vector<kqr::ProjectionResult> multi =
      kqr::project_multi(inst.y, inst.eig, bs, alphas, sets);
  REQUIRE(multi.size() == 2);
  for (int t = 0; t < 2; ++t) {
    kqr::ProjectionResult single =
        kqr::project_onto_constraints(inst.y, inst.eig, bs(t), alphas.col(t), sets[t]);
    CHECK(multi[t].b == doctest::Approx(single.b).epsilon(1e-14));
    CHECK((multi[t].alpha - single.alpha).lpNorm<Eigen::Infinity>() <= 1e-13);
  }
  MatrixXd residuals(3, 2);
  residuals << 0.0, 0.5, 0.5, -0.001, -0.001, 0.2;
  std::vector<std::vector<int>> expanded = kqr::expand_sets_multi(residuals, 0.01);
  REQUIRE(expanded.size() == 2);
  CHECK(expanded[0] == std::vector<int>{0, 2});
  CHECK(expanded[1] == std::vector<int>{1});
}

TEST_CASE("eta scheduling respects the problem width and the floor") {
  test_support::RbfInstance inst = test_support::rbf_instance(12, 4, 131);
  kqr::NckqrProblem prob = two_level_problem(0.5, 0.1, 1e-3);
  kqr::NckqrSolution sol = kqr::solve_nckqr(inst.y, inst.model, prob);
  CHECK(sol.eta_final == doctest::Approx(1e-3).epsilon(1e-15));
  prob.eta = 1e-7;
  kqr::NckqrSolution floored = kqr::solve_nckqr(inst.y, inst.model, prob);
  CHECK(floored.eta_final == doctest::Approx(1e-5).epsilon(1e-15));
}

TEST_CASE("non-crossing input validation") {
  test_support::Instance inst = test_support::synthetic_instance(6, 141);
  kqr::NckqrProblem bad = two_level_problem(1.0, 0.0, 1e-5);
  CHECK_THROWS_AS(kqr::solve_nckqr(inst.y, inst.K, inst.eig, bad), kqr::input_error);
  kqr::NckqrProblem prob = two_level_problem(1.0, 0.1, 1e-5);
  CHECK_THROWS_AS(kqr::make_sigma_factors(inst.eig, 0.5, prob, 1e-3), kqr::input_error);
  kqr::NckqrProblem unordered = two_level_problem(1.0, 0.1, 1e-5);
  unordered.taus << 0.75, 0.25;
  CHECK_THROWS_AS(kqr::solve_nckqr(inst.y, inst.K, inst.eig, unordered), kqr::input_error);
}

}  // TEST_SUITE
