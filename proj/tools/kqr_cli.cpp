#include <algorithm>
#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "kqr/data_io.hpp"
#include "kqr/errors.hpp"
#include "kqr/kernel.hpp"
#include "kqr/model_eval.hpp"
#include "kqr/noncross.hpp"
#include "kqr/solver.hpp"

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string fmt_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

kqr::KernelSpec make_kernel_spec(const std::string& kind, double sigma, const MatrixXd& X) {
  kqr::KernelSpec spec;
  spec.kind = kind == "linear" ? kqr::KernelKind::linear : kqr::KernelKind::rbf;
  if (spec.kind == kqr::KernelKind::rbf)
    spec.sigma = sigma > 0.0 ? sigma : kqr::median_heuristic_bandwidth(X);
  return spec;
}

void write_table(const std::string& path, const std::vector<std::string>& names,
                 const MatrixXd& columns) {
  std::ostringstream out;
  for (std::size_t j = 0; j < names.size(); ++j) {
    if (j > 0) out << ',';
    out << names[j];
  }
  out << '\n';
  for (Eigen::Index i = 0; i < columns.rows(); ++i) {
    for (Eigen::Index j = 0; j < columns.cols(); ++j) {
      if (j > 0) out << ',';
      out << fmt_full(columns(i, j));
    }
    out << '\n';
  }
  kqr::write_file_atomic(path, out.str());
}

struct FitOptions {
  std::string data_path;
  std::vector<double> taus;
  std::string kernel = "rbf";
  double sigma = 0.0;
  double lambda = 0.1;
  double lambda1 = 1.0;
  double lambda2 = 0.1;
  double eta = 1e-5;
  bool no_standardize = false;
  double kkt_tol = 1e-5;
  long max_iters = 20000;
  std::string out = "model.json";
  std::string curves_path;
};

void run_fit(const FitOptions& opt) {
  kqr::Dataset data = kqr::load_csv(opt.data_path);
  MatrixXd X = data.X;
  kqr::SavedModel saved;
  saved.standardized = !opt.no_standardize;
  if (saved.standardized) {
    saved.stats = kqr::compute_standardization(X);
    kqr::apply_standardization(X, saved.stats);
  }
  saved.kernel = make_kernel_spec(opt.kernel, opt.sigma, X);
  saved.x_train = X;

  kqr::KernelModel model = kqr::build_kernel_model(X, saved.kernel);
  kqr::SolverConfig config;
  config.kkt_tol = opt.kkt_tol;
  config.max_apgd_iters = opt.max_iters;

  std::vector<double> taus = opt.taus.empty() ? std::vector<double>{0.5} : opt.taus;
  std::sort(taus.begin(), taus.end());
  saved.taus = Eigen::Map<const VectorXd>(taus.data(), static_cast<Eigen::Index>(taus.size()));

  bool certified = false;
  double kkt = 0.0;
  if (taus.size() == 1) {
    kqr::KqrSolution sol = kqr::solve_kqr(data.y, model, taus[0], opt.lambda, config);
    saved.model_type = "kqr";
    saved.lambda = opt.lambda;
    saved.bs = VectorXd::Constant(1, sol.b);
    saved.alphas = sol.alpha;
    certified = sol.certified;
    kkt = sol.kkt_residual;
    std::cout << "kqr fit: n=" << data.y.size() << " tau=" << fmt(taus[0])
              << " lambda=" << fmt(opt.lambda) << " sigma=" << fmt(saved.kernel.sigma)
              << " objective=" << fmt(sol.objective) << " kkt=" << fmt(sol.kkt_residual)
              << " iters=" << sol.apgd_iterations << "\n";
  } else {
    kqr::NckqrProblem prob;
    prob.taus = saved.taus;
    prob.lambda1 = opt.lambda1;
    prob.lambda2 = opt.lambda2;
    prob.eta = opt.eta;
    kqr::NckqrSolution sol = kqr::solve_nckqr(data.y, model, prob, config);
    saved.model_type = "nckqr";
    saved.lambda1 = opt.lambda1;
    saved.lambda2 = opt.lambda2;
    saved.eta = sol.eta_final;
    saved.bs = sol.bs;
    saved.alphas = sol.alphas;
    certified = sol.certified;
    kkt = sol.kkt_residual;
    std::cout << "nckqr fit: n=" << data.y.size() << " levels=" << taus.size()
              << " lambda1=" << fmt(opt.lambda1) << " lambda2=" << fmt(opt.lambda2)
              << " sigma=" << fmt(saved.kernel.sigma) << " objective=" << fmt(sol.objective)
              << " kkt=" << fmt(sol.kkt_residual)
              << " crossing=" << fmt(sol.crossing_magnitude) << " iters=" << sol.mm_iterations
              << "\n";
  }
  if (!certified)
    std::cerr << "warning: optimality certificate not reached (kkt residual " << fmt(kkt)
              << ")\n";

  kqr::save_model(opt.out, saved);
  std::cout << "wrote model to " << opt.out << "\n";

  if (!opt.curves_path.empty()) {
    if (data.X.cols() != 1)
      throw kqr::input_error("--emit-curves requires exactly one feature column");
    const int grid_n = 201;
    const double lo = data.X.col(0).minCoeff();
    const double hi = data.X.col(0).maxCoeff();
    MatrixXd grid_raw(grid_n, 1);
    for (int i = 0; i < grid_n; ++i)
      grid_raw(i, 0) = lo + (hi - lo) * static_cast<double>(i) / (grid_n - 1);
    MatrixXd grid = grid_raw;
    if (saved.standardized) kqr::apply_standardization(grid, saved.stats);
    MatrixXd table(grid_n, 1 + saved.taus.size());
    table.col(0) = grid_raw.col(0);
    std::vector<std::string> names{"x"};
    for (Eigen::Index t = 0; t < saved.taus.size(); ++t) {
      table.col(1 + t) =
          kqr::predict(saved.x_train, saved.kernel, saved.bs(t), saved.alphas.col(t), grid);
      names.push_back("tau_" + fmt(saved.taus(t)));
    }
    write_table(opt.curves_path, names, table);
    std::cout << "wrote quantile curves to " << opt.curves_path << "\n";
  }
}

struct PredictOptions {
  std::string model_path;
  std::string data_path;
  std::string out;
};

void run_predict(const PredictOptions& opt) {
  kqr::SavedModel m = kqr::load_model(opt.model_path);
  kqr::Dataset data = kqr::load_csv(opt.data_path);
  const Eigen::Index p = m.x_train.cols();
  MatrixXd X_new;
  if (data.X.cols() == p) {
    X_new = data.X;  // trailing response column is ignored
  } else if (data.X.cols() + 1 == p) {
    X_new.resize(data.X.rows(), p);
    X_new << data.X, data.y;
  } else {
    throw kqr::input_error("model expects " + std::to_string(p) + " features, file provides " +
                           std::to_string(data.X.cols() + 1) + " columns");
  }
  if (m.standardized) kqr::apply_standardization(X_new, m.stats);
  MatrixXd table(X_new.rows(), m.taus.size());
  std::vector<std::string> names;
  for (Eigen::Index t = 0; t < m.taus.size(); ++t) {
    table.col(t) = kqr::predict(m.x_train, m.kernel, m.bs(t), m.alphas.col(t), X_new);
    names.push_back("tau_" + fmt(m.taus(t)));
  }
  write_table(opt.out, names, table);
  std::cout << "wrote " << table.rows() << " predictions to " << opt.out << "\n";
}

struct CvOptions {
  std::string data_path;
  double tau = 0.5;
  int folds = 5;
  std::uint64_t seed = 1;
  std::string kernel = "rbf";
  double sigma = 0.0;
  std::vector<double> lambdas;
  bool no_standardize = false;
  std::string out;
};

void run_cv(const CvOptions& opt) {
  kqr::Dataset data = kqr::load_csv(opt.data_path);
  MatrixXd X = data.X;
  if (!opt.no_standardize) {
    const kqr::StandardizationStats stats = kqr::compute_standardization(X);
    kqr::apply_standardization(X, stats);
  }
  const kqr::KernelSpec spec = make_kernel_spec(opt.kernel, opt.sigma, X);
  VectorXd lambdas;
  if (opt.lambdas.empty()) {
    lambdas = kqr::make_default_lambda_grid();
  } else {
    lambdas = Eigen::Map<const VectorXd>(opt.lambdas.data(),
                                         static_cast<Eigen::Index>(opt.lambdas.size()));
  }
  kqr::CvResult res =
      kqr::cross_validate(X, data.y, opt.tau, lambdas, opt.folds, opt.seed, spec, {});
  std::cout << "best lambda " << fmt(res.best_lambda) << " mean pinball "
            << fmt(res.best_loss) << " (tau=" << fmt(opt.tau) << ", folds=" << opt.folds
            << ", sigma=" << fmt(spec.sigma) << ")\n";
  if (!opt.out.empty()) {
    MatrixXd table(lambdas.size(), 2 + res.fold_losses.cols());
    table.col(0) = res.lambdas;
    table.col(1) = res.mean_losses;
    table.rightCols(res.fold_losses.cols()) = res.fold_losses;
    std::vector<std::string> names{"lambda", "mean_loss"};
    for (Eigen::Index k = 0; k < res.fold_losses.cols(); ++k)
      names.push_back("fold_" + std::to_string(k + 1));
    write_table(opt.out, names, table);
    std::cout << "wrote cv table to " << opt.out << "\n";
  }
}

struct BenchOptions {
  int n = 800;
  int p = 5;
  double snr = 3.0;
  std::uint64_t seed = 1;
  double tau = 0.5;
  int grid = 50;
};

void run_bench(const BenchOptions& opt) {
  using clock = std::chrono::steady_clock;
  kqr::Dataset data = kqr::simulate_friedman(opt.n, opt.p, opt.snr, opt.seed);
  MatrixXd X = data.X;
  const kqr::StandardizationStats stats = kqr::compute_standardization(X);
  kqr::apply_standardization(X, stats);
  const kqr::KernelSpec spec = make_kernel_spec("rbf", 0.0, X);
  const kqr::KernelModel model = kqr::build_kernel_model(X, spec);
  if (opt.grid < 2) throw kqr::input_error("bench: grid must have at least two points");
  VectorXd lambdas(opt.grid);
  for (int i = 0; i < opt.grid; ++i)
    lambdas(i) = std::pow(10.0, -4.0 * static_cast<double>(i) / (opt.grid - 1));

  const auto t0 = clock::now();
  const kqr::PathResult spectral = kqr::solve_kqr_path(data.y, model.K, model.eig, opt.tau,
                                                       lambdas, {}, kqr::PathStrategy::spectral);
  const auto t1 = clock::now();
  // The baseline solves each lambda from scratch with the refactorizing
  // strategy, the cost of running the solver per lambda without the shared
  // eigenbasis.
  std::vector<kqr::KqrSolution> dense;
  dense.reserve(spectral.solutions.size());
  for (Eigen::Index i = 0; i < lambdas.size(); ++i) {
    VectorXd one(1);
    one << lambdas(i);
    kqr::PathResult r = kqr::solve_kqr_path(data.y, model.K, model.eig, opt.tau, one, {},
                                            kqr::PathStrategy::dense_refactor);
    dense.push_back(std::move(r.solutions[0]));
  }
  const auto t2 = clock::now();

  double max_gap = 0.0;
  for (std::size_t i = 0; i < spectral.solutions.size(); ++i) {
    const double denom = 1.0 + std::abs(dense[i].objective);
    max_gap =
        std::max(max_gap, std::abs(spectral.solutions[i].objective - dense[i].objective) / denom);
  }
  const double sec_spectral = std::chrono::duration<double>(t1 - t0).count();
  const double sec_dense = std::chrono::duration<double>(t2 - t1).count();
  std::cout << "n=" << opt.n << " grid=" << opt.grid << " tau=" << fmt(opt.tau) << "\n"
            << "eigenbasis path:       " << fmt(sec_spectral) << " s\n"
            << "dense refactorization: " << fmt(sec_dense) << " s\n"
            << "speedup:               " << fmt(sec_dense / sec_spectral) << "x\n"
            << "max objective gap:     " << fmt(max_gap) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernel quantile regression via finite smoothing"};
  app.require_subcommand(1);

  auto sim_gen = std::make_shared<std::string>("friedman");
  auto sim_n = std::make_shared<int>(200);
  auto sim_p = std::make_shared<int>(5);
  auto sim_snr = std::make_shared<double>(3.0);
  auto sim_seed = std::make_shared<std::uint64_t>(1);
  auto sim_out = std::make_shared<std::string>();
  CLI::App* sim = app.add_subcommand("simulate", "Generate a synthetic dataset as CSV");
  sim->add_option("--generator", *sim_gen, "friedman, yuan, or heteroscedastic")
      ->check(CLI::IsMember({"friedman", "yuan", "heteroscedastic"}));
  sim->add_option("--n", *sim_n, "number of rows")->required();
  sim->add_option("--p", *sim_p, "feature count (friedman only)");
  sim->add_option("--snr", *sim_snr, "signal-to-noise ratio (friedman only)");
  sim->add_option("--seed", *sim_seed, "rng seed");
  sim->add_option("--out", *sim_out, "output CSV path")->required();
  sim->callback([=]() {
    kqr::Dataset d;
    if (*sim_gen == "friedman")
      d = kqr::simulate_friedman(*sim_n, *sim_p, *sim_snr, *sim_seed);
    else if (*sim_gen == "yuan")
      d = kqr::simulate_yuan(*sim_n, *sim_seed);
    else
      d = kqr::simulate_heteroscedastic(*sim_n, *sim_seed);
    kqr::save_csv(*sim_out, d);
    std::cout << "wrote " << d.y.size() << " rows to " << *sim_out << "\n";
  });

  auto fit_opt = std::make_shared<FitOptions>();
  CLI::App* fit = app.add_subcommand("fit", "Fit quantile curves to a CSV dataset");
  fit->add_option("--data", fit_opt->data_path, "training CSV, last column is the response")
      ->required();
  fit->add_option("--tau", fit_opt->taus,
                  "quantile level, repeat for simultaneous non-crossing fits");
  fit->add_option("--kernel", fit_opt->kernel, "rbf or linear")
      ->check(CLI::IsMember({"rbf", "linear"}));
  fit->add_option("--sigma", fit_opt->sigma, "rbf bandwidth, 0 selects the median heuristic");
  fit->add_option("--lambda", fit_opt->lambda, "ridge penalty for a single level");
  fit->add_option("--lambda1", fit_opt->lambda1, "crossing penalty for multiple levels");
  fit->add_option("--lambda2", fit_opt->lambda2, "ridge penalty for multiple levels");
  fit->add_option("--eta", fit_opt->eta, "smoothing width of the crossing penalty");
  fit->add_flag("--no-standardize", fit_opt->no_standardize, "skip feature standardization");
  fit->add_option("--kkt-tol", fit_opt->kkt_tol, "optimality certificate tolerance");
  fit->add_option("--max-iters", fit_opt->max_iters, "iteration cap per smoothing round");
  fit->add_option("--out", fit_opt->out, "model JSON path");
  fit->add_option("--emit-curves", fit_opt->curves_path,
                  "also write fitted curves on a grid (one feature only)");
  fit->callback([fit_opt]() { run_fit(*fit_opt); });

  auto pred_opt = std::make_shared<PredictOptions>();
  CLI::App* pred = app.add_subcommand("predict", "Evaluate a saved model on new rows");
  pred->add_option("--model", pred_opt->model_path, "model JSON from fit")->required();
  pred->add_option("--data", pred_opt->data_path, "CSV of feature rows")->required();
  pred->add_option("--out", pred_opt->out, "output CSV path")->required();
  pred->callback([pred_opt]() { run_predict(*pred_opt); });

  auto cv_opt = std::make_shared<CvOptions>();
  CLI::App* cv = app.add_subcommand("cv", "Cross-validate the ridge penalty");
  cv->add_option("--data", cv_opt->data_path, "training CSV, last column is the response")
      ->required();
  cv->add_option("--tau", cv_opt->tau, "quantile level");
  cv->add_option("--folds", cv_opt->folds, "fold count");
  cv->add_option("--seed", cv_opt->seed, "fold assignment seed");
  cv->add_option("--kernel", cv_opt->kernel, "rbf or linear")
      ->check(CLI::IsMember({"rbf", "linear"}));
  cv->add_option("--sigma", cv_opt->sigma, "rbf bandwidth, 0 selects the median heuristic");
  cv->add_option("--lambda", cv_opt->lambdas, "candidate penalty, repeatable; default grid");
  cv->add_flag("--no-standardize", cv_opt->no_standardize, "skip feature standardization");
  cv->add_option("--out", cv_opt->out, "optional CSV table of per-lambda losses");
  cv->callback([cv_opt]() { run_cv(*cv_opt); });

  auto bench_opt = std::make_shared<BenchOptions>();
  CLI::App* bench = app.add_subcommand("bench", "Time the eigenbasis path against refactorization");
  bench->add_option("--n", bench_opt->n, "rows of the synthetic problem");
  bench->add_option("--p", bench_opt->p, "features of the synthetic problem");
  bench->add_option("--snr", bench_opt->snr, "signal-to-noise ratio");
  bench->add_option("--seed", bench_opt->seed, "rng seed");
  bench->add_option("--tau", bench_opt->tau, "quantile level");
  bench->add_option("--grid", bench_opt->grid, "penalty grid size");
  bench->callback([bench_opt]() { run_bench(*bench_opt); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const kqr::input_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const kqr::kqr_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
