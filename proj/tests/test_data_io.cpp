#include <unistd.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include "doctest.h"
#include "kqr/data_io.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

namespace fs = std::filesystem;

// Fresh per-test scratch directory under the system temp root.
struct ScratchDir {
  fs::path path;
  ScratchDir() {
    path = fs::temp_directory_path() /
           ("kqr_test_" + std::to_string(static_cast<unsigned long>(::getpid())) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_SUITE("data_io") {

TEST_CASE("csv round trip preserves values and names exactly") {
  ScratchDir dir;
  kqr::Dataset data;
  data.X.resize(3, 2);
  data.X << 0.1 + 0.2, -1.5, 1e-300, 2.25, 3.0, -0.0;
  data.y.resize(3);
  data.y << 1.0, 0.30000000000000004, -7.125;
  data.column_names = {"alpha", "beta", "target"};

  const std::string path = dir.file("round.csv");
  kqr::save_csv(path, data);
  kqr::Dataset back = kqr::load_csv(path);

  REQUIRE(back.X.rows() == 3);
  REQUIRE(back.X.cols() == 2);
  CHECK((back.X.array() == data.X.array()).all());
  CHECK((back.y.array() == data.y.array()).all());
  REQUIRE(back.column_names.size() == 3);
  CHECK(back.column_names[0] == "alpha");
  CHECK(back.column_names[2] == "target");
}

TEST_CASE("headerless csv is detected from the first line") {
  ScratchDir dir;
  const std::string path = dir.file("raw.csv");
  {
    std::ofstream out(path);
    out << "1,2\n3,4\n";
  }
  kqr::Dataset data = kqr::load_csv(path);
  REQUIRE(data.X.rows() == 2);
  REQUIRE(data.X.cols() == 1);
  CHECK(data.X(0, 0) == 1.0);
  CHECK(data.X(1, 0) == 3.0);
  CHECK(data.y(0) == 2.0);
  CHECK(data.y(1) == 4.0);
  CHECK(data.column_names.empty());
}

TEST_CASE("csv errors name the offending cell") {
  ScratchDir dir;
  CHECK_THROWS_AS(kqr::load_csv(dir.file("missing.csv")), kqr::input_error);

  const std::string bad_cell = dir.file("bad_cell.csv");
  {
    std::ofstream out(bad_cell);
    out << "x,y\n1,oops\n";
  }
  const std::string msg = message_of([&] { kqr::load_csv(bad_cell); });
  CHECK(msg.find("row 2") != std::string::npos);
  CHECK(msg.find("column 2") != std::string::npos);

  const std::string ragged = dir.file("ragged.csv");
  {
    std::ofstream out(ragged);
    out << "1,2\n3,4,5\n";
  }
  CHECK_THROWS_AS(kqr::load_csv(ragged), kqr::input_error);

  const std::string narrow = dir.file("narrow.csv");
  {
    std::ofstream out(narrow);
    out << "1\n2\n";
  }
  CHECK_THROWS_AS(kqr::load_csv(narrow), kqr::input_error);

  const std::string nonfinite = dir.file("nonfinite.csv");
  {
    std::ofstream out(nonfinite);
    out << "1,nan\n";
  }
  CHECK_THROWS_AS(kqr::load_csv(nonfinite), kqr::input_error);
}

TEST_CASE("standardization statistics and application") {
  MatrixXd X(2, 2);
  X << 1.0, 5.0, 3.0, 5.0;
  kqr::StandardizationStats stats = kqr::compute_standardization(X);
  CHECK(stats.mean(0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(stats.sd(0) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
  // Constant column keeps unit scale so it maps to zero.
  CHECK(stats.mean(1) == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(stats.sd(1) == 1.0);

  kqr::apply_standardization(X, stats);
  CHECK(X.col(0).mean() == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(X.col(1).cwiseAbs().maxCoeff() == 0.0);
  const double sd0 = std::sqrt(X.col(0).squaredNorm() / 1.0);
  CHECK(sd0 == doctest::Approx(1.0).epsilon(1e-14));

  MatrixXd wrong(2, 3);
  CHECK_THROWS_AS(kqr::apply_standardization(wrong, stats), kqr::input_error);
}

TEST_CASE("rng stream is deterministic with healthy moments") {
  kqr::RngStream a(42);
  kqr::RngStream b(42);
  for (int i = 0; i < 100; ++i) {
    const double ua = a.uniform();
    CHECK(ua == b.uniform());
    CHECK(ua >= 0.0);
    CHECK(ua < 1.0);
  }
  const double na = a.normal();
  CHECK(na == b.normal());

  kqr::RngStream c(7);
  double sum = 0.0, sumsq = 0.0;
  const int draws = 20000;
  for (int i = 0; i < draws; ++i) {
    const double v = c.normal();
    sum += v;
    sumsq += v * v;
  }
  const double mean = sum / draws;
  const double var = sumsq / draws - mean * mean;
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(var - 1.0) < 0.1);
}

TEST_CASE("simulators are deterministic and well shaped") {
  kqr::Dataset fr = kqr::simulate_friedman(50, 3, 3.0, 9);
  REQUIRE(fr.X.rows() == 50);
  REQUIRE(fr.X.cols() == 3);
  REQUIRE(fr.y.size() == 50);
  CHECK(fr.X.allFinite());
  CHECK(fr.y.allFinite());
  kqr::Dataset fr2 = kqr::simulate_friedman(50, 3, 3.0, 9);
  CHECK((fr.X.array() == fr2.X.array()).all());
  CHECK((fr.y.array() == fr2.y.array()).all());
  kqr::Dataset fr3 = kqr::simulate_friedman(50, 3, 3.0, 10);
  CHECK(!(fr.y.array() == fr3.y.array()).all());

  kqr::Dataset yu = kqr::simulate_yuan(30, 4);
  REQUIRE(yu.X.rows() == 30);
  REQUIRE(yu.X.cols() == 2);
  CHECK((yu.X.array() >= 0.0).all());
  CHECK((yu.X.array() < 1.0).all());
  CHECK(yu.y.allFinite());

  kqr::Dataset he = kqr::simulate_heteroscedastic(25, 5);
  REQUIRE(he.X.rows() == 25);
  REQUIRE(he.X.cols() == 1);
  CHECK(he.y.allFinite());

  CHECK_THROWS_AS(kqr::simulate_friedman(0, 3, 3.0, 1), kqr::input_error);
  CHECK_THROWS_AS(kqr::simulate_friedman(5, 0, 3.0, 1), kqr::input_error);
  CHECK_THROWS_AS(kqr::simulate_friedman(5, 3, -1.0, 1), kqr::input_error);
}

TEST_CASE("model json round trip for a single level fit") {
  ScratchDir dir;
  kqr::SavedModel model;
  model.model_type = "kqr";
  model.kernel.kind = kqr::KernelKind::rbf;
  model.kernel.sigma = 1.75;
  model.standardized = true;
  model.stats.mean = VectorXd::LinSpaced(3, -1.0, 1.0);
  model.stats.sd = VectorXd::Constant(3, 2.0);
  model.taus = VectorXd::Constant(1, 0.3);
  model.lambda = 0.125;
  model.bs = VectorXd::Constant(1, 0.5);
  model.alphas = MatrixXd::Random(4, 1);
  model.x_train = MatrixXd::Random(4, 3);

  const std::string path = dir.file("model.json");
  kqr::save_model(path, model);
  kqr::SavedModel back = kqr::load_model(path);

  CHECK(back.model_type == "kqr");
  CHECK(back.kernel.kind == kqr::KernelKind::rbf);
  CHECK(back.kernel.sigma == model.kernel.sigma);
  CHECK(back.standardized);
  CHECK((back.stats.mean.array() == model.stats.mean.array()).all());
  CHECK((back.stats.sd.array() == model.stats.sd.array()).all());
  CHECK((back.taus.array() == model.taus.array()).all());
  CHECK(back.lambda == model.lambda);
  CHECK((back.bs.array() == model.bs.array()).all());
  CHECK((back.alphas.array() == model.alphas.array()).all());
  CHECK((back.x_train.array() == model.x_train.array()).all());
}

TEST_CASE("model json round trip for a multi level fit") {
  ScratchDir dir;
  kqr::SavedModel model;
  model.model_type = "nckqr";
  model.kernel.kind = kqr::KernelKind::linear;
  model.kernel.sigma = 1.0;
  model.standardized = false;
  model.taus.resize(3);
  model.taus << 0.1, 0.5, 0.9;
  model.lambda1 = 10.0;
  model.lambda2 = 0.05;
  model.eta = 1e-5;
  model.bs = VectorXd::LinSpaced(3, -0.5, 0.5);
  model.alphas = MatrixXd::Random(5, 3);
  model.x_train = MatrixXd::Random(5, 2);

  const std::string path = dir.file("model.json");
  kqr::save_model(path, model);
  kqr::SavedModel back = kqr::load_model(path);

  CHECK(back.model_type == "nckqr");
  CHECK(back.kernel.kind == kqr::KernelKind::linear);
  CHECK(!back.standardized);
  CHECK(back.stats.mean.size() == 0);
  CHECK((back.taus.array() == model.taus.array()).all());
  CHECK(back.lambda1 == model.lambda1);
  CHECK(back.lambda2 == model.lambda2);
  CHECK(back.eta == model.eta);
  CHECK((back.bs.array() == model.bs.array()).all());
  CHECK((back.alphas.array() == model.alphas.array()).all());
  CHECK((back.x_train.array() == model.x_train.array()).all());
}

TEST_CASE("model file validation rejects malformed content") {
  ScratchDir dir;
  const std::string garbage = dir.file("garbage.json");
  {
    std::ofstream out(garbage);
    out << "this is not json";
  }
  CHECK_THROWS_AS(kqr::load_model(garbage), kqr::input_error);

  kqr::SavedModel model;
  model.model_type = "kqr";
  model.taus = VectorXd::Constant(1, 0.5);
  model.lambda = 0.1;
  model.bs = VectorXd::Constant(1, 0.0);
  model.alphas = MatrixXd::Zero(3, 1);
  model.x_train = MatrixXd::Zero(3, 2);
  const std::string good = dir.file("good.json");
  kqr::save_model(good, model);

  // Flip the format version in place; the loader must refuse it.
  std::ifstream in(good);
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  const std::string needle = "\"format_version\": 1";
  auto pos = content.find(needle);
  REQUIRE(pos != std::string::npos);
  content.replace(pos, needle.size(), "\"format_version\": 2");
  const std::string vers = dir.file("vers.json");
  {
    std::ofstream out(vers);
    out << content;
  }
  CHECK_THROWS_AS(kqr::load_model(vers), kqr::input_error);

  // Shape mismatches are rejected at save time.
  kqr::SavedModel bad = model;
  bad.bs = VectorXd::Zero(2);
  CHECK_THROWS_AS(kqr::save_model(dir.file("bad.json"), bad), kqr::input_error);
  kqr::SavedModel bad2 = model;
  bad2.alphas = MatrixXd::Zero(4, 1);
  bad2.x_train = MatrixXd::Zero(3, 2);
  CHECK_THROWS_AS(kqr::save_model(dir.file("bad2.json"), bad2), kqr::input_error);
}

TEST_CASE("atomic writes create and replace files") {
  ScratchDir dir;
  const std::string path = dir.file("atomic.txt");
  kqr::write_file_atomic(path, "first\n");
  {
    std::ifstream in(path);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(content == "first\n");
  }
  kqr::write_file_atomic(path, "second\n");
  {
    std::ifstream in(path);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(content == "second\n");
  }
  CHECK(!fs::exists(path + ".tmp"));
  CHECK_THROWS_AS(kqr::write_file_atomic((dir.path / "no_dir" / "f.txt").string(), "x"),
                  kqr::input_error);
}

}  // TEST_SUITE
