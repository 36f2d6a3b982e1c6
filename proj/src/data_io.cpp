#include "kqr/data_io.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

namespace kqr {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

bool parse_double(std::string tok, double& out) {
  const auto first = tok.find_first_not_of(" \t");
  if (first == std::string::npos) return false;
  const auto last = tok.find_last_not_of(" \t");
  tok = tok.substr(first, last - first + 1);
  const char* begin = tok.data();
  const char* end = begin + tok.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<double> to_std(const VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

VectorXd from_std(const std::vector<double>& v) {
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json matrix_rows(const MatrixXd& M) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

MatrixXd matrix_from_rows(const json& rows, const std::string& what) {
  if (!rows.is_array()) throw input_error("model file: " + what + " must be an array of rows");
  const auto n = rows.size();
  MatrixXd M;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& row = rows[i];
    if (!row.is_array()) throw input_error("model file: " + what + " row is not an array");
    if (i == 0) M.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(row.size()));
    if (static_cast<Eigen::Index>(row.size()) != M.cols())
      throw input_error("model file: " + what + " rows have inconsistent lengths");
    for (std::size_t j = 0; j < row.size(); ++j)
      M(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j].get<double>();
  }
  if (n == 0) M.resize(0, 0);
  return M;
}

}  // namespace

Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw input_error("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    lines.push_back(line);
  }
  if (lines.empty()) throw input_error("empty file: " + path);

  Dataset data;
  std::size_t start = 0;
  const std::vector<std::string> first = split_line(lines[0]);
  bool header = false;
  for (const auto& tok : first) {
    double v;
    if (!parse_double(tok, v)) {
      header = true;
      break;
    }
  }
  if (header) {
    data.column_names = first;
    start = 1;
  }
  if (start >= lines.size()) throw input_error("file has a header but no data rows: " + path);

  const std::size_t cols = split_line(lines[start]).size();
  if (cols < 2) throw input_error("need at least one feature column and a response: " + path);
  const std::size_t n = lines.size() - start;
  data.X.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cols - 1));
  data.y.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<std::string> toks = split_line(lines[start + i]);
    const std::size_t row_no = start + i + 1;  // 1-based, counting the header
    if (toks.size() != cols)
      throw input_error("row " + std::to_string(row_no) + ": expected " + std::to_string(cols) +
                        " columns, found " + std::to_string(toks.size()));
    for (std::size_t j = 0; j < cols; ++j) {
      double v;
      if (!parse_double(toks[j], v) || !std::isfinite(v))
        throw input_error("row " + std::to_string(row_no) + " column " + std::to_string(j + 1) +
                          ": cannot parse value '" + toks[j] + "'");
      if (j + 1 < cols)
        data.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
      else
        data.y(static_cast<Eigen::Index>(i)) = v;
    }
  }
  return data;
}

void save_csv(const std::string& path, const Dataset& data) {
  if (data.X.rows() != data.y.size()) throw input_error("save csv: X and y row counts disagree");
  std::ostringstream out;
  if (!data.column_names.empty()) {
    if (static_cast<Eigen::Index>(data.column_names.size()) != data.X.cols() + 1)
      throw input_error("save csv: column name count mismatch");
    for (std::size_t j = 0; j < data.column_names.size(); ++j) {
      if (j > 0) out << ',';
      out << data.column_names[j];
    }
  } else {
    for (Eigen::Index j = 0; j < data.X.cols(); ++j) out << 'x' << (j + 1) << ',';
    out << 'y';
  }
  out << '\n';
  for (Eigen::Index i = 0; i < data.X.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.X.cols(); ++j)
      out << format_double(data.X(i, j)) << ',';
    out << format_double(data.y(i)) << '\n';
  }
  write_file_atomic(path, out.str());
}

StandardizationStats compute_standardization(const MatrixXd& X) {
  if (X.rows() < 1) throw input_error("standardization: empty matrix");
  StandardizationStats st;
  st.mean = X.colwise().mean();
  st.sd.resize(X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    if (X.rows() < 2) {
      st.sd(j) = 1.0;
      continue;
    }
    const double ss = (X.col(j).array() - st.mean(j)).square().sum();
    const double sd = std::sqrt(ss / static_cast<double>(X.rows() - 1));
    st.sd(j) = sd < 1e-12 ? 1.0 : sd;
  }
  return st;
}

void apply_standardization(MatrixXd& X, const StandardizationStats& stats) {
  if (X.cols() != stats.mean.size() || X.cols() != stats.sd.size())
    throw input_error("standardization: column count mismatch");
  X.rowwise() -= stats.mean.transpose();
  X.array().rowwise() /= stats.sd.transpose().array();
}

double RngStream::uniform() {
  return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  const double u1 = 1.0 - uniform();  // (0, 1], keeps the log finite
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(angle);
  have_spare_ = true;
  return r * std::cos(angle);
}

Dataset simulate_friedman(int n, int p, double snr, std::uint64_t seed) {
  if (n < 1 || p < 1) throw input_error("simulate: n and p must be positive");
  if (snr <= 0.0) throw input_error("simulate: snr must be positive");
  const double rho = 0.1;
  RngStream rng(seed);
  Dataset data;
  data.X.resize(n, p);
  data.y.resize(n);
  for (int i = 0; i < n; ++i) {
    const double w = rng.normal();
    for (int j = 0; j < p; ++j)
      data.X(i, j) = std::sqrt(rho) * w + std::sqrt(1.0 - rho) * rng.normal();
  }
  VectorXd beta(p);
  for (int j = 0; j < p; ++j) {
    const double sign = (j % 2 == 0) ? -1.0 : 1.0;  // alternating, first negative
    beta(j) = sign * std::exp(-static_cast<double>(j) / 10.0);
  }
  const double bsb =
      (1.0 - rho) * beta.squaredNorm() + rho * beta.sum() * beta.sum();
  const double scale = std::sqrt(snr / bsb);
  for (int i = 0; i < n; ++i)
    data.y(i) = scale * data.X.row(i).dot(beta) + rng.normal();
  return data;
}

Dataset simulate_yuan(int n, std::uint64_t seed) {
  if (n < 1) throw input_error("simulate: n must be positive");
  RngStream rng(seed);
  Dataset data;
  data.X.resize(n, 2);
  data.y.resize(n);
  for (int i = 0; i < n; ++i) {
    data.X(i, 0) = rng.uniform();
    data.X(i, 1) = rng.uniform();
  }
  for (int i = 0; i < n; ++i) {
    const double x1 = data.X(i, 0), x2 = data.X(i, 1);
    const double num =
        40.0 * std::exp(8.0 * ((x1 - 0.5) * (x1 - 0.5) + (x2 - 0.5) * (x2 - 0.5)));
    const double den =
        std::exp(8.0 * ((x1 - 0.2) * (x1 - 0.2) + (x2 - 0.7) * (x2 - 0.7))) +
        std::exp(8.0 * ((x1 - 0.7) * (x1 - 0.7) + (x2 - 0.2) * (x2 - 0.2)));
    data.y(i) = num / den + rng.normal();
  }
  return data;
}

Dataset simulate_heteroscedastic(int n, std::uint64_t seed) {
  if (n < 1) throw input_error("simulate: n must be positive");
  RngStream rng(seed);
  Dataset data;
  data.X.resize(n, 1);
  data.y.resize(n);
  for (int i = 0; i < n; ++i) data.X(i, 0) = rng.uniform();
  for (int i = 0; i < n; ++i) {
    const double x = data.X(i, 0);
    data.y(i) = std::sin(2.0 * std::numbers::pi * x) + (0.2 + x) * rng.normal();
  }
  return data;
}

void save_model(const std::string& path, const SavedModel& m) {
  if (m.model_type != "kqr" && m.model_type != "nckqr")
    throw input_error("save model: model_type must be kqr or nckqr");
  const auto T = m.taus.size();
  if (m.bs.size() != T || m.alphas.cols() != T)
    throw input_error("save model: one intercept and coefficient column per level required");
  if (m.alphas.rows() != m.x_train.rows())
    throw input_error("save model: alphas and x_train row counts disagree");
  if (m.standardized &&
      (m.stats.mean.size() != m.x_train.cols() || m.stats.sd.size() != m.x_train.cols()))
    throw input_error("save model: standardization stats do not match feature count");

  json j;
  j["format_version"] = 1;
  j["model_type"] = m.model_type;
  j["kernel"] = {{"kind", m.kernel.kind == KernelKind::rbf ? "rbf" : "linear"},
                 {"sigma", m.kernel.sigma}};
  j["standardized"] = m.standardized;
  if (m.standardized)
    j["standardization"] = {{"mean", to_std(m.stats.mean)}, {"sd", to_std(m.stats.sd)}};
  j["taus"] = to_std(m.taus);
  if (m.model_type == "kqr") {
    j["lambda"] = m.lambda;
  } else {
    j["lambda1"] = m.lambda1;
    j["lambda2"] = m.lambda2;
    j["eta"] = m.eta;
  }
  j["intercepts"] = to_std(m.bs);
  j["alphas"] = matrix_rows(m.alphas);
  j["x_train"] = matrix_rows(m.x_train);
  write_file_atomic(path, j.dump(1) + "\n");
}

SavedModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw input_error("cannot open file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw input_error("model file: " + std::string(e.what()));
  }
  try {
    if (!j.contains("format_version") || !j["format_version"].is_number_integer() ||
        j["format_version"].get<int>() != 1)
      throw input_error("model file: unsupported format_version");
    SavedModel m;
    m.model_type = j.at("model_type").get<std::string>();
    if (m.model_type != "kqr" && m.model_type != "nckqr")
      throw input_error("model file: unknown model_type");
    const std::string kind = j.at("kernel").at("kind").get<std::string>();
    if (kind == "rbf")
      m.kernel.kind = KernelKind::rbf;
    else if (kind == "linear")
      m.kernel.kind = KernelKind::linear;
    else
      throw input_error("model file: unknown kernel kind");
    m.kernel.sigma = j.at("kernel").at("sigma").get<double>();
    m.standardized = j.at("standardized").get<bool>();
    if (m.standardized) {
      m.stats.mean = from_std(j.at("standardization").at("mean").get<std::vector<double>>());
      m.stats.sd = from_std(j.at("standardization").at("sd").get<std::vector<double>>());
    }
    m.taus = from_std(j.at("taus").get<std::vector<double>>());
    if (m.model_type == "kqr") {
      m.lambda = j.at("lambda").get<double>();
    } else {
      m.lambda1 = j.at("lambda1").get<double>();
      m.lambda2 = j.at("lambda2").get<double>();
      m.eta = j.at("eta").get<double>();
    }
    m.bs = from_std(j.at("intercepts").get<std::vector<double>>());
    m.alphas = matrix_from_rows(j.at("alphas"), "alphas");
    m.x_train = matrix_from_rows(j.at("x_train"), "x_train");
    if (m.bs.size() != m.taus.size() || m.alphas.cols() != m.taus.size())
      throw input_error("model file: level counts disagree");
    if (m.alphas.rows() != m.x_train.rows())
      throw input_error("model file: alphas and x_train row counts disagree");
    if (m.standardized && (m.stats.mean.size() != m.x_train.cols() ||
                           m.stats.sd.size() != m.x_train.cols()))
      throw input_error("model file: standardization stats do not match feature count");
    return m;
  } catch (const json::exception& e) {
    throw input_error("model file: " + std::string(e.what()));
  }
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw input_error("cannot write file: " + tmp);
    out << content;
    if (!out.flush()) {
      std::remove(tmp.c_str());
      throw input_error("cannot write file: " + tmp);
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw input_error("cannot move temporary file onto: " + path);
  }
}

}  // namespace kqr
