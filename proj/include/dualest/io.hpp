#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualest/common.hpp"
#include "dualest/model.hpp"

namespace dualest {

inline void write_matrix_csv(const std::string& path, const Matrix& m,
                             const std::string& column_prefix,
                             const std::vector<std::string>& header_comments = {}) {
  std::ofstream out(path);
  if (!out) throw invalid_input("cannot open for writing: " + path);
  for (const auto& c : header_comments) out << "# " << c << "\n";
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    if (j) out << ",";
    out << column_prefix << j;
  }
  out << "\n";
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out << ",";
      out << format_double(m(i, j));
    }
    out << "\n";
  }
}

inline Matrix read_matrix_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw invalid_input("cannot open for reading: " + path);
  std::string line;
  std::vector<std::vector<double>> rows;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {  // column-name row
      header_seen = true;
      continue;
    }
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
    if (!row.empty()) rows.push_back(std::move(row));
  }
  if (rows.empty()) return Matrix(0, 0);
  Matrix m(Eigen::Index(rows.size()), Eigen::Index(rows[0].size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (Eigen::Index(rows[i].size()) != m.cols())
      throw invalid_input("ragged CSV in " + path);
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rows[i][j];
  }
  return m;
}

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json arr = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) arr.push_back(m(i, j));
  return arr;
}

inline Matrix matrix_from_json(const nlohmann::json& arr, Eigen::Index rows,
                               Eigen::Index cols) {
  if (Eigen::Index(arr.size()) != rows * cols)
    throw invalid_input("model file: matrix entry count mismatch");
  Matrix m(rows, cols);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = arr[size_t(k++)].get<double>();
  return m;
}

inline nlohmann::json vector_to_json(const Vector& v) {
  nlohmann::json arr = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

inline Vector vector_from_json(const nlohmann::json& arr, Eigen::Index n) {
  if (Eigen::Index(arr.size()) != n)
    throw invalid_input("model file: vector length mismatch");
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = arr[size_t(i)].get<double>();
  return v;
}

}  // namespace detail

inline nlohmann::json model_to_json(const NetworkModel& model) {
  const Eigen::Index n = model.size();
  nlohmann::json j;
  j["family"] = "network";
  j["n"] = n;
  j["a_matrix"] = detail::matrix_to_json(model.a_matrix);
  j["b_matrix"] = detail::matrix_to_json(model.b_matrix);
  j["offset"] = detail::vector_to_json(model.offset);
  j["gain"] = detail::vector_to_json(model.gain);
  j["nonlinearity"] = model.nonlinearity == Nonlinearity::Tanh ? "tanh" : "identity";
  j["offset_mode"] = model.offset_mode == OffsetMode::Activation ? "activation" : "additive";
  nlohmann::json mask = nlohmann::json::array();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index jj = 0; jj < n; ++jj) mask.push_back(model.free_mask(i, jj) ? 1 : 0);
  j["free_mask"] = mask;
  return j;
}

inline NetworkModel model_from_json(const nlohmann::json& j) {
  if (j.value("family", "") != "network")
    throw invalid_input("model file: expected family 'network'");
  const Eigen::Index n = j.at("n").get<Eigen::Index>();
  NetworkModel m;
  m.a_matrix = detail::matrix_from_json(j.at("a_matrix"), n, n);
  m.b_matrix = detail::matrix_from_json(j.at("b_matrix"), n, n);
  m.offset = detail::vector_from_json(j.at("offset"), n);
  m.gain = detail::vector_from_json(j.at("gain"), n);
  const std::string nl = j.at("nonlinearity").get<std::string>();
  if (nl == "tanh")
    m.nonlinearity = Nonlinearity::Tanh;
  else if (nl == "identity")
    m.nonlinearity = Nonlinearity::Identity;
  else
    throw invalid_input("model file: unknown nonlinearity '" + nl + "'");
  const std::string mode = j.at("offset_mode").get<std::string>();
  if (mode == "activation")
    m.offset_mode = OffsetMode::Activation;
  else if (mode == "additive")
    m.offset_mode = OffsetMode::Additive;
  else
    throw invalid_input("model file: unknown offset_mode '" + mode + "'");
  const auto& mask = j.at("free_mask");
  if (Eigen::Index(mask.size()) != n * n)
    throw invalid_input("model file: free_mask entry count mismatch");
  m.free_mask = BoolMask::Constant(n, n, true);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index jj = 0; jj < n; ++jj) m.free_mask(i, jj) = mask[size_t(k++)].get<int>() != 0;
  m.validate();
  return m;
}

inline nlohmann::json model_to_json(const EiBrainModel& model) {
  model.validate();
  nlohmann::json j;
  j["family"] = "ei_brain";
  j["n_regions"] = model.n_regions;
  j["w_p"] = detail::matrix_to_json(model.w_p);
  j["w_r"] = detail::matrix_to_json(model.w_r);
  j["j_p"] = detail::vector_to_json(model.j_p);
  j["j_r"] = detail::vector_to_json(model.j_r);
  j["tau_p"] = detail::vector_to_json(model.tau_p);
  j["tau_r"] = detail::vector_to_json(model.tau_r);
  j["gain"] = detail::vector_to_json(model.gain);
  j["offset"] = detail::vector_to_json(model.offset);
  return j;
}

inline EiBrainModel ei_model_from_json(const nlohmann::json& j) {
  if (j.value("family", "") != "ei_brain")
    throw invalid_input("model file: expected family 'ei_brain'");
  EiBrainModel m;
  m.n_regions = j.at("n_regions").get<Eigen::Index>();
  const Eigen::Index n = m.n_regions;
  m.w_p = detail::matrix_from_json(j.at("w_p"), n, n);
  m.w_r = detail::matrix_from_json(j.at("w_r"), n, n);
  m.j_p = detail::vector_from_json(j.at("j_p"), n);
  m.j_r = detail::vector_from_json(j.at("j_r"), n);
  m.tau_p = detail::vector_from_json(j.at("tau_p"), n);
  m.tau_r = detail::vector_from_json(j.at("tau_r"), n);
  m.gain = detail::vector_from_json(j.at("gain"), 2 * n);
  m.offset = detail::vector_from_json(j.at("offset"), 2 * n);
  m.validate();
  return m;
}

inline void save_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw invalid_input("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
}

inline nlohmann::json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw invalid_input("cannot open for reading: " + path);
  nlohmann::json j;
  in >> j;
  return j;
}

inline void save_model(const std::string& path, const NetworkModel& model) {
  save_json(path, model_to_json(model));
}

inline NetworkModel load_model(const std::string& path) {
  return model_from_json(load_json(path));
}

// FNV-1a over a canonical JSON dump; embedded in output headers so every
// number is traceable to the producing configuration.
inline std::uint64_t config_hash(const nlohmann::json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace dualest
