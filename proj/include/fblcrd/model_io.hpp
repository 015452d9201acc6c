#pragma once

// JSON model files.
//
// Discrete memoryless model:
//   {
//     "x_size": 2, "s_size": 2, "y_size": 2,
//     "pmf": [[P(x=0,s=0), P(x=0,s=1)], [P(x=1,s=0), P(x=1,s=1)]],
//     "d":   [[d(0,0), d(0,1)], [d(1,0), d(1,1)]],
//     "labels": {"x": ["a", "b"], "s": [...], "y": [...]}      (optional)
//   }
//
// Markov model (state index u = x * s_size + s):
//   {
//     "x_size": 2, "s_size": 2, "y_size": 2,                   (y_size optional)
//     "xi": [[...K entries...], ...K rows...],                  row-stochastic
//     "d":  [[...]]
//   }
//
// Syntax errors report line:column; schema errors name the offending key and
// matrix row/column.

#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "fblcrd/errors.hpp"
#include "fblcrd/source_model.hpp"

namespace fblcrd {

struct DiscreteModel {
  JointSource source;
  DistortionSpec dist;
};

struct MarkovSpec {
  int x_size = 0;
  int s_size = 0;
  Matrix xi;
  DistortionSpec dist;
};

namespace detail {

inline ModelError parse_error(const std::string& origin, const std::string& msg) {
  return ModelError(ModelError::Kind::parse, origin + ": " + msg);
}

inline std::string line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1;
  std::size_t col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return std::to_string(line) + ":" + std::to_string(col);
}

inline nlohmann::json parse_json(const std::string& text, const std::string& origin) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    // e.byte is 1-based and points one past the offending character.
    const std::size_t at = e.byte > 0 ? e.byte - 1 : 0;
    throw ModelError(ModelError::Kind::parse,
                     origin + ":" + line_col(text, at) + ": " + e.what());
  }
}

inline int read_size(const nlohmann::json& j, const char* key,
                     const std::string& origin, bool required = true) {
  if (!j.contains(key)) {
    if (!required) return -1;
    throw parse_error(origin, std::string("missing key \"") + key + "\"");
  }
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw parse_error(origin, std::string("\"") + key +
                                  "\" must be a nonnegative integer");
  }
  return v.get<int>();
}

inline Matrix read_matrix(const nlohmann::json& j, const char* key, int rows,
                          int cols, const std::string& origin) {
  if (!j.contains(key)) {
    throw parse_error(origin, std::string("missing key \"") + key + "\"");
  }
  const auto& m = j.at(key);
  if (!m.is_array()) {
    throw parse_error(origin, std::string("\"") + key + "\" must be an array of rows");
  }
  if (rows >= 0 && static_cast<int>(m.size()) != rows) {
    throw parse_error(origin, std::string("\"") + key + "\" has " +
                                  std::to_string(m.size()) + " rows, expected " +
                                  std::to_string(rows));
  }
  const int n_rows = static_cast<int>(m.size());
  int n_cols = cols;
  if (n_cols < 0) n_cols = n_rows > 0 && m[0].is_array() ? static_cast<int>(m[0].size()) : 0;
  Matrix out(n_rows, n_cols);
  for (int r = 0; r < n_rows; ++r) {
    const auto& row = m[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<int>(row.size()) != n_cols) {
      throw parse_error(origin, std::string("\"") + key + "\" row " +
                                    std::to_string(r) + " must have " +
                                    std::to_string(n_cols) + " entries");
    }
    for (int c = 0; c < n_cols; ++c) {
      const auto& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number()) {
        throw parse_error(origin, std::string("\"") + key + "\" row " +
                                      std::to_string(r) + " column " +
                                      std::to_string(c) + " is not a number");
      }
      out(r, c) = v.get<double>();
    }
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ModelError(ModelError::Kind::parse, path + ": cannot open file");
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

inline DiscreteModel parse_discrete_model(const std::string& text,
                                          const std::string& origin = "<model>") {
  const auto j = detail::parse_json(text, origin);
  if (!j.is_object()) throw detail::parse_error(origin, "top level must be an object");
  const int nx = detail::read_size(j, "x_size", origin);
  const int ns = detail::read_size(j, "s_size", origin);
  const int ny = detail::read_size(j, "y_size", origin);
  DiscreteModel model;
  model.source.pmf = detail::read_matrix(j, "pmf", nx, ns, origin);
  model.dist.d = detail::read_matrix(j, "d", nx, ny, origin);
  if (j.contains("labels")) {
    const auto& labels = j.at("labels");
    if (!labels.is_object()) throw detail::parse_error(origin, "\"labels\" must be an object");
    for (const auto& [name, values] : labels.items()) {
      if (!values.is_array()) {
        throw detail::parse_error(origin, "labels." + name + " must be an array");
      }
      auto& dst = model.source.labels[name];
      for (const auto& v : values) dst.push_back(v.is_string() ? v.get<std::string>() : v.dump());
    }
  }
  return model;
}

inline DiscreteModel load_discrete_model(const std::string& path) {
  return parse_discrete_model(detail::read_file(path), path);
}

inline MarkovSpec parse_markov_model(const std::string& text,
                                     const std::string& origin = "<model>") {
  const auto j = detail::parse_json(text, origin);
  if (!j.is_object()) throw detail::parse_error(origin, "top level must be an object");
  MarkovSpec spec;
  spec.x_size = detail::read_size(j, "x_size", origin);
  spec.s_size = detail::read_size(j, "s_size", origin);
  const int ny = detail::read_size(j, "y_size", origin, /*required=*/false);
  const int k = spec.x_size * spec.s_size;
  spec.xi = detail::read_matrix(j, "xi", k, k, origin);
  spec.dist.d = detail::read_matrix(j, "d", spec.x_size, ny, origin);
  return spec;
}

inline MarkovSpec load_markov_model(const std::string& path) {
  return parse_markov_model(detail::read_file(path), path);
}

inline nlohmann::ordered_json to_json(const Matrix& m) {
  auto rows = nlohmann::ordered_json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = nlohmann::ordered_json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace fblcrd
