#pragma once

// JSON reading and writing for experiment configs, rules and finite spaces.
// Needs nlohmann/json on the include path (json.hpp).

#include "cmrisk/core_experiment.hpp"
#include "cmrisk/finite_space.hpp"
#include "cmrisk/rules.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

namespace cmrisk {

using json = nlohmann::ordered_json;

/// Reads and parses a JSON file; parse errors carry the line and column.
inline json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

/// Inline JSON text or a path to a JSON file.
inline json json_argument(const std::string& text) {
  const auto first = text.find_first_not_of(" \t\n");
  if (first != std::string::npos && (text[first] == '{' || text[first] == '[')) {
    try {
      return json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("inline JSON: ") + e.what());
    }
  }
  return load_json_file(text);
}

/// +inf and -inf become the strings "inf" and "-inf"; NaN becomes "nan".
inline json number_to_json(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline double number_from_json(const json& j, const std::string& what) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return kInf;
    if (s == "-inf") return -kInf;
  }
  throw ConfigError(what + " must be a number");
}

/// Accepts an array of arrays, a flat array (one row) or a bare number (1 x 1).
inline Mat matrix_from_json(const json& j, const std::string& what) {
  if (j.is_number()) return Mat::Constant(1, 1, j.get<double>());
  if (!j.is_array() || j.empty()) throw ConfigError(what + " must be a non-empty array");
  if (!j.front().is_array()) {
    Mat m(1, static_cast<Eigen::Index>(j.size()));
    for (std::size_t c = 0; c < j.size(); ++c) m(0, static_cast<Eigen::Index>(c)) = number_from_json(j[c], what);
    return m;
  }
  const std::size_t cols = j.front().size();
  Mat m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != cols) throw ConfigError(what + " rows must all have the same length");
    for (std::size_t c = 0; c < cols; ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = number_from_json(j[r][c], what);
  }
  return m;
}

inline Vec vector_from_json(const json& j, const std::string& what) {
  if (!j.is_array()) throw ConfigError(what + " must be an array");
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = number_from_json(j[i], what);
  return v;
}

inline json matrix_to_json(const Mat& m) {
  json out = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(number_to_json(m(r, c)));
    out.push_back(row);
  }
  return out;
}

inline json vector_to_json(const Vec& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(number_to_json(v[i]));
  return out;
}

namespace detail {
inline const json& require_key(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw ConfigError(where + ": missing key \"" + key + "\"");
  return j.at(key);
}
}  // namespace detail

/// Keys "I0", "Psi", "Omega", "K" and "lambda".
inline LimitExperimentConfig config_from_json(const json& j) {
  const std::string where = "experiment config";
  return LimitExperimentConfig::make(matrix_from_json(detail::require_key(j, "I0", where), "I0"),
                                     matrix_from_json(detail::require_key(j, "Psi", where), "Psi"),
                                     matrix_from_json(detail::require_key(j, "Omega", where), "Omega"),
                                     matrix_from_json(detail::require_key(j, "K", where), "K"),
                                     number_from_json(detail::require_key(j, "lambda", where), "lambda"));
}

inline json config_to_json(const LimitExperimentConfig& c) {
  return json{{"I0", matrix_to_json(c.i0)},
              {"Psi", matrix_to_json(c.psi)},
              {"Omega", matrix_to_json(c.omega)},
              {"K", matrix_to_json(c.k_mat)},
              {"lambda", number_to_json(c.lambda)}};
}

inline RuleFamily rule_family_from_string(const std::string& s) {
  if (s == "zero") return RuleFamily::zero;
  if (s == "linear") return RuleFamily::linear;
  if (s == "soft_threshold" || s == "st") return RuleFamily::soft_threshold;
  if (s == "erm") return RuleFamily::erm;
  if (s == "spline") return RuleFamily::spline;
  throw ConfigError("unknown rule family \"" + s + "\"");
}

/// {"family": "zero" | "linear" | "soft_threshold" | "erm" | "spline", ...}
/// with "C" for linear, "tau" for the threshold families and "knots" and
/// "values" for splines.
inline RuleSpec rule_from_json(const json& j) {
  const std::string where = "rule";
  const auto& fam = detail::require_key(j, "family", where);
  if (!fam.is_string()) throw ConfigError("rule family must be a string");
  switch (rule_family_from_string(fam.get<std::string>())) {
    case RuleFamily::zero: return RuleSpec::zero();
    case RuleFamily::linear: return RuleSpec::linear(matrix_from_json(detail::require_key(j, "C", where), "C"));
    case RuleFamily::soft_threshold:
      return RuleSpec::soft_threshold(number_from_json(detail::require_key(j, "tau", where), "tau"));
    case RuleFamily::erm: return RuleSpec::erm(number_from_json(detail::require_key(j, "tau", where), "tau"));
    case RuleFamily::spline: {
      const Vec k = vector_from_json(detail::require_key(j, "knots", where), "knots");
      const Vec v = vector_from_json(detail::require_key(j, "values", where), "values");
      return RuleSpec::spline(std::vector<double>(k.data(), k.data() + k.size()),
                              std::vector<double>(v.data(), v.data() + v.size()));
    }
  }
  throw ConfigError("unsupported rule family");
}

inline json rule_to_json(const RuleSpec& r) {
  json out{{"family", r.name()}};
  switch (r.family()) {
    case RuleFamily::zero: break;
    case RuleFamily::linear: out["C"] = matrix_to_json(r.c()); break;
    case RuleFamily::soft_threshold:
    case RuleFamily::erm: out["tau"] = number_to_json(r.tau()); break;
    case RuleFamily::spline: {
      json k = json::array(), v = json::array();
      for (double x : r.knots()) k.push_back(x);
      for (double x : r.values()) v.push_back(x);
      out["knots"] = k;
      out["values"] = v;
      break;
    }
  }
  return out;
}

/// {"q": [...], "loss": [...], "phi": [[...], ...] (one row per atom, may be
/// omitted for no constraints), "lambda": v}
inline FiniteSpacePrimal space_from_json(const json& j) {
  const std::string where = "finite space";
  FiniteSpacePrimal prob;
  prob.q = vector_from_json(detail::require_key(j, "q", where), "q");
  prob.loss = vector_from_json(detail::require_key(j, "loss", where), "loss");
  if (j.contains("phi") && !j.at("phi").empty()) {
    prob.phi = matrix_from_json(j.at("phi"), "phi");
    if (prob.phi.rows() == 1 && prob.q.size() > 1) prob.phi.transposeInPlace();  // a flat list is one moment
  } else {
    prob.phi = Mat::Zero(prob.q.size(), 0);
  }
  prob.lambda = j.contains("lambda") ? number_from_json(j.at("lambda"), "lambda") : 1.0;
  prob.validate();
  return prob;
}

}  // namespace cmrisk
