#pragma once

#include "rftlab/policy.hpp"

#include "json.hpp"

#include <fstream>
#include <sstream>
#include <string>

namespace rftlab {

/// Parameters are stored as C99 hex-float strings, so the round trip is
/// exact for every finite value.
inline std::string hexfloat(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double parse_hexfloat(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw Error("bad float '" + s + "'");
  return v;
}

inline nlohmann::ordered_json policy_to_json(const SoftmaxPolicy& p) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(p.kind());
  j["vocab"] = {{"size", p.vocab().size},
                {"out_len", p.vocab().out_len},
                {"in_len", p.vocab().in_len},
                {"cap", p.vocab().cap}};
  nlohmann::ordered_json arch;
  if (p.kind() == PolicyKind::TabularAR) arch["n_inputs"] = p.n_inputs();
  else arch["input_dim"] = p.input_dim();
  if (p.kind() == PolicyKind::MLP) {
    arch["hidden"] = p.hidden();
    arch["activation"] = "relu";
  }
  j["architecture"] = arch;
  j["layout"] = nlohmann::ordered_json::array();
  for (const auto& b : p.params().layout)
    j["layout"].push_back({{"name", b.name}, {"offset", b.offset}, {"rows", b.rows}, {"cols", b.cols}});
  auto& vals = j["params"] = nlohmann::ordered_json::array();
  for (Eigen::Index i = 0; i < p.values().size(); ++i) vals.push_back(hexfloat(p.values()[i]));
  return j;
}

inline SoftmaxPolicy policy_from_json(const nlohmann::ordered_json& j) {
  try {
    Vocabulary v;
    v.size = j.at("vocab").at("size").get<int>();
    v.out_len = j.at("vocab").at("out_len").get<int>();
    v.in_len = j.at("vocab").at("in_len").get<int>();
    v.cap = j.at("vocab").at("cap").get<std::size_t>();
    const auto& a = j.at("architecture");
    const PolicyKind kind = policy_kind_from_string(j.at("kind").get<std::string>());
    SoftmaxPolicy p = kind == PolicyKind::TabularAR ? SoftmaxPolicy::tabular(v, a.at("n_inputs").get<std::size_t>())
                      : kind == PolicyKind::Linear
                          ? SoftmaxPolicy::linear(v, a.at("input_dim").get<std::size_t>())
                          : SoftmaxPolicy::mlp(v, a.at("input_dim").get<std::size_t>(),
                                               a.at("hidden").get<std::vector<std::size_t>>());
    const auto& layout = j.at("layout");
    if (layout.size() != p.params().layout.size()) throw Error("layout does not match architecture");
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const auto& b = p.params().layout[i];
      if (layout[i].at("name").get<std::string>() != b.name || layout[i].at("offset").get<std::size_t>() != b.offset ||
          layout[i].at("rows").get<std::size_t>() != b.rows || layout[i].at("cols").get<std::size_t>() != b.cols)
        throw Error("layout block '" + b.name + "' does not match architecture");
    }
    const auto& vals = j.at("params");
    if (vals.size() != p.param_count()) throw Error("parameter count does not match layout");
    for (std::size_t i = 0; i < vals.size(); ++i)
      p.params().values[static_cast<Eigen::Index>(i)] = parse_hexfloat(vals[i].get<std::string>());
    p.params().validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed policy document: ") + e.what());
  }
}

inline std::string policy_to_string(const SoftmaxPolicy& p) { return policy_to_json(p).dump(1) + "\n"; }

inline SoftmaxPolicy policy_from_string(const std::string& s) {
  try {
    return policy_from_json(nlohmann::ordered_json::parse(s));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed policy document: ") + e.what());
  }
}

inline void save_policy(const SoftmaxPolicy& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write policy '" + path + "'");
  out << policy_to_string(p);
}

inline SoftmaxPolicy load_policy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open policy '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return policy_from_string(ss.str());
}

}  // namespace rftlab
