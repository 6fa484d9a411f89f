#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rftlab {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Sequence = std::vector<int>;
using Tokens = std::span<const int>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CapExceeded : public Error {
 public:
  explicit CapExceeded(std::size_t required, std::size_t cap)
      : Error("enumeration cap exceeded: " + std::to_string(required) +
              " sequences required, cap is " + std::to_string(cap)),
        required_(required) {}
  std::size_t required() const { return required_; }

 private:
  std::size_t required_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Locale-independent %.17g; round-trips every finite double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(std::string_view s) {
  std::string tmp(s);
  char* end = nullptr;
  double v = std::strtod(tmp.c_str(), &end);
  if (tmp.empty() || end != tmp.c_str() + tmp.size())
    throw Error("not a number: '" + tmp + "'");
  return v;
}

inline long long parse_int(std::string_view s) {
  std::string tmp(s);
  char* end = nullptr;
  long long v = std::strtoll(tmp.c_str(), &end, 10);
  if (tmp.empty() || end != tmp.c_str() + tmp.size())
    throw Error("not an integer: '" + tmp + "'");
  return v;
}

inline std::uint64_t fnv1a64(std::string_view data,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t digest(const Vector& v) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    double d = v[i];
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&d), sizeof d), h);
  }
  return h;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline bool all_finite(const Vector& v) { return v.allFinite(); }

}  // namespace rftlab
