#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

// Plain "key=value" text files: one pair per line, '#' starts a comment.
namespace dvc3::kv {

using Map = std::map<std::string, std::string>;

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline Map parse(std::istream& is, const std::string& origin) {
  Map out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": expected key=value");
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

inline Map read(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return parse(f, path.string());
}

inline void write(const std::filesystem::path& path, const Map& m) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  for (const auto& [k, v] : m) f << k << '=' << v << '\n';
}

template <typename V>
V to(const std::string& key, const std::string& s) {
  if constexpr (std::is_same_v<V, std::string>) {
    return s;
  } else if constexpr (std::is_same_v<V, bool>) {
    if (s == "1" || s == "true") return true;
    if (s == "0" || s == "false") return false;
    throw std::invalid_argument(key + ": expected true/false, got '" + s + "'");
  } else if constexpr (std::is_floating_point_v<V>) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || s.empty()) throw std::invalid_argument(key + ": expected a number, got '" + s + "'");
    return static_cast<V>(v);
  } else {
    V v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw std::invalid_argument(key + ": expected an integer, got '" + s + "'");
    return v;
  }
}

template <typename V>
V get(const Map& m, const std::string& key, V fallback) {
  auto it = m.find(key);
  return it == m.end() ? fallback : to<V>(key, it->second);
}

template <typename V>
std::string str(const V& v) {
  if constexpr (std::is_same_v<V, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<V, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_floating_point_v<V>) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  } else {
    return std::to_string(v);
  }
}

}  // namespace dvc3::kv
