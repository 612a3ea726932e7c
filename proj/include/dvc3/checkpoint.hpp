#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "dvc3/autograd.hpp"
#include "dvc3/binio.hpp"

// Flat parameter container:
//   "DVC3CKPT" | version u16 | { name_len u16 | name | rank u8 | dims u32... | f32 data | crc32 u32 }*
// Entries run to end of file; the CRC covers the entry bytes before it.
namespace dvc3 {

inline constexpr std::string_view kCheckpointMagic = "DVC3CKPT";
inline constexpr std::uint16_t kCheckpointVersion = 2;

struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

namespace detail {
inline std::string serialize_entry(const CheckpointEntry& e) {
  std::ostringstream os;
  binio::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(e.name.size()));
  os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
  binio::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(e.dims.size()));
  for (auto d : e.dims) binio::put_le<std::uint32_t>(os, d);
  for (float v : e.values) binio::put_f32(os, v);
  return std::move(os).str();
}

inline std::uint32_t crc32_of(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}
}  // namespace detail

inline void write_checkpoint(std::ostream& os, const std::vector<CheckpointEntry>& entries) {
  binio::put_magic(os, kCheckpointMagic);
  binio::put_le<std::uint16_t>(os, kCheckpointVersion);
  for (const auto& e : entries) {
    if (e.name.size() > 0xFFFF) throw std::invalid_argument("checkpoint: name too long");
    if (e.dims.size() > 0xFF) throw std::invalid_argument("checkpoint: rank too large");
    std::size_t count = 1;
    for (auto d : e.dims) count *= d;
    if (count != e.values.size()) throw std::invalid_argument("checkpoint: " + e.name + " size mismatch");
    const auto bytes = detail::serialize_entry(e);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    binio::put_le<std::uint32_t>(os, detail::crc32_of(bytes));
  }
}

inline std::vector<CheckpointEntry> read_checkpoint(std::istream& is) {
  binio::expect_magic(is, kCheckpointMagic, "checkpoint");
  const auto version = binio::get_le<std::uint16_t>(is);
  if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  std::vector<CheckpointEntry> out;
  while (is.peek() != std::char_traits<char>::eof()) {
    CheckpointEntry e;
    const auto len = binio::get_le<std::uint16_t>(is);
    e.name.resize(len);
    if (!is.read(e.name.data(), len)) throw std::runtime_error("checkpoint: truncated name");
    const auto rank = binio::get_le<std::uint8_t>(is);
    std::size_t count = 1;
    for (int i = 0; i < rank; ++i) {
      e.dims.push_back(binio::get_le<std::uint32_t>(is));
      count *= e.dims.back();
    }
    if (count > (std::size_t{1} << 31)) throw std::runtime_error("checkpoint: implausible tensor size in " + e.name);
    e.values.resize(count);
    for (auto& v : e.values) v = binio::get_f32(is);
    if (binio::get_le<std::uint32_t>(is) != detail::crc32_of(detail::serialize_entry(e)))
      throw std::runtime_error("checkpoint: checksum mismatch in " + e.name);
    out.push_back(std::move(e));
  }
  return out;
}

template <typename T>
CheckpointEntry to_entry(const std::string& name, const Tensor<T>& t) {
  CheckpointEntry e{name, {}, {}};
  for (auto d : t.shape()) e.dims.push_back(static_cast<std::uint32_t>(d));
  e.values.assign(t.values().begin(), t.values().end());
  return e;
}

template <typename T>
Tensor<T> from_entry(const CheckpointEntry& e) {
  std::vector<std::size_t> shape(e.dims.begin(), e.dims.end());
  return Tensor<T>(shape, std::vector<T>(e.values.begin(), e.values.end()));
}

// Parameters (and optionally their Adam moments) as checkpoint entries.
template <typename T>
std::vector<CheckpointEntry> parameters_to_entries(std::span<Parameter<T>* const> params, bool with_moments) {
  std::vector<CheckpointEntry> out;
  for (auto* p : params) out.push_back(to_entry(p->name, p->value));
  if (with_moments) {
    for (auto* p : params) {
      out.push_back(to_entry("opt.m." + p->name, p->m));
      out.push_back(to_entry("opt.v." + p->name, p->v));
    }
  }
  return out;
}

// Loads values by name; every parameter must be present with a matching shape.
// Moments are restored when present.
template <typename T>
void load_parameters(std::span<Parameter<T>* const> params, const std::vector<CheckpointEntry>& entries) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto fetch = [&](const std::string& name, Tensor<T>& dst, bool required) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      if (required) throw std::runtime_error("checkpoint: missing parameter " + name);
      return;
    }
    Tensor<T> t = from_entry<T>(*it->second);
    if (t.shape() != dst.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for " + name + ": " + t.shape_string() + " vs " +
                               dst.shape_string());
    }
    if (!t.all_finite()) throw std::runtime_error("checkpoint: non-finite values in " + name);
    dst = std::move(t);
  };
  for (auto* p : params) {
    fetch(p->name, p->value, true);
    fetch("opt.m." + p->name, p->m, false);
    fetch("opt.v." + p->name, p->v, false);
  }
}

inline void save_checkpoint_file(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_checkpoint(os, entries);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline std::vector<CheckpointEntry> load_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_checkpoint(is);
}

inline const CheckpointEntry* find_entry(const std::vector<CheckpointEntry>& entries, const std::string& name) {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

}  // namespace dvc3
