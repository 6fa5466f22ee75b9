#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cmf/tensor.hpp"
#include "cmf/util.hpp"

namespace cmf {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are raw little-endian scalars");

// On-disk tensor store. Layout: the magic "CMF1", a u64 entry count, one
// manifest record per entry (name, dtype, shape), then the raw buffers in
// manifest order. Round-trips are bit-exact.
class Checkpoint {
 public:
  struct Entry {
    std::string dtype;
    Shape shape;
    std::vector<unsigned char> bytes;
  };

  static constexpr char kMagic[4] = {'C', 'M', 'F', '1'};

  bool has(const std::string& name) const { return entries_.count(name) > 0; }
  size_t size() const { return entries_.size(); }

  std::vector<std::string> keys() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, e] : entries_) out.push_back(name);
    return out;
  }

  std::vector<std::string> keys_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries_)
      if (name.rfind(prefix, 0) == 0) out.push_back(name);
    return out;
  }

  void erase_prefix(const std::string& prefix) {
    for (auto it = entries_.begin(); it != entries_.end();)
      it = it->first.rfind(prefix, 0) == 0 ? entries_.erase(it) : std::next(it);
  }

  template <class S>
  void put(const std::string& name, const Tensor<S>& t) {
    Entry e;
    e.dtype = DTypeName<S>::value;
    e.shape = t.shape();
    e.bytes.resize(static_cast<size_t>(t.size()) * sizeof(S));
    if (t.size() > 0) std::memcpy(e.bytes.data(), t.data(), e.bytes.size());
    entries_[name] = std::move(e);
  }

  template <class S>
  Tensor<S> get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) fail("checkpoint: no tensor named '", name, "'");
    const Entry& e = it->second;
    if (e.dtype != DTypeName<S>::value)
      fail("checkpoint: tensor '", name, "' is ", e.dtype, ", requested ",
           DTypeName<S>::value);
    Tensor<S> t = Tensor<S>::zeros(e.shape);
    if (t.size() > 0) std::memcpy(t.data(), e.bytes.data(), e.bytes.size());
    return t;
  }

  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) fail("checkpoint: no tensor named '", name, "'");
    return it->second;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) fail("checkpoint: cannot open '", path, "' for writing");
    f.write(kMagic, 4);
    write_u64(f, entries_.size());
    for (const auto& [name, e] : entries_) {
      write_str(f, name);
      write_str(f, e.dtype);
      write_u64(f, e.shape.size());
      for (int64_t d : e.shape) write_u64(f, static_cast<uint64_t>(d));
    }
    for (const auto& [name, e] : entries_)
      f.write(reinterpret_cast<const char*>(e.bytes.data()),
              static_cast<std::streamsize>(e.bytes.size()));
    if (!f) fail("checkpoint: write to '", path, "' failed");
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail("checkpoint: cannot open '", path, "'");
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
      fail("checkpoint: '", path, "' is not a CMF1 file");
    Checkpoint ck;
    const uint64_t count = read_u64(f, path);
    std::vector<std::string> order;
    order.reserve(count);
    for (uint64_t k = 0; k < count; ++k) {
      Entry e;
      std::string name = read_str(f, path);
      e.dtype = read_str(f, path);
      if (e.dtype != "float32" && e.dtype != "float64")
        fail("checkpoint: '", path, "' tensor '", name, "' has unknown dtype '",
             e.dtype, "'");
      const uint64_t rank = read_u64(f, path);
      if (rank > 8) fail("checkpoint: '", path, "' tensor '", name, "' rank ", rank);
      e.shape.resize(rank);
      for (uint64_t d = 0; d < rank; ++d)
        e.shape[d] = static_cast<int64_t>(read_u64(f, path));
      order.push_back(name);
      ck.entries_[name] = std::move(e);
    }
    for (const std::string& name : order) {
      Entry& e = ck.entries_[name];
      const size_t scalar = e.dtype == "float32" ? 4 : 8;
      e.bytes.resize(static_cast<size_t>(numel(e.shape)) * scalar);
      f.read(reinterpret_cast<char*>(e.bytes.data()),
             static_cast<std::streamsize>(e.bytes.size()));
      if (!f) fail("checkpoint: '", path, "' truncated in tensor '", name, "'");
    }
    return ck;
  }

  bool operator==(const Checkpoint& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (const auto& [name, e] : entries_) {
      auto it = other.entries_.find(name);
      if (it == other.entries_.end()) return false;
      if (e.dtype != it->second.dtype || e.shape != it->second.shape ||
          e.bytes != it->second.bytes)
        return false;
    }
    return true;
  }

 private:
  std::map<std::string, Entry> entries_;

  static void write_u64(std::ofstream& f, uint64_t v) {
    unsigned char b[8];
    for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(v >> (8 * k));
    f.write(reinterpret_cast<const char*>(b), 8);
  }
  static void write_str(std::ofstream& f, const std::string& s) {
    write_u64(f, s.size());
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  static uint64_t read_u64(std::ifstream& f, const std::string& path) {
    unsigned char b[8];
    f.read(reinterpret_cast<char*>(b), 8);
    if (!f) fail("checkpoint: '", path, "' truncated");
    uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= static_cast<uint64_t>(b[k]) << (8 * k);
    return v;
  }
  static std::string read_str(std::ifstream& f, const std::string& path) {
    const uint64_t len = read_u64(f, path);
    if (len > (1u << 20)) fail("checkpoint: '", path, "' has oversized string");
    std::string s(len, '\0');
    f.read(s.data(), static_cast<std::streamsize>(len));
    if (!f) fail("checkpoint: '", path, "' truncated");
    return s;
  }
};

// Strings ride inside checkpoints as one tensor element per byte.
template <class S>
Tensor<S> string_tensor(const std::string& s) {
  Tensor<S> t = Tensor<S>::zeros({static_cast<int64_t>(s.size())});
  for (size_t i = 0; i < s.size(); ++i)
    t[static_cast<int64_t>(i)] = static_cast<S>(static_cast<unsigned char>(s[i]));
  return t;
}

template <class S>
std::string tensor_string(const Tensor<S>& t) {
  std::string s(static_cast<size_t>(t.size()), '\0');
  for (int64_t i = 0; i < t.size(); ++i)
    s[static_cast<size_t>(i)] = static_cast<char>(static_cast<int>(t[i]));
  return s;
}

}  // namespace cmf
