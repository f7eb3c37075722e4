#pragma once

// Binary container of named tensors and string metadata.
//
//   magic    8 bytes  "RELFBCK1"
//   version  u32      1
//   ntensors u32
//   per tensor:
//     name_len u32, name bytes (UTF-8, no terminator)
//     rank u32, dims u64 x rank
//     data f64 x prod(dims), IEEE-754 little-endian
//   nmeta u32
//   per entry: key_len u32, key bytes, value_len u32, value bytes
//
// All integers are little-endian. Entries keep insertion order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "relfb/errors.hpp"
#include "relfb/tensor.hpp"

namespace relfb {

struct Container {
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::vector<std::pair<std::string, std::string>> meta;

  void put(std::string name, Tensor t) { tensors.emplace_back(std::move(name), std::move(t)); }
  void put_meta(std::string key, std::string value) {
    meta.emplace_back(std::move(key), std::move(value));
  }

  const Tensor& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw FormatError("checkpoint: missing tensor '" + name + "'");
  }
  bool has_tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return true;
    return false;
  }
  const std::string& meta_value(const std::string& key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return v;
    throw FormatError("checkpoint: missing metadata '" + key + "'");
  }

  friend bool operator==(const Container&, const Container&) = default;
};

inline constexpr char kContainerMagic[8] = {'R', 'E', 'L', 'F', 'B', 'C', 'K', '1'};
inline constexpr std::uint32_t kContainerVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { out_.insert(out_.end(), p, p + n); }
  std::vector<char>& buffer() { return out_; }

 private:
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::vector<char> out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<char>& in) : in_(in) {}
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::string bytes() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(in_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void raw(char* out, std::size_t n) {
    need(n);
    std::memcpy(out, in_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw FormatError("checkpoint: truncated");
  }
  template <typename T>
  T le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }
  const std::vector<char>& in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> encode_container(const Container& c) {
  detail::ByteWriter w;
  w.raw(kContainerMagic, sizeof kContainerMagic);
  w.u32(kContainerVersion);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (double v : t.values()) w.f64(v);
  }
  w.u32(static_cast<std::uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    w.bytes(k);
    w.bytes(v);
  }
  return std::move(w.buffer());
}

inline Container decode_container(const std::vector<char>& bytes) {
  detail::ByteReader r(bytes);
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, kContainerMagic, 8) != 0) throw FormatError("checkpoint: bad magic");
  if (const auto v = r.u32(); v != kContainerVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(v));
  Container c;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.bytes();
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = r.f64();
    c.put(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  const std::uint32_t nm = r.u32();
  for (std::uint32_t i = 0; i < nm; ++i) {
    std::string k = r.bytes();
    c.put_meta(std::move(k), r.bytes());
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return c;
}

inline void save_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline Container load_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

}  // namespace relfb
