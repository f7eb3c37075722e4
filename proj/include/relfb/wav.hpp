#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "relfb/errors.hpp"

namespace relfb {

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;
};

namespace detail {

inline std::uint32_t read_le32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t read_le16(const unsigned char* p) {
  return std::uint16_t(p[0] | (p[1] << 8));
}
inline void put_le32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
inline void put_le16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

}  // namespace detail

/// Decodes a RIFF/WAVE byte buffer holding 16-bit mono PCM.
inline Waveform parse_wav(const std::vector<unsigned char>& bytes) {
  using detail::read_le16;
  using detail::read_le32;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw FormatError("not a RIFF/WAVE file");

  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const std::uint32_t len = read_le32(hdr + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) throw FormatError("truncated chunk");

    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (len < 16) throw FormatError("fmt chunk too short");
      const unsigned char* f = bytes.data() + body;
      const std::uint16_t audio_format = read_le16(f);
      channels = read_le16(f + 2);
      rate = read_le32(f + 4);
      bits = read_le16(f + 14);
      if (audio_format != 1) throw UnsupportedFormat("only PCM WAV is supported");
      if (channels != 1)
        throw UnsupportedFormat("expected mono, got " + std::to_string(channels) +
                                " channels");
      if (bits != 16)
        throw UnsupportedFormat("expected 16-bit samples, got " + std::to_string(bits));
      if (rate == 0) throw FormatError("zero sample rate");
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      if (!have_fmt) throw FormatError("data chunk before fmt chunk");
      if (len % 2 != 0) throw FormatError("odd data length for 16-bit PCM");
      Waveform w;
      w.sample_rate = static_cast<int>(rate);
      w.samples.resize(len / 2);
      const unsigned char* d = bytes.data() + body;
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        const auto v = static_cast<std::int16_t>(read_le16(d + 2 * i));
        w.samples[i] = static_cast<double>(v) / 32768.0;
      }
      return w;
    }
    pos = body + len + (len & 1);  // chunks are word aligned
  }
  throw FormatError(have_fmt ? "missing data chunk" : "missing fmt chunk");
}

inline Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return parse_wav(bytes);
}

/// Quantizes to 16 bits: round(x * 32768), saturating at the int16 range.
inline std::int16_t quantize_sample(double x) {
  const double v = std::nearbyint(x * 32768.0);
  return static_cast<std::int16_t>(std::clamp(v, -32768.0, 32767.0));
}

inline std::vector<unsigned char> encode_wav(const Waveform& w) {
  if (w.sample_rate <= 0) throw FormatError("sample rate must be positive");
  using detail::put_le16;
  using detail::put_le32;
  const auto data_len = static_cast<std::uint32_t>(w.samples.size() * 2);
  std::vector<unsigned char> out;
  out.reserve(44 + data_len);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_le32(out, 36 + data_len);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_le32(out, 16);
  put_le16(out, 1);  // PCM
  put_le16(out, 1);  // mono
  put_le32(out, static_cast<std::uint32_t>(w.sample_rate));
  put_le32(out, static_cast<std::uint32_t>(w.sample_rate) * 2);
  put_le16(out, 2);
  put_le16(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_le32(out, data_len);
  for (double s : w.samples) put_le16(out, static_cast<std::uint16_t>(quantize_sample(s)));
  return out;
}

inline void write_wav(const std::filesystem::path& path, const Waveform& w) {
  const auto bytes = encode_wav(w);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

}  // namespace relfb
