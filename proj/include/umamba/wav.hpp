#pragma once

// Minimal RIFF/WAVE reader and writer: mono, 16-bit PCM.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace umamba::wav {

struct Audio {
  int sample_rate = 8000;
  std::vector<double> samples;  // in [-1, 1]
};

class WavError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t get_u16(const unsigned char* p) { return std::uint16_t(p[0] | (p[1] << 8)); }

}  // namespace detail

inline std::int16_t to_pcm16(double v) {
  const double scaled = std::round(std::clamp(v, -1.0, 1.0) * 32767.0);
  return static_cast<std::int16_t>(scaled);
}

inline std::string encode(std::span<const double> samples, int sample_rate) {
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  detail::put_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);  // PCM
  detail::put_u16(out, 1);  // mono
  detail::put_u32(out, static_cast<std::uint32_t>(sample_rate));
  detail::put_u32(out, static_cast<std::uint32_t>(sample_rate) * 2);
  detail::put_u16(out, 2);
  detail::put_u16(out, 16);
  out += "data";
  detail::put_u32(out, data_bytes);
  for (double v : samples) detail::put_u16(out, static_cast<std::uint16_t>(to_pcm16(v)));
  return out;
}

inline void write(const std::filesystem::path& path, std::span<const double> samples, int sample_rate = 8000) {
  const std::string bytes = encode(samples, sample_rate);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw WavError("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw WavError("write failed for " + path.string());
}

inline Audio decode(const std::string& bytes, const std::string& origin = "<memory>") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0) {
    throw WavError(origin + ": not a RIFF/WAVE file");
  }
  std::size_t pos = 12;
  bool have_fmt = false;
  Audio audio;
  while (pos + 8 <= bytes.size()) {
    const std::string id = bytes.substr(pos, 4);
    const std::uint32_t len = detail::get_u32(p + pos + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) throw WavError(origin + ": truncated '" + id + "' chunk");
    if (id == "fmt ") {
      if (len < 16) throw WavError(origin + ": short fmt chunk");
      const std::uint16_t format = detail::get_u16(p + body);
      const std::uint16_t channels = detail::get_u16(p + body + 2);
      audio.sample_rate = static_cast<int>(detail::get_u32(p + body + 4));
      const std::uint16_t bits = detail::get_u16(p + body + 14);
      if (format != 1 || channels != 1 || bits != 16) {
        throw WavError(origin + ": only mono 16-bit PCM is supported (format " + std::to_string(format) +
                       ", channels " + std::to_string(channels) + ", bits " + std::to_string(bits) + ")");
      }
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw WavError(origin + ": data chunk before fmt chunk");
      audio.samples.resize(len / 2);
      for (std::size_t i = 0; i < audio.samples.size(); ++i) {
        const auto v = static_cast<std::int16_t>(detail::get_u16(p + body + 2 * i));
        audio.samples[i] = static_cast<double>(v) / 32767.0;
      }
      return audio;
    }
    pos = body + len + (len & 1);
  }
  throw WavError(origin + ": no data chunk");
}

inline Audio read(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw WavError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode(bytes, path.string());
}

}  // namespace umamba::wav
