#pragma once

// Reverberant noisy mixture simulation: shoebox room sampling, image-source
// room impulse responses, noise mixing at a drawn SNR, and reproducible
// dataset generation with a tab-separated manifest.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "umamba/wav.hpp"

namespace umamba::mixsim {

inline constexpr double kSpeedOfSound = 343.0;
inline constexpr double kSabineConstant = 0.161;
inline constexpr int kSincTaps = 81;
inline constexpr int kSincHalf = kSincTaps / 2;

using Vec3 = std::array<double, 3>;

struct Range {
  double lo = 0.0;
  double hi = 0.0;

  double sample(std::mt19937_64& rng) const { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  bool contains(double v) const { return v >= lo && v <= hi; }
};

enum class AbsorptionModel { ImageSource, Sabine };

// Sampling distributions for one room; defaults follow the reverberation
// configuration used for the noisy reverberant two-speaker corpus.
struct RoomConfig {
  Range length{5.0, 10.0};
  Range width{5.0, 10.0};
  Range height{3.0, 4.0};
  Range t60{0.2, 0.6};
  Range receiver_offset{-0.2, 0.2};
  Range receiver_height{0.9, 1.8};
  Range source_height{0.9, 1.8};
  Range source_distance{0.66, 2.0};
  Range source_azimuth{0.0, 2.0 * std::numbers::pi};
  double wall_margin = 0.1;
  AbsorptionModel absorption = AbsorptionModel::ImageSource;

  void validate() const {
    const std::pair<const char*, const Range*> all[] = {
        {"length", &length},           {"width", &width},
        {"height", &height},           {"t60", &t60},
        {"receiver_offset", &receiver_offset}, {"receiver_height", &receiver_height},
        {"source_height", &source_height},     {"source_distance", &source_distance},
        {"source_azimuth", &source_azimuth}};
    for (const auto& [name, r] : all) {
      if (!(r->lo <= r->hi)) {
        throw std::invalid_argument(std::string("room config: ") + name + " range has min > max (" +
                                    std::to_string(r->lo) + " > " + std::to_string(r->hi) + ")");
      }
    }
    if (length.lo <= 0 || width.lo <= 0 || height.lo <= 0) throw std::invalid_argument("room config: dimensions must be positive");
    if (t60.lo <= 0) throw std::invalid_argument("room config: t60 must be positive");
  }
};

struct RoomInstance {
  Vec3 dims{};
  double t60 = 0.0;
  Vec3 receiver{};
  std::vector<Vec3> sources;
  std::vector<double> source_distance;  // horizontal, as drawn
  std::vector<double> source_azimuth;
  double absorption = 0.0;
};

// Uniform wall absorption from Sabine's formula, alpha = 0.161 V / (S T60).
inline double sabine_absorption(const Vec3& dims, double t60) {
  if (!(t60 > 0)) throw std::invalid_argument("sabine_absorption: t60 must be positive");
  const double volume = dims[0] * dims[1] * dims[2];
  const double surface = 2.0 * (dims[0] * dims[1] + dims[0] * dims[2] + dims[1] * dims[2]);
  const double alpha = kSabineConstant * volume / (surface * t60);
  if (alpha >= 1.0) {
    throw std::domain_error("sabine_absorption: room of volume " + std::to_string(volume) +
                            " m^3 cannot reach T60 = " + std::to_string(t60) + " s (alpha = " +
                            std::to_string(alpha) + " >= 1)");
  }
  return alpha;
}

// Absorption for which the image-source response itself decays at the
// requested T60. Late image energy arriving from direction u after time t
// carries exp(-k c t g(u)), g(u) = sum_i |u_i| / L_i, k = -ln(1 - alpha);
// its backward integral is averaged over the sphere, fitted from -5 to
// -25 dB like a measured decay curve, and k is rescaled (the curve shape
// scales exactly with 1 / k).
inline double image_source_absorption(const Vec3& dims, double t60) {
  if (!(t60 > 0)) throw std::invalid_argument("image_source_absorption: t60 must be positive");
  // g(u) only sees |u_i|, so one octant of the midpoint grid suffices.
  constexpr int kPolar = 32, kAzimuth = 32;
  std::vector<double> rate;
  rate.reserve(kPolar * kAzimuth);
  for (int i = 0; i < kPolar; ++i) {
    const double z = (i + 0.5) / kPolar;
    const double rho = std::sqrt(1.0 - z * z);
    for (int j = 0; j < kAzimuth; ++j) {
      const double phi = (j + 0.5) * 0.5 * std::numbers::pi / kAzimuth;
      rate.push_back(kSpeedOfSound * (rho * std::cos(phi) / dims[0] + rho * std::sin(phi) / dims[1] + z / dims[2]));
    }
  }
  double mean_rate = 0.0;
  for (double r : rate) mean_rate += r / static_cast<double>(rate.size());
  const double dt = 1.0 / (40.0 * mean_rate);
  // term[i] = exp(-rate[i] t) / rate[i], advanced by a constant factor per step.
  std::vector<double> term(rate.size()), step(rate.size());
  double e0 = 0.0;
  for (std::size_t i = 0; i < rate.size(); ++i) {
    term[i] = 1.0 / rate[i];
    step[i] = std::exp(-rate[i] * dt);
    e0 += term[i];
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int n = 0;
  for (int k = 0;; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < term.size(); ++i) {
      acc += term[i];
      term[i] *= step[i];
    }
    const double t = k * dt;
    const double db = 10.0 * std::log10(acc / e0);
    if (db < -25.0) break;
    if (db <= -5.0) {
      sx += t, sy += db, sxx += t * t, sxy += t * db;
      ++n;
    }
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  const double unit_t60 = -60.0 / slope;
  return -std::expm1(-unit_t60 / t60);
}

inline RoomInstance sample_room(const RoomConfig& cfg, std::mt19937_64& rng, std::size_t sources = 2) {
  RoomInstance room;
  room.dims = {cfg.length.sample(rng), cfg.width.sample(rng), cfg.height.sample(rng)};
  room.t60 = cfg.t60.sample(rng);
  auto clamp_inside = [&](Vec3 p) {
    for (int i = 0; i < 3; ++i) p[i] = std::clamp(p[i], cfg.wall_margin, room.dims[i] - cfg.wall_margin);
    return p;
  };
  const double rx = room.dims[0] / 2.0 + cfg.receiver_offset.sample(rng);
  const double ry = room.dims[1] / 2.0 + cfg.receiver_offset.sample(rng);
  const double rz = cfg.receiver_height.sample(rng);
  room.receiver = clamp_inside({rx, ry, rz});
  for (std::size_t s = 0; s < sources; ++s) {
    const double h = cfg.source_height.sample(rng);
    const double dist = cfg.source_distance.sample(rng);
    const double theta = cfg.source_azimuth.sample(rng);
    room.sources.push_back(clamp_inside(
        {room.receiver[0] + dist * std::cos(theta), room.receiver[1] + dist * std::sin(theta), h}));
    room.source_distance.push_back(dist);
    room.source_azimuth.push_back(theta);
  }
  room.absorption = cfg.absorption == AbsorptionModel::Sabine ? sabine_absorption(room.dims, room.t60)
                                                              : image_source_absorption(room.dims, room.t60);
  return room;
}

inline RoomInstance sample_room(const RoomConfig& cfg, std::uint64_t seed, std::size_t sources = 2) {
  std::mt19937_64 rng(seed);
  return sample_room(cfg, rng, sources);
}

inline double distance(const Vec3& a, const Vec3& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

struct RirOptions {
  int sample_rate = 8000;
  int max_order = 30;
  // Every arrival is shifted by this many samples so the interpolation
  // kernel of the direct path fits after t = 0.
  int latency = kSincHalf;
  double truncate_db = 60.0;
  bool highpass = true;
};

// Delay in samples of the direct path, including latency.
inline double direct_delay(const RoomInstance& room, std::size_t source, const RirOptions& opt = {}) {
  return distance(room.sources.at(source), room.receiver) / kSpeedOfSound * opt.sample_rate + opt.latency;
}

// Image-source impulse response for one source. Each image of reflection
// order k contributes (1 - alpha)^(k/2) / (4 pi d) at delay d / c, spread
// over an 81-tap Hann-windowed sinc. The tail is cut where the squared
// response stays more than `truncate_db` below the direct-path peak.
inline std::vector<double> image_source_rir(const RoomInstance& room, std::size_t source, const RirOptions& opt = {}) {
  if (opt.max_order < 0) throw std::invalid_argument("image_source_rir: max_order must be >= 0");
  const Vec3& s = room.sources.at(source);
  const Vec3& r = room.receiver;
  const double beta = std::sqrt(std::max(0.0, 1.0 - room.absorption));
  const int m = opt.max_order / 2 + 1;
  const double fs = opt.sample_rate;

  struct Arrival {
    double delay;
    double gain;
  };
  std::vector<Arrival> arrivals;
  std::vector<double> beta_pow{1.0};
  for (int k = 1; k <= opt.max_order; ++k) beta_pow.push_back(beta_pow.back() * beta);

  for (int nx = -m; nx <= m; ++nx) {
    for (int qx = 0; qx <= 1; ++qx) {
      const int ox = std::abs(nx - qx) + std::abs(nx);
      if (ox > opt.max_order) continue;
      const double ix = (1 - 2 * qx) * s[0] + 2.0 * nx * room.dims[0];
      for (int ny = -m; ny <= m; ++ny) {
        for (int qy = 0; qy <= 1; ++qy) {
          const int oy = std::abs(ny - qy) + std::abs(ny);
          if (ox + oy > opt.max_order) continue;
          const double iy = (1 - 2 * qy) * s[1] + 2.0 * ny * room.dims[1];
          for (int nz = -m; nz <= m; ++nz) {
            for (int qz = 0; qz <= 1; ++qz) {
              const int oz = std::abs(nz - qz) + std::abs(nz);
              const int order = ox + oy + oz;
              if (order > opt.max_order) continue;
              const double iz = (1 - 2 * qz) * s[2] + 2.0 * nz * room.dims[2];
              const double d = distance({ix, iy, iz}, r);
              const double g = beta_pow.at(order);
              if (order > 0 && g == 0.0) continue;
              arrivals.push_back({d / kSpeedOfSound * fs + opt.latency,
                                  g / (4.0 * std::numbers::pi * d)});
            }
          }
        }
      }
    }
  }

  double max_delay = 0.0;
  for (const auto& a : arrivals) max_delay = std::max(max_delay, a.delay);
  std::vector<double> h(static_cast<std::size_t>(std::ceil(max_delay)) + kSincHalf + 2, 0.0);
  for (const auto& a : arrivals) {
    const auto centre = static_cast<long>(std::floor(a.delay));
    for (long i = centre - kSincHalf; i <= centre + kSincHalf + 1; ++i) {
      if (i < 0 || i >= static_cast<long>(h.size())) continue;
      const double x = static_cast<double>(i) - a.delay;
      if (std::abs(x) >= kSincTaps / 2.0) continue;
      const double window = 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * x / kSincTaps));
      const double sinc = x == 0.0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
      h[static_cast<std::size_t>(i)] += a.gain * window * sinc;
    }
  }

  if (opt.highpass) {
    // Allen-Berkley DC-blocking high-pass at 100 Hz.
    const double w = 2.0 * std::numbers::pi * 100.0 / fs;
    const double r1 = std::exp(-w), b1 = 2.0 * r1 * std::cos(w), b2 = -r1 * r1, a1 = -(1.0 + r1);
    double y0 = 0.0, y1 = 0.0, y2 = 0.0;
    for (double& v : h) {
      y2 = y1;
      y1 = y0;
      y0 = b1 * y1 + b2 * y2 + v;
      v = y0 + a1 * y1 + r1 * y2;
    }
  }

  const double direct = 1.0 / (4.0 * std::numbers::pi * distance(s, r));
  const double floor = direct * direct * std::pow(10.0, -opt.truncate_db / 10.0);
  std::size_t last = 0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (h[i] * h[i] >= floor) last = i;
  }
  h.resize(last + 1);
  return h;
}

// Full linear convolution truncated to the length of `signal`.
inline std::vector<double> convolve_truncated(std::span<const double> signal, std::span<const double> rir) {
  std::vector<double> out(signal.size(), 0.0);
  for (std::size_t j = 0; j < rir.size(); ++j) {
    const double g = rir[j];
    if (g == 0.0) continue;
    for (std::size_t i = j; i < out.size(); ++i) out[i] += g * signal[i - j];
  }
  return out;
}

// ------------------------------------------------------------------ sources

using SourceProvider =
    std::function<std::vector<std::vector<double>>(std::mt19937_64& rng, std::size_t count, std::size_t samples)>;

// Sums of harmonic tones with random fundamentals, onsets and offsets.
// Fundamentals of different sources differ by at least 10%.
inline std::vector<std::vector<double>> harmonic_sources(std::mt19937_64& rng, std::size_t count, std::size_t samples,
                                                         int sample_rate = 8000) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<double>> out;
  std::vector<double> f0s;
  for (std::size_t s = 0; s < count; ++s) {
    double f0 = 0.0;
    for (int attempt = 0; attempt < 100; ++attempt) {
      f0 = 100.0 + 250.0 * unit(rng);
      bool distinct = true;
      for (double other : f0s) distinct = distinct && std::abs(std::log(f0 / other)) > std::log(1.1);
      if (distinct) break;
    }
    f0s.push_back(f0);
    const int harmonics = 3 + static_cast<int>(unit(rng) * 4.0);
    std::vector<double> phases(harmonics);
    for (double& p : phases) p = 2.0 * std::numbers::pi * unit(rng);
    const auto onset = static_cast<std::size_t>(unit(rng) * 0.25 * static_cast<double>(samples));
    const auto offset = samples - static_cast<std::size_t>(unit(rng) * 0.25 * static_cast<double>(samples));
    const double vibrato = 2.0 + 4.0 * unit(rng);
    std::vector<double> x(samples, 0.0);
    const double ramp = 0.02 * sample_rate;
    for (std::size_t i = onset; i < offset; ++i) {
      const double t = static_cast<double>(i) / sample_rate;
      const double env = std::min({1.0, (static_cast<double>(i - onset) + 1.0) / ramp,
                                   static_cast<double>(offset - i) / ramp});
      const double inst = 2.0 * std::numbers::pi * f0 * (t + 0.002 * std::sin(2.0 * std::numbers::pi * vibrato * t));
      double v = 0.0;
      for (int k = 1; k <= harmonics; ++k) {
        if (f0 * k >= 0.45 * sample_rate) break;
        v += std::sin(k * inst + phases[k - 1]) / k;
      }
      x[i] = env * v;
    }
    double energy = 0.0;
    for (double v : x) energy += v * v;
    const double rms = std::sqrt(energy / static_cast<double>(samples));
    if (rms > 0) {
      for (double& v : x) v *= 0.1 / rms;
    }
    out.push_back(std::move(x));
  }
  return out;
}

// ------------------------------------------------------------------ noise

enum class NoiseType { White, Pink, Directory };

inline NoiseType parse_noise_type(const std::string& name) {
  if (name == "white") return NoiseType::White;
  if (name == "pink") return NoiseType::Pink;
  if (name == "dir" || name == "directory") return NoiseType::Directory;
  throw std::invalid_argument("unknown noise type '" + name + "' (expected white, pink or dir)");
}

inline std::string to_string(NoiseType t) {
  switch (t) {
    case NoiseType::White: return "white";
    case NoiseType::Pink: return "pink";
    case NoiseType::Directory: return "dir";
  }
  return "unknown";
}

struct NoiseConfig {
  NoiseType type = NoiseType::White;
  std::filesystem::path directory;
  Range snr_db{0.0, 5.0};
  bool enabled = true;
};

inline std::vector<double> make_noise(const NoiseConfig& cfg, std::mt19937_64& rng, std::size_t samples) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> out(samples);
  switch (cfg.type) {
    case NoiseType::White:
      for (double& v : out) v = normal(rng);
      break;
    case NoiseType::Pink: {
      // Paul Kellet's refined pink filter.
      double b0 = 0, b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0, b6 = 0;
      for (double& v : out) {
        const double w = normal(rng);
        b0 = 0.99886 * b0 + w * 0.0555179;
        b1 = 0.99332 * b1 + w * 0.0750759;
        b2 = 0.96900 * b2 + w * 0.1538520;
        b3 = 0.86650 * b3 + w * 0.3104856;
        b4 = 0.55000 * b4 + w * 0.5329522;
        b5 = -0.7616 * b5 - w * 0.0168980;
        v = b0 + b1 + b2 + b3 + b4 + b5 + b6 + w * 0.5362;
        b6 = w * 0.115926;
      }
      break;
    }
    case NoiseType::Directory: {
      std::vector<std::filesystem::path> files;
      if (!std::filesystem::is_directory(cfg.directory)) {
        throw std::runtime_error("noise directory " + cfg.directory.string() + " does not exist");
      }
      for (const auto& e : std::filesystem::directory_iterator(cfg.directory)) {
        if (e.path().extension() == ".wav") files.push_back(e.path());
      }
      if (files.empty()) throw std::runtime_error("noise directory " + cfg.directory.string() + " has no .wav files");
      std::sort(files.begin(), files.end());
      const auto pick = std::uniform_int_distribution<std::size_t>(0, files.size() - 1)(rng);
      const auto audio = wav::read(files[pick]);
      if (audio.sample_rate != 8000) throw std::runtime_error(files[pick].string() + ": noise must be 8 kHz");
      if (audio.samples.empty()) throw std::runtime_error(files[pick].string() + ": empty noise file");
      const auto start = std::uniform_int_distribution<std::size_t>(0, audio.samples.size() - 1)(rng);
      for (std::size_t i = 0; i < samples; ++i) out[i] = audio.samples[(start + i) % audio.samples.size()];
      break;
    }
  }
  return out;
}

// ------------------------------------------------------------------ mixing

struct MixOptions {
  Range snr_db{0.0, 5.0};
  std::optional<double> fixed_snr_db;
  bool add_noise = true;
  double peak = 0.9;
  RirOptions rir;
};

struct MixtureSample {
  std::vector<double> mixture;
  std::vector<std::vector<double>> reverberant_sources;
  std::vector<double> noise;
  RoomInstance room;
  std::uint64_t seed = 0;
  double snr_db = std::numeric_limits<double>::infinity();
  double noise_gain = 0.0;
  double output_gain = 1.0;
};

inline double energy(std::span<const double> x) {
  double e = 0.0;
  for (double v : x) e += v * v;
  return e;
}

// Reverberates each dry source through its RIR, scales the noise to the
// drawn SNR against the summed reverberant speech energy, sums, and
// peak-normalizes every component by the same gain.
inline MixtureSample make_mixture(std::vector<std::vector<double>> sources, std::span<const double> noise,
                                  const RoomInstance& room, std::mt19937_64& rng, const MixOptions& opt = {}) {
  if (sources.empty()) throw std::invalid_argument("make_mixture: no sources");
  if (sources.size() > room.sources.size()) throw std::invalid_argument("make_mixture: more sources than room positions");
  std::size_t len = sources[0].size();
  for (const auto& s : sources) len = std::min(len, s.size());
  MixtureSample out;
  out.room = room;
  double speech_energy = 0.0;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    sources[i].resize(len);
    if (energy(sources[i]) <= 0.0) throw std::invalid_argument("make_mixture: source " + std::to_string(i) + " is silent");
    const auto rir = image_source_rir(room, i, opt.rir);
    out.reverberant_sources.push_back(convolve_truncated(sources[i], rir));
    speech_energy += energy(out.reverberant_sources.back());
  }
  out.noise.assign(len, 0.0);
  if (opt.add_noise) {
    if (noise.size() < len) throw std::invalid_argument("make_mixture: noise shorter than sources");
    const double snr = opt.fixed_snr_db ? *opt.fixed_snr_db : opt.snr_db.sample(rng);
    const double noise_energy = energy(noise.subspan(0, len));
    if (noise_energy <= 0.0) throw std::invalid_argument("make_mixture: noise is silent");
    out.snr_db = snr;
    out.noise_gain = std::sqrt(speech_energy / (noise_energy * std::pow(10.0, snr / 10.0)));
    for (std::size_t i = 0; i < len; ++i) out.noise[i] = out.noise_gain * noise[i];
  }
  out.mixture = out.noise;
  for (const auto& s : out.reverberant_sources) {
    for (std::size_t i = 0; i < len; ++i) out.mixture[i] += s[i];
  }
  double peak = 0.0;
  for (double v : out.mixture) peak = std::max(peak, std::abs(v));
  if (peak > 0.0 && opt.peak > 0.0) {
    out.output_gain = opt.peak / peak;
    auto apply = [g = out.output_gain](std::vector<double>& x) {
      for (double& v : x) v *= g;
    };
    apply(out.mixture);
    apply(out.noise);
    for (auto& s : out.reverberant_sources) apply(s);
  }
  return out;
}

// ------------------------------------------------------------------ datasets

// splitmix64 finalizer over (seed, index); per-sample streams are
// independent of generation order.
inline std::uint64_t sample_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct SimConfig {
  RoomConfig room;
  NoiseConfig noise;
  double duration_seconds = 4.0;
  std::size_t sources = 2;
  int max_order = 30;
  std::size_t threads = 1;
};

struct ManifestRow {
  std::string id;
  std::string mixture;
  std::vector<std::string> sources;
  std::string noise;
  Vec3 dims{};
  double t60 = 0.0;
  double snr_db = 0.0;
  std::uint64_t seed = 0;
};

inline constexpr const char* kManifestHeader = "#umamba-manifest v1\tid\tmixture\tsources\tnoise\troom_dims\tt60\tsnr_db\tseed";

namespace detail {
inline std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}
inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}
}  // namespace detail

inline std::string format_row(const ManifestRow& row) {
  std::string srcs;
  for (std::size_t i = 0; i < row.sources.size(); ++i) srcs += (i ? "," : "") + row.sources[i];
  return row.id + '\t' + row.mixture + '\t' + srcs + '\t' + row.noise + '\t' + detail::fmt(row.dims[0]) + ',' +
         detail::fmt(row.dims[1]) + ',' + detail::fmt(row.dims[2]) + '\t' + detail::fmt(row.t60) + '\t' +
         (std::isfinite(row.snr_db) ? detail::fmt(row.snr_db) : std::string("inf")) + '\t' + std::to_string(row.seed);
}

inline std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(f, line) || line.rfind("#umamba-manifest v1", 0) != 0) {
    throw std::runtime_error(path.string() + ": missing or unsupported manifest header");
  }
  std::vector<ManifestRow> rows;
  std::size_t line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cols = detail::split(line, '\t');
    if (cols.size() != 8) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected 8 columns, found " +
                               std::to_string(cols.size()));
    }
    ManifestRow row;
    row.id = cols[0];
    row.mixture = cols[1];
    row.sources = detail::split(cols[2], ',');
    row.noise = cols[3];
    const auto dims = detail::split(cols[4], ',');
    if (dims.size() != 3) throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": bad room_dims");
    for (int i = 0; i < 3; ++i) row.dims[i] = std::stod(dims[i]);
    row.t60 = std::stod(cols[5]);
    row.snr_db = cols[6] == "inf" ? std::numeric_limits<double>::infinity() : std::stod(cols[6]);
    row.seed = std::stoull(cols[7]);
    rows.push_back(std::move(row));
  }
  return rows;
}

// Draws one sample from its own seed: room, dry sources, noise, SNR.
inline MixtureSample simulate_sample(const SimConfig& cfg, const SourceProvider& provider, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const RoomInstance room = sample_room(cfg.room, rng, cfg.sources);
  const auto samples = static_cast<std::size_t>(std::llround(cfg.duration_seconds * 8000.0));
  auto dry = provider(rng, cfg.sources, samples);
  if (dry.size() < 2) throw std::runtime_error("source provider returned fewer than two utterances");
  const auto noise = cfg.noise.enabled ? make_noise(cfg.noise, rng, samples) : std::vector<double>(samples, 0.0);
  MixOptions opt;
  opt.snr_db = cfg.noise.snr_db;
  opt.add_noise = cfg.noise.enabled;
  opt.rir.max_order = cfg.max_order;
  MixtureSample s = make_mixture(std::move(dry), noise, room, rng, opt);
  s.seed = seed;
  return s;
}

// Writes n samples as 8 kHz 16-bit WAV files plus manifest.tsv under
// out_dir. Output depends only on (seed, provider, cfg).
inline std::vector<ManifestRow> generate_dataset(std::size_t n, std::uint64_t seed, const SourceProvider& provider,
                                                 const std::filesystem::path& out_dir, const SimConfig& cfg) {
  cfg.room.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());
  std::vector<ManifestRow> rows;
  auto write_sample = [&](std::size_t i, const MixtureSample& s) {
    char id[32];
    std::snprintf(id, sizeof id, "s%05zu", i);
    ManifestRow row;
    row.id = id;
    row.mixture = row.id + "_mix.wav";
    wav::write(out_dir / row.mixture, s.mixture);
    for (std::size_t k = 0; k < s.reverberant_sources.size(); ++k) {
      row.sources.push_back(row.id + "_src" + std::to_string(k + 1) + ".wav");
      wav::write(out_dir / row.sources.back(), s.reverberant_sources[k]);
    }
    row.noise = row.id + "_noise.wav";
    wav::write(out_dir / row.noise, s.noise);
    row.dims = s.room.dims;
    row.t60 = s.room.t60;
    row.snr_db = s.snr_db;
    row.seed = s.seed;
    rows.push_back(std::move(row));
  };
  const std::size_t threads = std::max<std::size_t>(1, cfg.threads);
  for (std::size_t start = 0; start < n; start += threads) {
    const std::size_t stop = std::min(n, start + threads);
    std::vector<std::future<MixtureSample>> jobs;
    for (std::size_t i = start; i < stop; ++i) {
      const auto s = sample_seed(seed, i);
      jobs.push_back(std::async(threads > 1 ? std::launch::async : std::launch::deferred,
                                [&cfg, &provider, s] { return simulate_sample(cfg, provider, s); }));
    }
    for (std::size_t i = start; i < stop; ++i) write_sample(i, jobs[i - start].get());
  }
  std::ofstream mf(out_dir / "manifest.tsv");
  if (!mf) throw std::runtime_error("cannot write " + (out_dir / "manifest.tsv").string());
  mf << kManifestHeader << '\n';
  for (const auto& row : rows) mf << format_row(row) << '\n';
  if (!mf) throw std::runtime_error("write failed for " + (out_dir / "manifest.tsv").string());
  return rows;
}

}  // namespace umamba::mixsim
