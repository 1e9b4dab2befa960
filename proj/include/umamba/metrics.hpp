#pragma once

// SNR-family metrics, the permutation-invariant SI-SNR objective, and
// short-time magnitude spectra for plotting.

#include <Eigen/Dense>
#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "umamba/ops.hpp"
#include "umamba/tensor.hpp"

namespace umamba {

inline constexpr double kMetricClampDb = 30.0;

namespace detail {

// NaN (from non-finite inputs) passes through so callers can detect it.
inline double clamp_db(double v) {
  if (std::isnan(v)) return v;
  return std::clamp(v, -kMetricClampDb, kMetricClampDb);
}

inline double ratio_db(double num, double den) {
  if (den <= 0.0) return num > 0.0 ? kMetricClampDb : -kMetricClampDb;
  if (num <= 0.0) return -kMetricClampDb;
  return clamp_db(10.0 * std::log10(num / den));
}

inline void require_same_length(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size()) {
    throw std::invalid_argument(std::string(what) + ": length mismatch " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  }
}

inline std::vector<double> zero_mean(std::span<const double> x) {
  const double mu = x.empty() ? 0.0 : std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - mu;
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace detail

// Scale-invariant SNR in dB, clamped to [-30, 30].
inline double si_snr(std::span<const double> est, std::span<const double> ref) {
  detail::require_same_length(est, ref, "si_snr");
  const auto e = detail::zero_mean(est);
  const auto r = detail::zero_mean(ref);
  const double rr = detail::dot(r, r);
  if (rr <= 0.0) throw std::invalid_argument("si_snr: reference has zero energy after mean removal");
  const double alpha = detail::dot(e, r) / rr;
  double target = 0.0, noise = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    const double t = alpha * r[i];
    target += t * t;
    noise += (e[i] - t) * (e[i] - t);
  }
  return detail::ratio_db(target, noise);
}

// Differentiable SI-SNR of a 1 x n estimate against a fixed reference.
// The gradient is zero where the value is clamped.
inline Tensor si_snr(const Tensor& est, std::span<const double> ref) {
  detail::require_same_length(est.values(), ref, "si_snr");
  const auto e = detail::zero_mean(est.values());
  const auto r = detail::zero_mean(ref);
  const double rr = detail::dot(r, r);
  if (rr <= 0.0) throw std::invalid_argument("si_snr: reference has zero energy after mean removal");
  const double p = detail::dot(e, r);
  const double ee = detail::dot(e, e);
  const double target = p * p / rr;
  const double noise = ee - target;
  const double value = si_snr(est.values(), ref);
  const bool clamped = !(target > 0.0 && noise > 0.0) || std::abs(value) >= kMetricClampDb;
  return detail::make_result(
      {1}, {value}, {&est}, [est, e, r, p, rr, noise, clamped](detail::Node& self) {
        if (clamped) return;
        auto* g = detail::grad_of(est);
        const double k = 10.0 / std::log(10.0) * self.grad[0];
        std::vector<double> de(e.size());
        double mean_de = 0.0;
        for (std::size_t i = 0; i < e.size(); ++i) {
          de[i] = k * (2.0 * r[i] / p - (2.0 * e[i] - 2.0 * p * r[i] / rr) / noise);
          mean_de += de[i];
        }
        mean_de /= static_cast<double>(e.size());
        for (std::size_t i = 0; i < e.size(); ++i) (*g)[i] += de[i] - mean_de;
      });
}

// Plain SDR 10 log10(|ref|^2 / |est - ref|^2), clamped.
inline double sdr(std::span<const double> est, std::span<const double> ref) {
  detail::require_same_length(est, ref, "sdr");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    num += ref[i] * ref[i];
    den += (est[i] - ref[i]) * (est[i] - ref[i]);
  }
  if (num <= 0.0) throw std::invalid_argument("sdr: reference has zero energy");
  return detail::ratio_db(num, den);
}

inline double si_snri(std::span<const double> est, std::span<const double> ref, std::span<const double> mixture) {
  return si_snr(est, ref) - si_snr(mixture, ref);
}

inline double sdri(std::span<const double> est, std::span<const double> ref, std::span<const double> mixture) {
  return sdr(est, ref) - sdr(mixture, ref);
}

// Signal-to-interference ratio of `est` for reference `target`: est is
// projected onto span(refs) by least squares; the target component is the
// part along refs[target], interference the rest of the projection.
inline double sir(std::span<const double> est, const std::vector<std::vector<double>>& refs, std::size_t target) {
  if (target >= refs.size()) throw std::invalid_argument("sir: target index out of range");
  const std::size_t n = est.size();
  Eigen::MatrixXd basis(n, refs.size());
  for (std::size_t j = 0; j < refs.size(); ++j) {
    detail::require_same_length(est, refs[j], "sir");
    for (std::size_t i = 0; i < n; ++i) basis(i, j) = refs[j][i];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(basis);
  if (qr.rank() < static_cast<Eigen::Index>(refs.size())) {
    throw std::invalid_argument("sir: reference set is rank deficient");
  }
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(est.data(), n);
  const Eigen::VectorXd coef = qr.solve(y);
  const Eigen::VectorXd target_part = basis.col(target) * coef(target);
  const Eigen::VectorXd interference = basis * coef - target_part;
  return detail::ratio_db(target_part.squaredNorm(), interference.squaredNorm());
}

// Mean over sources of SIR(est_i) - SIR(mixture) for aligned estimates.
inline double siri(const std::vector<std::vector<double>>& ests, const std::vector<std::vector<double>>& refs,
                   std::span<const double> mixture) {
  if (refs.size() < 2) throw std::invalid_argument("siri: needs at least two references");
  if (ests.size() != refs.size()) throw std::invalid_argument("siri: estimate/reference count mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < refs.size(); ++i) acc += sir(ests[i], refs, i) - sir(mixture, refs, i);
  return acc / static_cast<double>(refs.size());
}

// ------------------------------------------------------------------ PIT

struct PitResult {
  double loss = 0.0;
  // perm[i] is the estimate assigned to reference i.
  std::vector<std::size_t> perm;
};

inline constexpr std::size_t kMaxPitSources = 6;

// Exhaustive search over all S! assignments; loss = -max mean SI-SNR.
// Ties go to the lexicographically smallest permutation.
inline PitResult pit_loss(const std::vector<std::vector<double>>& ests, const std::vector<std::vector<double>>& refs) {
  const std::size_t S = refs.size();
  if (ests.size() != S) throw std::invalid_argument("pit_loss: estimate/reference count mismatch");
  if (S == 0) throw std::invalid_argument("pit_loss: empty source set");
  if (S > kMaxPitSources) {
    throw std::invalid_argument("pit_loss: " + std::to_string(S) + " sources exceeds the exhaustive search bound of " +
                                std::to_string(kMaxPitSources));
  }
  std::vector<double> pair(S * S);
  for (std::size_t i = 0; i < S; ++i) {
    for (std::size_t j = 0; j < S; ++j) pair[i * S + j] = si_snr(ests[j], refs[i]);
  }
  std::vector<std::size_t> perm(S);
  std::iota(perm.begin(), perm.end(), 0);
  PitResult best{0.0, perm};
  double best_score = -std::numeric_limits<double>::infinity();
  do {
    double score = 0.0;
    for (std::size_t i = 0; i < S; ++i) score += pair[i * S + perm[i]];
    score /= static_cast<double>(S);
    if (score > best_score) {
      best_score = score;
      best.perm = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  best.loss = -best_score;
  return best;
}

struct PitTensorResult {
  Tensor loss;
  std::vector<std::size_t> perm;
};

// Differentiable PIT objective; gradient flows through the winning assignment.
inline PitTensorResult pit_loss(const std::vector<Tensor>& ests, const std::vector<std::vector<double>>& refs) {
  std::vector<std::vector<double>> values;
  for (const Tensor& t : ests) values.emplace_back(t.values().begin(), t.values().end());
  PitResult plain = pit_loss(values, refs);
  Tensor total;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    Tensor term = si_snr(ests[plain.perm[i]], refs[i]);
    total = total.defined() ? add(total, term) : term;
  }
  return {scale(total, -1.0 / static_cast<double>(refs.size())), plain.perm};
}

// ------------------------------------------------------------------ spectra

inline constexpr double kSpectrogramFloorDb = -80.0;

struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;  // fft_size / 2 + 1
  std::vector<double> values;  // frames x bins, row-major

  double at(std::size_t frame, std::size_t bin) const { return values[frame * bins + bin]; }
};

inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  return w;
}

// Linear STFT magnitudes with a periodic Hann window.
inline Spectrogram stft_magnitude(std::span<const double> wave, std::size_t fft_size, std::size_t hop) {
  if (fft_size == 0 || (fft_size & (fft_size - 1)) != 0) {
    throw std::invalid_argument("spectrogram: fft size must be a power of two");
  }
  if (hop == 0 || hop > fft_size) throw std::invalid_argument("spectrogram: hop must be in [1, fft size]");
  if (wave.size() < fft_size) {
    throw std::invalid_argument("spectrogram: signal of " + std::to_string(wave.size()) +
                                " samples is shorter than the fft size " + std::to_string(fft_size));
  }
  Spectrogram s;
  s.frames = 1 + (wave.size() - fft_size) / hop;
  s.bins = fft_size / 2 + 1;
  s.values.resize(s.frames * s.bins);
  const auto window = hann_window(fft_size);
  double* in = fftw_alloc_real(fft_size);
  fftw_complex* out = fftw_alloc_complex(s.bins);
  fftw_plan plan = fftw_plan_dft_r2c_1d(static_cast<int>(fft_size), in, out, FFTW_ESTIMATE);
  for (std::size_t f = 0; f < s.frames; ++f) {
    for (std::size_t i = 0; i < fft_size; ++i) in[i] = wave[f * hop + i] * window[i];
    fftw_execute(plan);
    for (std::size_t k = 0; k < s.bins; ++k) s.values[f * s.bins + k] = std::hypot(out[k][0], out[k][1]);
  }
  fftw_destroy_plan(plan);
  fftw_free(out);
  fftw_free(in);
  return s;
}

// Power in dB, floored at -80 dB.
inline Spectrogram spectrogram(std::span<const double> wave, std::size_t fft_size, std::size_t hop) {
  Spectrogram s = stft_magnitude(wave, fft_size, hop);
  for (double& v : s.values) {
    const double p = v * v;
    v = p > 0.0 ? std::max(kSpectrogramFloorDb, 10.0 * std::log10(p)) : kSpectrogramFloorDb;
  }
  return s;
}

}  // namespace umamba
