#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "oracles.hpp"
#include "umamba/metrics.hpp"

using namespace umamba;

namespace {

std::vector<double> tone(std::size_t n, double cycles, double amp = 1.0, double phase = 0.0) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = amp * std::sin(2.0 * std::numbers::pi * cycles * i / n + phase);
  return x;
}

std::vector<std::vector<double>> random_set(std::size_t s, std::size_t n, std::mt19937_64& rng) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < s; ++i) out.push_back(oracle::random_vector(n, rng));
  return out;
}

}  // namespace

TEST(SiSnr, Examples) {
  std::mt19937_64 rng(1);
  const auto ref = oracle::random_vector(400, rng);
  EXPECT_DOUBLE_EQ(si_snr(ref, ref), 30.0);
  std::vector<double> twice(ref);
  for (double& v : twice) v *= 2.0;
  EXPECT_DOUBLE_EQ(si_snr(twice, ref), 30.0);
  // Orthogonal zero-mean error of equal energy.
  const auto a = tone(400, 3), b = tone(400, 7);
  std::vector<double> est(400);
  for (std::size_t i = 0; i < 400; ++i) est[i] = a[i] + b[i];
  EXPECT_NEAR(si_snr(est, a), 0.0, 1e-10);
}

TEST(SiSnr, ScaleInvarianceAndRange) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> c(1e-3, 1e3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto ref = oracle::random_vector(64, rng);
    auto est = oracle::random_vector(64, rng);
    for (std::size_t i = 0; i < 64; ++i) est[i] += ref[i] * (trial % 5);
    const double base = si_snr(est, ref);
    EXPECT_GE(base, -30.0);
    EXPECT_LE(base, 30.0);
    const double k = c(rng);
    std::vector<double> scaled(est);
    for (double& v : scaled) v *= k;
    EXPECT_NEAR(si_snr(scaled, ref), base, 1e-9);
    EXPECT_NEAR(si_snr(est, ref), oracle::si_snr(est, ref), 1e-9);
  }
}

TEST(SiSnr, RejectsDegenerateInputs) {
  EXPECT_THROW(si_snr(std::vector<double>(5, 1.0), std::vector<double>(5, 3.0)), std::invalid_argument);
  EXPECT_THROW(si_snr(std::vector<double>(5, 1.0), std::vector<double>(4, 1.0)), std::invalid_argument);
}

TEST(SiSnri, Examples) {
  std::mt19937_64 rng(3);
  const auto ref = oracle::random_vector(300, rng);
  const auto mix = oracle::random_vector(300, rng);
  EXPECT_DOUBLE_EQ(si_snri(mix, ref, mix), 0.0);
  EXPECT_DOUBLE_EQ(si_snri(ref, ref, mix), 30.0 - si_snr(mix, ref));
  // ref = (1,-1,1,-1); est adds half of an orthogonal pattern, mix all of it.
  const std::vector<double> r{1, -1, 1, -1}, e{1.5, -0.5, 0.5, -1.5}, m{2, 0, 0, -2};
  EXPECT_NEAR(si_snri(e, r, m), 10.0 * std::log10(4.0), 1e-12);
}

TEST(Sdri, Examples) {
  std::mt19937_64 rng(4);
  const auto ref = oracle::random_vector(300, rng);
  const auto mix = oracle::random_vector(300, rng);
  auto est = ref;
  for (std::size_t i = 0; i < est.size(); ++i) est[i] += 0.3 * mix[i];
  EXPECT_DOUBLE_EQ(sdri(mix, ref, mix), 0.0);
  EXPECT_DOUBLE_EQ(sdri(ref, ref, mix), 30.0 - sdr(mix, ref));
  double rr = 0, ee = 0, mm = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    rr += ref[i] * ref[i];
    ee += (est[i] - ref[i]) * (est[i] - ref[i]);
    mm += (mix[i] - ref[i]) * (mix[i] - ref[i]);
  }
  EXPECT_NEAR(sdri(est, ref, mix), 10.0 * std::log10(rr / ee) - 10.0 * std::log10(rr / mm), 1e-10);
  EXPECT_THROW(sdr(ref, std::vector<double>(300, 0.0)), std::invalid_argument);
}

TEST(Sir, OrthogonalExamples) {
  const std::size_t n = 256;
  const std::vector<std::vector<double>> refs{tone(n, 5), tone(n, 11)};
  EXPECT_DOUBLE_EQ(sir(refs[0], refs, 0), 30.0);
  std::vector<double> both(n);
  for (std::size_t i = 0; i < n; ++i) both[i] = refs[0][i] + refs[1][i];
  EXPECT_NEAR(sir(both, refs, 0), 0.0, 1e-9);
  EXPECT_NEAR(siri({refs[0], refs[1]}, refs, both), 30.0, 1e-9);
}

TEST(Sir, MatchesNormalEquations) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto refs = random_set(2, 200, rng);
    auto est = oracle::random_vector(200, rng, -0.2, 0.2);
    for (std::size_t i = 0; i < 200; ++i) est[i] += refs[0][i] + 0.1 * (trial % 4) * refs[1][i];
    for (std::size_t t = 0; t < 2; ++t) EXPECT_NEAR(sir(est, refs, t), oracle::sir_normal_equations(est, refs, t), 1e-9);
  }
}

TEST(Sir, RejectsRankDeficientReferences) {
  std::mt19937_64 rng(6);
  const auto r = oracle::random_vector(50, rng);
  EXPECT_THROW(sir(r, {r, r}, 0), std::invalid_argument);
  EXPECT_THROW(sir(r, {r}, 1), std::invalid_argument);
  EXPECT_THROW(siri({r}, {r}, r), std::invalid_argument);
}

TEST(Pit, PerfectAndSwapped) {
  std::mt19937_64 rng(7);
  const auto refs = random_set(2, 100, rng);
  const PitResult same = pit_loss(refs, refs);
  EXPECT_EQ(same.perm, (std::vector<std::size_t>{0, 1}));
  EXPECT_DOUBLE_EQ(same.loss, -30.0);
  const PitResult swapped = pit_loss({refs[1], refs[0]}, refs);
  EXPECT_EQ(swapped.perm, (std::vector<std::size_t>{1, 0}));
  EXPECT_DOUBLE_EQ(swapped.loss, same.loss);
}

TEST(Pit, EqualsBruteForce) {
  std::mt19937_64 rng(8);
  for (std::size_t S : {2u, 3u, 4u}) {
    for (int trial = 0; trial < 50; ++trial) {
      const auto refs = random_set(S, 80, rng);
      auto ests = random_set(S, 80, rng);
      for (std::size_t i = 0; i < S; ++i) {
        for (std::size_t t = 0; t < 80; ++t) ests[(i + trial) % S][t] += refs[i][t] * (trial % 3);
      }
      const PitResult got = pit_loss(ests, refs);
      const oracle::BrutePit want = oracle::brute_pit(ests, refs);
      EXPECT_EQ(got.perm, want.perm);
      EXPECT_EQ(got.loss, -want.score);
    }
  }
}

TEST(Pit, TiesPickLexicographicallySmallest) {
  std::mt19937_64 rng(9);
  const auto r = oracle::random_vector(60, rng);
  const PitResult res = pit_loss({r, r, r}, {r, r, r});
  EXPECT_EQ(res.perm, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Pit, RelabelingEquivariance) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 30; ++trial) {
    const auto refs = random_set(3, 70, rng);
    const auto ests = random_set(3, 70, rng);
    std::vector<std::size_t> sigma{0, 1, 2};
    std::shuffle(sigma.begin(), sigma.end(), rng);
    std::vector<std::vector<double>> permuted;
    for (std::size_t i = 0; i < 3; ++i) permuted.push_back(refs[sigma[i]]);
    const PitResult a = pit_loss(ests, refs), b = pit_loss(ests, permuted);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(b.perm[i], a.perm[sigma[i]]);
    EXPECT_NEAR(a.loss, b.loss, 1e-12);
  }
}

TEST(Pit, SourceCountBounds) {
  std::mt19937_64 rng(11);
  const auto six = random_set(6, 20, rng);
  EXPECT_NO_THROW(pit_loss(six, six));
  const auto seven = random_set(7, 20, rng);
  EXPECT_THROW(pit_loss(seven, seven), std::invalid_argument);
  EXPECT_THROW(pit_loss(random_set(2, 20, rng), random_set(3, 20, rng)), std::invalid_argument);
}

TEST(Pit, TensorLossMatchesPlainAndGradientChecks) {
  std::mt19937_64 rng(12);
  for (std::size_t S : {2u, 3u}) {
    const auto refs = random_set(S, 40, rng);
    std::vector<Tensor> ests;
    for (std::size_t i = 0; i < S; ++i) ests.push_back(oracle::random_tensor({1, 40}, rng));
    std::vector<std::vector<double>> plain;
    for (const Tensor& t : ests) plain.emplace_back(t.values().begin(), t.values().end());
    const PitTensorResult r = pit_loss(ests, refs);
    EXPECT_NEAR(r.loss.values()[0], pit_loss(plain, refs).loss, 1e-12);
    const double err = oracle::gradient_error([&](const auto& in) { return pit_loss(in, refs).loss; }, ests);
    EXPECT_LT(err, 1e-4);
  }
}

TEST(SiSnr, TensorGradientIsZeroWhenClamped) {
  std::mt19937_64 rng(13);
  const auto ref = oracle::random_vector(30, rng);
  Tensor est({1, 30}, ref, true);
  backward(si_snr(est, ref));
  for (double g : est.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Spectrogram, ToneLandsInExpectedBin) {
  std::vector<double> x(2048);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(2.0 * std::numbers::pi * 1000.0 * i / 8000.0);
  const Spectrogram s = spectrogram(x, 256, 64);
  EXPECT_EQ(s.bins, 129u);
  EXPECT_EQ(s.frames, 1 + (2048 - 256) / 64);
  for (std::size_t f = 0; f < s.frames; ++f) {
    std::size_t peak = 0;
    for (std::size_t k = 1; k < s.bins; ++k) {
      if (s.at(f, k) > s.at(f, peak)) peak = k;
    }
    EXPECT_EQ(peak, 32u);
  }
}

TEST(Spectrogram, ZeroSignalSitsAtFloor) {
  const Spectrogram s = spectrogram(std::vector<double>(512, 0.0), 128, 32);
  for (double v : s.values) EXPECT_EQ(v, -80.0);
}

TEST(Spectrogram, ParsevalPerFrame) {
  std::mt19937_64 rng(14);
  const auto x = oracle::random_vector(1000, rng);
  const std::size_t n = 128, hop = 50;
  const Spectrogram s = stft_magnitude(x, n, hop);
  const auto w = hann_window(n);
  for (std::size_t f = 0; f < s.frames; ++f) {
    double time = 0.0;
    for (std::size_t i = 0; i < n; ++i) time += (x[f * hop + i] * w[i]) * (x[f * hop + i] * w[i]);
    double freq = 0.0;
    for (std::size_t k = 0; k < s.bins; ++k) {
      const double weight = (k == 0 || k == n / 2) ? 1.0 : 2.0;
      freq += weight * s.at(f, k) * s.at(f, k);
    }
    EXPECT_NEAR(freq / n, time, 1e-6 * time);
  }
}

TEST(Spectrogram, MatchesNaiveDft) {
  std::mt19937_64 rng(15);
  const auto x = oracle::random_vector(64, rng);
  const Spectrogram s = stft_magnitude(x, 64, 64);
  const auto w = hann_window(64);
  std::vector<double> frame(64);
  for (std::size_t i = 0; i < 64; ++i) frame[i] = x[i] * w[i];
  const auto ref = oracle::dft_magnitude(frame);
  for (std::size_t k = 0; k < ref.size(); ++k) EXPECT_NEAR(s.at(0, k), ref[k], 1e-10);
}

TEST(Spectrogram, RejectsBadArguments) {
  EXPECT_THROW(spectrogram(std::vector<double>(100, 0.0), 256, 64), std::invalid_argument);
  EXPECT_THROW(spectrogram(std::vector<double>(300, 0.0), 200, 64), std::invalid_argument);
  EXPECT_THROW(spectrogram(std::vector<double>(300, 0.0), 256, 0), std::invalid_argument);
  EXPECT_THROW(spectrogram(std::vector<double>(300, 0.0), 256, 512), std::invalid_argument);
}

TEST(SiSnr, NonFiniteEstimatePropagates) {
  std::vector<double> ref{1, -1, 2, 0}, est{1, std::numeric_limits<double>::quiet_NaN(), 0, 0};
  EXPECT_TRUE(std::isnan(si_snr(est, ref)));
  const PitResult r = pit_loss({est, ref}, {ref, ref});
  EXPECT_FALSE(std::isfinite(r.loss));
}
