#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "umamba/mamba.hpp"
#include "umamba/ssm.hpp"

using namespace umamba;
using namespace umamba::ssm;

namespace {

// Random stable dense system: A = -(M M^T + 0.5 I).
SsmParams random_system(std::mt19937_64& rng, int n, int f) {
  std::normal_distribution<double> normal(0.0, 1.0);
  SsmParams p;
  Matrix m(n, n);
  for (int i = 0; i < n * n; ++i) m.data()[i] = normal(rng) / std::sqrt(double(n));
  p.a = -(m * m.transpose() + 0.5 * Matrix::Identity(n, n));
  p.b = Matrix::NullaryExpr(n, f, [&] { return normal(rng); });
  p.c = Matrix::NullaryExpr(f, n, [&] { return normal(rng); });
  p.d = Matrix::NullaryExpr(f, f, [&] { return normal(rng); });
  p.delta = std::uniform_real_distribution<double>(0.05, 0.5)(rng);
  return p;
}

}  // namespace

TEST(Bilinear, ScalarClosedForm) {
  SsmParams p;
  p.a = Matrix::Constant(1, 1, -2.0);
  p.b = Matrix::Constant(1, 1, 3.0);
  p.c = Matrix::Constant(1, 1, 1.0);
  p.d = Matrix::Zero(1, 1);
  p.delta = 0.1;
  const DiscreteSsm d = discretize(p);
  EXPECT_NEAR(d.a_bar(0, 0), (1 - 0.1) / (1 + 0.1), 1e-15);
  EXPECT_NEAR(d.b_bar(0, 0), 0.1 * 3.0 / (1 + 0.1), 1e-15);
}

TEST(Bilinear, DiagonalModeMatchesDense) {
  std::mt19937_64 rng(1);
  SsmParams dense = random_system(rng, 5, 2);
  Vector diag(5);
  diag << -1, -2, -3, -0.5, -7;
  dense.a = diag.asDiagonal();
  SsmParams diagonal = dense;
  diagonal.a = Matrix();
  diagonal.a_diag = diag;
  const DiscreteSsm a = discretize(dense), b = discretize(diagonal);
  EXPECT_LT((a.a_bar - b.a_bar).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((a.b_bar - b.b_bar).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Bilinear, StableSystemsStayStable) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 20; ++i) {
    const DiscreteSsm d = discretize(random_system(rng, 4, 1));
    const auto eig = d.a_bar.eigenvalues();
    for (int k = 0; k < eig.size(); ++k) EXPECT_LT(std::abs(eig(k)), 1.0);
  }
}

TEST(Bilinear, SingularSystemIsRejected) {
  SsmParams p;
  p.a = Matrix::Constant(1, 1, 2.0);  // 1 - delta/2 * 2 = 0 at delta = 1
  p.b = Matrix::Ones(1, 1);
  p.c = Matrix::Ones(1, 1);
  p.d = Matrix::Zero(1, 1);
  p.delta = 1.0;
  EXPECT_THROW(discretize(p), std::domain_error);
  p.delta = -1.0;
  EXPECT_THROW(discretize(p), std::invalid_argument);
}

TEST(SsmKernel, TapsAreMatrixPowers) {
  std::mt19937_64 rng(3);
  const DiscreteSsm d = discretize(random_system(rng, 4, 2));
  const SsmKernel k = ssm_kernel(d, 10);
  for (std::size_t t = 0; t < 10; ++t) {
    const Matrix expect = d.c_bar * oracle::matrix_power(d.a_bar, t) * d.b_bar;
    EXPECT_LT((k.taps[t] - expect).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_THROW(ssm_kernel(d, 0), std::invalid_argument);
}

TEST(SsmKernel, RecurrenceEqualsConvolution) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 1 + trial % 8, f = 1 + trial % 4, T = 1 + (trial * 7) % 64;
    const DiscreteSsm d = discretize(random_system(rng, n, f));
    const Matrix x = Matrix::Random(f, T);
    const Matrix rec = ssm_recurrence(d, x);
    const Matrix conv = ssm_convolve(ssm_kernel(d, T), d.d_bar, x);
    EXPECT_LT((rec - conv).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(SsmKernel, DiagonalSkipActsPerChannel) {
  std::mt19937_64 rng(5);
  SsmParams p = random_system(rng, 3, 3);
  p.d = Matrix::Zero(3, 1);
  p.d << 1, 2, 3;
  p.c.setZero();
  const DiscreteSsm d = discretize(p);
  const Matrix x = Matrix::Random(3, 4);
  const Matrix y = ssm_recurrence(d, x);
  for (int c = 0; c < 3; ++c) EXPECT_LT((y.row(c) - (c + 1) * x.row(c)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Hippo, RealDiagonalValues) {
  const auto a = hippo_init(4);
  EXPECT_EQ(a, (std::vector<double>{-1, -2, -3, -4}));
  EXPECT_THROW(hippo_init(0), std::invalid_argument);
}

TEST(Scan, BlockedScanEqualsLeftFoldForAnyBlockSize) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> dist(-1, 1);
  for (std::size_t n : {1u, 2u, 7u, 64u, 100u, 129u}) {
    std::vector<AffinePair> items(n);
    for (auto& p : items) p = {dist(rng), dist(rng)};
    std::vector<AffinePair> fold = items;
    for (std::size_t i = 1; i < n; ++i) fold[i] = AffineCombine{}(fold[i - 1], fold[i]);
    for (std::size_t block : {1u, 3u, 16u, 64u, 1000u}) {
      auto scanned = items;
      blocked_inclusive_scan(std::span<AffinePair>(scanned), AffineCombine{}, block);
      for (std::size_t i = 0; i < n; ++i) {
        EXPECT_NEAR(scanned[i].a, fold[i].a, 1e-12);
        EXPECT_NEAR(scanned[i].b, fold[i].b, 1e-12);
      }
    }
  }
  std::vector<AffinePair> none;
  EXPECT_THROW(blocked_inclusive_scan(std::span<AffinePair>(none), AffineCombine{}, 0), std::invalid_argument);
}

TEST(Scan, SelectiveScanMatchesSequentialRecurrence) {
  std::mt19937_64 rng(7);
  const std::size_t D = 8, N = 16, T = 128;
  for (int trial = 0; trial < 10; ++trial) {
    const auto u = oracle::random_vector(D * T, rng);
    const auto delta = oracle::random_vector(D * T, rng, 1e-3, 0.5);
    const auto a = oracle::random_vector(D * N, rng, -5.0, -0.1);
    const auto b = oracle::random_vector(N * T, rng);
    const auto c = oracle::random_vector(N * T, rng);
    const auto skip = oracle::random_vector(D, rng);
    const auto y = selective_scan(SelectiveInputs{D, N, T, u, delta, a, b, c, skip}, 16);
    const auto ref = oracle::sequential_selective_scan(D, N, T, u, delta, a, b, c, skip);
    EXPECT_LT(oracle::max_abs_diff(y, ref), 1e-10);
  }
}

TEST(Scan, RejectsNonPositiveSteps) {
  const std::vector<double> one{1.0}, zero{0.0}, neg{-1.0};
  EXPECT_THROW(selective_scan(SelectiveInputs{1, 1, 1, one, zero, neg, one, one, one}), std::invalid_argument);
  EXPECT_THROW(selective_scan(SelectiveInputs{1, 1, 2, one, one, neg, one, one, one}), ShapeError);
}

TEST(Scan, SelectiveScanGradients) {
  std::mt19937_64 rng(8);
  const std::size_t D = 3, N = 4, T = 11;
  const Tensor u = oracle::random_tensor({D, T}, rng);
  const Tensor delta = oracle::random_tensor({D, T}, rng, true, 0.05, 0.6);
  const Tensor a = oracle::random_tensor({D, N}, rng, true, -3.0, -0.2);
  const Tensor b = oracle::random_tensor({N, T}, rng);
  const Tensor c = oracle::random_tensor({N, T}, rng);
  const Tensor skip = oracle::random_tensor({D}, rng);
  const double err = oracle::gradient_error(
      [](auto& in) { return selective_scan(in[0], in[1], in[2], in[3], in[4], in[5], 4); }, {u, delta, a, b, c, skip});
  EXPECT_LT(err, 1e-4);
}

TEST(Scan, MacCountIsCharged) {
  std::mt19937_64 rng(9);
  const Tensor u = oracle::random_tensor({2, 5}, rng, false);
  const Tensor delta = oracle::random_tensor({2, 5}, rng, false, 0.1, 0.2);
  const Tensor a = oracle::random_tensor({2, 3}, rng, false, -2, -1);
  const Tensor b = oracle::random_tensor({3, 5}, rng, false);
  mac_counter() = 0;
  selective_scan(u, delta, a, b, b, Tensor::filled({2}, 1.0));
  EXPECT_EQ(mac_counter(), selective_scan_macs(2, 3, 5));
}

TEST(Mamba, ShapesParameterCountAndMacs) {
  MambaConfig cfg;
  cfg.channels = 8;
  cfg.state = 4;
  std::mt19937_64 rng(10);
  MambaParams p = init_mamba(cfg, rng);
  std::uint64_t n = 0;
  for (auto& [name, t] : p.named()) n += t->size();
  EXPECT_EQ(n, mamba_param_count(cfg));
  const Tensor x = oracle::random_tensor({8, 20}, rng, false);
  mac_counter() = 0;
  const Tensor y = mamba_forward(cfg, p, x);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(mac_counter(), mamba_macs(cfg, 20));
}

TEST(Mamba, InitializationRanges) {
  MambaConfig cfg;
  cfg.channels = 16;
  std::mt19937_64 rng(11);
  MambaParams p = init_mamba(cfg, rng);
  for (std::size_t e = 0; e < cfg.inner(); ++e) {
    for (std::size_t n = 0; n < cfg.state; ++n) {
      EXPECT_NEAR(-std::exp(p.a_log.values()[e * cfg.state + n]), -double(n + 1), 1e-12);
    }
    const double dt = umamba::detail::softplus_scalar(p.dt_proj_b.values()[e]);
    EXPECT_GE(dt, cfg.dt_min * (1 - 1e-9));
    EXPECT_LE(dt, cfg.dt_max * (1 + 1e-9));
    EXPECT_DOUBLE_EQ(p.skip.values()[e], 1.0);
  }
}

TEST(Mamba, ModuleGradients) {
  MambaConfig cfg;
  cfg.channels = 4;
  cfg.state = 3;
  cfg.scan_block = 4;
  std::mt19937_64 rng(12);
  MambaParams p = init_mamba(cfg, rng);
  const Tensor x = oracle::random_tensor({4, 9}, rng);
  std::vector<Tensor> inputs{x};
  for (auto& [name, t] : p.named()) inputs.push_back(*t);
  const double err = oracle::gradient_error(
      [&](auto& in) {
        MambaParams q;
        auto slots = q.named();
        for (std::size_t i = 0; i < slots.size(); ++i) *slots[i].second = in[i + 1];
        return mamba_forward(cfg, q, in[0]);
      },
      inputs);
  EXPECT_LT(err, 1e-4);
}
