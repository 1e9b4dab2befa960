#pragma once

// Mamba module: in-projection to an expanded width, short causal depthwise
// convolution, SiLU, selective scan with input-dependent B, C and step,
// multiplicative SiLU gate, out-projection. Input and output are F x T.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "umamba/ops.hpp"
#include "umamba/ssm.hpp"
#include "umamba/tensor.hpp"

namespace umamba {

struct MambaConfig {
  std::size_t channels = 128;
  std::size_t expand = 2;
  std::size_t state = 16;
  std::size_t conv_width = 4;
  std::size_t dt_rank = 0;  // 0 selects ceil(channels / 16)
  double dt_min = 1e-3;
  double dt_max = 1e-1;
  std::size_t scan_block = 64;

  std::size_t inner() const { return expand * channels; }
  std::size_t rank() const { return dt_rank ? dt_rank : (channels + 15) / 16; }
};

struct MambaParams {
  Tensor in_proj;    // 2E x F
  Tensor conv_w;     // E x k
  Tensor conv_b;     // E
  Tensor x_proj;     // (R + 2N) x E
  Tensor dt_proj_w;  // E x R
  Tensor dt_proj_b;  // E
  Tensor a_log;      // E x N, A = -exp(a_log)
  Tensor skip;       // E
  Tensor out_proj;   // F x E

  std::vector<std::pair<std::string, Tensor*>> named() {
    return {{"in_proj", &in_proj},     {"conv_w", &conv_w},       {"conv_b", &conv_b},
            {"x_proj", &x_proj},       {"dt_proj_w", &dt_proj_w}, {"dt_proj_b", &dt_proj_b},
            {"a_log", &a_log},         {"skip", &skip},           {"out_proj", &out_proj}};
  }
};

namespace detail {

// PyTorch-style default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Tensor uniform_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace detail

inline MambaParams init_mamba(const MambaConfig& cfg, std::mt19937_64& rng) {
  const std::size_t F = cfg.channels, E = cfg.inner(), N = cfg.state, R = cfg.rank(), K = cfg.conv_width;
  MambaParams p;
  p.in_proj = detail::uniform_init({2 * E, F}, F, rng);
  p.conv_w = detail::uniform_init({E, K}, K, rng);
  p.conv_b = detail::uniform_init({E}, K, rng);
  p.x_proj = detail::uniform_init({R + 2 * N, E}, E, rng);
  p.dt_proj_w = detail::uniform_init({E, R}, R, rng);

  // Step bias: softplus^-1 of a log-uniform draw in [dt_min, dt_max].
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> dt_bias(E);
  for (double& v : dt_bias) {
    const double dt = std::exp(std::log(cfg.dt_min) + unit(rng) * (std::log(cfg.dt_max) - std::log(cfg.dt_min)));
    v = dt + std::log(-std::expm1(-dt));
  }
  p.dt_proj_b = Tensor({E}, std::move(dt_bias), true);

  const auto hippo = ssm::hippo_init(N);
  std::vector<double> a_log(E * N);
  for (std::size_t e = 0; e < E; ++e) {
    for (std::size_t n = 0; n < N; ++n) a_log[e * N + n] = std::log(-hippo[n]);
  }
  p.a_log = Tensor({E, N}, std::move(a_log), true);
  p.skip = Tensor::filled({E}, 1.0, true);
  p.out_proj = detail::uniform_init({F, E}, E, rng);
  return p;
}

inline Tensor mamba_forward(const MambaConfig& cfg, const MambaParams& p, const Tensor& x) {
  detail::require_rank(x, 2, "mamba_forward");
  detail::require(x.dim(0) == cfg.channels, "mamba_forward: expected " + std::to_string(cfg.channels) +
                                                " channels, got " + std::to_string(x.dim(0)));
  const std::size_t E = cfg.inner(), N = cfg.state, R = cfg.rank(), K = cfg.conv_width;

  const Tensor xz = matmul(p.in_proj, x);
  const Tensor xs = slice_rows(xz, 0, E);
  const Tensor z = slice_rows(xz, E, 2 * E);
  const Tensor xc = silu(depthwise_conv1d(xs, p.conv_w, p.conv_b, 1, K - 1, 0));

  const Tensor proj = matmul(p.x_proj, xc);
  const Tensor dt_low = slice_rows(proj, 0, R);
  const Tensor b = slice_rows(proj, R, R + N);
  const Tensor c = slice_rows(proj, R + N, R + 2 * N);
  const Tensor delta = softplus(add_channel_bias(matmul(p.dt_proj_w, dt_low), p.dt_proj_b));
  const Tensor a = neg(exp(p.a_log));

  const Tensor y = ssm::selective_scan(xc, delta, a, b, c, p.skip, cfg.scan_block);
  return matmul(p.out_proj, mul(y, silu(z)));
}

inline std::uint64_t mamba_param_count(const MambaConfig& cfg) {
  const std::uint64_t F = cfg.channels, E = cfg.inner(), N = cfg.state, R = cfg.rank(), K = cfg.conv_width;
  return 2 * E * F + E * K + E + (R + 2 * N) * E + E * R + E + E * N + E + F * E;
}

inline std::uint64_t mamba_macs(const MambaConfig& cfg, std::uint64_t frames) {
  const std::uint64_t F = cfg.channels, E = cfg.inner(), N = cfg.state, R = cfg.rank(), K = cfg.conv_width;
  return frames * (2 * E * F + E * K + (R + 2 * N) * E + E * R + F * E) +
         ssm::selective_scan_macs(E, N, frames);
}

}  // namespace umamba
