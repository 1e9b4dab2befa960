#pragma once

// The separation network: encoder, stacked U-Mamba blocks, mask estimation,
// masking and decoder, plus analytic parameter and MAC profiling.

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "umamba/mamba.hpp"
#include "umamba/ops.hpp"
#include "umamba/tensor.hpp"

namespace umamba {

inline constexpr int kSampleRate = 8000;

enum class Upsampling : std::uint32_t { TransposedConv = 0, Nearest = 1, Linear = 2 };

inline std::string to_string(Upsampling mode) {
  switch (mode) {
    case Upsampling::TransposedConv: return "tconv";
    case Upsampling::Nearest: return "nearest";
    case Upsampling::Linear: return "linear";
  }
  return "unknown";
}

inline Upsampling parse_upsampling(const std::string& name) {
  if (name == "tconv" || name == "transposed-conv") return Upsampling::TransposedConv;
  if (name == "nearest" || name == "nn") return Upsampling::Nearest;
  if (name == "linear") return Upsampling::Linear;
  throw std::invalid_argument("unknown upsampling mode '" + name + "' (expected tconv, nearest or linear)");
}

struct ModelConfig {
  std::size_t features = 128;   // F
  std::size_t window = 41;
  std::size_t hop = 20;
  std::size_t depth = 4;        // L
  std::size_t blocks = 16;      // R
  std::size_t sources = 2;      // S
  std::size_t state = 16;       // N
  Upsampling upsampling = Upsampling::TransposedConv;
  std::size_t bottleneck_channels = 0;  // 0 selects 4 * features
  std::size_t expand = 2;
  std::size_t conv_width = 4;
  std::size_t down_kernel = 5;
  std::size_t up_kernel = 4;

  std::size_t width() const { return bottleneck_channels ? bottleneck_channels : 4 * features; }

  MambaConfig mamba() const {
    MambaConfig m;
    m.channels = features;
    m.expand = expand;
    m.state = state;
    m.conv_width = conv_width;
    return m;
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw std::invalid_argument(std::string("model config: ") + name + " must be >= 1");
    };
    positive(features, "features");
    positive(window, "window");
    positive(hop, "hop");
    positive(depth, "depth");
    positive(blocks, "blocks");
    positive(sources, "sources");
    positive(state, "state");
    positive(expand, "expand");
    positive(conv_width, "conv_width");
    if (down_kernel < 2) throw std::invalid_argument("model config: down_kernel must be >= 2");
    if (hop > window) throw std::invalid_argument("model config: hop must not exceed window");
    if (up_kernel < 2) throw std::invalid_argument("model config: up_kernel must be >= 2");
  }

  std::size_t frames_for(std::size_t samples) const {
    if (samples < window) {
      throw std::invalid_argument("input of " + std::to_string(samples) +
                                  " samples is shorter than the encoder window (" +
                                  std::to_string(window) + " samples minimum)");
    }
    return (samples - window) / hop + 1;
  }
};

struct BlockParams {
  Tensor bottleneck_w;  // W x F
  Tensor bottleneck_b;
  Tensor bottleneck_gain;
  Tensor bottleneck_bias;
  Tensor prelu_in;
  std::vector<Tensor> down_w;  // W x k each
  std::vector<Tensor> down_b;
  std::vector<Tensor> down_gain;
  std::vector<Tensor> down_bias;
  std::vector<Tensor> up_w;  // transposed-conv mode only
  std::vector<Tensor> up_b;
  Tensor project_w;  // F x W, absent when W == F
  Tensor project_b;
  Tensor prelu_out;
  MambaParams mamba;
};

// Lengths of D^(0..L) and U^(L..0) from one block evaluation.
struct BlockTrace {
  std::vector<std::size_t> down_lengths;
  std::vector<std::size_t> up_lengths;
};

// Stride-2 resampling back to `target` frames, target in {2n-1, 2n, 2n+1}.
// Transposed-conv mode takes a W x k depthwise kernel and bias; its
// (2n - 2 + k)-long output is read from offset 1.
inline Tensor upsample(const Tensor& x, Upsampling mode, std::size_t target, const Tensor& weight = {},
                       const Tensor& bias = {}) {
  detail::require_rank(x, 2, "upsample");
  const std::size_t n = x.dim(1);
  detail::require(target + 1 >= 2 * n && target <= 2 * n + 1,
                  "upsample: target length " + std::to_string(target) + " is not within one frame of 2 x " +
                      std::to_string(n));
  switch (mode) {
    case Upsampling::Nearest: return upsample_nearest(x, target);
    case Upsampling::Linear: return upsample_linear(x, target);
    case Upsampling::TransposedConv: {
      detail::require(weight.defined(), "upsample: transposed-conv mode needs a kernel");
      return crop_time(depthwise_transposed_conv1d(x, weight, bias, 2), 1, target);
    }
  }
  throw std::invalid_argument("upsample: unknown mode");
}

class UMambaNet {
 public:
  explicit UMambaNet(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t F = cfg_.features, W = cfg_.width(), S = cfg_.sources;
    encoder_ = detail::uniform_init({F, 1, cfg_.window}, cfg_.window, rng);
    blocks_.reserve(cfg_.blocks);
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      BlockParams bp;
      bp.bottleneck_w = detail::uniform_init({W, F}, F, rng);
      bp.bottleneck_b = detail::uniform_init({W}, F, rng);
      bp.bottleneck_gain = Tensor::filled({W}, 1.0, true);
      bp.bottleneck_bias = Tensor::zeros({W}, true);
      bp.prelu_in = Tensor::filled({1}, 0.25, true);
      for (std::size_t l = 0; l < cfg_.depth; ++l) {
        bp.down_w.push_back(detail::uniform_init({W, cfg_.down_kernel}, cfg_.down_kernel, rng));
        bp.down_b.push_back(detail::uniform_init({W}, cfg_.down_kernel, rng));
        bp.down_gain.push_back(Tensor::filled({W}, 1.0, true));
        bp.down_bias.push_back(Tensor::zeros({W}, true));
        if (cfg_.upsampling == Upsampling::TransposedConv) {
          bp.up_w.push_back(detail::uniform_init({W, cfg_.up_kernel}, cfg_.up_kernel, rng));
          bp.up_b.push_back(detail::uniform_init({W}, cfg_.up_kernel, rng));
        }
      }
      if (W != F) {
        bp.project_w = detail::uniform_init({F, W}, W, rng);
        bp.project_b = detail::uniform_init({F}, W, rng);
      }
      bp.prelu_out = Tensor::filled({1}, 0.25, true);
      bp.mamba = init_mamba(cfg_.mamba(), rng);
      blocks_.push_back(std::move(bp));
    }
    mask_w_ = detail::uniform_init({S * F, F}, F, rng);
    mask_b_ = detail::uniform_init({S * F}, F, rng);
    decoder_ = detail::uniform_init({F, 1, cfg_.window}, F * cfg_.window, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  BlockParams& block_params(std::size_t b) { return blocks_.at(b); }
  const BlockParams& block_params(std::size_t b) const { return blocks_.at(b); }
  Tensor& encoder_weight() { return encoder_; }
  Tensor& mask_weight() { return mask_w_; }
  Tensor& mask_bias() { return mask_b_; }
  Tensor& decoder_weight() { return decoder_; }

  // Deterministic traversal order; tensors alias the model's storage.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("encoder.weight", encoder_);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const BlockParams& bp = blocks_[b];
      const std::string p = "blocks." + std::to_string(b) + ".";
      out.emplace_back(p + "bottleneck.weight", bp.bottleneck_w);
      out.emplace_back(p + "bottleneck.bias", bp.bottleneck_b);
      out.emplace_back(p + "bottleneck_norm.gain", bp.bottleneck_gain);
      out.emplace_back(p + "bottleneck_norm.bias", bp.bottleneck_bias);
      out.emplace_back(p + "prelu_in", bp.prelu_in);
      for (std::size_t l = 0; l < bp.down_w.size(); ++l) {
        const std::string q = p + "down." + std::to_string(l) + ".";
        out.emplace_back(q + "weight", bp.down_w[l]);
        out.emplace_back(q + "bias", bp.down_b[l]);
        out.emplace_back(q + "norm.gain", bp.down_gain[l]);
        out.emplace_back(q + "norm.bias", bp.down_bias[l]);
      }
      for (std::size_t l = 0; l < bp.up_w.size(); ++l) {
        const std::string q = p + "up." + std::to_string(l) + ".";
        out.emplace_back(q + "weight", bp.up_w[l]);
        out.emplace_back(q + "bias", bp.up_b[l]);
      }
      if (bp.project_w.defined()) {
        out.emplace_back(p + "project.weight", bp.project_w);
        out.emplace_back(p + "project.bias", bp.project_b);
      }
      out.emplace_back(p + "prelu_out", bp.prelu_out);
      auto mp = const_cast<MambaParams&>(bp.mamba).named();
      for (auto& [name, t] : mp) out.emplace_back(p + "mamba." + name, *t);
    }
    out.emplace_back("masks.weight", mask_w_);
    out.emplace_back("masks.bias", mask_b_);
    out.emplace_back("decoder.weight", decoder_);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::uint64_t parameter_count() const {
    std::uint64_t n = 0;
    for (auto& [name, t] : named_parameters()) n += t.size();
    return n;
  }

  // Encoder output before the ReLU; linear in the waveform.
  Tensor encoder_preactivation(const Tensor& wave) const {
    detail::require_rank(wave, 2, "encode");
    detail::require(wave.dim(0) == 1, "encode: waveform must be 1 x samples");
    cfg_.frames_for(wave.dim(1));
    return conv1d(wave, encoder_, {}, cfg_.hop, 0);
  }

  Tensor encode(const Tensor& wave) const { return relu(encoder_preactivation(wave)); }

  Tensor block(std::size_t index, const Tensor& m, BlockTrace* trace = nullptr) const {
    const BlockParams& bp = blocks_.at(index);
    detail::require_rank(m, 2, "umamba_block");
    detail::require(m.dim(0) == cfg_.features, "umamba_block: expected " + std::to_string(cfg_.features) +
                                                   " channels, got " + std::to_string(m.dim(0)));
    const std::size_t frames = m.dim(1);
    if (cfg_.depth >= 63 || frames < (std::size_t{1} << cfg_.depth)) {
      throw std::invalid_argument("umamba_block: " + std::to_string(frames) + " frames cannot be halved " +
                                  std::to_string(cfg_.depth) + " times");
    }
    const std::size_t k = cfg_.down_kernel;
    std::vector<Tensor> down;
    down.reserve(cfg_.depth + 1);
    down.push_back(prelu(layer_norm_channels(pointwise_conv(m, bp.bottleneck_w, bp.bottleneck_b),
                                             bp.bottleneck_gain, bp.bottleneck_bias, kNormEps),
                         bp.prelu_in));
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      // Pads (k-1)/2 on the left and enough on the right for a ceil(n/2) output.
      const std::size_t n = down.back().dim(1);
      const std::size_t pad_l = (k - 1) / 2;
      const std::size_t out_len = (n + 1) / 2;
      const std::size_t pad_r = (out_len - 1) * 2 + k - n - pad_l;
      down.push_back(layer_norm_channels(depthwise_conv1d(down.back(), bp.down_w[l], bp.down_b[l], 2, pad_l, pad_r),
                                         bp.down_gain[l], bp.down_bias[l], kNormEps));
    }
    Tensor u = down.back();
    if (trace) {
      trace->down_lengths.clear();
      trace->up_lengths.clear();
      for (const Tensor& d : down) trace->down_lengths.push_back(d.dim(1));
      trace->up_lengths.push_back(u.dim(1));
    }
    for (std::size_t l = cfg_.depth; l >= 1; --l) {
      const Tensor& partner = down[l - 1];
      const Tensor up = cfg_.upsampling == Upsampling::TransposedConv
                            ? upsample(u, cfg_.upsampling, partner.dim(1), bp.up_w[l - 1], bp.up_b[l - 1])
                            : upsample(u, cfg_.upsampling, partner.dim(1));
      u = add(up, partner);
      if (trace) trace->up_lengths.push_back(u.dim(1));
    }
    const Tensor projected = bp.project_w.defined() ? pointwise_conv(u, bp.project_w, bp.project_b) : u;
    const Tensor mb = prelu(projected, bp.prelu_out);
    return add(mamba_forward(cfg_.mamba(), bp.mamba, mb), mb);
  }

  std::vector<Tensor> estimate_masks(const Tensor& m) const {
    const Tensor all = relu(pointwise_conv(m, mask_w_, mask_b_));
    std::vector<Tensor> masks;
    for (std::size_t s = 0; s < cfg_.sources; ++s) {
      masks.push_back(slice_rows(all, s * cfg_.features, (s + 1) * cfg_.features));
    }
    return masks;
  }

  // Overlap-add back to a 1 x samples waveform (trimmed or zero-extended).
  Tensor decode(const Tensor& masked, std::size_t samples) const {
    detail::require_rank(masked, 2, "decode");
    detail::require(masked.dim(0) == cfg_.features, "decode: channel count must equal F");
    return crop_time(transposed_conv1d(masked, decoder_, {}, cfg_.hop), 0, samples);
  }

  std::vector<Tensor> separate(const Tensor& mixture) const {
    const Tensor encoded = encode(mixture);
    Tensor m = encoded;
    for (std::size_t b = 0; b < blocks_.size(); ++b) m = block(b, m);
    std::vector<Tensor> out;
    for (const Tensor& mask : estimate_masks(m)) out.push_back(decode(mul(mask, encoded), mixture.dim(1)));
    return out;
  }

  // Inference without graph recording.
  std::vector<std::vector<double>> separate(std::span<const double> mixture) const {
    NoGradGuard guard;
    const Tensor in({1, mixture.size()}, std::vector<double>(mixture.begin(), mixture.end()));
    std::vector<std::vector<double>> out;
    for (const Tensor& s : separate(in)) out.emplace_back(s.values().begin(), s.values().end());
    return out;
  }

  static constexpr double kNormEps = 1e-5;

 private:
  ModelConfig cfg_;
  Tensor encoder_;
  std::vector<BlockParams> blocks_;
  Tensor mask_w_;
  Tensor mask_b_;
  Tensor decoder_;
};

// ------------------------------------------------------------------ profiling

inline std::uint64_t count_params(const ModelConfig& cfg) {
  cfg.validate();
  const std::uint64_t F = cfg.features, W = cfg.width(), S = cfg.sources, L = cfg.depth;
  std::uint64_t block = W * F + W + 2 * W + 1;
  block += L * (W * cfg.down_kernel + W + 2 * W);
  if (cfg.upsampling == Upsampling::TransposedConv) block += L * (W * cfg.up_kernel + W);
  if (W != F) block += F * W + F;
  block += 1 + mamba_param_count(cfg.mamba());
  return F * cfg.window + cfg.blocks * block + S * F * F + S * F + F * cfg.window;
}

struct MacBreakdown {
  std::uint64_t encoder = 0;
  std::uint64_t unet = 0;   // all blocks: bottleneck, levels, projection
  std::uint64_t mamba = 0;  // all blocks: projections, conv, scan
  std::uint64_t masks = 0;
  std::uint64_t decoder = 0;

  std::uint64_t total() const { return encoder + unet + mamba + masks + decoder; }
  std::uint64_t without_mamba() const { return total() - mamba; }
};

inline MacBreakdown count_macs(const ModelConfig& cfg, std::size_t samples = 3 * kSampleRate) {
  cfg.validate();
  const std::uint64_t F = cfg.features, W = cfg.width(), S = cfg.sources;
  const std::uint64_t T = cfg.frames_for(samples);
  MacBreakdown m;
  m.encoder = F * cfg.window * T;
  std::uint64_t unet = W * F * T;
  std::uint64_t n = T;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::uint64_t half = (n + 1) / 2;
    unet += W * cfg.down_kernel * half;
    if (cfg.upsampling == Upsampling::TransposedConv) unet += W * cfg.up_kernel * half;
    n = half;
  }
  if (W != F) unet += F * W * T;
  m.unet = cfg.blocks * unet;
  m.mamba = cfg.blocks * mamba_macs(cfg.mamba(), T);
  m.masks = S * F * F * T;
  m.decoder = S * F * cfg.window * T;
  return m;
}

}  // namespace umamba
