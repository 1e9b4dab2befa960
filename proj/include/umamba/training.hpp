#pragma once

// Training loop: random fixed-length crops, batch PIT SI-SNR objective,
// global-norm clipping, Adam, plateau halving, best-validation retention,
// and exact checkpoint/resume.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "umamba/checkpoint.hpp"
#include "umamba/metrics.hpp"
#include "umamba/mixsim.hpp"
#include "umamba/model.hpp"
#include "umamba/wav.hpp"

namespace umamba {

struct TrainConfig {
  std::size_t batch_size = 4;
  double learning_rate = 1.5e-4;
  std::size_t max_epochs = 120;
  double crop_seconds = 3.0;
  double grad_clip = 5.0;  // negative disables clipping
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t plateau_patience = 5;  // 0 disables halving
  double plateau_factor = 0.5;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // steps; 0 = only at the end
  std::int64_t max_steps = -1;       // negative = no limit

  std::size_t crop_samples() const { return static_cast<std::size_t>(std::llround(crop_seconds * kSampleRate)); }

  void validate(const ModelConfig& model) const {
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw std::invalid_argument("train config: learning_rate must be finite and >= 0");
    }
    if (!(crop_seconds > 0.0)) throw std::invalid_argument("train config: crop_seconds must be positive");
    if (crop_samples() < model.window) {
      throw std::invalid_argument("train config: crop of " + std::to_string(crop_samples()) +
                                  " samples is shorter than the encoder window");
    }
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) {
      throw std::invalid_argument("train config: Adam betas must lie in [0, 1)");
    }
    if (!(eps > 0)) throw std::invalid_argument("train config: eps must be positive");
    if (!(plateau_factor > 0 && plateau_factor <= 1)) {
      throw std::invalid_argument("train config: plateau_factor must lie in (0, 1]");
    }
  }
};

struct Example {
  std::string id;
  std::vector<double> mixture;
  std::vector<std::vector<double>> references;
};

struct Crop {
  std::string id;
  std::size_t offset = 0;
  std::vector<double> mixture;
  std::vector<std::vector<double>> references;
};

// One offset shared by mixture and references; shorter inputs are
// right-padded with zeros.
inline Crop random_crop(const Example& ex, std::size_t length, std::mt19937_64& rng) {
  Crop c;
  c.id = ex.id;
  const std::size_t n = ex.mixture.size();
  if (n > length) c.offset = std::uniform_int_distribution<std::size_t>(0, n - length)(rng);
  auto cut = [&](const std::vector<double>& x) {
    std::vector<double> out(length, 0.0);
    const std::size_t avail = std::min(length, x.size() > c.offset ? x.size() - c.offset : 0);
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(c.offset), avail, out.begin());
    return out;
  };
  c.mixture = cut(ex.mixture);
  for (const auto& r : ex.references) c.references.push_back(cut(r));
  return c;
}

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& id, double value)
      : std::runtime_error("non-finite loss " + std::to_string(value) + " on sample " + id), sample_id(id) {}
  std::string sample_id;
};

class Adam {
 public:
  Adam() = default;
  Adam(const std::vector<Tensor>& params, const TrainConfig& cfg)
      : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps) {
    state_.learning_rate = cfg.learning_rate;
    for (const Tensor& p : params) {
      state_.m.emplace_back(p.size(), 0.0);
      state_.v.emplace_back(p.size(), 0.0);
    }
  }

  void update(std::vector<Tensor>& params) {
    ++state_.step;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(state_.step));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(state_.step));
    const double lr = state_.learning_rate;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto g = params[i].grad();
      auto w = params[i].mutable_values();
      auto& m = state_.m[i];
      auto& v = state_.v[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = g.empty() ? 0.0 : g[k];
        m[k] = beta1_ * m[k] + (1.0 - beta1_) * gk;
        v[k] = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
        w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
      }
    }
  }

  OptimizerState& state() { return state_; }
  const OptimizerState& state() const { return state_; }

  void restore(OptimizerState s) {
    if (s.m.size() != state_.m.size() || s.v.size() != state_.v.size()) {
      throw CheckpointError("optimizer state does not match the model's parameter list");
    }
    for (std::size_t i = 0; i < s.m.size(); ++i) {
      if (s.m[i].size() != state_.m[i].size() || s.v[i].size() != state_.v[i].size()) {
        throw CheckpointError("optimizer moment " + std::to_string(i) + " has the wrong size");
      }
    }
    state_ = std::move(s);
  }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  OptimizerState state_;
};

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
};

// Scales every gradient so the global L2 norm is at most `max_norm`;
// returns the norm before clipping.
inline double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const Tensor& p : params) {
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm >= 0.0 && norm > max_norm) {
    const double k = norm > 0.0 ? max_norm / norm : 0.0;
    for (Tensor& p : params) {
      if (p.grad().empty()) continue;
      for (double& g : p.mutable_grad()) g *= k;
    }
  }
  return norm;
}

// Forward, PIT loss averaged over the batch, backward, clip, update.
inline StepResult train_step(const UMambaNet& model, const std::vector<Crop>& batch, Adam& optimizer,
                             double grad_clip) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  std::vector<Tensor> params = model.parameters();
  for (Tensor& p : params) p.zero_grad();
  double total = 0.0;
  const double scale_by = 1.0 / static_cast<double>(batch.size());
  for (const Crop& c : batch) {
    const Tensor in({1, c.mixture.size()}, c.mixture);
    const auto estimates = model.separate(in);
    PitTensorResult pit = pit_loss(estimates, c.references);
    const double value = pit.loss.item();
    if (!std::isfinite(value)) throw NonFiniteLoss(c.id, value);
    total += value;
    backward(scale(pit.loss, scale_by));
  }
  StepResult r;
  r.loss = total * scale_by;
  r.grad_norm = clip_grad_norm(params, grad_clip);
  optimizer.update(params);
  return r;
}

// Mean over examples of the best-permutation SI-SNR at full length.
inline double evaluate_si_snr(const UMambaNet& model, const std::vector<Example>& examples) {
  if (examples.empty()) return std::numeric_limits<double>::quiet_NaN();
  double acc = 0.0;
  for (const Example& ex : examples) acc -= pit_loss(model.separate(ex.mixture), ex.references).loss;
  return acc / static_cast<double>(examples.size());
}

struct LogRow {
  bool validation = false;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double learning_rate = 0.0;
};

inline std::string format_log_row(const LogRow& row) {
  std::ostringstream os;
  os.precision(17);
  os << (row.validation ? "valid" : "train") << '\t' << row.step << '\t' << row.epoch << '\t' << row.loss << '\t';
  if (row.validation) {
    os << '-';
  } else {
    os << row.grad_norm;
  }
  os << '\t' << row.learning_rate;
  return os.str();
}

inline constexpr const char* kLogHeader = "kind\tstep\tepoch\tloss\tgrad_norm\tlr";

// Stepwise trainer whose complete state can be checkpointed: resuming
// from a checkpoint continues exactly as uninterrupted training would.
class Trainer {
 public:
  Trainer(UMambaNet& model, TrainConfig cfg, std::vector<Example> train, std::vector<Example> valid = {})
      : model_(model), cfg_(std::move(cfg)), train_(std::move(train)), valid_(std::move(valid)), rng_(cfg_.seed) {
    cfg_.validate(model_.config());
    if (train_.empty()) throw std::invalid_argument("trainer: training set is empty");
    for (const auto& ex : train_) {
      if (ex.references.size() != model_.config().sources) {
        throw std::invalid_argument("trainer: sample " + ex.id + " has " + std::to_string(ex.references.size()) +
                                    " references, model separates " + std::to_string(model_.config().sources));
      }
    }
    optimizer_ = Adam(model_.parameters(), cfg_);
  }

  const TrainConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return optimizer_.state().step; }
  std::uint64_t epoch() const { return cursor_.epoch; }
  double learning_rate() const { return optimizer_.state().learning_rate; }
  bool has_best() const { return best_.has_value(); }

  bool done() const {
    if (cfg_.max_steps >= 0 && step_count() >= static_cast<std::uint64_t>(cfg_.max_steps)) return true;
    return cursor_.epoch >= cfg_.max_epochs;
  }

  // One optimization step on the next batch. Epoch boundaries run
  // validation and the plateau schedule; rows are passed to `log`.
  StepResult step(const std::function<void(const LogRow&)>& log = {}) {
    if (done()) throw std::logic_error("trainer: step() after completion");
    if (cursor_.position == 0) {
      cursor_.order.resize(train_.size());
      std::iota(cursor_.order.begin(), cursor_.order.end(), 0);
      std::shuffle(cursor_.order.begin(), cursor_.order.end(), rng_);
    }
    std::vector<Crop> batch;
    const std::size_t stop = std::min<std::size_t>(cursor_.order.size(), cursor_.position + cfg_.batch_size);
    for (std::size_t i = cursor_.position; i < stop; ++i) {
      batch.push_back(random_crop(train_[cursor_.order[i]], cfg_.crop_samples(), rng_));
    }
    cursor_.position = stop;
    const StepResult r = train_step(model_, batch, optimizer_, cfg_.grad_clip);
    cursor_.epoch_loss += r.loss;
    ++cursor_.epoch_batches;
    if (log) log({false, step_count(), cursor_.epoch, r.loss, r.grad_norm, learning_rate()});
    if (cursor_.position >= cursor_.order.size()) finish_epoch(log);
    return r;
  }

  void run(const std::function<void(const LogRow&)>& log = {},
           const std::function<void(const Trainer&)>& on_checkpoint = {}) {
    while (!done()) {
      step(log);
      if (on_checkpoint && cfg_.checkpoint_every > 0 && step_count() % cfg_.checkpoint_every == 0) on_checkpoint(*this);
    }
  }

  // Restores the best-validation parameters, if any were recorded.
  void restore_best() {
    if (!best_) return;
    auto params = model_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto dst = params[i].mutable_values();
      std::copy((*best_)[i].begin(), (*best_)[i].end(), dst.begin());
    }
  }

  Checkpoint checkpoint() const {
    Checkpoint c = Checkpoint::from_model(model_);
    c.optimizer = optimizer_.state();
    TrainerCursor t = cursor_;
    std::ostringstream os;
    os << rng_;
    t.rng = os.str();
    c.trainer = std::move(t);
    c.best = best_;
    return c;
  }

  // Loads parameters, optimizer and cursor from a checkpoint produced by
  // a trainer over the same data and configuration.
  void resume(const Checkpoint& c) {
    if (detail::config_fields(c.config) != detail::config_fields(model_.config())) {
      throw CheckpointError("resume: checkpoint model configuration differs from the current model");
    }
    if (!c.optimizer || !c.trainer) throw CheckpointError("resume: checkpoint has no training state");
    auto params = model_.named_parameters();
    if (params.size() != c.values.size()) throw CheckpointError("resume: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].first != c.names[i] || params[i].second.size() != c.values[i].size()) {
        throw CheckpointError("resume: tensor " + c.names[i] + " does not match the model");
      }
      auto dst = params[i].second.mutable_values();
      std::copy(c.values[i].begin(), c.values[i].end(), dst.begin());
    }
    optimizer_.restore(*c.optimizer);
    cursor_ = *c.trainer;
    if (!cursor_.order.empty() && cursor_.order.size() != train_.size()) {
      throw CheckpointError("resume: checkpoint was taken over " + std::to_string(cursor_.order.size()) +
                            " training samples, current set has " + std::to_string(train_.size()));
    }
    std::istringstream is(cursor_.rng);
    is >> rng_;
    if (!is) throw CheckpointError("resume: malformed generator state");
    best_ = c.best;
  }

 private:
  void finish_epoch(const std::function<void(const LogRow&)>& log) {
    const double train_loss = cursor_.epoch_loss / static_cast<double>(std::max<std::uint64_t>(1, cursor_.epoch_batches));
    // Without a validation set the epoch's mean training SI-SNR drives the schedule.
    const double score = valid_.empty() ? -train_loss : evaluate_si_snr(model_, valid_);
    if (!valid_.empty() && log) log({true, step_count(), cursor_.epoch, -score, 0.0, learning_rate()});
    if (score > cursor_.best_valid) {
      cursor_.best_valid = score;
      cursor_.bad_epochs = 0;
      std::vector<std::vector<double>> snap;
      for (const Tensor& p : model_.parameters()) snap.emplace_back(p.values().begin(), p.values().end());
      best_ = std::move(snap);
    } else if (++cursor_.bad_epochs >= cfg_.plateau_patience && cfg_.plateau_patience > 0) {
      optimizer_.state().learning_rate *= cfg_.plateau_factor;
      cursor_.bad_epochs = 0;
    }
    ++cursor_.epoch;
    cursor_.position = 0;
    cursor_.epoch_loss = 0.0;
    cursor_.epoch_batches = 0;
  }

  UMambaNet& model_;
  TrainConfig cfg_;
  std::vector<Example> train_;
  std::vector<Example> valid_;
  std::mt19937_64 rng_;
  Adam optimizer_;
  TrainerCursor cursor_;
  std::optional<std::vector<std::vector<double>>> best_;
};

// Full training run; the model ends at the best-scoring epoch.
inline std::vector<LogRow> fit(UMambaNet& model, const std::vector<Example>& train, const TrainConfig& cfg,
                               const std::vector<Example>& valid = {}) {
  std::vector<LogRow> rows;
  Trainer t(model, cfg, train, valid);
  t.run([&](const LogRow& r) { rows.push_back(r); });
  t.restore_best();
  return rows;
}

// ------------------------------------------------------------------ data

inline std::vector<double> read_8k(const std::filesystem::path& path) {
  const auto audio = wav::read(path);
  if (audio.sample_rate != kSampleRate) {
    throw wav::WavError(path.string() + ": sample rate " + std::to_string(audio.sample_rate) + " Hz, expected " +
                        std::to_string(kSampleRate));
  }
  return audio.samples;
}

inline std::vector<Example> load_examples(const std::filesystem::path& manifest) {
  const auto dir = manifest.parent_path();
  std::vector<Example> out;
  for (const auto& row : mixsim::read_manifest(manifest)) {
    Example ex;
    ex.id = row.id;
    ex.mixture = read_8k(dir / row.mixture);
    for (const auto& s : row.sources) {
      ex.references.push_back(read_8k(dir / s));
      if (ex.references.back().size() != ex.mixture.size()) {
        throw std::runtime_error(row.id + ": reference " + s + " length differs from the mixture");
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace umamba
