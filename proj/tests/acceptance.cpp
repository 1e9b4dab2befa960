// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "umamba/checkpoint.hpp"
#include "umamba/mamba.hpp"
#include "umamba/metrics.hpp"
#include "umamba/mixsim.hpp"
#include "umamba/model.hpp"
#include "umamba/ssm.hpp"
#include "umamba/training.hpp"

using namespace umamba;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const char* title, double limit_seconds, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = limit_seconds <= 0 || secs < limit_seconds;
  const bool pass = o.ok && in_time;
  if (!pass) ++failures;
  std::printf("criterion %2d %s  %s: %s [%.2f s%s]\n", id, pass ? "PASS" : "FAIL", title, o.detail.c_str(), secs,
              in_time ? "" : ", over time limit");
  std::fflush(stdout);
}

std::string num(double v, const char* f = "%.3g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Stable dense system: A = -(M M^T + 0.5 I).
ssm::SsmParams random_system(std::mt19937_64& rng, int n, int f) {
  std::normal_distribution<double> normal(0.0, 1.0);
  ssm::SsmParams p;
  ssm::Matrix m(n, n);
  for (int i = 0; i < n * n; ++i) m.data()[i] = normal(rng) / std::sqrt(double(n));
  p.a = -(m * m.transpose() + 0.5 * ssm::Matrix::Identity(n, n));
  p.b = ssm::Matrix::NullaryExpr(n, f, [&] { return normal(rng); });
  p.c = ssm::Matrix::NullaryExpr(f, n, [&] { return normal(rng); });
  p.d = ssm::Matrix::NullaryExpr(f, f, [&] { return normal(rng); });
  p.delta = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
  return p;
}

Outcome ssm_equivalence() {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> n_dist(1, 8), f_dist(1, 4), t_dist(1, 64);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = n_dist(rng), f = f_dist(rng), T = t_dist(rng);
    const ssm::DiscreteSsm d = ssm::discretize(random_system(rng, n, f));
    ssm::Matrix x(f, T);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int i = 0; i < f * T; ++i) x.data()[i] = normal(rng);
    const ssm::Matrix rec = ssm::ssm_recurrence(d, x);
    const ssm::Matrix conv = ssm::ssm_convolve(ssm::ssm_kernel(d, T), d.d_bar, x);
    worst = std::max(worst, (rec - conv).cwiseAbs().maxCoeff());
  }
  return {worst < 1e-6, "100 dense instances, max |recurrence - convolution| = " + num(worst) + " (< 1e-6)"};
}

Outcome scan_correctness() {
  std::mt19937_64 rng(202);
  const std::size_t D = 8, N = 16, T = 128;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto u = oracle::random_vector(D * T, rng);
    const auto delta = oracle::random_vector(D * T, rng, 1e-3, 0.5);
    const auto a = oracle::random_vector(D * N, rng, -5.0, -0.1);
    const auto b = oracle::random_vector(N * T, rng);
    const auto c = oracle::random_vector(N * T, rng);
    const auto skip = oracle::random_vector(D, rng);
    const std::size_t block = std::size_t{1} << (trial % 8);
    const auto y = ssm::selective_scan(ssm::SelectiveInputs{D, N, T, u, delta, a, b, c, skip}, block);
    const auto ref = oracle::sequential_selective_scan(D, N, T, u, delta, a, b, c, skip);
    worst = std::max(worst, oracle::max_abs_diff(y, ref));
  }
  return {worst < 1e-6, "100 selective instances, max |scan - sequential| = " + num(worst) + " (< 1e-6)"};
}

Outcome gradient_integrity() {
  using oracle::gradient_error;
  using oracle::random_tensor;
  std::mt19937_64 rng(303);
  std::vector<std::pair<std::string, double>> checks;
  auto check = [&](std::string name, const std::function<Tensor(const std::vector<Tensor>&)>& f,
                   std::vector<Tensor> in) { checks.emplace_back(std::move(name), gradient_error(f, std::move(in))); };

  const Tensor a = random_tensor({3, 7}, rng), b = random_tensor({3, 7}, rng);
  check("add", [](auto& in) { return add(in[0], in[1]); }, {a, b});
  check("sub", [](auto& in) { return sub(in[0], in[1]); }, {a, b});
  check("mul", [](auto& in) { return mul(in[0], in[1]); }, {a, b});
  check("scale", [](auto& in) { return scale(in[0], 1.7); }, {a});
  check("neg", [](auto& in) { return neg(in[0]); }, {a});
  check("relu", [](auto& in) { return relu(in[0]); }, {a});
  check("sigmoid", [](auto& in) { return sigmoid(in[0]); }, {a});
  check("silu", [](auto& in) { return silu(in[0]); }, {a});
  check("softplus", [](auto& in) { return softplus(in[0]); }, {a});
  check("exp", [](auto& in) { return umamba::exp(in[0]); }, {a});
  check("prelu", [](auto& in) { return prelu(in[0], in[1]); }, {a, Tensor({1}, {0.25}, true)});
  check("sum", [](auto& in) { return sum(in[0]); }, {a});
  check("mean", [](auto& in) { return mean(in[0]); }, {a});
  check("add_channel_bias", [](auto& in) { return add_channel_bias(in[0], in[1]); }, {a, random_tensor({3}, rng)});
  check("matmul", [](auto& in) { return matmul(in[0], in[1]); }, {random_tensor({4, 3}, rng), a});
  check("conv1d", [](auto& in) { return conv1d(in[0], in[1], in[2], 2, 1); },
        {random_tensor({2, 13}, rng), random_tensor({3, 2, 5}, rng), random_tensor({3}, rng)});
  check("pointwise_conv", [](auto& in) { return pointwise_conv(in[0], in[1], in[2]); },
        {a, random_tensor({2, 3}, rng), random_tensor({2}, rng)});
  check("depthwise_conv1d", [](auto& in) { return depthwise_conv1d(in[0], in[1], in[2], 2, 2, 2); },
        {random_tensor({3, 11}, rng), random_tensor({3, 5}, rng), random_tensor({3}, rng)});
  check("transposed_conv1d", [](auto& in) { return transposed_conv1d(in[0], in[1], in[2], 3); },
        {random_tensor({3, 6}, rng), random_tensor({3, 2, 7}, rng), random_tensor({2}, rng)});
  check("depthwise_transposed_conv1d", [](auto& in) { return depthwise_transposed_conv1d(in[0], in[1], in[2], 2); },
        {random_tensor({2, 5}, rng), random_tensor({2, 4}, rng), random_tensor({2}, rng)});
  check("layer_norm_channels", [](auto& in) { return layer_norm_channels(in[0], in[1], in[2], 1e-5); },
        {random_tensor({6, 4}, rng, true, -3, 5), random_tensor({6}, rng), random_tensor({6}, rng)});
  check("slice_rows", [](auto& in) { return slice_rows(in[0], 1, 3); }, {a});
  check("crop_time", [](auto& in) { return crop_time(in[0], 2, 9); }, {a});
  check("upsample_nearest", [](auto& in) { return upsample_nearest(in[0], 13); }, {a});
  check("upsample_linear", [](auto& in) { return upsample_linear(in[0], 13); }, {a});

  const std::size_t D = 3, N = 4, T = 11;
  check("selective_scan", [](auto& in) { return ssm::selective_scan(in[0], in[1], in[2], in[3], in[4], in[5], 4); },
        {random_tensor({D, T}, rng), random_tensor({D, T}, rng, true, 0.05, 0.6), random_tensor({D, N}, rng, true, -3, -0.2),
         random_tensor({N, T}, rng), random_tensor({N, T}, rng), random_tensor({D}, rng)});

  MambaConfig mc;
  mc.channels = 4;
  mc.state = 3;
  mc.scan_block = 4;
  MambaParams mp = init_mamba(mc, rng);
  std::vector<Tensor> mamba_in{random_tensor({4, 9}, rng)};
  for (auto& [name, t] : mp.named()) mamba_in.push_back(*t);
  check("mamba_forward",
        [&](auto& in) {
          MambaParams q;
          auto slots = q.named();
          for (std::size_t i = 0; i < slots.size(); ++i) *slots[i].second = in[i + 1];
          return mamba_forward(mc, q, in[0]);
        },
        mamba_in);

  const std::vector<std::vector<double>> refs{oracle::random_vector(40, rng), oracle::random_vector(40, rng),
                                              oracle::random_vector(40, rng)};
  check("si_snr", [&](auto& in) { return si_snr(in[0], refs[0]); }, {random_tensor({1, 40}, rng)});
  check("pit_loss", [&](auto& in) { return pit_loss(in, refs).loss; },
        {random_tensor({1, 40}, rng), random_tensor({1, 40}, rng), random_tensor({1, 40}, rng)});

  double worst_op = 0.0;
  std::string worst_name;
  for (const auto& [name, err] : checks) {
    if (err >= worst_op) {
      worst_op = err;
      worst_name = name;
    }
  }

  ModelConfig cfg;
  cfg.features = 8;
  cfg.blocks = 2;
  cfg.depth = 2;
  cfg.state = 4;
  const UMambaNet net(cfg, 23);
  const std::size_t samples = 199 * cfg.hop + cfg.window;
  const auto targets = mixsim::harmonic_sources(rng, 2, samples);
  std::vector<double> mixture(samples);
  for (std::size_t i = 0; i < samples; ++i) mixture[i] = targets[0][i] + targets[1][i];
  const double model_err = oracle::model_gradient_error(net, mixture, targets, 1);

  return {worst_op < 1e-4 && model_err < 1e-3,
          std::to_string(checks.size()) + " ops, worst " + worst_name + " " + num(worst_op) +
              " (< 1e-4); end-to-end F=8 R=2 L=2 N=4 over all " + std::to_string(count_params(cfg)) +
              " parameters " + num(model_err) + " (< 1e-3)"};
}

std::vector<std::vector<double>> random_set(std::size_t S, std::size_t n, std::mt19937_64& rng) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < S; ++i) out.push_back(oracle::random_vector(n, rng));
  return out;
}

Outcome pit_optimality() {
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> leak(0.0, 2.0);
  int mismatches = 0, total = 0;
  for (std::size_t S : {2u, 3u, 4u}) {
    for (int trial = 0; trial < 200; ++trial) {
      const auto refs = random_set(S, 100, rng);
      auto ests = random_set(S, 100, rng);
      std::vector<std::size_t> shuffle(S);
      std::iota(shuffle.begin(), shuffle.end(), 0);
      std::shuffle(shuffle.begin(), shuffle.end(), rng);
      for (std::size_t i = 0; i < S; ++i) {
        const double w = leak(rng);
        for (std::size_t t = 0; t < 100; ++t) ests[shuffle[i]][t] += w * refs[i][t];
      }
      const PitResult got = pit_loss(ests, refs);
      const oracle::BrutePit want = oracle::brute_pit(ests, refs);
      ++total;
      if (got.perm != want.perm || got.loss != -want.score) ++mismatches;
    }
  }
  return {mismatches == 0, std::to_string(total) + " instances (S = 2, 3, 4), " + std::to_string(mismatches) +
                               " differ from brute force"};
}

Outcome parameter_counts() {
  struct Row {
    const char* name;
    std::function<void(ModelConfig&)> edit;
    double target, tol;
  };
  const std::vector<Row> rows{{"default", [](ModelConfig&) {}, 4.4, 0.10},
                              {"F=64", [](ModelConfig& c) { c.features = 64; }, 1.3, 0.15},
                              {"R=12", [](ModelConfig& c) { c.blocks = 12; }, 3.3, 0.15},
                              {"R=20", [](ModelConfig& c) { c.blocks = 20; }, 5.5, 0.15},
                              {"L=8", [](ModelConfig& c) { c.depth = 8; }, 4.6, 0.15},
                              {"F=192", [](ModelConfig& c) { c.features = 192; }, 9.7, 0.15}};
  bool ok = true;
  std::string detail;
  for (const Row& r : rows) {
    ModelConfig c;
    r.edit(c);
    const double m = static_cast<double>(count_params(c)) / 1e6;
    const bool in = std::abs(m - r.target) <= r.tol * r.target;
    ok = ok && in;
    detail += std::string(detail.empty() ? "" : ", ") + r.name + " " + num(m, "%.3f") + "M" + (in ? "" : "(!)") +
              " vs " + num(r.target, "%.1f") + "M+-" + num(r.tol * 100, "%.0f") + "%";
  }
  return {ok, detail};
}

Outcome compute_profile() {
  ModelConfig def, narrow;
  narrow.features = 64;
  const std::size_t samples = 3 * kSampleRate;
  const auto full = count_macs(def, samples), small = count_macs(narrow, samples);
  const double g_def = static_cast<double>(full.total()) / 1e9;
  const double g_narrow = static_cast<double>(small.total()) / 1e9;
  const bool ok_def = std::abs(g_def - 2.5) <= 0.20 * 2.5;
  const bool ok_narrow = std::abs(g_narrow - 0.7) <= 0.25 * 0.7;
  return {ok_def && ok_narrow,
          "3 s input: default " + num(g_def, "%.3f") + " GMACs vs 2.5+-20%" + (ok_def ? "" : "(!)") + ", F=64 " +
              num(g_narrow, "%.3f") + " GMACs vs 0.7+-25%" + (ok_narrow ? "" : "(!)") +
              "; without Mamba layers: " + num(full.without_mamba() / 1e9, "%.3f") + " / " +
              num(small.without_mamba() / 1e9, "%.3f")};
}

bool room_in_ranges(const mixsim::RoomConfig& cfg, const mixsim::RoomInstance& r) {
  bool ok = cfg.length.contains(r.dims[0]) && cfg.width.contains(r.dims[1]) && cfg.height.contains(r.dims[2]) &&
            cfg.t60.contains(r.t60) && cfg.receiver_height.contains(r.receiver[2]) && r.absorption > 0.0 &&
            r.absorption < 1.0;
  for (int k = 0; k < 2; ++k) ok = ok && cfg.receiver_offset.contains(r.receiver[k] - r.dims[k] / 2.0);
  for (std::size_t s = 0; s < r.sources.size(); ++s) {
    ok = ok && cfg.source_distance.contains(r.source_distance[s]) && cfg.source_azimuth.contains(r.source_azimuth[s]) &&
         cfg.source_height.contains(r.sources[s][2]);
    for (int k = 0; k < 3; ++k) {
      ok = ok && r.sources[s][k] >= cfg.wall_margin && r.sources[s][k] <= r.dims[k] - cfg.wall_margin;
    }
  }
  return ok;
}

Outcome room_fidelity() {
  const mixsim::RoomConfig cfg;
  std::mt19937_64 rng(505);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const mixsim::RoomInstance room = mixsim::sample_room(cfg, rng);
    const double t60 = oracle::schroeder_t60(mixsim::image_source_rir(room, i % 2), kSampleRate);
    worst = std::max(worst, std::abs(t60 / room.t60 - 1.0));
  }
  int outside = 0;
  for (int i = 0; i < 10000; ++i) outside += room_in_ranges(cfg, mixsim::sample_room(cfg, rng)) ? 0 : 1;
  return {worst <= 0.2 && outside == 0, "20 rooms, worst Schroeder T60 deviation " + num(worst * 100, "%.1f") +
                                             "% (<= 20%); " + std::to_string(outside) + " of 10000 draws out of range"};
}

std::vector<Example> overfit_set() {
  mixsim::SimConfig sc;
  sc.duration_seconds = 2.0;
  const mixsim::SourceProvider tones = [](std::mt19937_64& r, std::size_t c, std::size_t n) {
    return mixsim::harmonic_sources(r, c, n);
  };
  std::vector<Example> ex;
  for (std::uint64_t i = 0; i < 4; ++i) {
    auto s = mixsim::simulate_sample(sc, tones, mixsim::sample_seed(42, i));
    ex.push_back({"m" + std::to_string(i), s.mixture, s.reverberant_sources});
  }
  return ex;
}

Outcome trainability() {
  const auto ex = overfit_set();
  ModelConfig mc;
  mc.features = 32;
  mc.blocks = 2;
  mc.depth = 2;
  mc.state = 8;
  UMambaNet net(mc, 1);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.learning_rate = 1e-3;
  tc.crop_seconds = 2.0;
  tc.max_steps = 2000;
  tc.max_epochs = 100000;
  tc.plateau_patience = 0;
  Trainer tr(net, tc, ex);
  double best = -kMetricClampDb;
  std::size_t steps = 0;
  while (!tr.done()) {
    tr.step();
    ++steps;
    if (steps % 50 == 0) {
      best = std::max(best, evaluate_si_snr(net, ex));
      if (best >= 10.0) break;
    }
  }
  return {best >= 10.0, "F=32 R=2 L=2 N=8 on 4 reverberant noisy 2-s mixtures: train SI-SNR " + num(best, "%.2f") +
                            " dB after " + std::to_string(steps) + " steps (>= 10 dB within 2000)"};
}

Outcome determinism_and_resume() {
  const auto ex = overfit_set();
  ModelConfig mc;
  mc.features = 8;
  mc.blocks = 1;
  mc.depth = 2;
  mc.state = 4;
  TrainConfig tc;
  tc.batch_size = 2;
  tc.crop_seconds = 0.5;
  tc.max_steps = 12;
  tc.plateau_patience = 1;
  tc.seed = 9;

  auto train = [&](std::size_t split) {
    UMambaNet net(mc, 3);
    Trainer tr(net, tc, ex, {ex[0]});
    std::vector<std::string> log;
    auto sink = [&](const LogRow& r) { log.push_back(format_log_row(r)); };
    if (split == 0) {
      tr.run(sink);
      return std::make_pair(log, encode_checkpoint(tr.checkpoint()));
    }
    for (std::size_t i = 0; i < split; ++i) tr.step(sink);
    const std::string bytes = encode_checkpoint(tr.checkpoint());
    UMambaNet other(mc, 77);
    Trainer resumed(other, tc, ex, {ex[0]});
    resumed.resume(decode_checkpoint(bytes));
    resumed.run(sink);
    return std::make_pair(log, encode_checkpoint(resumed.checkpoint()));
  };
  const auto a = train(0), b = train(0), r = train(5);
  const bool identical = a == b;
  const bool resumed = r == a;

  mixsim::SimConfig sc;
  sc.duration_seconds = 0.5;
  const mixsim::SourceProvider tones = [](std::mt19937_64& g, std::size_t c, std::size_t n) {
    return mixsim::harmonic_sources(g, c, n);
  };
  const auto s1 = mixsim::simulate_sample(sc, tones, 7), s2 = mixsim::simulate_sample(sc, tones, 7);
  const bool data_identical = s1.mixture == s2.mixture && s1.reverberant_sources == s2.reverberant_sources;

  return {identical && resumed && data_identical,
          std::string("fixed-seed training runs ") + (identical ? "bit-identical" : "DIFFER") +
              ", resume after 5 of 12 steps " + (resumed ? "matches logs and final state" : "DIFFERS") +
              ", simulated mixtures " + (data_identical ? "bit-identical" : "DIFFER")};
}

}  // namespace

int main() {
  criterion(1, "SSM recurrence/convolution equivalence", 10, ssm_equivalence);
  criterion(2, "selective scan correctness", 10, scan_correctness);
  criterion(3, "gradient integrity", 300, gradient_integrity);
  criterion(4, "PIT optimality", 30, pit_optimality);
  criterion(5, "parameter counts", 1, parameter_counts);
  criterion(6, "compute profile", 1, compute_profile);
  criterion(7, "room simulation fidelity", 120, room_fidelity);
  criterion(8, "desk-scale trainability", 1800, trainability);
  criterion(9, "determinism and resume", 0, determinism_and_resume);
  criterion(10, "non-reproducibility statement", 0, [] {
    return Outcome{true,
                   "headline scores on noisy-reverberant Libri2Mix (SI-SNRi 8.50 dB, SDRi 8.62 dB, SIRi 17.67 dB) "
                   "need the full corpus and ~120 epochs of GPU training; they are not reproduced or targeted here, "
                   "criteria 1-9 verify properties instead"};
  });
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
