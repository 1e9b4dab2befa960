// umamba: simulate data, train, separate, evaluate, profile, and export
// spectrograms. Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "umamba/checkpoint.hpp"
#include "umamba/config.hpp"
#include "umamba/metrics.hpp"
#include "umamba/mixsim.hpp"
#include "umamba/model.hpp"
#include "umamba/training.hpp"
#include "umamba/wav.hpp"

namespace fs = std::filesystem;
using namespace umamba;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
  cmd->add_option("--config", c.config, "key = value configuration file");
  cmd->add_option("--set", c.overrides, "override one setting, key=value (repeatable)");
  cmd->add_option("--seed", c.seed, "random seed (overrides run.seed)");
  auto* out = cmd->add_option("--out", c.out, "output directory");
  if (out_required) out->required();
  cmd->add_flag("--deterministic", c.deterministic, "force single-threaded, bit-reproducible execution");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) load_config_file(cfg, c.config);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  if (c.seed) cfg.seed = *c.seed;
  if (c.deterministic) cfg.deterministic = true;
  if (cfg.deterministic) cfg.sim.threads = 1;
  validate_config(cfg);
  return cfg;
}

void prepare_out(const fs::path& out, const RunConfig& cfg) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + out.string() + ": " + ec.message());
  std::ofstream f(out / "config.txt");
  f << format_config(cfg);
  if (!f) throw std::runtime_error("cannot write " + (out / "config.txt").string());
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ------------------------------------------------------------------ simulate

int cmd_simulate(const Common& common, std::size_t n) {
  const RunConfig cfg = resolve(common);
  const fs::path out = common.out;
  prepare_out(out, cfg);
  const mixsim::SourceProvider tones = [](std::mt19937_64& rng, std::size_t count, std::size_t samples) {
    return mixsim::harmonic_sources(rng, count, samples);
  };
  const auto rows = mixsim::generate_dataset(n, cfg.seed, tones, out, cfg.sim);
  std::cout << "wrote " << rows.size() << " mixtures to " << (out / "manifest.tsv").string() << "\n";
  return 0;
}

// ------------------------------------------------------------------ train

int cmd_train(const Common& common, const std::string& data, const std::string& valid,
              std::optional<std::int64_t> max_steps, const std::string& resume) {
  RunConfig cfg = resolve(common);
  if (max_steps) cfg.train.max_steps = *max_steps;
  cfg.train.seed = cfg.seed;
  auto manifest_of = [](const std::string& p) {
    fs::path m = p;
    if (fs::is_directory(m)) m /= "manifest.tsv";
    if (!fs::exists(m)) throw UsageError("dataset manifest " + m.string() + " does not exist");
    return m;
  };
  const fs::path train_manifest = manifest_of(data);
  const std::optional<fs::path> valid_manifest =
      valid.empty() ? std::nullopt : std::optional<fs::path>(manifest_of(valid));
  if (!resume.empty() && !fs::exists(resume)) throw UsageError("resume checkpoint " + resume + " does not exist");

  auto train_set = load_examples(train_manifest);
  if (train_set.empty()) throw UsageError("training manifest " + train_manifest.string() + " has no samples");
  std::vector<Example> valid_set;
  if (valid_manifest) valid_set = load_examples(*valid_manifest);

  std::optional<Checkpoint> resumed;
  if (!resume.empty()) {
    resumed = load_checkpoint(resume);
    cfg.model = resumed->config;
  }
  UMambaNet model(cfg.model, cfg.seed);
  Trainer trainer(model, cfg.train, std::move(train_set), std::move(valid_set));
  if (resumed) trainer.resume(*resumed);

  const fs::path out = common.out;
  prepare_out(out, cfg);
  std::ofstream log(out / "train.log", resumed ? std::ios::app : std::ios::trunc);
  if (!resumed) log << kLogHeader << "\n";
  auto save = [&](const Trainer& t) { save_checkpoint(out / "last.ckpt", t.checkpoint()); };
  trainer.run(
      [&](const LogRow& row) {
        log << format_log_row(row) << "\n";
        log.flush();
        if (row.validation) std::cout << "epoch " << row.epoch << " valid SI-SNR " << fmt(-row.loss) << " dB\n";
      },
      save);
  save(trainer);
  trainer.restore_best();
  save_checkpoint(out / "best.ckpt", Checkpoint::from_model(model));
  std::cout << "trained " << trainer.step_count() << " steps; checkpoints in " << out.string() << "\n";
  return 0;
}

// ------------------------------------------------------------------ separate

int cmd_separate(const Common& common, const std::string& checkpoint, const std::string& input) {
  RunConfig cfg = resolve(common);
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  cfg.model = ckpt.config;
  const UMambaNet model = ckpt.to_model();
  const auto mixture = read_8k(input);
  const auto estimates = model.separate(mixture);
  const fs::path out = common.out;
  prepare_out(out, cfg);
  for (std::size_t s = 0; s < estimates.size(); ++s) {
    wav::write(out / ("est" + std::to_string(s + 1) + ".wav"), estimates[s]);
  }
  std::cout << "wrote " << estimates.size() << " estimates to " << out.string() << "\n";
  return 0;
}

// ------------------------------------------------------------------ evaluate

int cmd_evaluate(const Common& common, const std::string& checkpoint, const std::string& manifest_arg,
                 const std::string& estimator) {
  RunConfig cfg = resolve(common);
  if (estimator != "model" && estimator != "reference" && estimator != "mixture") {
    throw UsageError("--estimator must be model, reference or mixture");
  }
  if (estimator == "model" && checkpoint.empty()) throw UsageError("--checkpoint is required with --estimator model");
  fs::path manifest = manifest_arg;
  if (fs::is_directory(manifest)) manifest /= "manifest.tsv";
  if (!fs::exists(manifest)) throw UsageError("manifest " + manifest.string() + " does not exist");

  std::optional<UMambaNet> model;
  if (estimator == "model") {
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    cfg.model = ckpt.config;
    model.emplace(ckpt.to_model());
  }
  const auto examples = load_examples(manifest);
  const fs::path out = common.out;
  prepare_out(out, cfg);
  std::ofstream report(out / "report.tsv");
  report << "id\tsi_snr\tsi_snri\tsdri\tsiri\tperm\n";
  double sum[4] = {0, 0, 0, 0};
  for (const Example& ex : examples) {
    std::vector<std::vector<double>> ests;
    if (estimator == "model") {
      ests = model->separate(ex.mixture);
      if (ests.size() != ex.references.size()) {
        throw std::runtime_error(ex.id + ": model separates " + std::to_string(ests.size()) + " sources, manifest has " +
                                 std::to_string(ex.references.size()));
      }
    } else if (estimator == "reference") {
      ests = ex.references;
    } else {
      ests.assign(ex.references.size(), ex.mixture);
    }
    const PitResult pit = pit_loss(ests, ex.references);
    std::vector<std::vector<double>> aligned;
    double si = 0, sii = 0, sdi = 0;
    for (std::size_t i = 0; i < ex.references.size(); ++i) {
      aligned.push_back(ests[pit.perm[i]]);
      si += si_snr(aligned.back(), ex.references[i]);
      sii += si_snri(aligned.back(), ex.references[i], ex.mixture);
      sdi += sdri(aligned.back(), ex.references[i], ex.mixture);
    }
    const double k = 1.0 / static_cast<double>(ex.references.size());
    const double row[4] = {si * k, sii * k, sdi * k, siri(aligned, ex.references, ex.mixture)};
    std::string perm;
    for (std::size_t i = 0; i < pit.perm.size(); ++i) perm += (i ? "," : "") + std::to_string(pit.perm[i]);
    report << ex.id;
    for (int c = 0; c < 4; ++c) {
      report << '\t' << fmt(row[c]);
      sum[c] += row[c];
    }
    report << '\t' << perm << '\n';
  }
  const double n = examples.empty() ? 1.0 : static_cast<double>(examples.size());
  std::ostringstream summary;
  summary << "utterances\t" << examples.size() << "\n"
          << "mean_si_snr\t" << fmt(sum[0] / n) << "\n"
          << "mean_si_snri\t" << fmt(sum[1] / n) << "\n"
          << "mean_sdri\t" << fmt(sum[2] / n) << "\n"
          << "mean_siri\t" << fmt(sum[3] / n) << "\n";
  std::ofstream(out / "summary.tsv") << summary.str();
  std::cout << summary.str();
  return 0;
}

// ------------------------------------------------------------------ profile

struct ProfileRow {
  std::string name;
  ModelConfig cfg;
};

std::vector<ProfileRow> ablation_grid(const ModelConfig& base) {
  std::vector<ProfileRow> rows;
  auto with = [&](std::string name, auto edit) {
    ModelConfig c = base;
    edit(c);
    rows.push_back({std::move(name), c});
  };
  with("F=64", [](ModelConfig& c) { c.features = 64; });
  with("R=12", [](ModelConfig& c) { c.blocks = 12; });
  with("default", [](ModelConfig&) {});
  with("R=20", [](ModelConfig& c) { c.blocks = 20; });
  with("L=8", [](ModelConfig& c) { c.depth = 8; });
  with("nearest", [](ModelConfig& c) { c.upsampling = Upsampling::Nearest; });
  with("linear", [](ModelConfig& c) { c.upsampling = Upsampling::Linear; });
  with("F=192", [](ModelConfig& c) { c.features = 192; });
  return rows;
}

int cmd_profile(const Common& common, bool ablations, std::size_t samples) {
  const RunConfig cfg = resolve(common);
  std::vector<ProfileRow> rows = ablations ? ablation_grid(cfg.model) : std::vector<ProfileRow>{{"config", cfg.model}};
  std::ostringstream table;
  table << "name\tF\tR\tL\tupsampling\tparams_M\tGMACs\tGMACs_without_mamba\n";
  for (const auto& row : rows) {
    const auto macs = count_macs(row.cfg, samples);
    table << row.name << '\t' << row.cfg.features << '\t' << row.cfg.blocks << '\t' << row.cfg.depth << '\t'
          << to_string(row.cfg.upsampling) << '\t' << fmt(count_params(row.cfg) / 1e6, 3) << '\t'
          << fmt(macs.total() / 1e9, 3) << '\t' << fmt(macs.without_mamba() / 1e9, 3) << '\n';
  }
  std::cout << table.str();
  if (!common.out.empty()) {
    prepare_out(common.out, cfg);
    std::ofstream(fs::path(common.out) / "profile.tsv") << table.str();
  }
  return 0;
}

// ------------------------------------------------------------------ spectrogram

int cmd_spectrogram(const Common& common, const std::string& input, std::size_t fft, std::size_t hop) {
  const RunConfig cfg = resolve(common);
  const auto wave = read_8k(input);
  Spectrogram s;
  try {
    s = spectrogram(wave, fft, hop);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const fs::path out = common.out;
  prepare_out(out, cfg);
  std::ofstream f(out / "spectrogram.txt");
  f << "frames " << s.frames << " bins " << s.bins << " fft " << fft << " hop " << hop << "\n";
  f << "floor_db " << kSpectrogramFloorDb << "\n";
  for (std::size_t t = 0; t < s.frames; ++t) {
    for (std::size_t k = 0; k < s.bins; ++k) f << (k ? " " : "") << fmt(s.at(t, k), 3);
    f << "\n";
  }
  if (!f) throw std::runtime_error("cannot write " + (out / "spectrogram.txt").string());
  std::cout << "wrote " << s.frames << " x " << s.bins << " grid to " << (out / "spectrogram.txt").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"U-Mamba-Net speech separation toolkit"};
  app.require_subcommand(1);

  Common sim_c, train_c, sep_c, eval_c, prof_c, spec_c;

  std::size_t n = 0;
  auto* sim = app.add_subcommand("simulate", "generate a reverberant noisy mixture dataset");
  add_common(sim, sim_c, true);
  sim->add_option("--n", n, "number of mixtures")->required();

  std::string data, valid, resume;
  std::optional<std::int64_t> max_steps;
  auto* train = app.add_subcommand("train", "train a separation model");
  add_common(train, train_c, true);
  train->add_option("--data", data, "training dataset directory or manifest")->required();
  train->add_option("--valid", valid, "validation dataset directory or manifest");
  train->add_option("--max-steps", max_steps, "stop after this many optimizer steps");
  train->add_option("--resume", resume, "continue from a last.ckpt");

  std::string checkpoint, input;
  auto* sep = app.add_subcommand("separate", "separate one 8 kHz mixture");
  add_common(sep, sep_c, true);
  sep->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  sep->add_option("--input", input, "mixture WAV")->required();

  std::string eval_ckpt, manifest, estimator = "model";
  auto* eval = app.add_subcommand("evaluate", "score a model on a dataset");
  add_common(eval, eval_c, true);
  eval->add_option("--checkpoint", eval_ckpt, "model checkpoint");
  eval->add_option("--manifest", manifest, "dataset directory or manifest")->required();
  eval->add_option("--estimator", estimator, "model, reference or mixture")->capture_default_str();

  bool ablations = false;
  std::size_t samples = 3 * kSampleRate;
  auto* prof = app.add_subcommand("profile", "parameter count and GMACs");
  add_common(prof, prof_c, false);
  prof->add_flag("--ablations", ablations, "profile the ablation grid");
  prof->add_option("--samples", samples, "input length in samples")->capture_default_str();

  std::string spec_in;
  std::size_t fft = 256, hop = 64;
  auto* spec = app.add_subcommand("spectrogram", "dump a dB spectrogram grid");
  add_common(spec, spec_c, true);
  spec->add_option("--input", spec_in, "WAV file")->required();
  spec->add_option("--fft", fft, "FFT size (power of two)")->capture_default_str();
  spec->add_option("--hop", hop, "hop in samples")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*sim) return cmd_simulate(sim_c, n);
    if (*train) return cmd_train(train_c, data, valid, max_steps, resume);
    if (*sep) return cmd_separate(sep_c, checkpoint, input);
    if (*eval) return cmd_evaluate(eval_c, eval_ckpt, manifest, estimator);
    if (*prof) return cmd_profile(prof_c, ablations, samples);
    if (*spec) return cmd_spectrogram(spec_c, spec_in, fft, hop);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
