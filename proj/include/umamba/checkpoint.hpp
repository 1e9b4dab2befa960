#pragma once

// Binary checkpoint container.
//
//   "UMNC" u32 version u32 field_count u32 fields...
//   sections: 4-byte tag, u64 payload length, payload
//     PARM  named parameter tensors as little-endian f32
//     MAST  the same tensors in f64 (exact resume)
//     OPTM  optimizer step, learning rate, moments
//     RNGS  generator state and data cursor
//     BEST  f64 snapshot of the best-validation parameters
//   "CRC " u32 CRC-32 of every preceding byte

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "umamba/model.hpp"

namespace umamba {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct OptimizerState {
  std::uint64_t step = 0;
  double learning_rate = 0.0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

struct TrainerCursor {
  std::string rng;  // textual mt19937_64 state
  std::uint64_t epoch = 0;
  std::uint64_t position = 0;
  std::vector<std::uint64_t> order;
  std::uint64_t bad_epochs = 0;
  double best_valid = -std::numeric_limits<double>::infinity();
  double epoch_loss = 0.0;
  std::uint64_t epoch_batches = 0;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::vector<double>> values;
  std::optional<OptimizerState> optimizer;
  std::optional<TrainerCursor> trainer;
  std::optional<std::vector<std::vector<double>>> best;

  static Checkpoint from_model(const UMambaNet& model) {
    Checkpoint c;
    c.config = model.config();
    for (const auto& [name, t] : model.named_parameters()) {
      c.names.push_back(name);
      c.shapes.push_back(t.shape());
      c.values.emplace_back(t.values().begin(), t.values().end());
    }
    return c;
  }

  UMambaNet to_model() const {
    UMambaNet model(config, 0);
    auto params = model.named_parameters();
    if (params.size() != names.size()) {
      throw CheckpointError("checkpoint has " + std::to_string(names.size()) + " tensors, model expects " +
                            std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& [name, t] = params[i];
      if (name != names[i] || t.shape() != shapes[i]) {
        throw CheckpointError("checkpoint tensor " + names[i] + " " + to_string(shapes[i]) +
                              " does not match model tensor " + name + " " + to_string(t.shape()));
      }
      auto dst = t.mutable_values();
      std::copy(values[i].begin(), values[i].end(), dst.begin());
    }
    return model;
  }
};

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void tag(const char* t) { out_.append(t, 4); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  std::string& bytes() { return out_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string out_;
};

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::size_t begin, std::size_t end) : b_(bytes), pos_(begin), end_(end) {}
  std::string tag() { return std::string(take(4), 4); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    return std::string(take(n), n);
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == end_; }
  void skip(std::size_t n) { take(n); }

 private:
  const char* take(std::size_t n) {
    if (n > end_ - pos_) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
    const char* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint64_t le(int n) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(static_cast<std::size_t>(n)));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t(p[i]) << (8 * i);
    return v;
  }
  const std::string& b_;
  std::size_t pos_;
  std::size_t end_;
};

inline std::uint32_t crc32_of(const std::string& bytes, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < n) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n - done, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + done), chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::vector<std::uint32_t> config_fields(const ModelConfig& c) {
  return {static_cast<std::uint32_t>(c.features),   static_cast<std::uint32_t>(c.window),
          static_cast<std::uint32_t>(c.hop),        static_cast<std::uint32_t>(c.depth),
          static_cast<std::uint32_t>(c.blocks),     static_cast<std::uint32_t>(c.sources),
          static_cast<std::uint32_t>(c.state),      static_cast<std::uint32_t>(c.upsampling),
          static_cast<std::uint32_t>(c.bottleneck_channels), static_cast<std::uint32_t>(c.expand),
          static_cast<std::uint32_t>(c.conv_width), static_cast<std::uint32_t>(c.down_kernel),
          static_cast<std::uint32_t>(c.up_kernel)};
}

inline ModelConfig config_from_fields(const std::vector<std::uint32_t>& f) {
  if (f.size() != 13) throw CheckpointError("checkpoint config has " + std::to_string(f.size()) + " fields, expected 13");
  if (f[7] > 2) throw CheckpointError("checkpoint config: unknown upsampling mode " + std::to_string(f[7]));
  ModelConfig c;
  c.features = f[0];
  c.window = f[1];
  c.hop = f[2];
  c.depth = f[3];
  c.blocks = f[4];
  c.sources = f[5];
  c.state = f[6];
  c.upsampling = static_cast<Upsampling>(f[7]);
  c.bottleneck_channels = f[8];
  c.expand = f[9];
  c.conv_width = f[10];
  c.down_kernel = f[11];
  c.up_kernel = f[12];
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }
  return c;
}

inline void write_f64_tensors(ByteWriter& w, const std::vector<std::vector<double>>& ts) {
  w.u32(static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) {
    w.u64(t.size());
    for (double v : t) w.f64(v);
  }
}

inline std::vector<std::vector<double>> read_f64_tensors(ByteReader& r) {
  std::vector<std::vector<double>> ts(r.u32());
  for (auto& t : ts) {
    t.resize(r.u64());
    for (double& v : t) v = r.f64();
  }
  return ts;
}

template <typename Fill>
void section(ByteWriter& w, const char* tag, Fill fill) {
  ByteWriter body;
  fill(body);
  w.tag(tag);
  w.u64(body.bytes().size());
  w.raw(body.bytes().data(), body.bytes().size());
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.tag("UMNC");
  w.u32(kCheckpointVersion);
  const auto fields = detail::config_fields(c.config);
  w.u32(static_cast<std::uint32_t>(fields.size()));
  for (auto f : fields) w.u32(f);

  detail::section(w, "PARM", [&](detail::ByteWriter& b) {
    b.u32(static_cast<std::uint32_t>(c.names.size()));
    for (std::size_t i = 0; i < c.names.size(); ++i) {
      b.str(c.names[i]);
      b.u32(static_cast<std::uint32_t>(c.shapes[i].size()));
      for (auto d : c.shapes[i]) b.u64(d);
      for (double v : c.values[i]) b.f32(static_cast<float>(v));
    }
  });
  detail::section(w, "MAST", [&](detail::ByteWriter& b) { detail::write_f64_tensors(b, c.values); });
  if (c.optimizer) {
    detail::section(w, "OPTM", [&](detail::ByteWriter& b) {
      b.u64(c.optimizer->step);
      b.f64(c.optimizer->learning_rate);
      detail::write_f64_tensors(b, c.optimizer->m);
      detail::write_f64_tensors(b, c.optimizer->v);
    });
  }
  if (c.trainer) {
    detail::section(w, "RNGS", [&](detail::ByteWriter& b) {
      const TrainerCursor& t = *c.trainer;
      b.str(t.rng);
      b.u64(t.epoch);
      b.u64(t.position);
      b.u64(t.order.size());
      for (auto o : t.order) b.u64(o);
      b.u64(t.bad_epochs);
      b.f64(t.best_valid);
      b.f64(t.epoch_loss);
      b.u64(t.epoch_batches);
    });
  }
  if (c.best) detail::section(w, "BEST", [&](detail::ByteWriter& b) { detail::write_f64_tensors(b, *c.best); });

  const std::uint32_t crc = detail::crc32_of(w.bytes(), w.bytes().size());
  w.tag("CRC ");
  w.u32(crc);
  return std::move(w.bytes());
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 20) throw CheckpointError("checkpoint too short (" + std::to_string(bytes.size()) + " bytes)");
  const std::size_t body = bytes.size() - 8;
  {
    detail::ByteReader trailer(bytes, body, bytes.size());
    if (trailer.tag() != "CRC ") throw CheckpointError("checkpoint missing checksum trailer");
    const std::uint32_t stored = trailer.u32();
    const std::uint32_t actual = detail::crc32_of(bytes, body);
    if (stored != actual) throw CheckpointError("checkpoint checksum mismatch (file corrupted)");
  }
  detail::ByteReader r(bytes, 0, body);
  if (r.tag() != "UMNC") throw CheckpointError("not a checkpoint file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  std::vector<std::uint32_t> fields(r.u32());
  for (auto& f : fields) f = r.u32();
  Checkpoint c;
  c.config = detail::config_from_fields(fields);

  bool have_parm = false;
  std::optional<std::vector<std::vector<double>>> master;
  while (!r.done()) {
    const std::string tag = r.tag();
    const std::uint64_t len = r.u64();
    const std::size_t start = r.pos();
    if (tag == "PARM") {
      const std::uint32_t count = r.u32();
      for (std::uint32_t i = 0; i < count; ++i) {
        c.names.push_back(r.str());
        Shape shape(r.u32());
        for (auto& d : shape) d = r.u64();
        std::vector<double> values(numel(shape));
        for (double& v : values) v = r.f32();
        c.shapes.push_back(std::move(shape));
        c.values.push_back(std::move(values));
      }
      have_parm = true;
    } else if (tag == "MAST") {
      master = detail::read_f64_tensors(r);
    } else if (tag == "OPTM") {
      OptimizerState o;
      o.step = r.u64();
      o.learning_rate = r.f64();
      o.m = detail::read_f64_tensors(r);
      o.v = detail::read_f64_tensors(r);
      c.optimizer = std::move(o);
    } else if (tag == "RNGS") {
      TrainerCursor t;
      t.rng = r.str();
      t.epoch = r.u64();
      t.position = r.u64();
      t.order.resize(r.u64());
      for (auto& o : t.order) o = r.u64();
      t.bad_epochs = r.u64();
      t.best_valid = r.f64();
      t.epoch_loss = r.f64();
      t.epoch_batches = r.u64();
      c.trainer = std::move(t);
    } else if (tag == "BEST") {
      c.best = detail::read_f64_tensors(r);
    } else {
      r.skip(len);
    }
    if (r.pos() - start != len) throw CheckpointError("checkpoint section " + tag + " has inconsistent length");
  }
  if (!have_parm) throw CheckpointError("checkpoint has no parameter section");
  if (master) {
    if (master->size() != c.values.size()) throw CheckpointError("checkpoint master section size mismatch");
    for (std::size_t i = 0; i < c.values.size(); ++i) {
      if ((*master)[i].size() != c.values[i].size()) throw CheckpointError("checkpoint master tensor size mismatch");
    }
    c.values = std::move(*master);
  }
  return c;
}

// Writes through a temporary file so a failed save never leaves a partial
// checkpoint at `path`.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const std::string bytes = encode_checkpoint(c);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace umamba
