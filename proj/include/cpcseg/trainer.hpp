// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Training loop: per-chunk loss composition, Adam with global-norm clipping,
// line-delimited run logs, and the cpcseg-ckpt-v1 checkpoint format.

#pragma once

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpcseg/boundary.hpp"
#include "cpcseg/data.hpp"
#include "cpcseg/errors.hpp"
#include "cpcseg/instrumentation.hpp"
#include "cpcseg/model.hpp"
#include "cpcseg/objective.hpp"
#include "cpcseg/random.hpp"
#include "cpcseg/tensor.hpp"

namespace cpcseg {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  ModelConfig model;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  AdamConfig adam;
  double clip_norm = 5.0;  // 0 disables clipping
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // steps; 0 = final checkpoint only
  std::string manifest;

  void validate() const {
    model.validate();
    if (batch_size == 0) throw ConfigError("train.batch_size: must be >= 1");
    if (!(adam.lr > 0)) throw ConfigError("train.lr: must be positive");
    if (adam.beta1 < 0 || adam.beta1 >= 1) throw ConfigError("train.beta1: must be in [0, 1)");
    if (adam.beta2 < 0 || adam.beta2 >= 1) throw ConfigError("train.beta2: must be in [0, 1)");
    if (!(adam.eps > 0)) throw ConfigError("train.eps: must be positive");
    if (clip_norm < 0) throw ConfigError("train.clip_norm: must be nonnegative");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"model", to_json(c.model)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.adam.lr},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"eps", c.adam.eps},
          {"clip_norm", c.clip_norm},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"manifest", c.manifest}};
}

/// FNV-1a over the canonical JSON dump, as 16 hex digits.
inline std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Training data

/// One fixed-length training chunk and, when alignments are known, its
/// interior phone boundaries as frame indices.
struct TrainChunk {
  std::vector<float> samples;
  std::size_t offset = 0;
  std::string utterance_id;
  std::optional<std::vector<std::int64_t>> phone_frames;
};

/// Sample position -> nearest frame boundary index.
inline std::int64_t sample_to_frame(std::int64_t sample, std::size_t hop) {
  return (sample + std::int64_t(hop) / 2) / std::int64_t(hop);
}

/// Interior boundaries of `al` that fall inside [offset, offset + len), as
/// sorted unique frame indices in 1..frames-1 relative to the chunk.
inline std::vector<std::int64_t> chunk_boundary_frames(const Alignment& al, std::size_t offset,
                                                       std::size_t len, std::size_t hop) {
  const std::int64_t frames = std::int64_t(len / hop);
  std::vector<std::int64_t> out;
  for (auto b : al.boundaries()) {
    const std::int64_t f = sample_to_frame(b - std::int64_t(offset), hop);
    if (f <= 0 || f >= frames) continue;
    if (out.empty() || out.back() < f) out.push_back(f);
  }
  return out;
}

inline std::vector<TrainChunk> make_train_chunks(const Waveform& wave, const Alignment* phones,
                                                 std::size_t hop = kHopSamples) {
  std::vector<TrainChunk> out;
  for (const Chunk& c : chunk_stream(wave)) {
    TrainChunk tc;
    tc.samples.assign(c.samples.begin(), c.samples.end());
    tc.offset = c.offset;
    tc.utterance_id = wave.utterance_id;
    if (phones) tc.phone_frames = chunk_boundary_frames(*phones, c.offset, c.samples.size(), hop);
    out.push_back(std::move(tc));
  }
  return out;
}

inline std::vector<TrainChunk> make_train_chunks(const std::vector<SynthUtterance>& corpus) {
  std::vector<TrainChunk> out;
  for (const auto& u : corpus) {
    auto part = make_train_chunks(u.wave, &u.phones);
    for (auto& c : part) out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward pass

template <typename S>
struct ForwardLosses {
  std::optional<LossTerm<S>> frame, segment, adjacent;
  Tensor<S> total;
  LatentSequence<S> latents;
  Tensor<S> context;
  std::optional<Segmentation> segmentation;
  // Alignments chosen by the ACPC terms (empty for plain CPC).
  std::vector<AlignmentPath> frame_paths, segment_paths;
};

struct ForwardOptions {
  bool training = true;
  // Fixed segmentation (and frame-level alignment) for gradient checks.
  const Segmentation* frozen_segmentation = nullptr;
  const std::vector<AlignmentPath>* frozen_frame_paths = nullptr;
  const std::vector<AlignmentPath>* frozen_segment_paths = nullptr;
};

/// Segmentation used to pool segments for one chunk: oracle phone boundaries
/// or peaks of the current (detached) latents.
template <typename S>
Segmentation training_segmentation(const ModelConfig& cfg, const Tensor<S>& latents,
                                   const std::optional<std::vector<std::int64_t>>& oracle) {
  if (cfg.oracle_boundaries) {
    if (!oracle) throw DataError("oracle boundaries requested but chunk has no alignment");
    Segmentation seg;
    seg.frames = *oracle;
    seg.num_frames = std::int64_t(latents.rows());
    seg.provenance.source = Provenance::Source::kOracle;
    return seg;
  }
  return detect_peaks(dissimilarity_curve(latents), cfg.boundary_prominence,
                      cfg.boundary_min_separation);
}

template <typename S>
ForwardLosses<S> forward_losses(const Model<S>& model, std::span<const float> samples,
                                const std::optional<std::vector<std::int64_t>>& oracle,
                                Rng& neg_rng, Rng& drop_rng, const ForwardOptions& opts = {}) {
  const ModelConfig& cfg = model.config();
  ForwardLosses<S> out;
  out.latents = model.encode_frames(Chunk{samples, kSampleRate, 0}, 0);
  const Tensor<S>& z = out.latents.vectors;
  if (cfg.prediction_enabled) {
    out.context = model.build_context(z);
    Tensor<S> preds = model.predict_frames(out.context, &drop_rng, opts.training);
    if (cfg.K == cfg.M)
      out.frame = cpc_loss(preds, z, cfg.M, cfg.negatives, neg_rng, true);
    else
      out.frame = acpc_loss(preds, z, cfg.K, cfg.M, cfg.negatives, neg_rng, true,
                            opts.frozen_frame_paths, &out.frame_paths);
  }
  if (cfg.segment_level_enabled) {
    out.segmentation = opts.frozen_segmentation ? *opts.frozen_segmentation
                                                : training_segmentation(cfg, z, oracle);
    PooledSegments<S> pooled = pool_segments(z, *out.segmentation);
    SegmentSequence<S> segs = model.encode_segments(pooled.means, std::move(pooled.spans));
    Tensor<S> sctx = model.build_segment_context(segs.vectors);
    Tensor<S> spreds = model.predict_segments(sctx, &drop_rng, opts.training);
    if (cfg.K_s == cfg.M_s)
      out.segment = cpc_loss(spreds, segs.vectors, cfg.M_s, cfg.segment_negatives, neg_rng, true);
    else
      out.segment = acpc_loss(spreds, segs.vectors, cfg.K_s, cfg.M_s, cfg.segment_negatives,
                              neg_rng, true, opts.frozen_segment_paths, &out.segment_paths);
  }
  if (cfg.adjacent_loss_enabled)
    out.adjacent = adjacent_contrastive_loss(z, cfg.adjacent_negatives, cfg.adjacent_temperature,
                                             neg_rng);
  auto value = [](const std::optional<LossTerm<S>>& t) -> std::optional<Tensor<S>> {
    if (!t) return std::nullopt;
    return t->value;
  };
  out.total = total_loss<S>(cfg, value(out.frame), value(out.segment), value(out.adjacent));
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename S>
class Adam {
 public:
  Adam(AdamConfig cfg, std::vector<Tensor<S>> params) : cfg_(cfg), params_(std::move(params)) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  /// Global L2 norm of the gradients.
  double grad_norm() const {
    double ss = 0;
    for (const auto& p : params_)
      for (S g : p.grad()) ss += double(g) * double(g);
    return std::sqrt(ss);
  }

  void step(double clip_norm) {
    double scale = 1.0;
    if (clip_norm > 0) {
      const double n = grad_norm();
      if (!std::isfinite(n)) throw NumericError("non-finite gradient norm");
      if (n > clip_norm) scale = clip_norm / n;
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto val = params_[i].values();
      auto grad = params_[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < val.size(); ++j) {
        const double g = double(grad[j]) * scale;
        m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * g;
        v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * g * g;
        val[j] = S(double(val[j]) - cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps));
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor<S>> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Run log

struct StepRecord {
  std::size_t step = 0, epoch = 0;
  std::optional<double> frame, segment, adjacent;
  double total = 0;
  std::size_t skipped_frame = 0, skipped_segment = 0;
  std::size_t chunks = 0;
  double seconds = 0;  // wall-clock; kept out of the deterministic log line
};

struct RunLog {
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<StepRecord> steps;
  std::optional<std::size_t> failed_step;
  std::string failure;

  std::string jsonl() const {
    std::string out;
    for (const auto& s : steps) {
      nlohmann::ordered_json j;
      j["step"] = s.step;
      j["epoch"] = s.epoch;
      if (s.frame) j["frame"] = *s.frame;
      if (s.segment) j["segment"] = *s.segment;
      if (s.adjacent) j["adjacent"] = *s.adjacent;
      j["total"] = s.total;
      if (s.frame) j["skipped_frame"] = s.skipped_frame;
      if (s.segment) j["skipped_segment"] = s.skipped_segment;
      j["chunks"] = s.chunks;
      j["seed"] = seed;
      j["config_hash"] = config_hash;
      out += j.dump() + '\n';
    }
    if (failed_step) {
      nlohmann::ordered_json j;
      j["step"] = *failed_step;
      j["error"] = failure;
      j["seed"] = seed;
      j["config_hash"] = config_hash;
      out += j.dump() + '\n';
    }
    return out;
  }

  std::string timing_jsonl() const {
    std::string out;
    for (const auto& s : steps) {
      nlohmann::ordered_json j;
      j["step"] = s.step;
      j["seconds"] = s.seconds;
      out += j.dump() + '\n';
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Checkpoints: <path>.json manifest and <path>.bin little-endian float32 blob.

inline std::filesystem::path with_suffix(const std::filesystem::path& p, const char* suffix) {
  return std::filesystem::path(p.string() + suffix);
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = with_suffix(path, ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw DataError("short write to " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void append_f32_le(std::string& out, float f) {
  std::uint32_t u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(char((u >> (8 * i)) & 0xff));
}

inline float read_f32_le(const char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= std::uint32_t(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(u);
}

template <typename S>
void save_checkpoint(const Model<S>& model, const std::filesystem::path& path) {
  nlohmann::ordered_json man;
  man["format"] = "cpcseg-ckpt-v1";
  man["config"] = to_json(model.config());
  nlohmann::ordered_json params = nlohmann::ordered_json::array();
  std::string blob;
  for (const auto& [name, t] : model.named_parameters()) {
    nlohmann::ordered_json p;
    p["name"] = name;
    p["shape"] = t.shape();
    p["offset"] = blob.size();
    p["count"] = t.numel();
    params.push_back(p);
    for (S v : t.values()) append_f32_le(blob, float(v));
  }
  man["parameters"] = params;
  man["bytes"] = blob.size();
  write_file_atomic(with_suffix(path, ".bin"), blob);
  write_file_atomic(with_suffix(path, ".json"), man.dump(2) + "\n");
}

/// Loads a checkpoint. When `expected` is given the stored shapes must match
/// a model built from it. All checks run before any value is copied.
template <typename S>
Model<S> load_checkpoint(const std::filesystem::path& path,
                         const ModelConfig* expected = nullptr) {
  nlohmann::json man;
  try {
    man = nlohmann::json::parse(read_file(with_suffix(path, ".json")));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint manifest: " + std::string(e.what()));
  }
  if (man.value("format", "") != "cpcseg-ckpt-v1")
    throw DataError("checkpoint version mismatch: expected cpcseg-ckpt-v1, found '" +
                    man.value("format", "") + "'");
  ModelConfig cfg = expected ? *expected : model_config_from_json(man.at("config"));
  Model<S> model(cfg, 0);
  const std::string blob = read_file(with_suffix(path, ".bin"));
  auto named = model.named_parameters();
  const auto& params = man.at("parameters");
  if (params.size() != named.size())
    throw ShapeError("checkpoint holds " + std::to_string(params.size()) +
                     " parameters, model expects " + std::to_string(named.size()));
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& p = params[i];
    const std::string name = p.at("name");
    if (name != named[i].first)
      throw ShapeError("checkpoint parameter " + std::to_string(i) + " is '" + name +
                       "', model expects '" + named[i].first + "'");
    if (p.at("shape").get<Shape>() != named[i].second.shape())
      throw ShapeError("checkpoint parameter '" + name + "' has shape " +
                       shape_str(p.at("shape").get<Shape>()) + ", model expects " +
                       shape_str(named[i].second.shape()));
    const std::size_t off = p.at("offset"), count = p.at("count");
    if (count != named[i].second.numel() || off + 4 * count > blob.size())
      throw DataError("checkpoint size mismatch for parameter '" + name + "': blob has " +
                      std::to_string(blob.size()) + " bytes, needs " +
                      std::to_string(off + 4 * count));
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    const std::size_t off = params[i].at("offset");
    auto vals = named[i].second.values();
    for (std::size_t j = 0; j < vals.size(); ++j) vals[j] = S(read_f32_le(blob.data() + off + 4 * j));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Training

template <typename S>
struct FitResult {
  Model<S> model;
  RunLog log;
};

struct FitHooks {
  std::function<void(const StepRecord&)> on_step;
  // Called every checkpoint_every steps with the step index.
  std::function<void(std::size_t)> on_checkpoint;
};

/// Trains a model on in-memory chunks. Each step averages the per-chunk total
/// loss over a minibatch, backpropagates chunk by chunk, clips and applies
/// Adam. A non-finite value aborts with the step recorded in the log and a
/// NumericError naming it.
template <typename S>
FitResult<S> fit(const TrainConfig& cfg, const std::vector<TrainChunk>& chunks,
                 const FitHooks& hooks = {}, RunLog* partial_log = nullptr) {
  cfg.validate();
  if (chunks.empty()) throw DataError("fit: no training chunks");
  if (cfg.model.oracle_boundaries)
    for (const auto& c : chunks)
      if (!c.phone_frames)
        throw DataError("fit: oracle boundaries need alignments; missing for " + c.utterance_id);
  Model<S> model(cfg.model, cfg.seed);
  std::vector<Tensor<S>> params;
  for (auto& [name, t] : model.named_parameters()) params.push_back(t);
  Adam<S> adam(cfg.adam, params);

  RunLog log;
  log.seed = cfg.seed;
  log.config_hash = config_hash(to_json(cfg));
  std::vector<std::size_t> order(chunks.size());
  std::size_t step = 0;
  try {
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), 0);
      Rng shuf = make_rng(cfg.seed, {tag(Stream::kShuffle), epoch});
      std::shuffle(order.begin(), order.end(), shuf);
      for (std::size_t b = 0; b < order.size(); b += cfg.batch_size, ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        const std::size_t e = std::min(order.size(), b + cfg.batch_size);
        const S inv = S(1) / S(e - b);
        model.zero_grad();
        StepRecord rec;
        rec.step = step;
        rec.epoch = epoch;
        rec.chunks = e - b;
        double frame = 0, segment = 0, adjacent = 0;
        for (std::size_t i = b; i < e; ++i) {
          const TrainChunk& ch = chunks[order[i]];
          Rng neg = make_rng(cfg.seed, {tag(Stream::kNegatives), step, i - b});
          Rng drop = make_rng(cfg.seed, {tag(Stream::kDropout), step, i - b});
          ForwardLosses<S> fl = forward_losses(model, ch.samples, ch.phone_frames, neg, drop);
          if (fl.frame) {
            frame += double(fl.frame->value.item());
            rec.skipped_frame += fl.frame->skipped;
          }
          if (fl.segment) {
            segment += double(fl.segment->value.item());
            rec.skipped_segment += fl.segment->skipped;
          }
          if (fl.adjacent) adjacent += double(fl.adjacent->value.item());
          rec.total += double(fl.total.item()) * double(inv);
          backward(scale(fl.total, inv));
        }
        const double n = double(e - b);
        if (cfg.model.prediction_enabled) rec.frame = frame / n;
        if (cfg.model.segment_level_enabled) rec.segment = segment / n;
        if (cfg.model.adjacent_loss_enabled) rec.adjacent = adjacent / n;
        if (!std::isfinite(rec.total)) throw NumericError("non-finite total loss");
        adam.step(cfg.clip_norm);
        rec.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.steps.push_back(rec);
        if (hooks.on_step) hooks.on_step(rec);
        if (cfg.checkpoint_every && hooks.on_checkpoint && (step + 1) % cfg.checkpoint_every == 0)
          hooks.on_checkpoint(step);
      }
    }
  } catch (const NumericError& err) {
    log.failed_step = step;
    log.failure = err.what();
    if (partial_log) *partial_log = log;
    throw NumericError("step " + std::to_string(step) + ": " + err.what());
  }
  if (partial_log) *partial_log = log;
  return {std::move(model), std::move(log)};
}

}  // namespace cpcseg
