// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Network components: strided convolutional frame encoder, recurrent context
// builders for frames and segments, prediction heads, and the segment encoder.
// Every component is switchable from ModelConfig so CPC, ACPC, mACPC and their
// ablations are flag settings of one model.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cpcseg/data.hpp"
#include "cpcseg/errors.hpp"
#include "cpcseg/ops.hpp"
#include "cpcseg/random.hpp"
#include "cpcseg/tensor.hpp"

namespace cpcseg {

enum class HeadKind { kLinear, kAttention };

inline const char* head_kind_name(HeadKind k) {
  return k == HeadKind::kLinear ? "linear" : "attention";
}

struct ModelConfig {
  std::size_t dim = 256;
  std::vector<std::size_t> encoder_widths{10, 8, 4, 4, 4};
  std::vector<std::size_t> encoder_strides{5, 4, 2, 2, 2};
  bool context_enabled = true;
  std::size_t context_layers = 2;
  std::size_t context_units = 256;
  // Off for encoder-only models trained purely with the adjacent loss.
  bool prediction_enabled = true;
  bool segment_level_enabled = false;
  std::size_t segment_hidden = 512;
  std::size_t segment_context_layers = 2;
  std::size_t K = 6;
  std::size_t M = 12;
  std::size_t K_s = 2;
  std::size_t M_s = 4;
  HeadKind head_kind = HeadKind::kAttention;
  std::size_t attention_heads = 8;
  std::size_t attention_ff = 2048;
  double dropout_p = 0.1;
  bool adjacent_loss_enabled = false;
  double adjacent_loss_weight = 1.0;
  double adjacent_temperature = 0.1;
  std::size_t negatives = 128;
  std::size_t segment_negatives = 16;
  std::size_t adjacent_negatives = 16;
  // Peak picking used to form segments during training.
  double boundary_prominence = 0.05;
  std::size_t boundary_min_separation = 2;
  bool oracle_boundaries = false;

  std::size_t context_dim() const { return context_enabled ? context_units : dim; }
  std::size_t hop_samples() const {
    std::size_t h = 1;
    for (auto s : encoder_strides) h *= s;
    return h;
  }

  void validate() const {
    auto fail = [](const std::string& key, const std::string& why) {
      throw ConfigError("model." + key + ": " + why);
    };
    if (dim == 0) fail("dim", "must be positive");
    if (encoder_widths.empty() || encoder_widths.size() != encoder_strides.size())
      fail("encoder_widths", "widths and strides must be nonempty and of equal length");
    for (std::size_t i = 0; i < encoder_widths.size(); ++i) {
      if (encoder_strides[i] == 0) fail("encoder_strides", "strides must be positive");
      if (encoder_widths[i] < encoder_strides[i]) fail("encoder_widths", "width must be >= stride");
    }
    if (context_enabled && (context_layers == 0 || context_units == 0))
      fail("context_layers", "context network needs at least one layer and unit");
    if (K == 0 || M == 0) fail("K", "prediction counts must be positive");
    if (K > M) fail("K", "K must not exceed M");
    if (K_s == 0 || M_s == 0) fail("K_s", "segment prediction counts must be positive");
    if (K_s > M_s) fail("K_s", "K_s must not exceed M_s");
    if (segment_level_enabled && (segment_hidden == 0 || segment_context_layers == 0))
      fail("segment_hidden", "segment networks need positive sizes");
    if (head_kind == HeadKind::kAttention) {
      if (attention_heads == 0 || context_dim() % attention_heads != 0)
        fail("attention_heads", "context width must be divisible by the head count");
      if (segment_level_enabled && dim % attention_heads != 0)
        fail("attention_heads", "segment width must be divisible by the head count");
      if (attention_ff == 0) fail("attention_ff", "must be positive");
    }
    if (dropout_p < 0 || dropout_p >= 1) fail("dropout_p", "must be in [0, 1)");
    if (adjacent_loss_weight < 0) fail("adjacent_loss_weight", "must be nonnegative");
    if (adjacent_temperature <= 0) fail("adjacent_temperature", "must be positive");
    if (negatives == 0 || segment_negatives == 0 || adjacent_negatives == 0)
      fail("negatives", "negative counts must be positive");
    if (boundary_min_separation == 0) fail("boundary_min_separation", "must be >= 1");
    if (!prediction_enabled && !adjacent_loss_enabled && !segment_level_enabled)
      fail("prediction_enabled", "model has no training objective");
    if (oracle_boundaries && !segment_level_enabled)
      fail("oracle_boundaries", "requires segment_level_enabled");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"dim", c.dim},
          {"encoder_widths", c.encoder_widths},
          {"encoder_strides", c.encoder_strides},
          {"context_enabled", c.context_enabled},
          {"context_layers", c.context_layers},
          {"context_units", c.context_units},
          {"prediction_enabled", c.prediction_enabled},
          {"segment_level_enabled", c.segment_level_enabled},
          {"segment_hidden", c.segment_hidden},
          {"segment_context_layers", c.segment_context_layers},
          {"K", c.K},
          {"M", c.M},
          {"K_s", c.K_s},
          {"M_s", c.M_s},
          {"head_kind", head_kind_name(c.head_kind)},
          {"attention_heads", c.attention_heads},
          {"attention_ff", c.attention_ff},
          {"dropout_p", c.dropout_p},
          {"adjacent_loss_enabled", c.adjacent_loss_enabled},
          {"adjacent_loss_weight", c.adjacent_loss_weight},
          {"adjacent_temperature", c.adjacent_temperature},
          {"negatives", c.negatives},
          {"segment_negatives", c.segment_negatives},
          {"adjacent_negatives", c.adjacent_negatives},
          {"boundary_prominence", c.boundary_prominence},
          {"boundary_min_separation", c.boundary_min_separation},
          {"oracle_boundaries", c.oracle_boundaries}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.dim = j.at("dim");
    c.encoder_widths = j.at("encoder_widths").get<std::vector<std::size_t>>();
    c.encoder_strides = j.at("encoder_strides").get<std::vector<std::size_t>>();
    c.context_enabled = j.at("context_enabled");
    c.context_layers = j.at("context_layers");
    c.context_units = j.at("context_units");
    c.prediction_enabled = j.at("prediction_enabled");
    c.segment_level_enabled = j.at("segment_level_enabled");
    c.segment_hidden = j.at("segment_hidden");
    c.segment_context_layers = j.at("segment_context_layers");
    c.K = j.at("K");
    c.M = j.at("M");
    c.K_s = j.at("K_s");
    c.M_s = j.at("M_s");
    const std::string head = j.at("head_kind");
    if (head != "linear" && head != "attention")
      throw ConfigError("model.head_kind: expected 'linear' or 'attention', got '" + head + "'");
    c.head_kind = head == "linear" ? HeadKind::kLinear : HeadKind::kAttention;
    c.attention_heads = j.at("attention_heads");
    c.attention_ff = j.at("attention_ff");
    c.dropout_p = j.at("dropout_p");
    c.adjacent_loss_enabled = j.at("adjacent_loss_enabled");
    c.adjacent_loss_weight = j.at("adjacent_loss_weight");
    c.adjacent_temperature = j.at("adjacent_temperature");
    c.negatives = j.at("negatives");
    c.segment_negatives = j.at("segment_negatives");
    c.adjacent_negatives = j.at("adjacent_negatives");
    c.boundary_prominence = j.at("boundary_prominence");
    c.boundary_min_separation = j.at("boundary_min_separation");
    c.oracle_boundaries = j.at("oracle_boundaries");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Named model variants: the six segmentation/classification models and the
/// three CPC ablations.
enum class Variant {
  kKreuk,          // adjacent loss only, no prediction heads
  kScpcLike,       // M=1 CPC at frame and segment level, no frame context
  kAcpc,
  kAcpcAdjacent,
  kMacpc,
  kMacpcAdjacent,
  kCpcM1,
  kCpcM12NoContext,
  kCpcM12,
};

inline ModelConfig preset(Variant v, ModelConfig base = {}) {
  ModelConfig c = std::move(base);
  c.segment_level_enabled = false;
  c.adjacent_loss_enabled = false;
  c.prediction_enabled = true;
  c.context_enabled = true;
  switch (v) {
    case Variant::kKreuk:
      c.prediction_enabled = false;
      c.context_enabled = false;
      c.adjacent_loss_enabled = true;
      break;
    case Variant::kScpcLike:
      c.context_enabled = false;
      c.K = c.M = 1;
      c.segment_level_enabled = true;
      c.K_s = c.M_s = 1;
      break;
    case Variant::kAcpc:
      break;
    case Variant::kAcpcAdjacent:
      c.adjacent_loss_enabled = true;
      break;
    case Variant::kMacpc:
      c.segment_level_enabled = true;
      break;
    case Variant::kMacpcAdjacent:
      c.segment_level_enabled = true;
      c.adjacent_loss_enabled = true;
      break;
    case Variant::kCpcM1:
      c.K = c.M = 1;
      break;
    case Variant::kCpcM12NoContext:
      c.context_enabled = false;
      c.K = c.M = 12;
      break;
    case Variant::kCpcM12:
      c.K = c.M = 12;
      break;
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Parameter containers

template <typename S>
struct LinearLayer {
  Tensor<S> weight;  // [out x in]
  Tensor<S> bias;    // [out]

  Tensor<S> operator()(const Tensor<S>& x) const { return linear(x, weight, bias); }
};

template <typename S>
struct LstmParams {
  Tensor<S> w_ih, w_hh, bias;
};

template <typename S>
struct AttentionParams {
  LinearLayer<S> query, key, value, output, ff_in, ff_out;
};

/// Multi-head attention with residual connection, then a position-wise
/// relu feed-forward with a second residual connection.
template <typename S>
Tensor<S> attention_layer(const Tensor<S>& queries, const Tensor<S>& keys_values,
                          const AttentionParams<S>& p, std::size_t heads, bool causal,
                          double dropout_p, Rng* rng, bool training) {
  const std::size_t d = queries.cols();
  if (heads == 0 || d % heads != 0)
    throw ShapeError("attention_layer: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  const bool drop = training && dropout_p > 0.0;
  if (drop && rng == nullptr) throw Error("attention_layer: training dropout needs a random stream");
  auto maybe_drop = [&](const Tensor<S>& t) { return drop ? dropout(t, dropout_p, *rng, true) : t; };
  Tensor<S> attended = multihead_attend(p.query(queries), p.key(keys_values),
                                        p.value(keys_values), heads, causal);
  Tensor<S> h = add(queries, maybe_drop(p.output(attended)));
  Tensor<S> ff = p.ff_out(relu(p.ff_in(h)));
  return add(h, maybe_drop(ff));
}

template <typename S>
struct PredictionHead {
  HeadKind kind = HeadKind::kLinear;
  std::size_t count = 1;  // predictions per position
  std::size_t out_dim = 0;
  std::optional<AttentionParams<S>> attention;
  LinearLayer<S> emit;  // [count*out_dim x in]
};

template <typename S>
struct SegmentEncoder {
  LinearLayer<S> hidden;
  LinearLayer<S> output;
};

// ---------------------------------------------------------------------------
// Sequences

template <typename S>
struct LatentSequence {
  Tensor<S> vectors;  // [T' x dim]
  std::size_t hop_ms = 10;
  std::size_t origin_sample = 0;

  std::size_t length() const { return vectors.rows(); }
};

template <typename S>
struct SegmentSequence {
  Tensor<S> vectors;  // [J x dim]
  std::vector<std::pair<std::size_t, std::size_t>> spans;

  std::size_t length() const { return vectors.rows(); }
};

// ---------------------------------------------------------------------------
// Model

template <typename S>
class Model {
 public:
  explicit Model(ModelConfig config, std::uint64_t seed = 0) : config_(std::move(config)) {
    config_.validate();
    Rng rng = make_rng(seed, {tag(Stream::kInit)});
    const std::size_t d = config_.dim;
    std::size_t in = 1;
    for (std::size_t i = 0; i < config_.encoder_widths.size(); ++i) {
      const std::size_t w = config_.encoder_widths[i];
      const S bound = S(1) / std::sqrt(S(in * w));
      conv_weight_.push_back(uniform({d, in, w}, bound, rng));
      conv_bias_.push_back(uniform({d}, bound, rng));
      norm_gain_.push_back(Tensor<S>::full({d}, S(1)));
      norm_bias_.push_back(Tensor<S>::zeros({d}));
      in = d;
    }
    if (config_.context_enabled)
      frame_context_ = make_lstm(config_.context_layers, d, config_.context_units, rng);
    if (config_.prediction_enabled)
      frame_head_ = make_head(config_.context_dim(), d, config_.K, rng);
    if (config_.segment_level_enabled) {
      SegmentEncoder<S> se;
      se.hidden = make_linear(d, config_.segment_hidden, rng);
      se.output = make_linear(config_.segment_hidden, d, rng);
      segment_encoder_ = std::move(se);
      segment_context_ = make_lstm(config_.segment_context_layers, d, d, rng);
      segment_head_ = make_head(d, d, config_.K_s, rng);
    }
    for_each_parameter([](const std::string&, Tensor<S>& t) { t.set_requires_grad(true); });
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return config_; }

  bool has_frame_context() const { return frame_context_.has_value(); }
  bool has_frame_head() const { return frame_head_.has_value(); }
  bool has_segment_level() const { return segment_encoder_.has_value(); }
  const std::optional<PredictionHead<S>>& frame_head() const { return frame_head_; }
  const std::optional<PredictionHead<S>>& segment_head() const { return segment_head_; }

  /// Visits parameters in a fixed order with stable names.
  void for_each_parameter(const std::function<void(const std::string&, Tensor<S>&)>& fn) {
    for (std::size_t i = 0; i < conv_weight_.size(); ++i) {
      const std::string p = "encoder.conv" + std::to_string(i);
      fn(p + ".weight", conv_weight_[i]);
      fn(p + ".bias", conv_bias_[i]);
      fn(p + ".norm_gain", norm_gain_[i]);
      fn(p + ".norm_bias", norm_bias_[i]);
    }
    if (frame_context_) visit_lstm("frame_context", *frame_context_, fn);
    if (frame_head_) visit_head("frame_head", *frame_head_, fn);
    if (segment_encoder_) {
      visit_linear("segment_encoder.hidden", segment_encoder_->hidden, fn);
      visit_linear("segment_encoder.output", segment_encoder_->output, fn);
    }
    if (segment_context_) visit_lstm("segment_context", *segment_context_, fn);
    if (segment_head_) visit_head("segment_head", *segment_head_, fn);
  }

  std::vector<std::pair<std::string, Tensor<S>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    const_cast<Model*>(this)->for_each_parameter(
        [&](const std::string& n, Tensor<S>& t) { out.emplace_back(n, t); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t.numel();
    return n;
  }

  void zero_grad() {
    for_each_parameter([](const std::string&, Tensor<S>& t) { t.zero_grad(); });
  }

  /// g_enc: waveform chunk -> latent frames [T' x dim], T' = ceil(len / hop).
  LatentSequence<S> encode_frames(const Chunk& chunk, std::size_t expected_length = kChunkSamples) const {
    if (chunk.sample_rate != kSampleRate)
      throw DataError("encode_frames: expected 16000 Hz audio, got " +
                      std::to_string(chunk.sample_rate));
    if (expected_length != 0 && chunk.samples.size() != expected_length)
      throw ShapeError("encode_frames: chunk must hold " + std::to_string(expected_length) +
                       " samples, got " + std::to_string(chunk.samples.size()));
    if (chunk.samples.empty()) throw ShapeError("encode_frames: empty chunk");
    std::vector<S> raw(chunk.samples.begin(), chunk.samples.end());
    const std::size_t n = raw.size();
    Tensor<S> x = Tensor<S>::from({1, n}, std::move(raw));
    const std::size_t layers = conv_weight_.size();
    for (std::size_t i = 0; i < layers; ++i) {
      x = conv1d(x, conv_weight_[i], conv_bias_[i], config_.encoder_strides[i],
                 Padding::kSameStrided);
      x = channel_norm(x, norm_gain_[i], norm_bias_[i]);
      if (i + 1 < layers) x = relu(x);
    }
    return {transpose(x), 10, chunk.offset};
  }

  /// g_ar over latent frames; pass-through when the frame context is disabled.
  Tensor<S> build_context(const Tensor<S>& latents) const {
    if (latents.rows() == 0) throw ShapeError("build_context: empty sequence");
    if (!frame_context_) return latents;
    return run_lstm(*frame_context_, latents);
  }

  /// s_ar over segment vectors.
  Tensor<S> build_segment_context(const Tensor<S>& segments) const {
    if (!segment_context_) throw Error("build_segment_context: segment level disabled");
    if (segments.rows() == 0) throw ShapeError("build_segment_context: empty sequence");
    return run_lstm(*segment_context_, segments);
  }

  /// All positions' predictions from the frame head: [T*K x dim], row t*K + k.
  Tensor<S> predict_frames(const Tensor<S>& context, Rng* rng, bool training) const {
    if (!frame_head_) throw Error("predict_frames: prediction disabled");
    return predict(*frame_head_, context, rng, training);
  }

  Tensor<S> predict_segments(const Tensor<S>& context, Rng* rng, bool training) const {
    if (!segment_head_) throw Error("predict_segments: segment level disabled");
    return predict(*segment_head_, context, rng, training);
  }

  /// The K predictions made at position t (0-based), [K x dim]. Only
  /// contexts up to t are visible to the head.
  Tensor<S> predict_future(const Tensor<S>& context, std::size_t t, Rng* rng = nullptr,
                           bool training = false) const {
    if (!frame_head_) throw Error("predict_future: prediction disabled");
    if (t >= context.rows())
      throw ShapeError("predict_future: position " + std::to_string(t) + " outside sequence of " +
                       std::to_string(context.rows()));
    const std::size_t k = frame_head_->count;
    Tensor<S> all = predict(*frame_head_, slice_rows(context, 0, t + 1), rng, training);
    return slice_rows(all, t * k, (t + 1) * k);
  }

  /// s_enc: per-segment two-layer MLP on pooled means.
  SegmentSequence<S> encode_segments(const Tensor<S>& pooled_means,
                                     std::vector<std::pair<std::size_t, std::size_t>> spans) const {
    if (!segment_encoder_) throw Error("encode_segments: segment level disabled");
    if (pooled_means.rows() == 0) throw ShapeError("encode_segments: no segments");
    Tensor<S> h = relu(segment_encoder_->hidden(pooled_means));
    return {segment_encoder_->output(h), std::move(spans)};
  }

 private:
  static Tensor<S> uniform(Shape shape, S bound, Rng& rng) {
    std::uniform_real_distribution<double> u(-double(bound), double(bound));
    std::vector<S> v(shape_numel(shape));
    for (auto& x : v) x = S(u(rng));
    return Tensor<S>::from(std::move(shape), std::move(v));
  }

  static LinearLayer<S> make_linear(std::size_t in, std::size_t out, Rng& rng, S scale = S(1)) {
    const S bound = S(1) / std::sqrt(S(in));
    return {uniform({out, in}, bound * scale, rng), uniform({out}, bound * scale, rng)};
  }

  static std::vector<LstmParams<S>> make_lstm(std::size_t layers, std::size_t in,
                                              std::size_t units, Rng& rng) {
    std::vector<LstmParams<S>> out;
    const S bound = S(1) / std::sqrt(S(units));
    for (std::size_t l = 0; l < layers; ++l) {
      out.push_back({uniform({4 * units, l == 0 ? in : units}, bound, rng),
                     uniform({4 * units, units}, bound, rng), uniform({4 * units}, bound, rng)});
    }
    return out;
  }

  PredictionHead<S> make_head(std::size_t in, std::size_t out, std::size_t count, Rng& rng) const {
    PredictionHead<S> h;
    h.kind = config_.head_kind;
    h.count = count;
    h.out_dim = out;
    if (h.kind == HeadKind::kAttention) {
      AttentionParams<S> a;
      a.query = make_linear(in, in, rng);
      a.key = make_linear(in, in, rng);
      a.value = make_linear(in, in, rng);
      a.output = make_linear(in, in, rng);
      a.ff_in = make_linear(in, config_.attention_ff, rng);
      a.ff_out = make_linear(config_.attention_ff, in, rng);
      h.attention = std::move(a);
    }
    // Emitters start small so untrained scores are near uniform.
    h.emit = make_linear(in, count * out, rng, S(1) / std::sqrt(S(in)));
    return h;
  }

  static Tensor<S> run_lstm(const std::vector<LstmParams<S>>& layers, const Tensor<S>& x) {
    Tensor<S> h = x;
    for (const auto& l : layers) h = lstm_layer(h, l.w_ih, l.w_hh, l.bias);
    return h;
  }

  Tensor<S> predict(const PredictionHead<S>& head, const Tensor<S>& context, Rng* rng,
                    bool training) const {
    Tensor<S> state = context;
    if (head.attention)
      state = attention_layer(context, context, *head.attention, config_.attention_heads, true,
                              config_.dropout_p, rng, training);
    Tensor<S> emitted = head.emit(state);  // [T x count*out]
    return reshape(emitted, {context.rows() * head.count, head.out_dim});
  }

  static void visit_linear(const std::string& p, LinearLayer<S>& l,
                           const std::function<void(const std::string&, Tensor<S>&)>& fn) {
    fn(p + ".weight", l.weight);
    fn(p + ".bias", l.bias);
  }
  static void visit_lstm(const std::string& p, std::vector<LstmParams<S>>& layers,
                         const std::function<void(const std::string&, Tensor<S>&)>& fn) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string q = p + ".layer" + std::to_string(i);
      fn(q + ".w_ih", layers[i].w_ih);
      fn(q + ".w_hh", layers[i].w_hh);
      fn(q + ".bias", layers[i].bias);
    }
  }
  static void visit_head(const std::string& p, PredictionHead<S>& h,
                         const std::function<void(const std::string&, Tensor<S>&)>& fn) {
    if (h.attention) {
      visit_linear(p + ".attention.query", h.attention->query, fn);
      visit_linear(p + ".attention.key", h.attention->key, fn);
      visit_linear(p + ".attention.value", h.attention->value, fn);
      visit_linear(p + ".attention.output", h.attention->output, fn);
      visit_linear(p + ".attention.ff_in", h.attention->ff_in, fn);
      visit_linear(p + ".attention.ff_out", h.attention->ff_out, fn);
    }
    visit_linear(p + ".emit", h.emit, fn);
  }

  ModelConfig config_;
  std::vector<Tensor<S>> conv_weight_, conv_bias_, norm_gain_, norm_bias_;
  std::optional<std::vector<LstmParams<S>>> frame_context_;
  std::optional<PredictionHead<S>> frame_head_;
  std::optional<SegmentEncoder<S>> segment_encoder_;
  std::optional<std::vector<LstmParams<S>>> segment_context_;
  std::optional<PredictionHead<S>> segment_head_;
};

}  // namespace cpcseg
