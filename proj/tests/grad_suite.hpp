// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Randomised finite-difference suites shared by the unit tests and the
// acceptance binary. Each case maps an op's output to a scalar through a
// fixed random projection so every output element contributes.

#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "cpcseg/cpcseg.hpp"

namespace cpcseg::testing {

using T = Tensor<double>;

struct GradCase {
  std::function<T()> f;
  std::vector<T> params;
  // Five-point stencil at h = 1e-3: a wider step keeps the loss's rounding
  // noise below the tiny gradients some configurations produce, and the
  // O(h^4) truncation stays far under the tolerance for smooth ops.
  double epsilon = 1e-3;
  std::size_t max_coordinates = 0;
  bool five_point = true;
};

struct OpSuite {
  std::string name;
  std::function<GradCase(Rng&)> make;
};

struct SuiteResult {
  std::string name;
  std::size_t configs = 0;
  std::size_t coordinates = 0;
  double worst = 0;
};

inline std::size_t uniform_size(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline T random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return T::from(std::move(shape), std::move(v));
}

/// Values bounded away from zero (keeps relu kinks out of the stencil).
inline T random_nonzero(Shape shape, Rng& rng) {
  T t = random_tensor(std::move(shape), rng);
  for (auto& x : t.values())
    if (std::abs(x) < 1e-2) x = x < 0 ? -0.5 : 0.5;
  return t;
}

/// sum(out * W) with W drawn from `seed` and out's shape.
inline T project(const T& out, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x70});
  return sum(mul(out, random_tensor(out.shape(), rng)));
}

inline AttentionParams<double> random_attention(std::size_t d, std::size_t ff, Rng& rng) {
  auto lin = [&](std::size_t in, std::size_t out) {
    return LinearLayer<double>{random_tensor({out, in}, rng, -0.5, 0.5),
                               random_tensor({out}, rng, -0.5, 0.5)};
  };
  return {lin(d, d), lin(d, d), lin(d, d), lin(d, d), lin(d, ff), lin(ff, d)};
}

/// Trainable attention tensors. The key bias is left out: it shifts every
/// score of a query row equally, so its gradient is identically zero and a
/// relative error against a rounding-noise central difference is meaningless.
inline std::vector<T> attention_tensors(AttentionParams<double>& p) {
  std::vector<T> out;
  for (auto* l : {&p.query, &p.key, &p.value, &p.output, &p.ff_in, &p.ff_out}) {
    out.push_back(l->weight);
    if (l != &p.key) out.push_back(l->bias);
  }
  return out;
}

inline std::vector<OpSuite> primitive_suites() {
  std::vector<OpSuite> s;
  auto shape2 = [](Rng& rng) { return Shape{uniform_size(rng, 1, 5), uniform_size(rng, 1, 5)}; };

  s.push_back({"add", [=](Rng& rng) {
                 Shape sh = shape2(rng);
                 T a = random_tensor(sh, rng), b = random_tensor(sh, rng);
                 const auto seed = rng();
                 return GradCase{[=] { return project(add(a, b), seed); }, {a, b}};
               }});
  s.push_back({"mul", [=](Rng& rng) {
                 Shape sh = shape2(rng);
                 T a = random_tensor(sh, rng), b = random_tensor(sh, rng);
                 const auto seed = rng();
                 return GradCase{[=] { return project(mul(a, b), seed); }, {a, b}};
               }});
  s.push_back({"scale", [=](Rng& rng) {
                 T a = random_tensor(shape2(rng), rng);
                 const double f = std::uniform_real_distribution<double>(-2, 2)(rng);
                 const auto seed = rng();
                 return GradCase{[=] { return project(scale(a, f), seed); }, {a}};
               }});
  s.push_back({"add_bias", [=](Rng& rng) {
                 Shape sh = shape2(rng);
                 T a = random_tensor(sh, rng), b = random_tensor({sh[1]}, rng);
                 const auto seed = rng();
                 return GradCase{[=] { return project(add_bias(a, b), seed); }, {a, b}};
               }});
  s.push_back({"relu", [=](Rng& rng) {
                 T a = random_nonzero(shape2(rng), rng);
                 const auto seed = rng();
                 return GradCase{[=] { return project(relu(a), seed); }, {a}};
               }});
  s.push_back({"dropout", [=](Rng& rng) {
                 T a = random_tensor(shape2(rng), rng);
                 const double p = std::uniform_real_distribution<double>(0.1, 0.6)(rng);
                 const auto seed = rng();
                 return GradCase{[=] {
                                   Rng mask = make_rng(seed, {tag(Stream::kDropout)});
                                   return project(dropout(a, p, mask, true), seed);
                                 },
                                 {a}};
               }});
  s.push_back({"sum", [=](Rng& rng) {
                 T a = random_tensor(shape2(rng), rng);
                 const auto seed = rng();
                 return GradCase{[=] { return project(sum(a), seed); }, {a}};
               }});
  s.push_back({"mean", [=](Rng& rng) {
                 T a = random_tensor(shape2(rng), rng);
                 const auto seed = rng();
                 return GradCase{[=] { return project(mean(a), seed); }, {a}};
               }});
  s.push_back({"sum_rows", [=](Rng& rng) {
                 T a = random_tensor(shape2(rng), rng);
                 const auto seed = rng();
                 return GradCase{[=] { return project(sum_rows(a), seed); }, {a}};
               }});
  s.push_back({"reshape", [=](Rng& rng) {
                 Shape sh = shape2(rng);
                 T a = random_tensor(sh, rng);
                 const auto seed = rng();
                 return GradCase{[=] { return project(reshape(a, {sh[0] * sh[1], 1}), seed); }, {a}};
               }});
  s.push_back({"transpose", [=](Rng& rng) {
                 T a = random_tensor(shape2(rng), rng);
                 const auto seed = rng();
                 return GradCase{[=] { return project(transpose(a), seed); }, {a}};
               }});
  s.push_back({"gather_rows", [=](Rng& rng) {
                 Shape sh = shape2(rng);
                 T a = random_tensor(sh, rng);
                 std::vector<std::size_t> idx(uniform_size(rng, 1, 6));
                 for (auto& i : idx) i = uniform_size(rng, 0, sh[0] - 1);
                 const auto seed = rng();
                 return GradCase{[=] { return project(gather_rows(a, idx), seed); }, {a}};
               }});
  s.push_back({"slice_rows", [=](Rng& rng) {
                 Shape sh = shape2(rng);
                 T a = random_tensor(sh, rng);
                 const std::size_t b = uniform_size(rng, 0, sh[0] - 1);
                 const std::size_t e = uniform_size(rng, b + 1, sh[0]);
                 const auto seed = rng();
                 return GradCase{[=] { return project(slice_rows(a, b, e), seed); }, {a}};
               }});
  s.push_back({"concat_rows", [=](Rng& rng) {
                 const std::size_t c = uniform_size(rng, 1, 4);
                 std::vector<T> parts;
                 for (std::size_t i = uniform_size(rng, 1, 3); i > 0; --i)
                   parts.push_back(random_tensor({uniform_size(rng, 1, 3), c}, rng));
                 const auto seed = rng();
                 return GradCase{[=] { return project(concat_rows(parts), seed); }, parts};
               }});
  s.push_back({"gather", [=](Rng& rng) {
                 Shape sh = shape2(rng);
                 T a = random_tensor(sh, rng);
                 std::vector<std::size_t> idx(uniform_size(rng, 1, 8));
                 for (auto& i : idx) i = uniform_size(rng, 0, a.numel() - 1);
                 const auto seed = rng();
                 return GradCase{[=] { return project(gather(a, idx), seed); }, {a}};
               }});
  s.push_back({"matmul", [=](Rng& rng) {
                 const std::size_t m = uniform_size(rng, 1, 4), k = uniform_size(rng, 1, 4),
                                   n = uniform_size(rng, 1, 4);
                 const bool ta = rng() & 1, tb = rng() & 1;
                 T a = random_tensor(ta ? Shape{k, m} : Shape{m, k}, rng);
                 T b = random_tensor(tb ? Shape{n, k} : Shape{k, n}, rng);
                 const auto seed = rng();
                 return GradCase{[=] { return project(matmul(a, b, ta, tb), seed); }, {a, b}};
               }});
  s.push_back({"linear", [=](Rng& rng) {
                 const std::size_t n = uniform_size(rng, 1, 4), in = uniform_size(rng, 1, 4),
                                   out = uniform_size(rng, 1, 4);
                 T x = random_tensor({n, in}, rng), w = random_tensor({out, in}, rng),
                   b = random_tensor({out}, rng);
                 const auto seed = rng();
                 return GradCase{[=] { return project(linear(x, w, b), seed); }, {x, w, b}};
               }});
  s.push_back({"softmax_rows", [=](Rng& rng) {
                 T a = random_tensor(shape2(rng), rng, -2, 2);
                 const auto seed = rng();
                 return GradCase{[=] { return project(softmax_rows(a), seed); }, {a}};
               }});
  s.push_back({"l2_normalize_rows", [=](Rng& rng) {
                 T a = random_nonzero(shape2(rng), rng);
                 const auto seed = rng();
                 return GradCase{[=] { return project(l2_normalize_rows(a), seed); }, {a}};
               }});
  s.push_back({"cosine_similarity", [=](Rng& rng) {
                 Shape sh = shape2(rng);
                 T a = random_nonzero(sh, rng), b = random_nonzero(sh, rng);
                 const auto seed = rng();
                 return GradCase{[=] { return project(cosine_similarity(a, b), seed); }, {a, b}};
               }});
  s.push_back({"conv1d", [=](Rng& rng) {
                 const std::size_t cin = uniform_size(rng, 1, 3), cout = uniform_size(rng, 1, 3);
                 const std::size_t width = uniform_size(rng, 1, 5);
                 const std::size_t stride = uniform_size(rng, 1, width);
                 const Padding pad = (rng() & 1) ? Padding::kSameStrided : Padding::kValid;
                 const std::size_t len = uniform_size(rng, width, 16);
                 T x = random_tensor({cin, len}, rng), w = random_tensor({cout, cin, width}, rng);
                 T b = random_tensor({cout}, rng);
                 const bool with_bias = rng() & 1;
                 const auto seed = rng();
                 std::vector<T> params{x, w};
                 if (with_bias) params.push_back(b);
                 return GradCase{[=] {
                                   return project(conv1d(x, w, with_bias ? b : T{}, stride, pad), seed);
                                 },
                                 params};
               }});
  s.push_back({"channel_norm", [=](Rng& rng) {
                 const std::size_t ch = uniform_size(rng, 2, 5), len = uniform_size(rng, 1, 6);
                 // Near-equal channels put the stencil on the steep part of
                 // 1/sqrt(var + eps); resample until every column has spread.
                 auto spread = [&](const T& x) {
                   double lo = 1e300;
                   for (std::size_t t = 0; t < len; ++t) {
                     double m = 0, v = 0;
                     for (std::size_t c = 0; c < ch; ++c) m += x.values()[c * len + t] / double(ch);
                     for (std::size_t c = 0; c < ch; ++c) v += std::pow(x.values()[c * len + t] - m, 2);
                     lo = std::min(lo, v / double(ch));
                   }
                   return lo;
                 };
                 T x = random_tensor({ch, len}, rng);
                 while (spread(x) < 0.01) x = random_tensor({ch, len}, rng);
                 T g = random_tensor({ch}, rng), b = random_tensor({ch}, rng);
                 const auto seed = rng();
                 return GradCase{[=] { return project(channel_norm(x, g, b), seed); }, {x, g, b}};
               }});
  s.push_back({"lstm", [=](Rng& rng) {
                 const std::size_t steps = uniform_size(rng, 1, 6), in = uniform_size(rng, 1, 3);
                 const std::size_t layers = uniform_size(rng, 1, 2);
                 T x = random_tensor({steps, in}, rng);
                 std::vector<T> params{x};
                 std::vector<LstmParams<double>> cells;
                 std::size_t width = in;
                 for (std::size_t l = 0; l < layers; ++l) {
                   const std::size_t h = uniform_size(rng, 1, 3);
                   cells.push_back({random_tensor({4 * h, width}, rng), random_tensor({4 * h, h}, rng),
                                    random_tensor({4 * h}, rng)});
                   params.insert(params.end(), {cells.back().w_ih, cells.back().w_hh, cells.back().bias});
                   width = h;
                 }
                 const auto seed = rng();
                 return GradCase{[=] {
                                   T h = x;
                                   for (const auto& c : cells) h = lstm_layer(h, c.w_ih, c.w_hh, c.bias);
                                   return project(h, seed);
                                 },
                                 params};
               }});
  s.push_back({"multihead_attend", [=](Rng& rng) {
                 const std::size_t heads = uniform_size(rng, 1, 3), d = heads * uniform_size(rng, 1, 3);
                 const bool causal = rng() & 1;
                 const std::size_t nk = uniform_size(rng, 1, 5);
                 const std::size_t nq = causal ? nk : uniform_size(rng, 1, 5);
                 T q = random_tensor({nq, d}, rng), k = random_tensor({nk, d}, rng),
                   v = random_tensor({nk, d}, rng);
                 const auto seed = rng();
                 return GradCase{[=] { return project(multihead_attend(q, k, v, heads, causal), seed); },
                                 {q, k, v}};
               }});
  s.push_back({"attention_layer", [=](Rng& rng) {
                 const std::size_t heads = uniform_size(rng, 1, 2), d = heads * uniform_size(rng, 1, 2);
                 const std::size_t n = uniform_size(rng, 1, 4), ff = uniform_size(rng, 2, 5);
                 const bool causal = rng() & 1;
                 T x = random_tensor({n, d}, rng);
                 auto p = random_attention(d, ff, rng);
                 // Keep ff pre-activations well off the relu kink: the stencil
                 // moves a parameter by up to 2h.
                 {
                   NoGradGuard g;
                   for (;;) {
                     T h = add(x, p.output(multihead_attend(p.query(x), p.key(x), p.value(x), heads, causal)));
                     T pre = p.ff_in(h);
                     bool ok = true;
                     for (double v : pre.values()) ok = ok && std::abs(v) > 0.05;
                     if (ok) break;
                     p = random_attention(d, ff, rng);
                   }
                 }
                 std::vector<T> params = attention_tensors(p);
                 params.push_back(x);
                 const auto seed = rng();
                 return GradCase{[=] {
                                   return project(attention_layer(x, x, p, heads, causal, 0.0, nullptr, false),
                                                  seed);
                                 },
                                 params};
               }});
  s.push_back({"contrastive_nll", [=](Rng& rng) {
                 const std::size_t r = uniform_size(rng, 1, 4), c = uniform_size(rng, 2, 6);
                 const std::size_t width = uniform_size(rng, 2, c), terms = uniform_size(rng, 1, 5);
                 T scores = random_tensor({r, c}, rng, -3, 3);
                 std::vector<std::size_t> rows(terms), cands(terms * width);
                 // Distinct candidates per term: a term whose candidates all
                 // coincide is constant and has an exactly zero gradient.
                 std::vector<std::size_t> cols(c);
                 std::iota(cols.begin(), cols.end(), 0);
                 for (std::size_t t = 0; t < terms; ++t) {
                   rows[t] = uniform_size(rng, 0, r - 1);
                   std::shuffle(cols.begin(), cols.end(), rng);
                   std::copy_n(cols.begin(), width, cands.begin() + std::ptrdiff_t(t * width));
                 }
                 const auto seed = rng();
                 return GradCase{[=] { return project(contrastive_nll(scores, rows, cands, width), seed); },
                                 {scores}};
               }});
  return s;
}

/// Miniature mACPC + adjacent model: frame ACPC, segment ACPC over fixed
/// boundaries and the adjacent loss, with every alignment frozen at the
/// unperturbed parameters.
inline OpSuite macpc_suite() {
  return {"macpc_total_loss", [](Rng& rng) {
            ModelConfig mc;
            mc.dim = 4;
            mc.encoder_widths = {4};
            mc.encoder_strides = {4};
            mc.context_layers = 1;
            mc.context_units = 4;
            mc.segment_level_enabled = true;
            mc.segment_hidden = 3;
            mc.segment_context_layers = 1;
            mc.K = uniform_size(rng, 1, 3);
            mc.M = 3;
            mc.K_s = uniform_size(rng, 1, 2);
            mc.M_s = 2;
            mc.head_kind = HeadKind::kLinear;
            mc.dropout_p = 0;
            mc.adjacent_loss_enabled = true;
            mc.negatives = 3;
            mc.segment_negatives = 2;
            mc.adjacent_negatives = 2;
            // Resample until every segment-encoder relu input clears the
            // kink and every frame's channel spread stays clear of the
            // channel-norm epsilon, so the stencil sees a smooth loss.
            std::size_t frames = 0;
            std::shared_ptr<Model<double>> model;
            std::vector<float> samples;
            std::shared_ptr<Segmentation> seg;
            std::uint64_t seed = 0;
            auto frame_paths = std::make_shared<std::vector<AlignmentPath>>();
            auto segment_paths = std::make_shared<std::vector<AlignmentPath>>();
            for (double margin = 0; margin < 0.05;) {
              frames = uniform_size(rng, 12, 18);
              model = std::make_shared<Model<double>>(mc, rng());
              samples.assign(frames * 4, 0.0f);
              std::normal_distribution<float> g(0, 0.5f);
              for (auto& x : samples) x = g(rng);
              seg = std::make_shared<Segmentation>();
              seg->num_frames = std::int64_t(frames);
              for (std::size_t f = 1; f < frames; f += uniform_size(rng, 1, 3)) seg->frames.push_back(std::int64_t(f));
              seed = rng();
              NoGradGuard guard;
              Rng neg = make_rng(seed, {tag(Stream::kNegatives)});
              Rng drop = make_rng(seed, {tag(Stream::kDropout)});
              ForwardOptions o;
              o.training = false;
              o.frozen_segmentation = seg.get();
              auto fl = forward_losses(*model, samples, std::nullopt, neg, drop, o);
              *frame_paths = fl.frame_paths;
              *segment_paths = fl.segment_paths;
              std::map<std::string, T> named;
              for (auto& [name, t] : model->named_parameters()) named.emplace(name, t);
              T pre = linear(pool_segments(fl.latents.vectors, *seg).means,
                             named.at("segment_encoder.hidden.weight"),
                             named.at("segment_encoder.hidden.bias"));
              margin = 1e300;
              for (std::size_t i = 0; i < pre.numel(); ++i) margin = std::min(margin, std::abs(pre[i]));
              T raw = T::from({1, samples.size()}, std::vector<double>(samples.begin(), samples.end()));
              T conv = conv1d(raw, named.at("encoder.conv0.weight"), named.at("encoder.conv0.bias"),
                              mc.encoder_strides[0], Padding::kSameStrided);
              for (std::size_t t = 0; t < conv.cols(); ++t) {
                double m1 = 0, m2 = 0;
                for (std::size_t ch = 0; ch < conv.rows(); ++ch) {
                  m1 += conv.at(ch, t);
                  m2 += conv.at(ch, t) * conv.at(ch, t);
                }
                m1 /= double(conv.rows());
                const double var = m2 / double(conv.rows()) - m1 * m1;
                if (var < 0.01) margin = 0;
              }
            }
            std::vector<T> params;
            for (auto& [name, t] : model->named_parameters()) params.push_back(t);
            GradCase c{[=] {
                         Rng neg = make_rng(seed, {tag(Stream::kNegatives)});
                         Rng drop = make_rng(seed, {tag(Stream::kDropout)});
                         ForwardOptions o;
                         o.training = false;
                         o.frozen_segmentation = seg.get();
                         if (!frame_paths->empty()) o.frozen_frame_paths = frame_paths.get();
                         if (!segment_paths->empty()) o.frozen_segment_paths = segment_paths.get();
                         return forward_losses(*model, samples, std::nullopt, neg, drop, o).total;
                       },
                       params};
            // Many coordinates here have gradients near 1e-8; the wider
            // five-point stencil keeps both truncation and rounding small.
            c.epsilon = 2e-3;
            c.five_point = true;
            return c;
          }};
}

inline SuiteResult run_suite(const OpSuite& suite, std::size_t configs, std::uint64_t seed) {
  SuiteResult r{suite.name, 0, 0, 0};
  for (std::size_t i = 0; i < configs; ++i) {
    Rng rng = make_rng(seed, {0x67, i});
    GradCase c = suite.make(rng);
    GradCheckOptions o;
    o.epsilon = c.epsilon;
    o.max_coordinates = c.max_coordinates;
    o.five_point = c.five_point;
    o.seed = seed + i;
    GradCheckResult g = finite_difference_check(c.f, c.params, o);
    r.worst = std::max(r.worst, g.max_relative_error);
    r.coordinates += g.checked;
    ++r.configs;
  }
  return r;
}

}  // namespace cpcseg::testing
