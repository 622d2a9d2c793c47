// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Training losses: noise-contrastive terms, multi-offset CPC, aligned CPC with
// its monotonic alignment program, the adjacent-frame contrastive loss, and
// their weighted sum.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cpcseg/errors.hpp"
#include "cpcseg/instrumentation.hpp"
#include "cpcseg/model.hpp"
#include "cpcseg/ops.hpp"
#include "cpcseg/random.hpp"
#include "cpcseg/tensor.hpp"

namespace cpcseg {

/// Row indices of negative samples drawn from one sequence.
struct NegativeSet {
  std::vector<std::size_t> indices;
};

/// Uniform draws (with replacement) from [0, length) without `exclude`.
inline NegativeSet sample_negatives(std::size_t length, std::size_t exclude, std::size_t count,
                                    Rng& rng) {
  if (length < 2) throw ShapeError("sample_negatives: sequence has no other positions");
  std::uniform_int_distribution<std::size_t> pick(0, length - 2);
  NegativeSet out;
  out.indices.resize(count);
  for (auto& i : out.indices) {
    i = pick(rng);
    if (i >= exclude) ++i;
  }
  return out;
}

template <typename S>
struct LossTerm {
  Tensor<S> value;            // scalar
  std::size_t positions = 0;  // positions that contributed
  std::size_t skipped = 0;    // positions without enough future context
};

/// -log( exp(p.z+) / (exp(p.z+) + sum_j exp(p.z-_j)) ) for one prediction.
template <typename S>
Tensor<S> nce_term(const Tensor<S>& prediction, const Tensor<S>& positive,
                   const Tensor<S>& negatives) {
  const std::size_t d = prediction.numel();
  if (positive.numel() != d) throw ShapeError("nce_term: positive width mismatch");
  if (negatives.dim() != 2 || negatives.rows() == 0)
    throw ShapeError("nce_term: need at least one negative");
  if (negatives.cols() != d) throw ShapeError("nce_term: negative width mismatch");
  Tensor<S> candidates = concat_rows<S>({reshape(positive, {1, d}), negatives});
  Tensor<S> scores = matmul(reshape(prediction, {1, d}), candidates, false, true);
  std::vector<std::size_t> cand(candidates.rows());
  std::iota(cand.begin(), cand.end(), 0);
  return reshape(contrastive_nll(scores, {0}, std::move(cand), candidates.rows()), {1});
}

/// Per-position K x M table of NCE losses: entry (k, m) scores prediction k
/// against the m-th upcoming element.
struct CostMatrix {
  std::size_t K = 0, M = 0;
  std::vector<double> entries;  // row-major K x M

  double at(std::size_t k, std::size_t m) const { return entries[k * M + m]; }
};

struct AlignmentPath {
  std::vector<std::size_t> assignment;  // assignment[m] = prediction used for element m
  double total = 0.0;
};

/// Minimum-cost monotonic surjective alignment of K predictions to M
/// elements: assignment[0] = 0, assignment[M-1] = K-1, and each step either
/// keeps the prediction or advances it by one.
inline AlignmentPath acpc_align(const CostMatrix& costs) {
  const std::size_t K = costs.K, M = costs.M;
  if (K == 0 || M == 0) throw ShapeError("acpc_align: empty cost matrix");
  if (K > M) throw ShapeError("acpc_align: more predictions than elements (K > M)");
  if (costs.entries.size() != K * M) throw ShapeError("acpc_align: entry count mismatch");
  ++counters().alignment_calls;
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> acc(K * M, inf);
  acc[0] = costs.at(0, 0);
  for (std::size_t m = 1; m < M; ++m)
    for (std::size_t k = 0; k < K && k <= m; ++k) {
      double best = acc[k * M + m - 1];
      if (k > 0) best = std::min(best, acc[(k - 1) * M + m - 1]);
      acc[k * M + m] = costs.at(k, m) + best;
    }
  AlignmentPath path;
  path.assignment.assign(M, 0);
  std::size_t k = K - 1;
  for (std::size_t m = M; m-- > 0;) {
    path.assignment[m] = k;
    if (m == 0) break;
    // Ties keep the same prediction.
    if (k > 0 && acc[(k - 1) * M + m - 1] < acc[k * M + m - 1]) --k;
  }
  for (std::size_t m = 0; m < M; ++m) path.total += costs.at(path.assignment[m], m);
  return path;
}

namespace detail {

struct ContrastiveLayout {
  std::vector<std::size_t> rows;
  std::vector<std::size_t> candidates;
  std::size_t width = 0;
};

/// Terms for positions t < valid, predictions k < K, offsets m < M: row
/// t*K + k, positive t + 1 + m, negatives drawn per (t, m) and shared by k.
/// Term order is ((t * K) + k) * M + m, or t * M + m with `diagonal` (k == m
/// only, K == M). Negatives are drawn identically in both modes.
inline ContrastiveLayout prediction_layout(std::size_t length, std::size_t valid, std::size_t K,
                                           std::size_t M, std::size_t negatives, Rng& rng,
                                           bool diagonal = false) {
  ContrastiveLayout lay;
  lay.width = negatives + 1;
  std::vector<NegativeSet> negs(valid * M);
  for (std::size_t t = 0; t < valid; ++t)
    for (std::size_t m = 0; m < M; ++m)
      negs[t * M + m] = sample_negatives(length, t + 1 + m, negatives, rng);
  lay.rows.reserve(valid * K * M);
  lay.candidates.reserve(valid * K * M * lay.width);
  for (std::size_t t = 0; t < valid; ++t)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t m = 0; m < M; ++m) {
        if (diagonal && k != m) continue;
        lay.rows.push_back(t * K + k);
        lay.candidates.push_back(t + 1 + m);
        const auto& n = negs[t * M + m].indices;
        lay.candidates.insert(lay.candidates.end(), n.begin(), n.end());
      }
  return lay;
}

inline void check_prediction_shapes(std::size_t pred_rows, std::size_t length, std::size_t K,
                                    const char* op) {
  if (pred_rows != length * K)
    throw ShapeError(std::string(op) + ": expected " + std::to_string(length * K) +
                     " prediction rows, got " + std::to_string(pred_rows));
}

template <typename S>
LossTerm<S> skipped_term(std::size_t length) {
  return {Tensor<S>::scalar(S(0)), 0, length};
}

}  // namespace detail

/// CPC loss with one prediction per future offset (K = M): mean over valid
/// positions t and offsets m of the NCE of prediction m at t against element
/// t + m. `predictions` is [length*M x dim] with row t*M + (m-1). Positions
/// without M future elements are dropped; when none remain the call throws
/// unless allow_skip is set, which yields a zero term instead.
template <typename S>
LossTerm<S> cpc_loss(const Tensor<S>& predictions, const Tensor<S>& targets, std::size_t M,
                     std::size_t negatives, Rng& rng, bool allow_skip = false) {
  const std::size_t length = targets.rows();
  detail::check_prediction_shapes(predictions.rows(), length, M, "cpc_loss");
  if (length <= M) {
    if (allow_skip) return detail::skipped_term<S>(length);
    throw ShapeError("cpc_loss: sequence of " + std::to_string(length) +
                     " too short for horizon " + std::to_string(M));
  }
  const std::size_t valid = length - M;
  auto lay = detail::prediction_layout(length, valid, M, M, negatives, rng, true);
  Tensor<S> scores = matmul(slice_rows(predictions, 0, valid * M), targets, false, true);
  Tensor<S> terms =
      contrastive_nll(scores, std::move(lay.rows), std::move(lay.candidates), lay.width);
  return {mean(terms), valid, M};
}

/// Aligned CPC: per position, the K x M cost table of NCE terms is aligned by
/// acpc_align and the aligned costs summed; the loss is the mean over
/// positions of (aligned sum / M). Gradients flow through the selected pairs
/// only. When `frozen` holds one path per valid position those paths are used
/// instead of re-aligning; `paths_out` receives the alignment used.
template <typename S>
LossTerm<S> acpc_loss(const Tensor<S>& predictions, const Tensor<S>& targets, std::size_t K,
                      std::size_t M, std::size_t negatives, Rng& rng, bool allow_skip = false,
                      const std::vector<AlignmentPath>* frozen = nullptr,
                      std::vector<AlignmentPath>* paths_out = nullptr) {
  if (K > M) throw ShapeError("acpc_loss: K must not exceed M");
  const std::size_t length = targets.rows();
  detail::check_prediction_shapes(predictions.rows(), length, K, "acpc_loss");
  if (length <= M) {
    if (allow_skip) return detail::skipped_term<S>(length);
    throw ShapeError("acpc_loss: sequence of " + std::to_string(length) +
                     " too short for horizon " + std::to_string(M));
  }
  const std::size_t valid = length - M;
  auto lay = detail::prediction_layout(length, valid, K, M, negatives, rng);
  Tensor<S> scores = matmul(slice_rows(predictions, 0, valid * K), targets, false, true);
  Tensor<S> terms =
      contrastive_nll(scores, std::move(lay.rows), std::move(lay.candidates), lay.width);

  if (frozen && frozen->size() != valid) throw ShapeError("acpc_loss: frozen path count mismatch");
  std::vector<std::size_t> selected;
  selected.reserve(valid * M);
  std::vector<AlignmentPath> paths;
  CostMatrix cm{K, M, std::vector<double>(K * M)};
  for (std::size_t t = 0; t < valid; ++t) {
    AlignmentPath path;
    if (frozen) {
      path = (*frozen)[t];
    } else {
      for (std::size_t i = 0; i < K * M; ++i) cm.entries[i] = double(terms[t * K * M + i]);
      path = acpc_align(cm);
    }
    for (std::size_t m = 0; m < M; ++m) selected.push_back((t * K + path.assignment[m]) * M + m);
    if (paths_out) paths.push_back(std::move(path));
  }
  if (paths_out) *paths_out = std::move(paths);
  Tensor<S> value = scale(sum(gather(terms, std::move(selected))), S(1) / S(valid * M));
  return {value, valid, M};
}

/// Adjacent-frame contrastive loss on encoder outputs: for each t the
/// positive pair is (z_t, z_{t+1}) and negatives are frames farther than two
/// steps from t; scores are cosine similarities divided by the temperature.
template <typename S>
LossTerm<S> adjacent_contrastive_loss(const Tensor<S>& latents, std::size_t negatives,
                                      double temperature, Rng& rng) {
  const std::size_t length = latents.rows();
  if (length < 3) throw ShapeError("adjacent_contrastive_loss: need at least 3 frames");
  if (temperature <= 0) throw ConfigError("adjacent_contrastive_loss: temperature must be positive");
  std::vector<std::size_t> rows, cands;
  const std::size_t width = negatives + 1;
  for (std::size_t t = 0; t + 1 < length; ++t) {
    std::vector<std::size_t> pool;
    for (std::size_t j = 0; j < length; ++j)
      if (j + 2 < t || j > t + 2) pool.push_back(j);
    if (pool.empty())
      throw ShapeError("adjacent_contrastive_loss: sequence of " + std::to_string(length) +
                       " frames too short to supply negatives");
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    rows.push_back(t);
    cands.push_back(t + 1);
    for (std::size_t n = 0; n < negatives; ++n) cands.push_back(pool[pick(rng)]);
  }
  Tensor<S> unit = l2_normalize_rows(latents);
  Tensor<S> scores = scale(matmul(unit, unit, false, true), S(1.0 / temperature));
  const std::size_t positions = rows.size();
  return {mean(contrastive_nll(scores, std::move(rows), std::move(cands), width)), positions, 1};
}

/// frame + segment (when the segment level is on) + weight * adjacent (when on).
template <typename S>
Tensor<S> total_loss(const ModelConfig& config, const std::optional<Tensor<S>>& frame,
                     const std::optional<Tensor<S>>& segment,
                     const std::optional<Tensor<S>>& adjacent) {
  Tensor<S> total = Tensor<S>::scalar(S(0));
  if (config.prediction_enabled) {
    if (!frame) throw Error("total_loss: frame loss missing");
    total = add(total, *frame);
  }
  if (config.segment_level_enabled) {
    if (!segment) throw Error("total_loss: segment loss missing");
    total = add(total, *segment);
  }
  if (config.adjacent_loss_enabled) {
    if (!adjacent) throw Error("total_loss: adjacent loss missing");
    total = add(total, scale(*adjacent, S(config.adjacent_loss_weight)));
  }
  return total;
}

}  // namespace cpcseg
