// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Evaluation: tolerance-matched boundary scoring, offset sweeps, a linear
// phone probe and DTW-based ABX discrimination.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cpcseg/boundary.hpp"
#include "cpcseg/errors.hpp"
#include "cpcseg/random.hpp"

namespace cpcseg {

inline constexpr double kDefaultToleranceMs = 20.0;

inline void require_sorted(std::span<const double> xs, const char* what) {
  for (std::size_t i = 1; i < xs.size(); ++i)
    if (xs[i] < xs[i - 1])
      throw DataError(std::string("match_boundaries: ") + what + " boundaries are not sorted");
}

/// One-to-one matches between reference and predicted times within the
/// tolerance, scanned left to right.
inline std::size_t match_boundaries(std::span<const double> reference,
                                    std::span<const double> predicted,
                                    double tolerance_ms = kDefaultToleranceMs) {
  require_sorted(reference, "reference");
  require_sorted(predicted, "predicted");
  std::size_t i = 0, j = 0, hits = 0;
  while (i < reference.size() && j < predicted.size()) {
    const double r = reference[i], p = predicted[j];
    if (std::abs(r - p) <= tolerance_ms) {
      ++hits;
      ++i;
      ++j;
    } else if (p < r) {
      ++j;
    } else {
      ++i;
    }
  }
  return hits;
}

struct BoundaryCounts {
  std::size_t n_ref = 0, n_pred = 0, n_hit = 0;

  BoundaryCounts& operator+=(const BoundaryCounts& o) {
    n_ref += o.n_ref;
    n_pred += o.n_pred;
    n_hit += o.n_hit;
    return *this;
  }
};

struct BoundaryScores {
  double precision = 0, recall = 0, f1 = 0, os = 0, r_value = 0;
};

inline BoundaryScores boundary_scores(std::size_t n_ref, std::size_t n_pred, std::size_t n_hit) {
  if (n_hit > std::min(n_ref, n_pred))
    throw DataError("boundary_scores: hits exceed reference or prediction count");
  BoundaryScores s;
  s.precision = n_pred ? double(n_hit) / double(n_pred) : 0.0;
  s.recall = n_ref ? double(n_hit) / double(n_ref) : 0.0;
  s.f1 = (s.precision + s.recall) > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  s.os = s.precision > 0 ? s.recall / s.precision - 1.0 : 0.0;
  const double hr = s.recall;
  const double r1 = std::sqrt((1 - hr) * (1 - hr) + s.os * s.os);
  const double r2 = (-s.os + hr - 1) / std::sqrt(2.0);
  s.r_value = 1.0 - (std::abs(r1) + std::abs(r2)) / 2.0;
  return s;
}

inline BoundaryScores boundary_scores(const BoundaryCounts& c) {
  return boundary_scores(c.n_ref, c.n_pred, c.n_hit);
}

/// Scores at one offset: utterance-averaged scores (primary) plus scores on
/// corpus-pooled counts.
struct OffsetResult {
  std::int64_t offset_ms = 0;
  BoundaryScores mean;
  BoundaryCounts pooled;
  BoundaryScores pooled_scores;
  std::size_t utterances = 0;
};

/// Scores predicted segmentations against reference boundary times (ms)
/// after shifting the predictions by offset_ms.
inline OffsetResult evaluate_segmentations(const std::vector<std::vector<double>>& references,
                                           const std::vector<Segmentation>& predicted,
                                           std::int64_t offset_ms,
                                           double tolerance_ms = kDefaultToleranceMs) {
  if (references.size() != predicted.size())
    throw DataError("evaluate_segmentations: " + std::to_string(references.size()) +
                    " references vs " + std::to_string(predicted.size()) + " predictions");
  OffsetResult res;
  res.offset_ms = offset_ms;
  res.utterances = references.size();
  for (std::size_t u = 0; u < references.size(); ++u) {
    const std::vector<double> pred = apply_offset(predicted[u], offset_ms).ms();
    BoundaryCounts c{references[u].size(), pred.size(),
                     match_boundaries(references[u], pred, tolerance_ms)};
    const BoundaryScores s = boundary_scores(c);
    res.mean.precision += s.precision;
    res.mean.recall += s.recall;
    res.mean.f1 += s.f1;
    res.mean.os += s.os;
    res.mean.r_value += s.r_value;
    res.pooled += c;
  }
  if (res.utterances > 0) {
    const double n = double(res.utterances);
    res.mean.precision /= n;
    res.mean.recall /= n;
    res.mean.f1 /= n;
    res.mean.os /= n;
    res.mean.r_value /= n;
  }
  res.pooled_scores = boundary_scores(res.pooled);
  return res;
}

struct SweepResult {
  std::vector<OffsetResult> curve;
  std::int64_t best_offset_ms = 0;
};

inline std::vector<std::int64_t> default_sweep_offsets() {
  std::vector<std::int64_t> out;
  for (std::int64_t o = -50; o <= 50; o += 10) out.push_back(o);
  return out;
}

/// Evaluates every offset; the best has maximal mean R-value, ties going to
/// the smallest |offset| and then to the earlier entry.
inline SweepResult offset_sweep(const std::vector<std::vector<double>>& references,
                                const std::vector<Segmentation>& predicted,
                                const std::vector<std::int64_t>& offsets,
                                double tolerance_ms = kDefaultToleranceMs) {
  if (offsets.empty()) throw ConfigError("offset_sweep: no offsets given");
  SweepResult out;
  double best = -std::numeric_limits<double>::infinity();
  for (auto o : offsets) {
    out.curve.push_back(evaluate_segmentations(references, predicted, o, tolerance_ms));
    const double r = out.curve.back().mean.r_value;
    if (r > best || (r == best && std::abs(o) < std::abs(out.best_offset_ms))) {
      best = r;
      out.best_offset_ms = o;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear probe

struct ProbeOptions {
  std::size_t epochs = 10;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  bool standardize = true;
  std::uint64_t seed = 0;
};

struct ProbeData {
  Eigen::MatrixXd features;  // rows = frames
  std::vector<int> labels;
};

/// Multinomial logistic regression trained with momentum SGD on `train`;
/// returns accuracy on `test`. Frames with negative labels are ignored.
inline double linear_probe(const ProbeData& train, const ProbeData& test, std::size_t n_classes,
                           const ProbeOptions& opts = {}) {
  auto check = [&](const ProbeData& d, const char* name) {
    if (std::size_t(d.features.rows()) != d.labels.size())
      throw DataError(std::string("linear_probe: ") + name + " has " +
                      std::to_string(d.features.rows()) + " frames but " +
                      std::to_string(d.labels.size()) + " labels");
    for (int l : d.labels)
      if (l >= int(n_classes)) throw DataError("linear_probe: label out of range");
  };
  check(train, "train");
  check(test, "test");
  if (train.features.cols() != test.features.cols())
    throw DataError("linear_probe: train/test dimension mismatch");
  if (n_classes < 2) throw ConfigError("linear_probe: need at least two classes");

  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t i = 0; i < train.labels.size(); ++i)
    if (train.labels[i] >= 0) train_idx.push_back(i);
  for (std::size_t i = 0; i < test.labels.size(); ++i)
    if (test.labels[i] >= 0) test_idx.push_back(i);
  if (train_idx.empty() || test_idx.empty()) throw DataError("linear_probe: no labelled frames");

  const Eigen::Index dim = train.features.cols();
  Eigen::RowVectorXd mu = Eigen::RowVectorXd::Zero(dim), sd = Eigen::RowVectorXd::Ones(dim);
  if (opts.standardize) {
    for (auto i : train_idx) mu += train.features.row(Eigen::Index(i));
    mu /= double(train_idx.size());
    Eigen::RowVectorXd var = Eigen::RowVectorXd::Zero(dim);
    for (auto i : train_idx) var += (train.features.row(Eigen::Index(i)) - mu).array().square().matrix();
    var /= double(train_idx.size());
    for (Eigen::Index c = 0; c < dim; ++c) sd[c] = var[c] > 1e-12 ? std::sqrt(var[c]) : 1.0;
  }
  auto prep = [&](const Eigen::MatrixXd& f, std::size_t i) -> Eigen::RowVectorXd {
    return (f.row(Eigen::Index(i)) - mu).cwiseQuotient(sd);
  };

  const Eigen::Index C = Eigen::Index(n_classes);
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(dim, C), vW = W;
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(C), vb = b;
  Rng rng = make_rng(opts.seed, {tag(Stream::kProbe)});
  std::vector<std::size_t> order = train_idx;
  const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < order.size(); s += bs) {
      const std::size_t e = std::min(order.size(), s + bs);
      Eigen::MatrixXd X(Eigen::Index(e - s), dim);
      for (std::size_t i = s; i < e; ++i) X.row(Eigen::Index(i - s)) = prep(train.features, order[i]);
      Eigen::MatrixXd logits = (X * W).rowwise() + b;
      for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double mx = logits.row(r).maxCoeff();
        logits.row(r) = (logits.row(r).array() - mx).exp().matrix();
        logits.row(r) /= logits.row(r).sum();
        logits(r, train.labels[order[s + std::size_t(r)]]) -= 1.0;
      }
      logits /= double(e - s);
      vW = opts.momentum * vW + X.transpose() * logits;
      vb = opts.momentum * vb + logits.colwise().sum();
      W -= opts.learning_rate * vW;
      b -= opts.learning_rate * vb;
    }
  }
  std::size_t correct = 0;
  for (auto i : test_idx) {
    Eigen::RowVectorXd z = prep(test.features, i) * W + b;
    Eigen::Index arg;
    z.maxCoeff(&arg);
    if (arg == test.labels[i]) ++correct;
  }
  return double(correct) / double(test_idx.size());
}

// ---------------------------------------------------------------------------
// DTW and ABX

using FrameMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline double angular_distance(const Eigen::Ref<const Eigen::RowVectorXd>& a,
                               const Eigen::Ref<const Eigen::RowVectorXd>& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return (na == 0.0 && nb == 0.0) ? 0.0 : 0.5;
  const double c = std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
  return std::acos(c) / M_PI;
}

/// DTW with angular frame cost; the cheapest path's total cost divided by
/// its length (shorter path on equal cost).
inline double dtw_distance(const FrameMatrix& a, const FrameMatrix& b) {
  if (a.rows() == 0 || b.rows() == 0) throw ShapeError("dtw_distance: empty sequence");
  if (a.cols() != b.cols()) throw ShapeError("dtw_distance: dimension mismatch");
  const Eigen::Index n = a.rows(), m = b.rows();
  Eigen::VectorXd na = a.rowwise().norm(), nb = b.rowwise().norm();
  FrameMatrix dots = a * b.transpose();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> cost(std::size_t((n + 1) * (m + 1)), inf);
  std::vector<std::size_t> len(cost.size(), 0);
  auto idx = [m](Eigen::Index i, Eigen::Index j) { return std::size_t(i * (m + 1) + j); };
  cost[idx(0, 0)] = 0;
  for (Eigen::Index i = 1; i <= n; ++i) {
    for (Eigen::Index j = 1; j <= m; ++j) {
      double d;
      const double p = na[i - 1] * nb[j - 1];
      if (p == 0.0)
        d = (na[i - 1] == 0.0 && nb[j - 1] == 0.0) ? 0.0 : 0.5;
      else
        d = std::acos(std::clamp(dots(i - 1, j - 1) / p, -1.0, 1.0)) / M_PI;
      std::size_t from = idx(i - 1, j - 1);
      for (std::size_t cand : {idx(i - 1, j), idx(i, j - 1)}) {
        if (cost[cand] < cost[from] || (cost[cand] == cost[from] && len[cand] < len[from])) from = cand;
      }
      cost[idx(i, j)] = cost[from] + d;
      len[idx(i, j)] = len[from] + 1;
    }
  }
  return cost[idx(n, m)] / double(len[idx(n, m)]);
}

/// One phone-sized item for ABX: its frames plus category and speaker.
struct AbxItem {
  FrameMatrix frames;
  int category = 0;
  std::string speaker;
};

enum class AbxMode { kWithinSpeaker, kAcrossSpeaker };

struct AbxTriple {
  std::size_t a = 0, b = 0, x = 0;
};

inline double abx_contribution(double d_ax, double d_bx) {
  if (d_ax > d_bx) return 1.0;
  if (d_ax == d_bx) return 0.5;
  return 0.0;
}

/// Draws up to `count` triples. Within: A, B, X share a speaker. Across: A
/// and B share a speaker that differs from X's.
inline std::vector<AbxTriple> sample_abx_triples(const std::vector<AbxItem>& items, AbxMode mode,
                                                 std::size_t count, Rng& rng) {
  std::vector<AbxTriple> out;
  if (items.size() < 3) return out;
  std::uniform_int_distribution<std::size_t> pick(0, items.size() - 1);
  std::size_t attempts = 0;
  const std::size_t max_attempts = count * 200 + 1000;
  while (out.size() < count && attempts++ < max_attempts) {
    AbxTriple t{pick(rng), pick(rng), pick(rng)};
    const auto &A = items[t.a], &B = items[t.b], &X = items[t.x];
    if (t.a == t.x || A.category != X.category || A.category == B.category) continue;
    if (A.speaker != B.speaker) continue;
    const bool same = A.speaker == X.speaker;
    if ((mode == AbxMode::kWithinSpeaker) != same) continue;
    out.push_back(t);
  }
  return out;
}

/// Mean error over category pairs (A's category, B's category), each pair
/// averaged over its triples first.
inline double abx_error(const std::vector<AbxItem>& items, const std::vector<AbxTriple>& triples) {
  if (triples.empty()) throw DataError("abx_error: no triples");
  std::map<std::pair<int, int>, std::pair<double, std::size_t>> per_pair;
  for (const auto& t : triples) {
    if (t.a >= items.size() || t.b >= items.size() || t.x >= items.size())
      throw DataError("abx_error: triple index out of range");
    const auto &A = items[t.a], &B = items[t.b], &X = items[t.x];
    if (A.category == B.category) throw DataError("abx_error: A and B share a category");
    if (A.category != X.category) throw DataError("abx_error: A and X differ in category");
    const double e = abx_contribution(dtw_distance(A.frames, X.frames), dtw_distance(B.frames, X.frames));
    auto& slot = per_pair[{A.category, B.category}];
    slot.first += e;
    slot.second += 1;
  }
  double total = 0;
  for (const auto& [key, v] : per_pair) total += v.first / double(v.second);
  return total / double(per_pair.size());
}

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
  std::vector<OffsetResult> offsets;
  std::optional<std::int64_t> best_offset_ms;
  std::optional<double> probe_accuracy;
  std::optional<double> abx_within, abx_across;
  std::optional<OffsetResult> word;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::uint64_t seed = 0;
};

inline nlohmann::ordered_json scores_json(const BoundaryScores& s) {
  nlohmann::ordered_json j;
  j["precision"] = s.precision;
  j["recall"] = s.recall;
  j["f1"] = s.f1;
  j["os"] = s.os;
  j["r_value"] = s.r_value;
  return j;
}

inline nlohmann::ordered_json offset_json(const OffsetResult& r) {
  nlohmann::ordered_json j = scores_json(r.mean);
  j["offset_ms"] = r.offset_ms;
  j["n_ref"] = r.pooled.n_ref;
  j["n_pred"] = r.pooled.n_pred;
  j["n_hit"] = r.pooled.n_hit;
  j["utterances"] = r.utterances;
  j["pooled"] = scores_json(r.pooled_scores);
  return j;
}

inline nlohmann::ordered_json to_json(const EvalReport& rep) {
  nlohmann::ordered_json j;
  j["format"] = "cpcseg-eval-v1";
  j["seed"] = rep.seed;
  nlohmann::ordered_json offs = nlohmann::ordered_json::object();
  for (const auto& r : rep.offsets) offs[std::to_string(r.offset_ms)] = offset_json(r);
  j["offsets"] = offs;
  if (rep.best_offset_ms) j["best_offset_ms"] = *rep.best_offset_ms;
  if (rep.word) j["word"] = offset_json(*rep.word);
  if (rep.probe_accuracy) j["probe_accuracy"] = *rep.probe_accuracy;
  if (rep.abx_within) j["abx_within"] = *rep.abx_within;
  if (rep.abx_across) j["abx_across"] = *rep.abx_across;
  j["config"] = rep.config;
  return j;
}

inline std::string curve_csv(const std::vector<OffsetResult>& curve) {
  std::ostringstream os;
  os << "offset_ms,precision,recall,f1,r_value\n";
  for (const auto& r : curve)
    os << r.offset_ms << ',' << format_ms(r.mean.precision) << ',' << format_ms(r.mean.recall)
       << ',' << format_ms(r.mean.f1) << ',' << format_ms(r.mean.r_value) << '\n';
  return os.str();
}

}  // namespace cpcseg
