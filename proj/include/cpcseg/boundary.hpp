// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Boundary detection on latent sequences: cosine dissimilarity between
// neighbours, prominence-based peak picking, span pooling, offset
// correction, and word boundaries from segment vectors.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cpcseg/errors.hpp"
#include "cpcseg/instrumentation.hpp"
#include "cpcseg/model.hpp"
#include "cpcseg/ops.hpp"
#include "cpcseg/tensor.hpp"

namespace cpcseg {

inline constexpr std::int64_t kFrameMs = 10;

/// score[i] = -cos(z_i, z_{i+1}): evidence for a boundary at frame i + base.
struct DissimilarityCurve {
  std::vector<double> scores;
  std::size_t base = 1;
  std::size_t zero_vectors = 0;  // pairs involving a zero vector, scored 0
};

struct Provenance {
  enum class Source { kDetected, kOracle };
  Source source = Source::kDetected;
  std::int64_t offset_ms = 0;

  bool operator==(const Provenance&) const = default;
};

/// Boundaries as frame indices b (the boundary sits between frames b-1 and
/// b, i.e. at b * 10 ms) within a sequence of num_frames frames.
struct Segmentation {
  std::vector<std::int64_t> frames;
  std::int64_t num_frames = 0;
  Provenance provenance;

  std::vector<double> ms() const {
    std::vector<double> out;
    out.reserve(frames.size());
    for (auto f : frames) out.push_back(double(f * kFrameMs));
    return out;
  }
  bool operator==(const Segmentation&) const = default;
};

/// Cosine dissimilarity between consecutive rows of a [T x d] matrix.
template <typename S>
DissimilarityCurve dissimilarity_curve(std::span<const S> values, std::size_t rows,
                                       std::size_t cols) {
  if (rows < 2) throw ShapeError("dissimilarity_curve: need at least two vectors");
  DissimilarityCurve curve;
  curve.scores.resize(rows - 1);
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0;
    for (std::size_t c = 0; c < cols; ++c) ss += double(values[r * cols + c]) * double(values[r * cols + c]);
    norms[r] = std::sqrt(ss);
  }
  for (std::size_t r = 0; r + 1 < rows; ++r) {
    if (norms[r] == 0.0 || norms[r + 1] == 0.0) {
      curve.scores[r] = 0.0;
      ++curve.zero_vectors;
      continue;
    }
    double dot = 0;
    for (std::size_t c = 0; c < cols; ++c)
      dot += double(values[r * cols + c]) * double(values[(r + 1) * cols + c]);
    curve.scores[r] = -std::clamp(dot / (norms[r] * norms[r + 1]), -1.0, 1.0);
  }
  return curve;
}

template <typename S>
DissimilarityCurve dissimilarity_curve(const Tensor<S>& latents) {
  return dissimilarity_curve<S>(latents.values(), latents.rows(), latents.cols());
}

/// Topographic prominence of an interior peak at i: its height above the
/// higher of the lowest points on either side before a strictly higher
/// sample (or the curve end).
inline double peak_prominence(std::span<const double> curve, std::size_t i) {
  const double h = curve[i];
  double left_min = h;
  for (std::size_t j = i; j-- > 0;) {
    if (curve[j] > h) break;
    left_min = std::min(left_min, curve[j]);
  }
  double right_min = h;
  for (std::size_t j = i + 1; j < curve.size(); ++j) {
    if (curve[j] > h) break;
    right_min = std::min(right_min, curve[j]);
  }
  return h - std::max(left_min, right_min);
}

/// Local-maximum indices of a curve after the prominence and separation
/// filters. A maximum must be strictly higher than its neighbours; a flat
/// top counts once, at its leftmost index. Among maxima closer than
/// min_separation the higher survives (ties keep the leftmost).
inline std::vector<std::size_t> find_peaks(std::span<const double> curve, double min_prominence,
                                           std::size_t min_separation) {
  if (min_separation == 0) throw ConfigError("find_peaks: min_separation must be >= 1");
  std::vector<std::size_t> cand;
  const std::size_t n = curve.size();
  for (std::size_t i = 1; i + 1 < n;) {
    if (curve[i] > curve[i - 1]) {
      std::size_t j = i;
      while (j + 1 < n && curve[j + 1] == curve[i]) ++j;
      if (j + 1 < n && curve[j + 1] < curve[i]) {
        if (peak_prominence(curve, i) >= min_prominence) cand.push_back(i);
      }
      i = j + 1;
    } else {
      ++i;
    }
  }
  if (min_separation <= 1 || cand.size() < 2) return cand;
  std::vector<std::size_t> order(cand.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return curve[cand[a]] > curve[cand[b]]; });
  std::vector<bool> keep(cand.size(), true);
  for (std::size_t oi : order) {
    if (!keep[oi]) continue;
    for (std::size_t j = 0; j < cand.size(); ++j) {
      if (j == oi || !keep[j]) continue;
      const std::size_t dist = cand[j] > cand[oi] ? cand[j] - cand[oi] : cand[oi] - cand[j];
      if (dist < min_separation) keep[j] = false;
    }
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < cand.size(); ++i)
    if (keep[i]) out.push_back(cand[i]);
  return out;
}

/// Peaks of a dissimilarity curve as a detected segmentation.
inline Segmentation detect_peaks(const DissimilarityCurve& curve, double prominence_threshold,
                                 std::size_t min_separation_frames) {
  ++counters().detect_peaks_calls;
  Segmentation seg;
  seg.num_frames = static_cast<std::int64_t>(curve.scores.size() + 1);
  for (std::size_t i : find_peaks(curve.scores, prominence_threshold, min_separation_frames))
    seg.frames.push_back(static_cast<std::int64_t>(i + curve.base));
  return seg;
}

using SpanList = std::vector<std::pair<std::size_t, std::size_t>>;

/// Spans [0, T) cut at every interior boundary.
inline SpanList segment_spans(const Segmentation& seg, std::size_t length) {
  SpanList spans;
  std::size_t start = 0;
  for (auto b : seg.frames) {
    if (b <= 0 || static_cast<std::size_t>(b) >= length) continue;
    if (static_cast<std::size_t>(b) <= start) continue;
    spans.emplace_back(start, static_cast<std::size_t>(b));
    start = static_cast<std::size_t>(b);
  }
  spans.emplace_back(start, length);
  return spans;
}

template <typename S>
struct PooledSegments {
  Tensor<S> means;  // [J x dim]
  SpanList spans;
};

/// Arithmetic mean of the latents inside each span. Differentiable in the
/// latents; boundary positions are constants.
template <typename S>
PooledSegments<S> pool_segments(const Tensor<S>& latents, const Segmentation& seg) {
  const std::size_t length = latents.rows();
  if (length == 0) throw ShapeError("pool_segments: empty sequence");
  for (auto b : seg.frames)
    if (b < 0 || b > static_cast<std::int64_t>(length))
      throw ShapeError("pool_segments: boundary outside sequence");
  SpanList spans = segment_spans(seg, length);
  Tensor<S> avg = Tensor<S>::zeros({spans.size(), length});
  for (std::size_t j = 0; j < spans.size(); ++j) {
    const S w = S(1) / S(spans[j].second - spans[j].first);
    for (std::size_t t = spans[j].first; t < spans[j].second; ++t) avg.at(j, t) = w;
  }
  return {matmul(avg, latents), std::move(spans)};
}

/// Shifts every boundary by offset_ms (a multiple of 10). Boundaries leaving
/// [0, num_frames] are dropped, or clamped (and deduplicated) with clamp.
inline Segmentation apply_offset(const Segmentation& seg, std::int64_t offset_ms,
                                 bool clamp = false) {
  if (offset_ms % kFrameMs != 0)
    throw ConfigError("apply_offset: offset " + std::to_string(offset_ms) +
                      " ms is not a multiple of the 10 ms hop");
  const std::int64_t shift = offset_ms / kFrameMs;
  Segmentation out;
  out.num_frames = seg.num_frames;
  out.provenance = seg.provenance;
  out.provenance.offset_ms += offset_ms;
  for (auto b : seg.frames) {
    std::int64_t v = b + shift;
    if (v < 0 || v > seg.num_frames) {
      if (!clamp) continue;
      v = std::clamp<std::int64_t>(v, 0, seg.num_frames);
    }
    if (out.frames.empty() || out.frames.back() != v) out.frames.push_back(v);
  }
  return out;
}

/// Word boundaries from consecutive segment vectors: peaks of their
/// dissimilarity curve, mapped to the frame where the later segment starts.
/// Fewer than two segments yield an empty segmentation and bump
/// `too_few_segments` when given.
template <typename S>
Segmentation word_boundaries(const SegmentSequence<S>& segments, double prominence_threshold,
                             std::size_t min_separation_segments,
                             std::size_t* too_few_segments = nullptr) {
  Segmentation seg;
  seg.num_frames = segments.spans.empty() ? 0 : static_cast<std::int64_t>(segments.spans.back().second);
  if (segments.length() != segments.spans.size())
    throw ShapeError("word_boundaries: span count does not match segment count");
  if (segments.length() < 2) {
    if (too_few_segments) ++*too_few_segments;
    return seg;
  }
  DissimilarityCurve curve = dissimilarity_curve(segments.vectors);
  Segmentation by_index = detect_peaks(curve, prominence_threshold, min_separation_segments);
  for (auto j : by_index.frames)
    seg.frames.push_back(static_cast<std::int64_t>(segments.spans[static_cast<std::size_t>(j)].first));
  return seg;
}

// ---------------------------------------------------------------------------
// Boundary files: "time_ms<TAB>kind" per line, ascending.

enum class BoundaryKind { kPhone, kWord };

struct BoundaryMark {
  double time_ms = 0;
  BoundaryKind kind = BoundaryKind::kPhone;
  bool operator==(const BoundaryMark&) const = default;
};

inline std::string format_ms(double ms) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, ms);
  return std::string(buf, res.ptr);
}

inline std::string boundary_file_text(std::vector<BoundaryMark> marks) {
  std::stable_sort(marks.begin(), marks.end(), [](const BoundaryMark& a, const BoundaryMark& b) {
    return a.time_ms < b.time_ms || (a.time_ms == b.time_ms && a.kind < b.kind);
  });
  std::string out;
  for (const auto& m : marks)
    out += format_ms(m.time_ms) + '\t' + (m.kind == BoundaryKind::kPhone ? "phone" : "word") + '\n';
  return out;
}

inline std::vector<BoundaryMark> parse_boundary_text(const std::string& text,
                                                     const std::string& source = "boundaries") {
  std::vector<BoundaryMark> out;
  std::size_t pos = 0, lineno = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError(source + ": line " + std::to_string(lineno) + " lacks a tab separator");
    BoundaryMark m;
    const std::string t = line.substr(0, tab), kind = line.substr(tab + 1);
    auto res = std::from_chars(t.data(), t.data() + t.size(), m.time_ms);
    if (res.ec != std::errc() || res.ptr != t.data() + t.size())
      throw DataError(source + ": bad time at line " + std::to_string(lineno));
    if (kind == "phone")
      m.kind = BoundaryKind::kPhone;
    else if (kind == "word")
      m.kind = BoundaryKind::kWord;
    else
      throw DataError(source + ": unknown kind '" + kind + "' at line " + std::to_string(lineno));
    if (!out.empty() && m.time_ms < out.back().time_ms)
      throw DataError(source + ": boundaries not sorted at line " + std::to_string(lineno));
    out.push_back(m);
  }
  return out;
}

inline std::vector<BoundaryMark> read_boundary_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open boundary file " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_boundary_text(text, path.string());
}

inline std::vector<double> boundary_times(const std::vector<BoundaryMark>& marks, BoundaryKind kind) {
  std::vector<double> out;
  for (const auto& m : marks)
    if (m.kind == kind) out.push_back(m.time_ms);
  return out;
}

}  // namespace cpcseg
