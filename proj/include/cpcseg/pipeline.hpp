// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Utterance-level evaluation glue: chunked encoding, boundary detection over
// whole utterances, threshold selection, and probe / ABX inputs.

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cpcseg/boundary.hpp"
#include "cpcseg/data.hpp"
#include "cpcseg/metrics.hpp"
#include "cpcseg/model.hpp"
#include "cpcseg/random.hpp"

namespace cpcseg {

/// A waveform with optional phone and word alignments.
struct EvalUtterance {
  Waveform wave;
  std::optional<Alignment> phones, words;
};

inline std::vector<EvalUtterance> eval_utterances(const std::vector<SynthUtterance>& corpus) {
  std::vector<EvalUtterance> out;
  for (const auto& u : corpus) out.push_back({u.wave, u.phones, u.words});
  return out;
}

inline std::vector<EvalUtterance> eval_utterances(const Manifest& m, const std::string& split) {
  std::vector<EvalUtterance> out;
  for (const ManifestEntry* e : m.split(split)) {
    EvalUtterance u;
    u.wave = load_wav(m.resolve(e->wav));
    u.wave.utterance_id = e->id;
    u.wave.speaker_id = e->speaker;
    if (!e->phones.empty()) u.phones = load_alignment(m.resolve(e->phones), AlignmentLevel::kPhone);
    if (!e->words.empty()) u.words = load_alignment(m.resolve(e->words), AlignmentLevel::kWord);
    out.push_back(std::move(u));
  }
  return out;
}

/// Frame vectors of the chunk-covered part of an utterance, concatenated.
struct UtteranceEncoding {
  std::string id, speaker;
  FrameMatrix z, c;  // [frames x dim]; c equals z when there is no context network
  std::size_t covered_samples = 0;

  std::size_t frames() const { return std::size_t(z.rows()); }
};

template <typename S>
UtteranceEncoding encode_utterance(const Model<S>& model, const Waveform& wave) {
  NoGradGuard guard;
  UtteranceEncoding enc;
  enc.id = wave.utterance_id;
  enc.speaker = wave.speaker_id;
  const auto chunks = chunk_stream(wave);
  const std::size_t per_chunk = kChunkSamples / model.config().hop_samples();
  const Eigen::Index dz = Eigen::Index(model.config().dim);
  const Eigen::Index dc =
      Eigen::Index(model.has_frame_context() ? model.config().context_dim() : model.config().dim);
  enc.z.resize(Eigen::Index(chunks.size() * per_chunk), dz);
  enc.c.resize(Eigen::Index(chunks.size() * per_chunk), dc);
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    LatentSequence<S> lat = model.encode_frames(chunks[i]);
    Tensor<S> ctx = model.build_context(lat.vectors);
    for (std::size_t t = 0; t < per_chunk; ++t) {
      for (Eigen::Index d = 0; d < dz; ++d)
        enc.z(Eigen::Index(i * per_chunk + t), d) = double(lat.vectors.at(t, std::size_t(d)));
      for (Eigen::Index d = 0; d < dc; ++d)
        enc.c(Eigen::Index(i * per_chunk + t), d) = double(ctx.at(t, std::size_t(d)));
    }
  }
  enc.covered_samples = chunks.size() * kChunkSamples;
  return enc;
}

template <typename S>
std::vector<UtteranceEncoding> encode_utterances(const Model<S>& model,
                                                 const std::vector<EvalUtterance>& utts) {
  std::vector<UtteranceEncoding> out;
  out.reserve(utts.size());
  for (const auto& u : utts) out.push_back(encode_utterance(model, u.wave));
  return out;
}

inline DissimilarityCurve utterance_curve(const UtteranceEncoding& enc) {
  if (enc.frames() < 2) return DissimilarityCurve{};
  return dissimilarity_curve<double>(std::span<const double>(enc.z.data(), std::size_t(enc.z.size())),
                                     enc.frames(), std::size_t(enc.z.cols()));
}

inline Segmentation phone_segmentation(const DissimilarityCurve& curve, std::size_t frames,
                                       double threshold, std::size_t min_separation) {
  if (frames < 2) {
    Segmentation s;
    s.num_frames = std::int64_t(frames);
    return s;
  }
  Segmentation s = detect_peaks(curve, threshold, min_separation);
  s.num_frames = std::int64_t(frames);
  return s;
}

inline Segmentation phone_segmentation(const UtteranceEncoding& enc, double threshold,
                                       std::size_t min_separation) {
  return phone_segmentation(utterance_curve(enc), enc.frames(), threshold, min_separation);
}

/// Interior reference boundaries (ms) inside the covered part of an utterance.
inline std::vector<double> reference_ms(const Alignment& al, std::size_t covered_samples) {
  std::vector<double> out;
  for (auto b : al.boundaries())
    if (b > 0 && std::size_t(b) < covered_samples) out.push_back(double(b) * 1000.0 / kSampleRate);
  return out;
}

inline std::vector<std::vector<double>> phone_references(const std::vector<EvalUtterance>& utts,
                                                         const std::vector<UtteranceEncoding>& encs) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    if (!utts[i].phones) throw DataError("no phone alignment for " + utts[i].wave.utterance_id);
    out.push_back(reference_ms(*utts[i].phones, encs[i].covered_samples));
  }
  return out;
}

inline std::vector<std::vector<double>> word_references(const std::vector<EvalUtterance>& utts,
                                                        const std::vector<UtteranceEncoding>& encs) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    if (!utts[i].words) throw DataError("no word alignment for " + utts[i].wave.utterance_id);
    out.push_back(reference_ms(*utts[i].words, encs[i].covered_samples));
  }
  return out;
}

struct ThresholdChoice {
  double threshold = 0;
  std::vector<OffsetResult> scores;  // one per grid value
};

/// Picks the grid value with the best mean R-value (first on ties).
inline ThresholdChoice select_threshold(const std::vector<UtteranceEncoding>& encs,
                                        const std::vector<std::vector<double>>& refs,
                                        const std::vector<double>& grid, std::size_t min_separation,
                                        std::int64_t offset_ms = 0,
                                        double tolerance_ms = kDefaultToleranceMs) {
  if (grid.empty()) throw ConfigError("select_threshold: empty grid");
  std::vector<DissimilarityCurve> curves;
  for (const auto& e : encs) curves.push_back(utterance_curve(e));
  ThresholdChoice out;
  double best = -1e300;
  for (double th : grid) {
    std::vector<Segmentation> preds;
    for (std::size_t i = 0; i < encs.size(); ++i)
      preds.push_back(phone_segmentation(curves[i], encs[i].frames(), th, min_separation));
    out.scores.push_back(evaluate_segmentations(refs, preds, offset_ms, tolerance_ms));
    if (out.scores.back().mean.r_value > best) {
      best = out.scores.back().mean.r_value;
      out.threshold = th;
    }
  }
  return out;
}

inline std::vector<Segmentation> phone_segmentations(const std::vector<UtteranceEncoding>& encs,
                                                     double threshold, std::size_t min_separation) {
  std::vector<Segmentation> out;
  for (const auto& e : encs) out.push_back(phone_segmentation(e, threshold, min_separation));
  return out;
}

/// Word boundaries of one utterance: segments from `phones`, encoded by the
/// model's segment encoder, then peak-picked.
template <typename S>
Segmentation word_segmentation(const Model<S>& model, const UtteranceEncoding& enc,
                               const Segmentation& phones, double prominence,
                               std::size_t min_separation, std::size_t* too_few = nullptr) {
  NoGradGuard guard;
  std::vector<S> vals(std::size_t(enc.z.size()));
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = S(enc.z.data()[i]);
  Tensor<S> z = Tensor<S>::from({enc.frames(), std::size_t(enc.z.cols())}, std::move(vals));
  PooledSegments<S> pooled = pool_segments(z, phones);
  SegmentSequence<S> segs = model.encode_segments(pooled.means, std::move(pooled.spans));
  Segmentation w = word_boundaries(segs, prominence, min_separation, too_few);
  w.num_frames = std::int64_t(enc.frames());
  return w;
}

/// True phone boundaries of each utterance on the frame grid.
inline std::vector<Segmentation> oracle_phone_segmentations(
    const std::vector<EvalUtterance>& utts, const std::vector<UtteranceEncoding>& encs) {
  std::vector<Segmentation> out;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    if (!utts[i].phones) throw DataError("no phone alignment for " + utts[i].wave.utterance_id);
    Segmentation s;
    s.num_frames = std::int64_t(encs[i].frames());
    for (auto b : utts[i].phones->boundaries()) {
      const std::int64_t f = (b + std::int64_t(kHopSamples) / 2) / std::int64_t(kHopSamples);
      if (f > 0 && f < s.num_frames && (s.frames.empty() || s.frames.back() < f)) s.frames.push_back(f);
    }
    s.provenance.source = Provenance::Source::kOracle;
    out.push_back(std::move(s));
  }
  return out;
}

/// Word boundaries of every utterance. A model trained on oracle phone
/// boundaries pools over the true phones here too; others use `detected`.
template <typename S>
std::vector<Segmentation> word_segmentations(const Model<S>& model,
                                             const std::vector<EvalUtterance>& utts,
                                             const std::vector<UtteranceEncoding>& encs,
                                             const std::vector<Segmentation>& detected,
                                             double prominence, std::size_t min_separation = 1) {
  const std::vector<Segmentation> phones =
      model.config().oracle_boundaries ? oracle_phone_segmentations(utts, encs) : detected;
  std::vector<Segmentation> out;
  for (std::size_t i = 0; i < encs.size(); ++i)
    out.push_back(word_segmentation(model, encs[i], phones[i], prominence, min_separation));
  return out;
}

/// Random boundaries matching each prediction's count.
inline std::vector<Segmentation> random_baseline(const std::vector<Segmentation>& matched,
                                                 std::uint64_t seed) {
  std::vector<Segmentation> out;
  for (std::size_t u = 0; u < matched.size(); ++u) {
    Rng rng = make_rng(seed, {tag(Stream::kBaseline), u});
    const std::int64_t n = matched[u].num_frames;
    std::vector<std::int64_t> pool;
    for (std::int64_t f = 1; f < n; ++f) pool.push_back(f);
    std::shuffle(pool.begin(), pool.end(), rng);
    Segmentation s;
    s.num_frames = n;
    const std::size_t k = std::min(pool.size(), matched[u].frames.size());
    s.frames.assign(pool.begin(), pool.begin() + std::ptrdiff_t(k));
    std::sort(s.frames.begin(), s.frames.end());
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Probe and ABX inputs

inline const FrameMatrix& representation(const UtteranceEncoding& e, bool context) {
  return context ? e.c : e.z;
}

/// Frames and phone ids of the covered part of every utterance.
inline ProbeData probe_data(const std::vector<EvalUtterance>& utts,
                            const std::vector<UtteranceEncoding>& encs,
                            const std::map<std::string, int>& label_ids, bool context) {
  std::size_t total = 0;
  for (const auto& e : encs) total += e.frames();
  ProbeData d;
  if (encs.empty()) return d;
  d.features.resize(Eigen::Index(total), representation(encs.front(), context).cols());
  std::size_t row = 0;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    if (!utts[i].phones) throw DataError("no phone alignment for " + utts[i].wave.utterance_id);
    const FrameMatrix& f = representation(encs[i], context);
    FrameLabels fl = frame_labels(*utts[i].phones, encs[i].frames(), label_ids);
    d.features.middleRows(Eigen::Index(row), f.rows()) = f;
    d.labels.insert(d.labels.end(), fl.ids.begin(), fl.ids.end());
    row += encs[i].frames();
  }
  return d;
}

/// One ABX item per phone occurrence lying fully inside the covered frames.
inline std::vector<AbxItem> abx_items(const std::vector<EvalUtterance>& utts,
                                      const std::vector<UtteranceEncoding>& encs,
                                      const std::map<std::string, int>& label_ids, bool context) {
  std::vector<AbxItem> out;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    if (!utts[i].phones) continue;
    const FrameMatrix& f = representation(encs[i], context);
    for (const auto& e : utts[i].phones->entries) {
      const std::int64_t a = (e.start + std::int64_t(kHopSamples) / 2) / std::int64_t(kHopSamples);
      const std::int64_t b = (e.end + std::int64_t(kHopSamples) / 2) / std::int64_t(kHopSamples);
      if (b <= a || b > std::int64_t(encs[i].frames())) continue;
      auto it = label_ids.find(e.label);
      if (it == label_ids.end()) continue;
      AbxItem item;
      item.frames = f.middleRows(Eigen::Index(a), Eigen::Index(b - a));
      item.category = it->second;
      item.speaker = utts[i].wave.speaker_id;
      out.push_back(std::move(item));
    }
  }
  return out;
}

}  // namespace cpcseg
