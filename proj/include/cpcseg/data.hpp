// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Audio and alignment ingestion, fixed-length chunking, and a synthetic
// corpus with exact phone/word boundaries.

#pragma once

#include <algorithm>
#include <numeric>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpcseg/errors.hpp"
#include "cpcseg/random.hpp"

namespace cpcseg {

inline constexpr int kSampleRate = 16000;
inline constexpr std::size_t kHopSamples = 160;  // 10 ms
inline constexpr std::size_t kChunkSamples = 20480;
inline constexpr int kSilenceId = -1;

struct Waveform {
  std::vector<float> samples;  // in [-1, 1]
  int sample_rate = kSampleRate;
  std::string utterance_id;
  std::string speaker_id;

  double duration_ms() const { return 1000.0 * samples.size() / sample_rate; }
};

enum class AlignmentLevel { kPhone, kWord };

inline const char* level_name(AlignmentLevel level) {
  return level == AlignmentLevel::kPhone ? "phone" : "word";
}

struct AlignmentEntry {
  std::int64_t start = 0;  // samples, half-open
  std::int64_t end = 0;
  std::string label;

  bool operator==(const AlignmentEntry&) const = default;
};

struct Alignment {
  AlignmentLevel level = AlignmentLevel::kPhone;
  std::vector<AlignmentEntry> entries;

  /// Interior boundaries (entry starts except the first) in samples.
  std::vector<std::int64_t> boundaries() const {
    std::vector<std::int64_t> out;
    for (std::size_t i = 1; i < entries.size(); ++i) out.push_back(entries[i].start);
    return out;
  }
  bool operator==(const Alignment&) const = default;
};

// ---------------------------------------------------------------------------
// WAV

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return p[0] | (p[1] << 8) | (p[2] << 16) | (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>(v >> 8));
}

/// "<speaker>_<rest>.wav" names the speaker; otherwise the speaker is unknown.
inline std::string speaker_from_stem(const std::string& stem) {
  auto pos = stem.find('_');
  return pos == std::string::npos ? std::string("unknown") : stem.substr(0, pos);
}

}  // namespace detail

/// Reads a RIFF/WAVE PCM16 mono 16 kHz file. No resampling or downmixing.
inline Waveform load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open wav file " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw DataError(where + "not a RIFF/WAVE file");
  bool have_fmt = false;
  std::size_t pos = 12;
  Waveform wave;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const std::uint32_t size = detail::read_u32(hdr + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw DataError(where + "truncated chunk");
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (size < 16) throw DataError(where + "short fmt chunk");
      const unsigned char* f = bytes.data() + body;
      const std::uint16_t format = detail::read_u16(f);
      const std::uint16_t channels = detail::read_u16(f + 2);
      const std::uint32_t rate = detail::read_u32(f + 4);
      const std::uint16_t bits = detail::read_u16(f + 14);
      if (format != 1) throw DataError(where + "unsupported encoding (PCM required)");
      if (channels != 1)
        throw DataError(where + "expected 1 channel, found " + std::to_string(channels));
      if (bits != 16) throw DataError(where + "expected 16-bit samples, found " + std::to_string(bits));
      if (rate != kSampleRate)
        throw DataError(where + "expected 16000 Hz, found " + std::to_string(rate));
      wave.sample_rate = static_cast<int>(rate);
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      if (!have_fmt) throw DataError(where + "data chunk before fmt chunk");
      const std::size_t n = size / 2;
      wave.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto v = static_cast<std::int16_t>(detail::read_u16(bytes.data() + body + 2 * i));
        wave.samples[i] = static_cast<float>(v) / 32768.0f;
      }
      const std::string stem = path.stem().string();
      wave.utterance_id = stem;
      wave.speaker_id = detail::speaker_from_stem(stem);
      return wave;
    }
    pos = body + size + (size & 1);
  }
  throw DataError(where + "no data chunk");
}

/// Writes PCM16 mono; samples are clipped to [-1, 1).
inline void write_wav(const std::filesystem::path& path, std::span<const float> samples,
                      int sample_rate = kSampleRate, int channels = 1) {
  std::string out = "RIFF";
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  detail::put_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);
  detail::put_u16(out, static_cast<std::uint16_t>(channels));
  detail::put_u32(out, static_cast<std::uint32_t>(sample_rate));
  detail::put_u32(out, static_cast<std::uint32_t>(sample_rate * channels * 2));
  detail::put_u16(out, static_cast<std::uint16_t>(channels * 2));
  detail::put_u16(out, 16);
  out += "data";
  detail::put_u32(out, data_bytes);
  for (float s : samples) {
    const long v = std::lround(std::clamp(s, -1.0f, 32767.0f / 32768.0f) * 32768.0f);
    detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

// ---------------------------------------------------------------------------
// Alignments: one "start_sample end_sample label" entry per line.

inline Alignment parse_alignment(std::istream& in, AlignmentLevel level,
                                 const std::string& source = "alignment") {
  Alignment al{level, {}};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    AlignmentEntry e;
    std::string extra;
    if (!(ls >> e.start >> e.end >> e.label) || (ls >> extra))
      throw DataError(source + ": malformed entry at line " + std::to_string(lineno));
    if (e.start < 0 || e.end <= e.start)
      throw DataError(source + ": inverted or empty interval at line " + std::to_string(lineno));
    if (!al.entries.empty() && e.start < al.entries.back().end)
      throw DataError(source + ": overlapping interval at line " + std::to_string(lineno));
    al.entries.push_back(std::move(e));
  }
  return al;
}

inline Alignment load_alignment(const std::filesystem::path& path, AlignmentLevel level) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open alignment " + path.string());
  return parse_alignment(in, level, path.string());
}

inline void write_alignment(const std::filesystem::path& path, const Alignment& al) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& e : al.entries) out << e.start << ' ' << e.end << ' ' << e.label << '\n';
}

// ---------------------------------------------------------------------------
// Chunking

struct Chunk {
  std::span<const float> samples;
  int sample_rate = kSampleRate;
  std::size_t offset = 0;  // first sample within the utterance
};

struct ChunkPlan {
  std::vector<std::size_t> offsets;
  std::size_t dropped_samples = 0;

  std::size_t covered_samples() const { return offsets.size() * kChunkSamples; }
};

/// Consecutive non-overlapping chunks; the partial tail is dropped.
inline ChunkPlan chunk_stream(std::size_t n_samples, std::size_t chunk_len = kChunkSamples) {
  ChunkPlan plan;
  const std::size_t n = n_samples / chunk_len;
  for (std::size_t i = 0; i < n; ++i) plan.offsets.push_back(i * chunk_len);
  plan.dropped_samples = n_samples - n * chunk_len;
  return plan;
}

inline std::vector<Chunk> chunk_stream(const Waveform& wave, std::size_t chunk_len = kChunkSamples) {
  std::vector<Chunk> out;
  for (std::size_t off : chunk_stream(wave.samples.size(), chunk_len).offsets)
    out.push_back({std::span<const float>(wave.samples).subspan(off, chunk_len),
                   wave.sample_rate, off});
  return out;
}

// ---------------------------------------------------------------------------
// Frame labels

struct FrameLabels {
  std::vector<int> ids;
  std::size_t uncovered = 0;
};

/// Labels each 10 ms frame starting at `origin` with the entry overlapping its
/// 160-sample window the most (ties go to the earlier entry). Frames nothing
/// overlaps receive kSilenceId. `label_ids` maps labels to class ids.
inline FrameLabels frame_labels(const Alignment& al, std::size_t n_frames,
                                const std::map<std::string, int>& label_ids,
                                std::int64_t origin = 0) {
  FrameLabels out;
  out.ids.assign(n_frames, kSilenceId);
  std::size_t e = 0;
  for (std::size_t t = 0; t < n_frames; ++t) {
    const std::int64_t lo = origin + static_cast<std::int64_t>(t * kHopSamples);
    const std::int64_t hi = lo + static_cast<std::int64_t>(kHopSamples);
    while (e < al.entries.size() && al.entries[e].end <= lo) ++e;
    std::int64_t best = 0;
    for (std::size_t j = e; j < al.entries.size() && al.entries[j].start < hi; ++j) {
      const std::int64_t ov = std::min(hi, al.entries[j].end) - std::max(lo, al.entries[j].start);
      if (ov > best) {
        best = ov;
        auto it = label_ids.find(al.entries[j].label);
        if (it == label_ids.end()) throw DataError("frame_labels: unknown label " + al.entries[j].label);
        out.ids[t] = it->second;
      }
    }
    if (best == 0) ++out.uncovered;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct PhoneClass {
  double center_hz = 0;
  double bandwidth_hz = 0;
  bool harmonic = false;  // harmonic tone vs band-limited noise
};

struct SpeakerProfile {
  double pitch_hz = 0;      // f0 for harmonic classes
  double formant_scale = 1; // multiplies class center frequencies
  double gain = 1;
};

struct SynthSpec {
  std::size_t n_phone_classes = 8;
  double min_phone_ms = 100;
  double max_phone_ms = 250;
  double min_utterance_ms = 1600;
  double max_utterance_ms = 3000;
  std::size_t n_words = 12;
  std::size_t min_word_phones = 2;
  std::size_t max_word_phones = 4;
  std::vector<std::vector<int>> lexicon;  // generated when empty
  std::vector<PhoneClass> classes;        // generated when empty
  std::size_t n_speakers = 4;
  double crossfade_ms = 5;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_phone_classes < 2) throw ConfigError("synth: need at least two phone classes");
    if (min_phone_ms < 60) throw ConfigError("synth: phone durations must be >= 60 ms");
    if (max_phone_ms < min_phone_ms) throw ConfigError("synth: max_phone_ms < min_phone_ms");
    if (n_speakers == 0) throw ConfigError("synth: need at least one speaker");
    if (max_utterance_ms < min_utterance_ms) throw ConfigError("synth: utterance range inverted");
    if (lexicon.empty() && n_words == 0) throw ConfigError("synth: lexicon is empty");
    if (min_word_phones == 0 || max_word_phones < min_word_phones)
      throw ConfigError("synth: bad phones-per-word range");
  }
};

inline std::string phone_label(int cls) { return "p" + std::to_string(cls); }

/// Log-spaced centers from 250 Hz with ratio 1.55; bands stay disjoint after
/// +-8% speaker scaling. Even classes are harmonic, odd classes noise.
inline std::vector<PhoneClass> default_phone_classes(std::size_t n) {
  std::vector<PhoneClass> out;
  const double top = 6200.0;
  const double ratio = n > 1 ? std::min(1.55, std::pow(top / 250.0, 1.0 / double(n - 1))) : 1.55;
  for (std::size_t i = 0; i < n; ++i) {
    const double c = 250.0 * std::pow(ratio, double(i));
    out.push_back({c, 0.12 * c, i % 2 == 0});
  }
  return out;
}

/// Distinct words of random length; no phone repeats back to back. Phones are
/// dealt from a shuffled deck holding every class equally often, so the
/// lexicon uses the classes near-uniformly and a classifier without
/// information sits at 1/n_phone_classes.
inline std::vector<std::vector<int>> generate_lexicon(const SynthSpec& spec) {
  Rng rng = make_rng(spec.seed, {tag(Stream::kSynth), 0x1e7});
  std::uniform_int_distribution<std::size_t> len(spec.min_word_phones, spec.max_word_phones);
  std::vector<int> deck;
  auto deal = [&](int avoid) {
    auto it = std::find_if(deck.rbegin(), deck.rend(), [&](int p) { return p != avoid; });
    if (it == deck.rend()) {
      std::vector<int> fresh(spec.n_phone_classes);
      std::iota(fresh.begin(), fresh.end(), 0);
      std::shuffle(fresh.begin(), fresh.end(), rng);
      deck.insert(deck.begin(), fresh.begin(), fresh.end());
      it = std::find_if(deck.rbegin(), deck.rend(), [&](int p) { return p != avoid; });
    }
    const int p = *it;
    deck.erase(std::next(it).base());
    return p;
  };
  std::vector<std::vector<int>> words;
  std::size_t attempts = 0;
  while (words.size() < spec.n_words) {
    if (++attempts > 100000) throw ConfigError("synth: cannot generate enough distinct words");
    std::vector<int> w(len(rng));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = deal(i > 0 ? w[i - 1] : -1);
    if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(std::move(w));
  }
  return words;
}

inline SpeakerProfile speaker_profile(const SynthSpec& spec, std::size_t speaker) {
  Rng rng = make_rng(spec.seed, {tag(Stream::kSynth), 0x5be, speaker});
  std::uniform_real_distribution<double> pitch(100.0, 220.0), scale(0.93, 1.07), gain(0.8, 1.2);
  SpeakerProfile p;
  p.pitch_hz = pitch(rng);
  p.formant_scale = scale(rng);
  p.gain = gain(rng);
  return p;
}

struct SynthUtterance {
  Waveform wave;
  Alignment phones;
  Alignment words;
  std::size_t speaker = 0;
};

namespace detail {

/// RBJ band-pass biquad (constant 0 dB peak gain).
inline std::vector<double> bandpass_noise(std::size_t n, double center, double bandwidth, Rng& rng) {
  std::normal_distribution<double> white(0.0, 1.0);
  const double w0 = 2.0 * std::numbers::pi * center / kSampleRate;
  const double q = center / bandwidth;
  const double alpha = std::sin(w0) / (2.0 * q);
  const double a0 = 1.0 + alpha;
  const double b0 = alpha / a0, b2 = -alpha / a0;
  const double a1 = -2.0 * std::cos(w0) / a0, a2 = (1.0 - alpha) / a0;
  std::vector<double> y(n);
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
  // Warm up the filter so the segment starts in steady state.
  const std::size_t warm = 400;
  for (std::size_t i = 0; i < n + warm; ++i) {
    const double x = white(rng);
    const double v = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
    x2 = x1;
    x1 = x;
    y2 = y1;
    y1 = v;
    if (i >= warm) y[i - warm] = v;
  }
  return y;
}

inline std::vector<double> harmonic_tone(std::size_t n, double center, double bandwidth,
                                         double f0, Rng& rng) {
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::vector<double> y(n, 0.0);
  for (int h = 1; h * f0 < 7600.0; ++h) {
    const double f = h * f0;
    const double amp = std::exp(-0.5 * std::pow((f - center) / bandwidth, 2));
    if (amp < 1e-3) continue;
    const double ph = phase(rng);
    const double w = 2.0 * std::numbers::pi * f / kSampleRate;
    for (std::size_t i = 0; i < n; ++i) y[i] += amp * std::sin(w * double(i) + ph);
  }
  // Keep classes whose band falls between harmonics audible.
  bool silent = std::all_of(y.begin(), y.end(), [](double v) { return v == 0.0; });
  if (silent) {
    const double w = 2.0 * std::numbers::pi * center / kSampleRate;
    const double ph = phase(rng);
    for (std::size_t i = 0; i < n; ++i) y[i] = std::sin(w * double(i) + ph);
  }
  return y;
}

inline void normalize_rms(std::vector<double>& y, double target) {
  double ss = 0;
  for (double v : y) ss += v * v;
  const double rms = std::sqrt(ss / std::max<std::size_t>(1, y.size()));
  if (rms > 0)
    for (double& v : y) v *= target / rms;
}

}  // namespace detail

/// Renders utterances [first_index, first_index + n). Utterance i belongs to
/// speaker i % n_speakers and draws its randomness from (seed, i) only.
inline std::vector<SynthUtterance> synth_corpus(SynthSpec spec, std::size_t n_utterances,
                                                std::size_t first_index = 0) {
  spec.validate();
  if (spec.classes.empty()) spec.classes = default_phone_classes(spec.n_phone_classes);
  if (spec.lexicon.empty()) spec.lexicon = generate_lexicon(spec);
  if (spec.lexicon.empty()) throw ConfigError("synth: lexicon is empty");
  for (const auto& w : spec.lexicon)
    for (int p : w)
      if (p < 0 || static_cast<std::size_t>(p) >= spec.classes.size())
        throw ConfigError("synth: lexicon references unknown phone class");

  const auto ms_to_samples = [](double ms) {
    return static_cast<std::int64_t>(std::llround(ms * kSampleRate / 1000.0));
  };
  const std::int64_t half_fade = ms_to_samples(spec.crossfade_ms) / 2;
  std::vector<SynthUtterance> out;
  out.reserve(n_utterances);
  for (std::size_t u = first_index; u < first_index + n_utterances; ++u) {
    Rng rng = make_rng(spec.seed, {tag(Stream::kSynth), 0x077, u});
    SynthUtterance utt;
    utt.speaker = u % spec.n_speakers;
    const SpeakerProfile spk = speaker_profile(spec, utt.speaker);
    std::uniform_real_distribution<double> target_ms(spec.min_utterance_ms, spec.max_utterance_ms);
    std::uniform_real_distribution<double> dur_ms(spec.min_phone_ms, spec.max_phone_ms);
    std::uniform_int_distribution<std::size_t> pick(0, spec.lexicon.size() - 1);
    std::uniform_real_distribution<double> jitter(0.97, 1.03), level(0.25, 0.45);
    const std::int64_t target = ms_to_samples(target_ms(rng));

    // Word and phone layout.
    std::int64_t cursor = 0;
    int last_phone = -1;
    while (cursor < target) {
      std::size_t w = pick(rng);
      for (int tries = 0; spec.lexicon[w].front() == last_phone && tries < 64; ++tries) w = pick(rng);
      if (spec.lexicon[w].front() == last_phone) break;
      const std::int64_t word_start = cursor;
      for (int p : spec.lexicon[w]) {
        const std::int64_t len = ms_to_samples(dur_ms(rng));
        utt.phones.entries.push_back({cursor, cursor + len, phone_label(p)});
        cursor += len;
      }
      utt.words.entries.push_back({word_start, cursor, "w" + std::to_string(w)});
      last_phone = spec.lexicon[w].back();
    }
    utt.phones.level = AlignmentLevel::kPhone;
    utt.words.level = AlignmentLevel::kWord;

    // Audio: each phone rendered over its span widened by the half fade, then
    // weighted by complementary linear ramps centred on the boundaries.
    std::vector<double> mix(static_cast<std::size_t>(cursor), 0.0);
    const auto& entries = utt.phones.entries;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const int cls = std::stoi(entries[i].label.substr(1));
      const PhoneClass& pc = spec.classes[static_cast<std::size_t>(cls)];
      const std::int64_t lo = std::max<std::int64_t>(0, entries[i].start - half_fade);
      const std::int64_t hi = std::min<std::int64_t>(cursor, entries[i].end + half_fade);
      const double center = pc.center_hz * spk.formant_scale * jitter(rng);
      const double bw = pc.bandwidth_hz * spk.formant_scale;
      auto seg = pc.harmonic
                     ? detail::harmonic_tone(static_cast<std::size_t>(hi - lo), center, bw,
                                             spk.pitch_hz, rng)
                     : detail::bandpass_noise(static_cast<std::size_t>(hi - lo), center, bw, rng);
      detail::normalize_rms(seg, level(rng) * spk.gain);
      for (std::int64_t s = lo; s < hi; ++s) {
        double w = 1.0;
        if (i > 0 && half_fade > 0 && s < entries[i].start + half_fade)
          w = double(s - (entries[i].start - half_fade)) / double(2 * half_fade);
        if (i + 1 < entries.size() && half_fade > 0 && s >= entries[i].end - half_fade)
          w = std::min(w, double(entries[i].end + half_fade - s) / double(2 * half_fade));
        mix[static_cast<std::size_t>(s)] += w * seg[static_cast<std::size_t>(s - lo)];
      }
    }
    std::normal_distribution<double> floor_noise(0.0, 0.003);
    utt.wave.samples.resize(mix.size());
    for (std::size_t i = 0; i < mix.size(); ++i)
      utt.wave.samples[i] = static_cast<float>(std::clamp(mix[i] + floor_noise(rng), -0.999, 0.999));
    utt.wave.sample_rate = kSampleRate;
    char id[64];
    std::snprintf(id, sizeof id, "spk%zu_utt%05zu", utt.speaker, u);
    utt.wave.utterance_id = id;
    utt.wave.speaker_id = "spk" + std::to_string(utt.speaker);
    out.push_back(std::move(utt));
  }
  return out;
}

/// Phone label -> class id for the synthetic inventory.
inline std::map<std::string, int> synth_label_ids(std::size_t n_classes) {
  std::map<std::string, int> ids;
  for (std::size_t i = 0; i < n_classes; ++i) ids[phone_label(static_cast<int>(i))] = static_cast<int>(i);
  return ids;
}

// ---------------------------------------------------------------------------
// Corpus manifest (JSON)

struct ManifestEntry {
  std::string id;
  std::string speaker;
  std::string split;
  std::string wav;     // paths relative to the manifest directory
  std::string phones;  // optional
  std::string words;   // optional
  std::size_t num_samples = 0;
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> utterances;
  std::vector<std::string> phone_labels;

  std::vector<const ManifestEntry*> split(const std::string& name) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : utterances)
      if (name.empty() || e.split == name) out.push_back(&e);
    return out;
  }
  std::filesystem::path resolve(const std::string& rel) const { return root / rel; }
};

inline constexpr const char* kManifestFormat = "cpcseg-manifest-v1";

inline nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json j;
  j["format"] = kManifestFormat;
  j["sample_rate"] = kSampleRate;
  j["phone_labels"] = m.phone_labels;
  j["utterances"] = nlohmann::json::array();
  for (const auto& e : m.utterances)
    j["utterances"].push_back({{"id", e.id},
                               {"speaker", e.speaker},
                               {"split", e.split},
                               {"wav", e.wav},
                               {"phones", e.phones},
                               {"words", e.words},
                               {"num_samples", e.num_samples}});
  return j;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path.string() + ": " + e.what());
  }
  if (j.value("format", std::string()) != kManifestFormat)
    throw DataError("manifest " + path.string() + ": expected format " + kManifestFormat);
  Manifest m;
  m.root = path.parent_path();
  try {
    m.phone_labels = j.value("phone_labels", std::vector<std::string>{});
    for (const auto& u : j.at("utterances")) {
      ManifestEntry e;
      e.id = u.at("id").get<std::string>();
      e.speaker = u.value("speaker", detail::speaker_from_stem(e.id));
      e.split = u.value("split", std::string("train"));
      e.wav = u.at("wav").get<std::string>();
      e.phones = u.value("phones", std::string());
      e.words = u.value("words", std::string());
      e.num_samples = u.value("num_samples", std::size_t{0});
      m.utterances.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path.string() + ": " + e.what());
  }
  return m;
}

/// Label ids from the manifest's inventory (or sorted labels seen in files).
inline std::map<std::string, int> manifest_label_ids(const Manifest& m) {
  std::map<std::string, int> ids;
  for (std::size_t i = 0; i < m.phone_labels.size(); ++i) ids[m.phone_labels[i]] = static_cast<int>(i);
  return ids;
}

}  // namespace cpcseg
