// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// cpcseg command-line tool: synth, train, segment, eval-seg, sweep-offset,
// probe, abx, export-reprs.
//
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure,
// 1 anything else. Failures print one line to stderr:
//   cpcseg-error code=<n> kind=<kind> message=<json string>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cpcseg/cpcseg.hpp"

namespace fs = std::filesystem;
using namespace cpcseg;

namespace {

struct Options {
  std::optional<std::string> config;
  std::vector<std::string> sets;
  std::string out = ".";
  std::optional<std::int64_t> offset_ms;
  std::optional<std::uint64_t> seed;
  std::string manifest;
  std::string checkpoint;
  std::string split = "test";
  std::string pred_dir, ref_dir;
  std::string kind = "phone";
  std::optional<double> threshold;
};

/// Tracks files written by the command so a failure can remove them.
class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) {}
  fs::path path(const std::string& rel) const { return dir_ / rel; }
  void write(const std::string& rel, const std::string& bytes) {
    const fs::path p = dir_ / rel;
    track(p);
    write_file_atomic(p, bytes);
  }
  void track(const fs::path& p) {
    fs::create_directories(p.parent_path());
    written_.push_back(p);
  }
  void rollback() {
    std::error_code ec;
    for (const auto& p : written_) {
      fs::remove(p, ec);
      fs::remove(with_suffix(p, ".tmp"), ec);
    }
  }

 private:
  fs::path dir_;
  std::vector<fs::path> written_;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

AppConfig load_config(const Options& o) {
  std::vector<std::string> sets = o.sets;
  if (o.seed) sets.push_back("train.seed=" + std::to_string(*o.seed));
  if (o.offset_ms) sets.push_back("eval.offset_ms=" + std::to_string(*o.offset_ms));
  std::optional<fs::path> path;
  if (o.config) path = *o.config;
  return parse_config(path, sets);
}

Manifest require_manifest(const Options& o, const AppConfig& cfg) {
  const std::string m = !o.manifest.empty() ? o.manifest : cfg.train.manifest;
  if (m.empty()) throw ConfigError("--manifest (or train.manifest) is required");
  return load_manifest(m);
}

Model<float> require_model(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  return load_checkpoint<float>(o.checkpoint);
}

std::string dump(const nlohmann::ordered_json& j) { return j.dump(2) + "\n"; }

std::string boundary_file(const Segmentation& seg, BoundaryKind kind) {
  std::vector<BoundaryMark> marks;
  for (double ms : seg.ms()) marks.push_back({ms, kind});
  return boundary_file_text(std::move(marks));
}

// ---------------------------------------------------------------------------

void cmd_synth(const Options& o, const AppConfig& cfg, Outputs& out) {
  const CorpusConfig& c = cfg.corpus;
  Manifest m;
  for (std::size_t i = 0; i < c.spec.n_phone_classes; ++i) m.phone_labels.push_back(phone_label(int(i)));
  struct Split {
    const char* name;
    std::size_t n, first;
  };
  const Split splits[] = {{"train", c.n_train, 0},
                          {"val", c.n_val, c.n_train},
                          {"test", c.n_test, c.n_train + c.n_val}};
  for (const Split& s : splits) {
    if (s.n == 0) continue;
    for (const SynthUtterance& u : synth_corpus(c.spec, s.n, s.first)) {
      const std::string id = u.wave.utterance_id;
      const std::string wav = "wav/" + id + ".wav", phn = "phones/" + id + ".txt",
                        wrd = "words/" + id + ".txt";
      out.track(out.path(wav));
      write_wav(out.path(wav), u.wave.samples, u.wave.sample_rate, 1);
      out.track(out.path(phn));
      write_alignment(out.path(phn), u.phones);
      out.track(out.path(wrd));
      write_alignment(out.path(wrd), u.words);
      m.utterances.push_back({id, u.wave.speaker_id, s.name, wav, phn, wrd, u.wave.samples.size()});
    }
  }
  out.write("manifest.json", manifest_to_json(m).dump(2) + "\n");
  (void)o;
}

void cmd_train(const Options& o, const AppConfig& cfg, Outputs& out) {
  Manifest m = require_manifest(o, cfg);
  std::vector<TrainChunk> chunks;
  for (const ManifestEntry* e : m.split("train")) {
    Waveform w = load_wav(m.resolve(e->wav));
    w.utterance_id = e->id;
    std::optional<Alignment> al;
    if (!e->phones.empty()) al = load_alignment(m.resolve(e->phones), AlignmentLevel::kPhone);
    auto part = make_train_chunks(w, al ? &*al : nullptr);
    for (auto& c : part) chunks.push_back(std::move(c));
  }
  if (chunks.empty()) throw DataError("train split yields no 20480-sample chunks");
  TrainConfig tc = cfg.train;
  FitHooks hooks;
  std::unique_ptr<Model<float>> dummy;
  RunLog partial;
  try {
    FitResult<float> res = fit<float>(tc, chunks, hooks, &partial);
    out.track(out.path("model.json"));
    out.track(out.path("model.bin"));
    save_checkpoint(res.model, out.path("model"));
    out.write("runlog.jsonl", res.log.jsonl());
    out.write("timing.jsonl", res.log.timing_jsonl());
  } catch (const NumericError&) {
    // Keep the log of the failed run: it names the offending step.
    write_file_atomic(out.path("runlog.failed.jsonl"), partial.jsonl());
    throw;
  }
  out.write("config.json", dump(nlohmann::ordered_json(to_json(cfg))));
}

struct SegmentedSplit {
  std::vector<EvalUtterance> utts;
  std::vector<UtteranceEncoding> encs;
  std::vector<Segmentation> phones, words;
  double threshold = 0;
};

SegmentedSplit run_segmentation(const Options& o, const AppConfig& cfg, const Model<float>& model,
                                const Manifest& m) {
  SegmentedSplit s;
  s.threshold = cfg.eval.thresholds.front();
  if (o.threshold) {
    s.threshold = *o.threshold;
  } else if (cfg.eval.thresholds.size() > 1) {
    auto val = eval_utterances(m, "val");
    if (val.empty()) throw DataError("threshold selection needs a 'val' split (or pass --threshold)");
    auto venc = encode_utterances(model, val);
    s.threshold = select_threshold(venc, phone_references(val, venc), cfg.eval.thresholds,
                                   cfg.eval.min_separation, 0, cfg.eval.tolerance_ms)
                      .threshold;
  }
  s.utts = eval_utterances(m, o.split);
  if (s.utts.empty()) throw DataError("split '" + o.split + "' is empty");
  s.encs = encode_utterances(model, s.utts);
  s.phones = phone_segmentations(s.encs, s.threshold, cfg.eval.min_separation);
  if (model.has_segment_level())
    s.words = word_segmentations(model, s.utts, s.encs, s.phones, cfg.eval.word_prominence);
  return s;
}

void cmd_segment(const Options& o, const AppConfig& cfg, Outputs& out) {
  Manifest m = require_manifest(o, cfg);
  Model<float> model = require_model(o);
  SegmentedSplit s = run_segmentation(o, cfg, model, m);
  for (std::size_t i = 0; i < s.utts.size(); ++i) {
    const std::string id = s.utts[i].wave.utterance_id;
    out.write("phone/" + id + ".txt", boundary_file(s.phones[i], BoundaryKind::kPhone));
    if (!s.words.empty()) out.write("word/" + id + ".txt", boundary_file(s.words[i], BoundaryKind::kWord));
  }
  nlohmann::ordered_json j;
  j["threshold"] = s.threshold;
  j["split"] = o.split;
  j["utterances"] = s.utts.size();
  j["word_boundaries"] = !s.words.empty();
  out.write("segment.json", dump(j));
}

/// References and predictions for eval-seg / sweep-offset, read from boundary
/// files (--pred, optional --ref) and the manifest's alignments otherwise.
struct ScoringInput {
  std::vector<std::vector<double>> refs;
  std::vector<Segmentation> preds;
};

ScoringInput scoring_input(const Options& o, const AppConfig& cfg) {
  if (o.pred_dir.empty()) throw ConfigError("--pred is required");
  if (o.kind != "phone" && o.kind != "word") throw ConfigError("--kind must be phone or word");
  const BoundaryKind kind = o.kind == "phone" ? BoundaryKind::kPhone : BoundaryKind::kWord;
  ScoringInput in;
  std::vector<std::pair<std::string, std::int64_t>> items;  // id, duration in frames
  if (!o.ref_dir.empty()) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(o.ref_dir))
      if (e.path().extension() == ".txt") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      in.refs.push_back(boundary_times(read_boundary_file(f), kind));
      items.emplace_back(f.stem().string(), std::numeric_limits<std::int32_t>::max());
    }
  } else {
    Manifest m = require_manifest(o, cfg);
    for (const ManifestEntry* e : m.split(o.split)) {
      const std::string& rel = kind == BoundaryKind::kPhone ? e->phones : e->words;
      if (rel.empty()) throw DataError("no " + o.kind + " alignment for " + e->id);
      const Alignment al = load_alignment(m.resolve(rel), kind == BoundaryKind::kPhone
                                                              ? AlignmentLevel::kPhone
                                                              : AlignmentLevel::kWord);
      std::size_t n = e->num_samples;
      if (n == 0) n = load_wav(m.resolve(e->wav)).samples.size();
      const std::size_t covered = chunk_stream(n).covered_samples();
      in.refs.push_back(reference_ms(al, covered));
      items.emplace_back(e->id, std::int64_t(covered / kHopSamples));
    }
  }
  if (items.empty()) throw DataError("no reference utterances");
  for (const auto& [id, frames] : items) {
    const fs::path f = fs::path(o.pred_dir) / (id + ".txt");
    if (!fs::exists(f)) throw DataError("missing prediction file " + f.string());
    Segmentation seg;
    seg.num_frames = frames;
    for (double ms : boundary_times(read_boundary_file(f), kind)) {
      const double fr = ms / double(kFrameMs);
      if (fr != std::floor(fr))
        throw DataError(f.string() + ": boundary " + format_ms(ms) + " ms is off the 10 ms grid");
      seg.frames.push_back(std::int64_t(fr));
    }
    in.preds.push_back(std::move(seg));
  }
  (void)cfg;
  return in;
}

nlohmann::ordered_json report_config(const AppConfig& cfg) {
  return nlohmann::ordered_json::parse(nlohmann::json(to_json(cfg)).dump());
}

void cmd_eval_seg(const Options& o, const AppConfig& cfg, Outputs& out) {
  ScoringInput in = scoring_input(o, cfg);
  EvalReport rep;
  rep.offsets.push_back(
      evaluate_segmentations(in.refs, in.preds, cfg.eval.offset_ms, cfg.eval.tolerance_ms));
  rep.config = report_config(cfg);
  rep.seed = cfg.train.seed;
  out.write("eval.json", dump(to_json(rep)));
  out.write("eval.csv", curve_csv(rep.offsets));
}

void cmd_sweep(const Options& o, const AppConfig& cfg, Outputs& out) {
  ScoringInput in = scoring_input(o, cfg);
  SweepResult sw = offset_sweep(in.refs, in.preds, default_sweep_offsets(), cfg.eval.tolerance_ms);
  EvalReport rep;
  rep.offsets = sw.curve;
  rep.best_offset_ms = sw.best_offset_ms;
  rep.config = report_config(cfg);
  rep.seed = cfg.train.seed;
  out.write("sweep.json", dump(to_json(rep)));
  out.write("sweep.csv", curve_csv(sw.curve));
}

void cmd_probe(const Options& o, const AppConfig& cfg, Outputs& out) {
  Manifest m = require_manifest(o, cfg);
  Model<float> model = require_model(o);
  auto ids = manifest_label_ids(m);
  if (ids.size() < 2) throw DataError("manifest lists fewer than two phone labels");
  const bool ctx = cfg.eval.representation == Representation::kContext;
  auto train = eval_utterances(m, "train");
  auto test = eval_utterances(m, o.split);
  if (train.empty() || test.empty()) throw DataError("probe needs 'train' and '" + o.split + "' splits");
  ProbeOptions po;
  po.epochs = cfg.eval.probe_epochs;
  po.learning_rate = cfg.eval.probe_lr;
  po.seed = cfg.train.seed;
  const double acc = linear_probe(probe_data(train, encode_utterances(model, train), ids, ctx),
                                  probe_data(test, encode_utterances(model, test), ids, ctx),
                                  ids.size(), po);
  EvalReport rep;
  rep.probe_accuracy = acc;
  rep.config = report_config(cfg);
  rep.seed = cfg.train.seed;
  out.write("probe.json", dump(to_json(rep)));
}

void cmd_abx(const Options& o, const AppConfig& cfg, Outputs& out) {
  Manifest m = require_manifest(o, cfg);
  Model<float> model = require_model(o);
  auto ids = manifest_label_ids(m);
  auto utts = eval_utterances(m, o.split);
  const bool ctx = cfg.eval.representation == Representation::kContext;
  auto items = abx_items(utts, encode_utterances(model, utts), ids, ctx);
  EvalReport rep;
  Rng rng = make_rng(cfg.train.seed, {tag(Stream::kAbx)});
  auto within = sample_abx_triples(items, AbxMode::kWithinSpeaker, cfg.eval.abx_triples, rng);
  auto across = sample_abx_triples(items, AbxMode::kAcrossSpeaker, cfg.eval.abx_triples, rng);
  if (within.empty() && across.empty()) throw DataError("no ABX triples could be formed");
  if (!within.empty()) rep.abx_within = abx_error(items, within);
  if (!across.empty()) rep.abx_across = abx_error(items, across);
  rep.config = report_config(cfg);
  rep.seed = cfg.train.seed;
  out.write("abx.json", dump(to_json(rep)));
}

/// "CPCSEGR1", u32 dims, u64 count, u32 dtype (1 = float32), then
/// count * dims little-endian float32 values, row-major.
std::string repr_blob(const FrameMatrix& f) {
  std::string out = "CPCSEGR1";
  auto put = [&](std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
  };
  put(std::uint64_t(f.cols()), 4);
  put(std::uint64_t(f.rows()), 8);
  put(1, 4);
  for (Eigen::Index r = 0; r < f.rows(); ++r)
    for (Eigen::Index c = 0; c < f.cols(); ++c) append_f32_le(out, float(f(r, c)));
  return out;
}

void cmd_export(const Options& o, const AppConfig& cfg, Outputs& out) {
  Manifest m = require_manifest(o, cfg);
  Model<float> model = require_model(o);
  auto utts = eval_utterances(m, o.split);
  for (std::size_t i = 0; i < utts.size(); ++i) {
    UtteranceEncoding e = encode_utterance(model, utts[i].wave);
    out.write("z/" + e.id + ".bin", repr_blob(e.z));
    out.write("c/" + e.id + ".bin", repr_blob(e.c));
  }
}

struct Failure {
  int code;
  const char* kind;
};

Failure classify(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return {2, "config"};
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const ShapeError*>(&e)) return {3, "data"};
  if (dynamic_cast<const NumericError*>(&e)) return {4, "numeric"};
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return {3, "data"};
  return {1, "internal"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cpcseg: contrastive predictive coding for unsupervised phone and word segmentation"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "TOML-style config file");
    sub->add_option("--set", o.sets, "override section.key=value (repeatable)");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--seed", o.seed, "shorthand for --set train.seed=N");
  };
  auto with_data = [&](CLI::App* sub) {
    sub->add_option("--manifest", o.manifest, "corpus manifest (cpcseg-manifest-v1)");
    sub->add_option("--split", o.split, "manifest split to process");
  };
  auto with_model = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", o.checkpoint, "checkpoint path without suffix");
  };
  auto with_scoring = [&](CLI::App* sub) {
    sub->add_option("--pred", o.pred_dir, "directory of predicted boundary files")->required();
    sub->add_option("--ref", o.ref_dir, "directory of reference boundary files (else manifest)");
    sub->add_option("--kind", o.kind, "phone or word");
  };

  std::vector<std::pair<CLI::App*, void (*)(const Options&, const AppConfig&, Outputs&)>> cmds;
  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus and manifest");
  common(synth);
  cmds.emplace_back(synth, cmd_synth);
  auto* train = app.add_subcommand("train", "train a model on the manifest's train split");
  common(train);
  with_data(train);
  cmds.emplace_back(train, cmd_train);
  auto* segment = app.add_subcommand("segment", "write boundary files for a split");
  common(segment);
  with_data(segment);
  with_model(segment);
  segment->add_option("--threshold", o.threshold, "fixed peak prominence (skips selection)");
  cmds.emplace_back(segment, cmd_segment);
  auto* eval = app.add_subcommand("eval-seg", "score boundary files");
  common(eval);
  with_data(eval);
  with_scoring(eval);
  eval->add_option("--offset-ms", o.offset_ms, "shift predictions before scoring (multiple of 10)");
  cmds.emplace_back(eval, cmd_eval_seg);
  auto* sweep = app.add_subcommand("sweep-offset", "score boundary files at offsets -50..50 ms");
  common(sweep);
  with_data(sweep);
  with_scoring(sweep);
  cmds.emplace_back(sweep, cmd_sweep);
  auto* probe = app.add_subcommand("probe", "frame-wise linear phone probe");
  common(probe);
  with_data(probe);
  with_model(probe);
  cmds.emplace_back(probe, cmd_probe);
  auto* abx = app.add_subcommand("abx", "within/across-speaker ABX error");
  common(abx);
  with_data(abx);
  with_model(abx);
  cmds.emplace_back(abx, cmd_abx);
  auto* exp = app.add_subcommand("export-reprs", "dump z and c vectors per utterance");
  common(exp);
  with_data(exp);
  with_model(exp);
  cmds.emplace_back(exp, cmd_export);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "cpcseg-error code=2 kind=usage message=" << nlohmann::json(e.what()).dump() << "\n";
    return 2;
  }

  Outputs out{fs::path(o.out)};
  std::string name;
  try {
    const AppConfig cfg = load_config(o);
    fs::create_directories(o.out);
    const std::string started = utc_now();
    for (auto& [sub, fn] : cmds) {
      if (!sub->parsed()) continue;
      name = sub->get_name();
      fn(o, cfg, out);
    }
    nlohmann::ordered_json meta;
    meta["command"] = name;
    meta["started"] = started;
    meta["finished"] = utc_now();
    write_file_atomic(out.path(name + ".meta.json"), dump(meta));
  } catch (const std::exception& e) {
    out.rollback();
    const Failure f = classify(e);
    std::cerr << "cpcseg-error code=" << f.code << " kind=" << f.kind
              << " message=" << nlohmann::json(std::string(e.what())).dump() << "\n";
    return f.code;
  }
  return 0;
}
