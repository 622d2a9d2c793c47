// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <filesystem>

#include "cpcseg/cpcseg.hpp"

using namespace cpcseg;
namespace fs = std::filesystem;

namespace {

ModelConfig small(Variant v) {
  ModelConfig c;
  c.dim = 16;
  c.context_layers = 1;
  c.context_units = 16;
  c.segment_hidden = 24;
  c.segment_context_layers = 1;
  c.attention_heads = 4;
  c.attention_ff = 32;
  return preset(v, c);
}

TrainConfig train_config(Variant v, std::uint64_t seed = 1) {
  TrainConfig t;
  t.model = small(v);
  t.epochs = 1;
  t.batch_size = 2;
  t.seed = seed;
  return t;
}

const std::vector<TrainChunk>& corpus_chunks() {
  static const std::vector<TrainChunk> chunks = [] {
    SynthSpec spec;
    auto c = make_train_chunks(synth_corpus(spec, 4));
    c.resize(std::min<std::size_t>(c.size(), 6));
    return c;
  }();
  return chunks;
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "cpcseg_trainer_test";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<std::uint32_t> bits(const Tensor<float>& t) {
  std::vector<std::uint32_t> out;
  for (float v : t.values()) out.push_back(std::bit_cast<std::uint32_t>(v));
  return out;
}

}  // namespace

TEST(TrainConfigTest, Validation) {
  TrainConfig t = train_config(Variant::kAcpc);
  EXPECT_NO_THROW(t.validate());
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = train_config(Variant::kAcpc);
  t.adam.lr = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = train_config(Variant::kAcpc);
  EXPECT_EQ(config_hash(to_json(t)), config_hash(to_json(train_config(Variant::kAcpc))));
  t.seed = 2;
  EXPECT_NE(config_hash(to_json(t)), config_hash(to_json(train_config(Variant::kAcpc))));
}

TEST(Fit, AcpcLogHasNoSegmentOrAdjacentColumns) {
  auto r = fit<float>(train_config(Variant::kAcpc), corpus_chunks());
  ASSERT_EQ(r.log.steps.size(), 3u);
  const std::string log = r.log.jsonl();
  EXPECT_EQ(log.find("\"segment\""), std::string::npos);
  EXPECT_EQ(log.find("\"adjacent\""), std::string::npos);
  EXPECT_NE(log.find("\"frame\""), std::string::npos);
  for (std::size_t i = 0; i < r.log.steps.size(); ++i) EXPECT_EQ(r.log.steps[i].step, i);
}

TEST(Fit, MacpcAdjacentLogsEveryComponent) {
  auto r = fit<float>(train_config(Variant::kMacpcAdjacent), corpus_chunks());
  for (const auto& s : r.log.steps) {
    EXPECT_TRUE(s.frame && s.segment && s.adjacent);
    EXPECT_NEAR(s.total, *s.frame + *s.segment + *s.adjacent, 1e-4);
  }
}

TEST(Fit, CpcM1UsesOneHeadAndNoAlignment) {
  TrainConfig t = train_config(Variant::kCpcM1);
  EXPECT_EQ(t.model.K, 1u);
  EXPECT_EQ(t.model.M, 1u);
  const auto before = counters().alignment_calls;
  fit<float>(t, corpus_chunks());
  EXPECT_EQ(counters().alignment_calls, before);
  // The aligned variant does run the alignment.
  fit<float>(train_config(Variant::kAcpc), corpus_chunks());
  EXPECT_GT(counters().alignment_calls, before);
}

TEST(Fit, OracleModeUsesTrueSpansAndNeverDetectsPeaks) {
  TrainConfig t = train_config(Variant::kMacpc);
  t.model.oracle_boundaries = true;
  Model<float> model(t.model, 3);
  for (const auto& ch : corpus_chunks()) {
    Rng neg = make_rng(1), drop = make_rng(2);
    auto fl = forward_losses(model, ch.samples, ch.phone_frames, neg, drop);
    ASSERT_TRUE(fl.segmentation);
    EXPECT_EQ(fl.segmentation->frames, *ch.phone_frames);
    EXPECT_EQ(fl.segmentation->provenance.source, Provenance::Source::kOracle);
  }
  const auto before = counters().detect_peaks_calls;
  fit<float>(t, corpus_chunks());
  EXPECT_EQ(counters().detect_peaks_calls, before);

  auto missing = corpus_chunks();
  missing[1].phone_frames.reset();
  EXPECT_THROW(fit<float>(t, missing), DataError);
}

TEST(Fit, DetectedModeRecomputesBoundariesEveryChunk) {
  const auto before = counters().detect_peaks_calls;
  fit<float>(train_config(Variant::kMacpc), corpus_chunks());
  EXPECT_EQ(counters().detect_peaks_calls - before, corpus_chunks().size());
}

TEST(Fit, IdenticalConfigsGiveIdenticalRunsAndCheckpoints) {
  TrainConfig t = train_config(Variant::kMacpcAdjacent, 9);
  auto a = fit<float>(t, corpus_chunks());
  auto b = fit<float>(t, corpus_chunks());
  EXPECT_EQ(a.log.jsonl(), b.log.jsonl());
  save_checkpoint(a.model, temp_path("det_a"));
  save_checkpoint(b.model, temp_path("det_b"));
  EXPECT_EQ(read_file(temp_path("det_a.bin")), read_file(temp_path("det_b.bin")));
  EXPECT_EQ(read_file(temp_path("det_a.json")), read_file(temp_path("det_b.json")));
  t.seed = 10;
  EXPECT_NE(fit<float>(t, corpus_chunks()).log.jsonl(), a.log.jsonl());
}

TEST(Fit, StepZeroLossMatchesUniformScores) {
  // Frame term ln(N+1) plus segment term ln(N_s+1), averaged over 5 seeds.
  double total = 0;
  ModelConfig mc = small(Variant::kMacpc);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    TrainConfig t = train_config(Variant::kMacpc, seed);
    t.batch_size = corpus_chunks().size();
    total += fit<float>(t, corpus_chunks()).log.steps.at(0).total;
  }
  const double expected = std::log(double(mc.negatives) + 1) + std::log(double(mc.segment_negatives) + 1);
  EXPECT_NEAR(total / 5, expected, 0.3);
}

TEST(Fit, LossesFallOverShortTraining) {
  TrainConfig t = train_config(Variant::kAcpcAdjacent, 4);
  t.epochs = 15;
  t.batch_size = 3;
  t.adam.lr = 1e-3;
  auto r = fit<float>(t, corpus_chunks());
  const auto& s = r.log.steps;
  ASSERT_EQ(s.size(), 30u);
  auto mean = [&](std::size_t lo, std::size_t hi, auto get) {
    double acc = 0;
    for (std::size_t i = lo; i < hi; ++i) acc += get(s[i]);
    return acc / double(hi - lo);
  };
  auto frame = [](const StepRecord& r) { return *r.frame; };
  auto adjacent = [](const StepRecord& r) { return *r.adjacent; };
  EXPECT_LT(mean(24, 30, frame), mean(0, 6, frame));
  EXPECT_LT(mean(24, 30, adjacent), mean(0, 6, adjacent));
}

TEST(Fit, NonFiniteInputAbortsWithStepRecorded) {
  auto chunks = corpus_chunks();
  chunks.resize(2);
  chunks[1].samples[100] = std::nanf("");
  TrainConfig t = train_config(Variant::kAcpc);
  t.batch_size = 1;
  RunLog partial;
  try {
    fit<float>(t, chunks, {}, &partial);
    FAIL() << "NaN input accepted";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
  ASSERT_TRUE(partial.failed_step.has_value());
  EXPECT_LE(*partial.failed_step, 1u);
  EXPECT_NE(partial.jsonl().find("\"error\""), std::string::npos);
}

TEST(Fit, CheckpointHookFires) {
  TrainConfig t = train_config(Variant::kAcpc);
  t.batch_size = 1;
  t.checkpoint_every = 2;
  std::vector<std::size_t> at;
  FitHooks hooks;
  hooks.on_checkpoint = [&](std::size_t s) { at.push_back(s); };
  fit<float>(t, corpus_chunks(), hooks);
  EXPECT_EQ(at, (std::vector<std::size_t>{1, 3, 5}));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ModelConfig mc = small(Variant::kMacpcAdjacent);
  Model<float> m(mc, 5);
  save_checkpoint(m, temp_path("rt"));
  Model<float> back = load_checkpoint<float>(temp_path("rt"));
  EXPECT_EQ(to_json(back.config()), to_json(mc));
  auto a = m.named_parameters(), b = back.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(bits(a[i].second), bits(b[i].second)) << a[i].first;
  const auto& ch = corpus_chunks()[0];
  NoGradGuard g;
  auto za = m.encode_frames(Chunk{ch.samples, kSampleRate, 0});
  auto zb = back.encode_frames(Chunk{ch.samples, kSampleRate, 0});
  EXPECT_EQ(bits(m.build_context(za.vectors)), bits(back.build_context(zb.vectors)));
}

TEST(Checkpoint, TruncatedBlobNamesParameter) {
  Model<float> m(small(Variant::kAcpc), 5);
  save_checkpoint(m, temp_path("trunc"));
  std::string blob = read_file(temp_path("trunc.bin"));
  blob.resize(blob.size() - 8);
  write_file_atomic(temp_path("trunc.bin"), blob);
  try {
    load_checkpoint<float>(temp_path("trunc"));
    FAIL() << "truncated blob accepted";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("size mismatch for parameter '"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, OtherConfigOrVersionRejected) {
  Model<float> m(small(Variant::kAcpc), 5);
  save_checkpoint(m, temp_path("other"));
  ModelConfig different = small(Variant::kAcpc);
  different.dim = 32;
  different.context_units = 32;
  EXPECT_THROW(load_checkpoint<float>(temp_path("other"), &different), ShapeError);
  ModelConfig seg = small(Variant::kMacpc);
  EXPECT_THROW(load_checkpoint<float>(temp_path("other"), &seg), ShapeError);

  auto man = nlohmann::json::parse(read_file(temp_path("other.json")));
  man["format"] = "cpcseg-ckpt-v0";
  write_file_atomic(temp_path("other.json"), man.dump());
  try {
    load_checkpoint<float>(temp_path("other"));
    FAIL() << "old version accepted";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  EXPECT_THROW(load_checkpoint<float>(temp_path("does_not_exist")), DataError);
}
