// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cpcseg/cpcseg.hpp"

using namespace cpcseg;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "cpcseg_cli_test";

struct CliRun {
  int code = 0;
  std::string err;
};

CliRun cli(const std::string& args) {
  const fs::path err = kRoot / "stderr.txt";
  fs::create_directories(kRoot);
  const std::string cmd = std::string(CPCSEG_CLI) + " " + args + " 2>" + err.string() + " >/dev/null";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = read_file(err);
  return r;
}

std::string slurp(const fs::path& p) { return read_file(p); }

nlohmann::json json_at(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

fs::path fresh(const std::string& name) {
  const fs::path d = kRoot / name;
  fs::remove_all(d);
  return d;
}

const std::string kTiny =
    "--set model.dim=16 --set model.context_units=16 --set model.segment_hidden=24 "
    "--set model.attention_heads=4 --set model.attention_ff=32 --set train.epochs=1 "
    "--set train.batch_size=4 ";

// A small corpus shared by the end-to-end cases.
const fs::path& corpus() {
  static const fs::path dir = [] {
    const fs::path d = fresh("corpus");
    CliRun r = cli("synth --out " + d.string() +
                " --set corpus.n_train=6 --set corpus.n_val=3 --set corpus.n_test=3");
    EXPECT_EQ(r.code, 0) << r.err;
    return d;
  }();
  return dir;
}

// Reference and prediction boundary directories with predictions shifted.
void write_shifted(const fs::path& dir, double shift_ms) {
  const std::vector<std::vector<double>> refs{{100, 250, 400, 620}, {150, 330, 480}, {90, 300}};
  for (std::size_t u = 0; u < refs.size(); ++u) {
    std::string ref, pred;
    for (double t : refs[u]) {
      ref += format_ms(t) + "\tphone\n";
      pred += format_ms(t + shift_ms) + "\tphone\n";
    }
    write_text(dir / "ref" / ("u" + std::to_string(u) + ".txt"), ref);
    write_text(dir / "pred" / ("u" + std::to_string(u) + ".txt"), pred);
  }
}

}  // namespace

TEST(Cli, UsageAndConfigErrorsExitTwoWithOneLine) {
  CliRun r = cli("");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("cpcseg-error code=2", 0), 0u) << r.err;
  r = cli("synth --out " + fresh("bad").string() + " --set model.K=13");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("cpcseg-error code=2 kind=config message=", 0), 0u) << r.err;
  EXPECT_NE(r.err.find("model.K"), std::string::npos);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
  r = cli("synth --out " + fresh("bad").string() + " --set model.bogus=1");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("model.bogus"), std::string::npos);
}

TEST(Cli, MissingDataExitsThree) {
  CliRun r = cli("train --out " + fresh("nodata").string() + " --manifest /nonexistent/manifest.json");
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(r.err.rfind("cpcseg-error code=3 kind=data", 0), 0u) << r.err;
  r = cli("eval-seg --out " + fresh("nodata").string() + " --pred /nonexistent --ref /nonexistent");
  EXPECT_EQ(r.code, 3);
}

TEST(Cli, IdenticalFilesScorePerfectly) {
  const fs::path d = fresh("ident");
  write_shifted(d, 0);
  CliRun r = cli("eval-seg --out " + (d / "out").string() + " --pred " + (d / "ref").string() + " --ref " +
              (d / "ref").string());
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = json_at(d / "out" / "eval.json");
  EXPECT_EQ(j["offsets"]["0"]["r_value"].get<double>(), 1.0);
  EXPECT_EQ(j["offsets"]["0"]["f1"].get<double>(), 1.0);
  EXPECT_TRUE(fs::exists(d / "out" / "eval.csv"));
  EXPECT_TRUE(fs::exists(d / "out" / "eval-seg.meta.json"));
}

TEST(Cli, SweepFindsInverseShift) {
  const fs::path d = fresh("sweep");
  write_shifted(d, 10);
  CliRun r = cli("sweep-offset --out " + (d / "out").string() + " --pred " + (d / "pred").string() +
              " --ref " + (d / "ref").string() + " --set eval.tolerance_ms=0");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json_at(d / "out" / "sweep.json")["best_offset_ms"].get<int>(), -10);
  // The CSV's best row is the -10 row.
  std::istringstream csv(slurp(d / "out" / "sweep.csv"));
  std::string line, best_row;
  double best = -1e9;
  std::getline(csv, line);
  EXPECT_EQ(line, "offset_ms,precision,recall,f1,r_value");
  int rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    const double rv = std::stod(line.substr(line.rfind(',') + 1));
    if (rv > best) best = rv, best_row = line;
  }
  EXPECT_EQ(rows, 11);
  EXPECT_EQ(best_row.substr(0, best_row.find(',')), "-10");
}

TEST(Cli, OffsetFlagUndoesShift) {
  const fs::path d = fresh("offset");
  write_shifted(d, 20);
  CliRun a = cli("eval-seg --out " + (d / "a").string() + " --pred " + (d / "pred").string() + " --ref " +
              (d / "ref").string() + " --offset-ms -20");
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(json_at(d / "a" / "eval.json")["offsets"]["-20"]["r_value"].get<double>(), 1.0);
  CliRun bad = cli("eval-seg --out " + (d / "b").string() + " --pred " + (d / "pred").string() +
                " --ref " + (d / "ref").string() + " --offset-ms 15");
  EXPECT_EQ(bad.code, 2);
}

TEST(Cli, FailedRunLeavesNoPartialOutputs) {
  const fs::path d = fresh("partial");
  write_shifted(d, 0);
  fs::remove(d / "pred" / "u2.txt");
  CliRun r = cli("eval-seg --out " + (d / "out").string() + " --pred " + (d / "pred").string() + " --ref " +
              (d / "ref").string());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("u2.txt"), std::string::npos);
  EXPECT_FALSE(fs::exists(d / "out" / "eval.json"));
  // segment writes several files before failing on a missing checkpoint.
  CliRun s = cli("segment --out " + (d / "seg").string() + " --manifest " +
              (corpus() / "manifest.json").string() + " --checkpoint " + (d / "none").string());
  EXPECT_EQ(s.code, 3);
  EXPECT_TRUE(!fs::exists(d / "seg") || fs::is_empty(d / "seg"));
}

TEST(Cli, SynthIsReproducible) {
  const fs::path again = fresh("corpus_again");
  ASSERT_EQ(cli("synth --out " + again.string() +
                " --set corpus.n_train=6 --set corpus.n_val=3 --set corpus.n_test=3")
                .code,
            0);
  for (const auto& e : fs::recursive_directory_iterator(corpus())) {
    if (!e.is_regular_file() || e.path().filename() == "synth.meta.json") continue;
    const fs::path other = again / fs::relative(e.path(), corpus());
    EXPECT_EQ(slurp(e.path()), slurp(other)) << other;
  }
  EXPECT_EQ(load_manifest(corpus() / "manifest.json").split("train").size(), 6u);
}

TEST(Cli, TrainSegmentEvaluateEndToEnd) {
  const std::string man = " --manifest " + (corpus() / "manifest.json").string() + " ";
  const fs::path a = fresh("e2e_a"), b = fresh("e2e_b");
  const std::string train = "train " + kTiny + "--set model.segment_level_enabled=true" + man;
  ASSERT_EQ(cli(train + "--out " + a.string()).code, 0);
  ASSERT_EQ(cli(train + "--out " + b.string()).code, 0);
  for (const char* f : {"model.bin", "model.json", "runlog.jsonl", "config.json"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  EXPECT_TRUE(fs::exists(a / "timing.jsonl"));

  const std::string seg = "segment" + man + "--checkpoint " + (a / "model").string();
  ASSERT_EQ(cli(seg + " --out " + (a / "seg").string()).code, 0);
  ASSERT_EQ(cli(seg + " --out " + (b / "seg").string()).code, 0);
  EXPECT_EQ(slurp(a / "seg" / "segment.json"), slurp(b / "seg" / "segment.json"));
  EXPECT_EQ(json_at(a / "seg" / "segment.json")["utterances"].get<int>(), 3);
  EXPECT_TRUE(json_at(a / "seg" / "segment.json")["word_boundaries"].get<bool>());

  const std::string ev = "eval-seg" + man + "--pred " + (a / "seg" / "phone").string();
  ASSERT_EQ(cli(ev + " --out " + (a / "ev").string()).code, 0);
  ASSERT_EQ(cli(ev + " --out " + (b / "ev").string()).code, 0);
  EXPECT_EQ(slurp(a / "ev" / "eval.json"), slurp(b / "ev" / "eval.json"));
  EXPECT_EQ(slurp(a / "ev" / "eval.csv"), slurp(b / "ev" / "eval.csv"));
  const double rv = json_at(a / "ev" / "eval.json")["offsets"]["0"]["r_value"];
  EXPECT_TRUE(std::isfinite(rv));

  const std::string model = man + "--checkpoint " + (a / "model").string() + " --out ";
  ASSERT_EQ(cli("probe" + model + (a / "probe").string()).code, 0);
  const double acc = json_at(a / "probe" / "probe.json")["probe_accuracy"];
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  ASSERT_EQ(cli("abx --set eval.abx_triples=50" + model + (a / "abx").string()).code, 0);
  EXPECT_TRUE(json_at(a / "abx" / "abx.json").contains("abx_within"));

  ASSERT_EQ(cli("export-reprs" + model + (a / "reprs").string()).code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a / "reprs" / "z")) {
    const std::string blob = slurp(e.path());
    ASSERT_GE(blob.size(), 24u);
    EXPECT_EQ(blob.substr(0, 8), "CPCSEGR1");
    std::uint32_t dims = 0, dtype = 0;
    std::uint64_t count = 0;
    std::memcpy(&dims, blob.data() + 8, 4);
    std::memcpy(&count, blob.data() + 12, 8);
    std::memcpy(&dtype, blob.data() + 20, 4);
    EXPECT_EQ(dims, 16u);
    EXPECT_EQ(dtype, 1u);
    EXPECT_EQ(blob.size(), 24 + 4 * dims * count);
    ++files;
  }
  EXPECT_EQ(files, 3u);
}

TEST(Cli, OracleModelSegmentsWordsOverTruePhones) {
  const std::string man = " --manifest " + (corpus() / "manifest.json").string() + " ";
  const fs::path d = fresh("oracle");
  ASSERT_EQ(cli("train " + kTiny +
                "--set model.segment_level_enabled=true --set model.oracle_boundaries=true" + man +
                "--out " + d.string())
                .code,
            0);
  ASSERT_EQ(cli("segment" + man + "--checkpoint " + (d / "model").string() + " --out " +
                (d / "seg").string())
                .code,
            0);
  const Manifest m = load_manifest(corpus() / "manifest.json");
  for (const ManifestEntry* e : m.split("test")) {
    std::set<double> phone_ms;
    for (std::int64_t b : load_alignment(m.resolve(e->phones), AlignmentLevel::kPhone).boundaries())
      phone_ms.insert(double((b + 80) / 160) * 10.0);
    const auto words = boundary_times(read_boundary_file(d / "seg" / "word" / (e->id + ".txt")),
                                      BoundaryKind::kWord);
    for (double w : words) EXPECT_TRUE(phone_ms.count(w)) << e->id << " word boundary " << w;
  }
}
