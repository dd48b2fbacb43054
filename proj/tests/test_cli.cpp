// Runs the paattack binary end to end on a small toy-encoder fixture.
#include "paattack/harness.hpp"
#include "paattack/micro_encoder.hpp"
#include "paattack/run_config.hpp"
#include "paattack/run_io.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <map>

using namespace paattack;

namespace {

const std::string kCli = PAATTACK_CLI;

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

Result run(const std::string& args, const fs::path& work) {
  const fs::path out = work / "stdout.txt", err = work / "stderr.txt";
  const std::string cmd = "'" + kCli + "' " + args + " > '" + out.string() + "' 2> '" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(out.string());
  r.err = read_file(err.string());
  fs::remove(out);
  fs::remove(err);
  return r;
}

fs::path fresh(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("paattack_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = read_file(e.path().string());
  return files;
}

const std::string kCommon = " --encoder-preset toy --seed 3 --s1 3 --s2 3";

// make-fixture -> build-prototypes -> attack -> evaluate -> diagnose, all
// under one root.
void pipeline(const fs::path& root, const std::string& attack_extra = "") {
  const std::string r = "'" + root.string() + "'";
  ASSERT_EQ(run("make-fixture --out " + r + "/fx --guide-count 12 --eval-count 4 --probe-count 24" + kCommon, root).code, 0);
  ASSERT_EQ(run("build-prototypes --guidance-dir " + r + "/fx/guide --input " + r + "/fx/eval --bank " + r +
                    "/bank/bank.pab --pca-dim 6 --clusters 3" + kCommon,
                root)
                .code,
            0);
  ASSERT_EQ(run("attack --input " + r + "/fx/eval --bank " + r + "/bank/bank.pab --out " + r + "/run" + kCommon +
                    attack_extra,
                root)
                .code,
            0);
  ASSERT_EQ(run("evaluate --input " + r + "/run --probe-dir " + r + "/fx/probe" + kCommon, root).code, 0);
  ASSERT_EQ(run("diagnose --input " + r + "/run --probe-dir " + r + "/fx/probe --proportions 0,0.5,1" + kCommon, root)
                .code,
            0);
}

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fresh("pipeline");
    pipeline(root_);
  }
  static fs::path root_;
};
fs::path CliPipeline::root_;

}  // namespace

TEST_F(CliPipeline, ProducesTheDocumentedTree) {
  const auto files = tree(root_);
  for (const char* f : {"bank/bank.pab", "bank/bank.pab.manifest.json", "run/run.json", "run/summary.csv",
                        "run/report.json", "run/diagnostics/attention_shift.csv", "run/diagnostics/mask_curve.csv",
                        "run/traces/eval-0/clean.tensor", "run/traces/eval-0/adv.tensor",
                        "run/traces/eval-0/losses.csv", "run/traces/eval-0/weights.csv",
                        "run/traces/eval-0/trace.json", "run/diagnostics/token_deviation/eval-3.csv",
                        "fx/probe/labels.csv"})
    EXPECT_TRUE(files.contains(f)) << f;
  const Json manifest = read_json((root_ / "bank/bank.pab.manifest.json").string());
  int total = 0;
  for (int s : manifest["cluster_sizes"].get<std::vector<int>>()) total += s;
  EXPECT_EQ(total, 12);
  EXPECT_EQ(manifest["K"], 3);
}

TEST_F(CliPipeline, EveryRecordedStepStaysInTheBudget) {
  const CsvTable summary = read_csv((root_ / "run/summary.csv").string());
  ASSERT_EQ(summary.rows.size(), 4u);
  for (const auto& row : summary.rows) {
    EXPECT_EQ(row[summary.column("status")], "ok");
    EXPECT_LE(parse_number(row[summary.column("linf")]), 2.0 / 255.0);
    const CsvTable losses = read_csv((root_ / "run/traces" / row[0] / "losses.csv").string());
    EXPECT_EQ(losses.rows.size(), 6u);
    for (const auto& l : losses.rows) EXPECT_LE(parse_number(l[losses.column("linf")]), 2.0 / 255.0);
  }
}

TEST_F(CliPipeline, ReportMatchesRecomputationFromTraces) {
  RunConfig c;
  c.encoder.preset = "toy";
  c.io.seed = 3;
  const MicroEncoder<double> enc(c.encoder_config());
  std::vector<LabeledImage> probe;
  const auto labels = read_labels((root_ / "fx/probe").string());
  for (const auto& p : list_images((root_ / "fx/probe").string()))
    probe.push_back({image_id(p), labels.at(image_id(p)), load_image<double>(p.string())});
  const SurrogateTask task = train_probe(enc, probe, c.seed_for("probe"));

  const CsvTable summary = read_csv((root_ / "run/summary.csv").string());
  std::vector<ImageTensor<double>> clean, adv;
  std::vector<int> y;
  for (const auto& row : summary.rows) {
    const fs::path t = root_ / "run/traces" / row[0];
    clean.push_back(load_image<double>((t / "clean.tensor").string()));
    adv.push_back(load_image<double>((t / "adv.tensor").string()));
    y.push_back(static_cast<int>(parse_number(row[summary.column("label")])));
  }
  const SrrReport expect = srr(score_images(enc, task, clean, y), score_images(enc, task, adv, y));
  const Json report = read_json((root_ / "run/report.json").string());
  EXPECT_EQ(report["score_clean"].get<double>(), expect.score_clean);
  EXPECT_EQ(report["score_adv"].get<double>(), expect.score_adv);
  EXPECT_EQ(report["srr"].get<double>(), expect.srr);
}

TEST_F(CliPipeline, DiagnosticsShapes) {
  const CsvTable shift = read_csv((root_ / "run/diagnostics/attention_shift.csv").string());
  EXPECT_EQ(shift.rows.size(), 4u);
  const CsvTable dev = read_csv((root_ / "run/diagnostics/token_deviation/eval-0.csv").string());
  EXPECT_EQ(dev.rows.size(), 6u);         // S1 + S2
  EXPECT_EQ(dev.header.size(), 1u + 4u);  // step + N tokens
  const CsvTable curve = read_csv((root_ / "run/diagnostics/mask_curve.csv").string());
  EXPECT_EQ(curve.rows.size(), 6u);
  EXPECT_EQ(curve.rows[0][curve.column("ratio")], "1");
}

TEST_F(CliPipeline, ByteIdenticalAcrossRunsAndJobCounts) {
  const fs::path again = fresh("pipeline_again");
  pipeline(again, " --jobs 3");
  const auto a = tree(root_), b = tree(again);
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [path, bytes] : a) {
    ASSERT_TRUE(b.contains(path)) << path;
    EXPECT_TRUE(b.at(path) == bytes) << path;
  }
}

TEST_F(CliPipeline, CleanOnlyAndGridEvaluation) {
  const fs::path out = fresh("eval_grid");
  const std::string r = "'" + root_.string() + "'";
  const Result res = run("evaluate --input " + r + "/run --probe-dir " + r + "/fx/probe --clean-only on --out '" +
                             out.string() + "' --grid 'guidance=on,off;stages=1,2' --bank " + r + "/bank/bank.pab" +
                             kCommon,
                         out);
  ASSERT_EQ(res.code, 0) << res.err;
  EXPECT_EQ(read_json((out / "report.json").string())["srr"].get<double>(), 0.0);
  EXPECT_EQ(read_csv((out / "ablation.csv").string()).rows.size(), 4u);

  const Result retrieval =
      run("evaluate --input " + r + "/run --task retrieval --out '" + out.string() + "/ret'" + kCommon, out);
  ASSERT_EQ(retrieval.code, 0) << retrieval.err;
  EXPECT_EQ(read_json((out / "ret/report.json").string())["score_clean"].get<double>(), 1.0);
}

TEST_F(CliPipeline, RebuiltBankIsByteIdentical) {
  const fs::path out = fresh("bank_again");
  const std::string r = "'" + root_.string() + "'";
  ASSERT_EQ(run("build-prototypes --guidance-dir " + r + "/fx/guide --bank '" + out.string() +
                    "/b.pab' --pca-dim 6 --clusters 3" + kCommon,
                out)
                .code,
            0);
  EXPECT_EQ(read_file((out / "b.pab").string()), read_file((root_ / "bank/bank.pab").string()));
}

TEST_F(CliPipeline, MissingDeviationRecordsWarn) {
  const fs::path out = fresh("nodev");
  const std::string r = "'" + root_.string() + "'";
  ASSERT_EQ(run("attack --input " + r + "/fx/eval --bank " + r + "/bank/bank.pab --out '" + out.string() +
                    "/run' --record-deviation off" + kCommon,
                out)
                .code,
            0);
  const Result diag = run("diagnose --input '" + out.string() + "/run'" + kCommon, out);
  ASSERT_EQ(diag.code, 0);
  EXPECT_NE(diag.err.find("WARNING: trace eval-0 has no deviation records"), std::string::npos);
  EXPECT_NE(diag.err.find("mask curve skipped"), std::string::npos);
  EXPECT_FALSE(fs::exists(out / "run/diagnostics/token_deviation"));
  EXPECT_TRUE(fs::exists(out / "run/diagnostics/attention_shift.csv"));
}

TEST_F(CliPipeline, CorruptImagesAreIsolated) {
  const fs::path out = fresh("corrupt");
  fs::create_directories(out / "in");
  fs::copy_file(root_ / "fx/eval/eval-0.tensor", out / "in/a.tensor");
  fs::copy_file(root_ / "fx/eval/eval-1.tensor", out / "in/c.tensor");
  write_file((out / "in/b.tensor").string(), "not a tensor");
  write_file((out / "in/d.png").string(), "\x89PNG broken");
  const std::string r = "'" + root_.string() + "'";
  const Result res = run("attack --input '" + out.string() + "/in' --bank " + r + "/bank/bank.pab --out '" +
                             out.string() + "/run'" + kCommon,
                         out);
  ASSERT_EQ(res.code, 0) << res.err;
  const CsvTable summary = read_csv((out / "run/summary.csv").string());
  ASSERT_EQ(summary.rows.size(), 4u);
  const size_t status = summary.column("status");
  EXPECT_EQ(summary.rows[0][status], "ok");
  EXPECT_EQ(summary.rows[1][status], "failed");
  EXPECT_EQ(summary.rows[2][status], "ok");
  EXPECT_EQ(summary.rows[3][status], "failed");
  EXPECT_FALSE(fs::exists(out / "run/traces/b"));
  EXPECT_EQ(read_json((out / "run/run.json").string())["failed"], 2);
}

TEST_F(CliPipeline, RemoteEncoderOverStdio) {
  const fs::path out = fresh("remote");
  const std::string r = "'" + root_.string() + "'";
  const std::string server = kCli + " serve-loopback --stdio --encoder-preset toy --seed 3";
  const Result res = run("attack --input " + r + "/fx/eval --bank " + r + "/bank/bank.pab --out '" + out.string() +
                             "/run' --remote-command '" + server + "'" + kCommon,
                         out);
  ASSERT_EQ(res.code, 0) << res.err;
  const CsvTable summary = read_csv((out / "run/summary.csv").string());
  ASSERT_EQ(summary.rows.size(), 4u);
  for (const auto& row : summary.rows) {
    EXPECT_EQ(row[summary.column("status")], "ok");
    EXPECT_LE(parse_number(row[summary.column("linf")]), 2.0 / 255.0);
  }
}

TEST(Cli, EmptyImageSetGivesEmptySummary) {
  const fs::path root = fresh("empty");
  const std::string r = "'" + root.string() + "'";
  ASSERT_EQ(run("make-fixture --out " + r + "/fx --guide-count 4 --eval-count 0 --probe-count 0" + kCommon, root).code, 0);
  ASSERT_EQ(run("build-prototypes --guidance-dir " + r + "/fx/guide --bank " + r + "/b.pab --clusters 2" + kCommon, root)
                .code,
            0);
  fs::create_directories(root / "none");
  const Result res = run("attack --input " + r + "/none --bank " + r + "/b.pab --out " + r + "/run" + kCommon, root);
  EXPECT_EQ(res.code, 0);
  const CsvTable summary = read_csv((root / "run/summary.csv").string());
  EXPECT_TRUE(summary.rows.empty());
  EXPECT_EQ(summary.header.front(), "id");
}

TEST(Cli, ErrorsAndExitCodes) {
  const fs::path root = fresh("errors");
  const std::string r = "'" + root.string() + "'";
  ASSERT_EQ(run("make-fixture --out " + r + "/fx --guide-count 5 --eval-count 1 --probe-count 0" + kCommon, root).code, 0);

  const Result too_many =
      run("build-prototypes --guidance-dir " + r + "/fx/guide --bank " + r + "/b.pab --clusters 6" + kCommon, root);
  EXPECT_EQ(too_many.code, 2);
  EXPECT_EQ(too_many.err.rfind("ERROR:", 0), 0u);
  EXPECT_NE(too_many.err.find("K too large"), std::string::npos);

  fs::create_directories(root / "empty");
  const Result empty = run("build-prototypes --guidance-dir " + r + "/empty --bank " + r + "/b.pab" + kCommon, root);
  EXPECT_EQ(empty.code, 2);
  EXPECT_NE(empty.err.find("empty guidance set"), std::string::npos);

  const Result overlap =
      run("build-prototypes --guidance-dir " + r + "/fx/guide --input " + r + "/fx/guide --bank " + r + "/b.pab --clusters 2" +
              kCommon,
          root);
  EXPECT_EQ(overlap.code, 2);
  EXPECT_NE(overlap.err.find("disjointness"), std::string::npos);

  const Result usage = run("attack --no-such-flag", root);
  EXPECT_EQ(usage.code, 1);
  EXPECT_EQ(run("", root).code, 1);

  write_file((root / "bad.json").string(), R"({"attack": {"epsilonn": 1}})");
  const Result bad_key = run("attack --config " + r + "/bad.json", root);
  EXPECT_EQ(bad_key.code, 1);
  EXPECT_NE(bad_key.err.find("ERROR: invalid-config: unknown config key: attack.epsilonn"), std::string::npos);

  const Result bad_value = run("attack --print-config --alpha 3/255", root);
  EXPECT_EQ(bad_value.code, 1);

  const Result missing = run("evaluate --input " + r + "/nowhere" + kCommon, root);
  EXPECT_EQ(missing.code, 2);
  EXPECT_EQ(missing.err.rfind("ERROR:", 0), 0u);
}

TEST(Cli, ConfigFileWithFlagOverrides) {
  const fs::path root = fresh("config");
  write_file((root / "c.json").string(), R"({"attack": {"s1": 2, "s2": 9}, "io": {"seed": 11}})");
  const Result res = run("attack --print-config --config '" + (root / "c.json").string() + "' --s1 5 --epsilon 4/255", root);
  ASSERT_EQ(res.code, 0) << res.err;
  const RunConfig c = run_config_from_json(Json::parse(res.out));
  EXPECT_EQ(c.attack.s1, 5);
  EXPECT_EQ(c.attack.s2, 9);
  EXPECT_EQ(c.io.seed, 11u);
  EXPECT_EQ(c.attack.epsilon, 4.0 / 255.0);
  // The printed document is itself a valid config.
  write_file((root / "printed.json").string(), res.out);
  const Result again = run("attack --print-config --config '" + (root / "printed.json").string() + "'", root);
  EXPECT_EQ(again.out, res.out);
}
