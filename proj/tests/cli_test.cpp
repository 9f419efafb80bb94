#include "diwift/config.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace diwift;
namespace fs = std::filesystem;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("diwift_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(DIWIFT_CLI_PATH) + " " + args + " > " + (workdir() / "stdout.txt").string() +
                          " 2> " + (workdir() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t count_lines(const fs::path& p) {
  const auto text = slurp(p);
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

/// Tiny synthetic config so every stage finishes in about a second.
fs::path small_config(const std::string& name, nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json j = {
      {"seed", 4},
      {"dataset", {{"source", "synthetic"}, {"kind", "syn3"}, {"rows", 300}}},
      {"pretrain", {{"epochs", 3}, {"hidden_layers", 1}, {"learning_rate", 0.1}}},
      {"selector", {{"embed_dim", 4}, {"heads", 2}, {"gate_hidden", 8}, {"t_max", 2}}},
      {"lissa", {{"depth", 30}, {"repeats", 1}, {"damping", 1.0}}},
      {"experiment", {{"repeats", 2}, {"methods", {"no_selection", "oracle_mask"}}}},
  };
  j.merge_patch(extra);
  const auto p = workdir() / (name + ".json");
  std::ofstream(p) << j.dump(2);
  return p;
}

std::string out_dir(const std::string& name) { return (workdir() / name).string(); }

}  // namespace

TEST(Gen, RowsColumnsAndByteIdenticalReruns) {
  const auto a = out_dir("gen_a.csv"), b = out_dir("gen_b.csv");
  ASSERT_EQ(cli("gen --kind syn3 --rows 30000 --seed 5 --out " + a), 0);
  ASSERT_EQ(cli("gen --kind syn3 --rows 30000 --seed 5 --out " + b), 0);
  EXPECT_EQ(count_lines(a), 30001u);
  std::ifstream in(a);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), 11);
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_EQ(count_lines(a + ".relevance"), 30000u);
  EXPECT_EQ(cli("gen --kind syn3 --rows 0 --out " + out_dir("gen_c.csv")), 2);
  EXPECT_EQ(cli("gen --kind syn9 --rows 5 --out " + out_dir("gen_c.csv")), 2);
}

TEST(Config, ErrorsMapToConfigExit) {
  const auto bad_key = small_config("bad_key", {{"pretrain", {{"epoch", 3}}}});
  EXPECT_EQ(cli("pretrain -c " + bad_key.string() + " -o " + out_dir("x")), 2);
  const auto bad_type = small_config("bad_type", {{"pretrain", {{"epochs", "three"}}}});
  EXPECT_EQ(cli("pretrain -c " + bad_type.string() + " -o " + out_dir("x")), 2);
  std::ofstream(workdir() / "broken.json") << "{ not json";
  EXPECT_EQ(cli("pretrain -c " + (workdir() / "broken.json").string()), 2);
  const auto missing = small_config("missing_csv", {{"dataset", {{"source", "csv"}, {"path", "/no/such.csv"}}}});
  EXPECT_EQ(cli("run -c " + missing.string()), 2);
  EXPECT_EQ(cli("frobnicate"), 2);
}

TEST(Config, DataErrorsMapToDataExit) {
  const auto csv = workdir() / "bad_label.csv";
  std::ofstream(csv) << "a,label\n1,0\n2,1\n3,x\n4,0\n5,1\n6,0\n";
  const auto cfg = small_config(
      "bad_label", {{"dataset", {{"source", "csv"}, {"path", csv.string()}, {"fields", {{{"name", "a"}}}}}}});
  EXPECT_EQ(cli("pretrain -c " + cfg.string() + " -o " + out_dir("bad_label_run")), 3);
}

TEST(Config, DivergenceMapsToDivergenceExit) {
  const auto cfg = small_config("diverge", {{"lissa", {{"scale", 50.0}}}});
  EXPECT_EQ(cli("run -c " + cfg.string() + " -o " + out_dir("diverge_run")), 4);
  EXPECT_NE(slurp(workdir() / "stderr.txt").find("select"), std::string::npos);
}

TEST(Pretrain, CheckpointsAndBitExactReload) {
  const auto cfg = small_config("pre", {{"pretrain", {{"keep_checkpoints", true}}}});
  const auto dir = fs::path(out_dir("pre_run"));
  ASSERT_EQ(cli("pretrain -c " + cfg.string() + " -o " + dir.string()), 0);
  EXPECT_TRUE(fs::exists(dir / "config.json"));
  EXPECT_EQ(count_lines(dir / "pretrain_history.csv"), 4u);
  std::size_t checkpoints = 0;
  for (const auto& e : fs::directory_iterator(dir / "checkpoints")) checkpoints += e.path().extension() == ".json";
  EXPECT_EQ(checkpoints, 3u);

  // Same seeds in process: the reloaded model must reproduce outputs exactly.
  const RunConfig rc = load_run_config((dir / "config.json").string());
  EXPECT_EQ(rc.pipeline.pretrain.epochs, 3u);
  const Splits s = synthetic_source(rc.dataset.kind, rc.dataset.rows, rc.dataset.ratios)(rc.seed);
  const auto ref = train(s.train, &s.valid, seeded(rc.pipeline, rc.seed).pretrain);
  const BaseNet back = load_basenet((dir / "pretrained.json").string());
  EXPECT_EQ(predict(back, s.test.x), predict(ref.model, s.test.x));
}

TEST(Select, OutputsAndMissingPretrained) {
  const auto cfg = small_config("sel");
  const auto pre = fs::path(out_dir("sel_pre"));
  ASSERT_EQ(cli("pretrain -c " + cfg.string() + " -o " + pre.string()), 0);
  const auto dir = fs::path(out_dir("sel_run"));
  ASSERT_EQ(cli("select -c " + cfg.string() + " -o " + dir.string() + " --pretrained " +
                (pre / "pretrained.json").string()),
            0);
  EXPECT_EQ(count_lines(dir / "selector_trace.csv"), 3u);
  // Comment and header lines, then one row per training instance (3:1:1 of 300).
  EXPECT_EQ(count_lines(dir / "influence.csv"), 2u + 180u);
  EXPECT_EQ(cli("select -c " + cfg.string() + " -o " + dir.string() + " --pretrained /no/such/model.json"), 3);
}

TEST(Run, DirectoryContentsAndIdentityReduction) {
  const auto cfg = small_config("run");
  const auto dir = fs::path(out_dir("run_full"));
  ASSERT_EQ(cli("run -c " + cfg.string() + " -o " + dir.string()), 0) << slurp(workdir() / "stderr.txt");
  for (const char* f : {"config.json", "pretrained.json", "final.json", "selector.json", "mask_train.csv",
                        "mask_valid.csv", "mask_test.csv", "metrics.json", "selector_trace.csv", "retrain_history.csv"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto metrics = read_json((dir / "metrics.json").string());
  EXPECT_EQ(metrics["mask_violations"], 0);
  EXPECT_EQ(count_lines(dir / "mask_test.csv"), 61u);

  const auto ident = fs::path(out_dir("run_identity"));
  ASSERT_EQ(cli("run -c " + cfg.string() + " -o " + ident.string() + " --identity-mask"), 0);
  const RunConfig rc = load_run_config((ident / "config.json").string());
  const Splits s = synthetic_source(rc.dataset.kind, rc.dataset.rows, rc.dataset.ratios)(rc.seed);
  const auto base = run_method(Method::no_selection, s, rc.pipeline, rc.seed);
  EXPECT_EQ(read_json((ident / "metrics.json").string())["test_auc"].get<double>(), base.record.auc);

  ASSERT_EQ(cli("report-mask -c " + cfg.string() + " --run " + dir.string() + " --rows 0,2"), 0);
  EXPECT_EQ(count_lines(dir / "mask_report.csv"), 3u);
  EXPECT_NE(slurp(dir / "mask_report.csv").find("rel_x11"), std::string::npos);
  EXPECT_EQ(cli("report-mask -c " + cfg.string() + " --run " + dir.string() + " --rows 999"), 3);
  EXPECT_EQ(cli("report-mask -c " + cfg.string() + " --run " + out_dir("nowhere")), 3);
}

TEST(Run, SetOverridesAndSeedFlag) {
  const auto cfg = small_config("ovr");
  const auto dir = fs::path(out_dir("ovr_run"));
  ASSERT_EQ(cli("pretrain -c " + cfg.string() + " -o " + dir.string() + " --seed 9 --set pretrain.epochs=2"), 0);
  const auto echoed = read_json((dir / "config.json").string());
  EXPECT_EQ(echoed["seed"], 9);
  EXPECT_EQ(echoed["pretrain"]["epochs"], 2);
  EXPECT_EQ(echoed["lissa"]["power_iterations"], LissaConfig{}.power_iterations);  // defaults materialized
}

TEST(Experiment, CompareRecordsPerRepeat) {
  const auto cfg = small_config("cmp");
  const auto dir = fs::path(out_dir("cmp_run"));
  ASSERT_EQ(cli("experiment compare -c " + cfg.string() + " -o " + dir.string()), 0);
  const auto rep = read_json((dir / "report.json").string());
  EXPECT_EQ(rep["records"].size(), 4u);
  for (const auto& m : rep["summary"]) {
    EXPECT_EQ(m["runs"], 2);
    EXPECT_TRUE(m["std_auc"].is_number());
  }
  for (const auto& r : rep["records"]) EXPECT_EQ(r["mask_violations"], 0);
  EXPECT_TRUE(fs::exists(dir / "report.txt"));
}

TEST(Experiment, ShiftAndSensitivityDispatch) {
  const auto cfg = small_config(
      "exp", {{"experiment", {{"repeats", 1}, {"methods", {"no_selection"}}, {"checkpoints", {2, 3}},
                              {"shift", {{"train_rows", 200}, {"unbiased_rows", 100}}}}}});
  const auto shift = fs::path(out_dir("shift_run"));
  ASSERT_EQ(cli("experiment shift -c " + cfg.string() + " -o " + shift.string()), 0);
  auto rep = read_json((shift / "report.json").string());
  EXPECT_EQ(rep["experiment"], "shift");
  EXPECT_EQ(rep["records"].size(), 1u);

  const auto sens = fs::path(out_dir("sens_run"));
  ASSERT_EQ(cli("experiment sensitivity -c " + cfg.string() + " -o " + sens.string()), 0);
  rep = read_json((sens / "report.json").string());
  EXPECT_EQ(rep["experiment"], "sensitivity");
  EXPECT_EQ(rep["records"].size(), 2u);
  EXPECT_TRUE(rep.contains("spread"));
}
