#include <gtest/gtest.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "cli.hpp"
#include "exqnet/train.hpp"
#include "json.hpp"
#include "support.hpp"

using namespace exqnet;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string value_of(const std::string& text, const std::string& key) {
  std::smatch m;
  if (!std::regex_search(text, m, std::regex("(^|\\s)" + key + "=(\\S+)"))) return {};
  return m[2];
}

}  // namespace

TEST(Cli, TrainDefaultsAreEchoed) {
  support::TempDir dir("cli_echo");
  // No split lists: the run fails after echoing its settings.
  const auto r = cli({"train", "--data", dir.path().string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("batch=50 lr=0.001 epochs=100 optim=ranger"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("eval-every=10"), std::string::npos);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
}

TEST(Cli, ConfigFileThenFlags) {
  support::TempDir dir("cli_config");
  const auto cfg = dir.path() / "run.json";
  std::ofstream(cfg) << R"({"batch": 7, "lr": 0.01, "eval_every": 3, "optim": "adam"})";
  const auto r = cli({"train", "--data", dir.path().string(), "--config", cfg.string(), "--batch", "9"});
  EXPECT_EQ(value_of(r.out, "batch"), "9");
  EXPECT_EQ(value_of(r.out, "lr"), "0.01");
  EXPECT_EQ(value_of(r.out, "eval-every"), "3");
  EXPECT_EQ(value_of(r.out, "optim"), "adam");
  EXPECT_EQ(value_of(r.out, "epochs"), "100");

  std::ofstream(cfg) << R"({"batch": "many"})";
  const auto bad = cli({"train", "--data", dir.path().string(), "--config", cfg.string()});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("batch"), std::string::npos);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"frobnicate"}).code, 2);
  EXPECT_EQ(cli({"summary", "--no-such-flag"}).code, 2);
  EXPECT_EQ(cli({"summary", "--classes", "ten"}).code, 2);
  EXPECT_EQ(cli({"eval", "--data", "/tmp", "--list", "x.txt"}).code, 2);
  EXPECT_EQ(cli({"summary", "--schedule", "50,12"}).code, 1);
  EXPECT_EQ(cli({"stats", "--data", "/tmp", "--list", "exqnet_missing_list.txt"}).code, 1);
  EXPECT_EQ(cli({"summary", "--help"}).code, 0);
  EXPECT_EQ(cli({"summary"}).code, 0);
}

TEST(Cli, SummaryFor102Classes) {
  const auto r = cli({"summary", "--classes", "102"});
  ASSERT_EQ(r.code, 0);
  std::string fc_row;
  std::istringstream lines(r.out);
  for (std::string line; std::getline(lines, line);) {
    if (line.rfind("fc ", 0) == 0) fc_row = line;
  }
  EXPECT_NE(fc_row.find("[1,102]"), std::string::npos) << fc_row;
  const double total = std::stod(value_of(r.out, "total_params"));
  EXPECT_EQ(total, 932004.0);
  EXPECT_GE(total, 0.88e6);
  EXPECT_LE(total, 1.08e6);
}

TEST(Cli, GradcheckIsDeterministic) {
  const auto a = cli({"gradcheck", "--seed", "0", "--seeds", "3"});
  const auto b = cli({"gradcheck", "--seed", "0", "--seeds", "3"});
  EXPECT_EQ(a.code, 0) << a.out << a.err;
  EXPECT_EQ(a.out, b.out);
  EXPECT_NE(a.out.find("gradcheck=PASS"), std::string::npos);
}

TEST(Cli, TrainWritesManifestAndEvalReproduces) {
  support::TempDir dir("cli_train");
  const auto data = dir.path() / "data";
  const auto model = dir.path() / "m.eqw";
  ASSERT_EQ(cli({"synth", "--out", data.string(), "--per-class", "6", "--size", "64", "--seed", "3"}).code, 0);

  const auto t = cli({"train", "--data", data.string(), "--val-list", "test.txt", "--preset", "micro",
                      "--epochs", "2", "--eval-every", "1", "--batch", "8", "--seed", "5", "--out",
                      model.string()});
  ASSERT_EQ(t.code, 0) << t.out << t.err;
  ASSERT_TRUE(std::filesystem::exists(model));

  std::ifstream in(model.string() + ".manifest.json");
  ASSERT_TRUE(in.good());
  const auto manifest = nlohmann::json::parse(in);
  EXPECT_EQ(manifest.at("seed"), 5);
  EXPECT_EQ(manifest.at("config_hash").get<std::string>().size(), 16u);
  EXPECT_EQ(manifest.at("splits").at("train").at("entries"), 24);
  EXPECT_TRUE(manifest.at("splits").contains("val"));
  EXPECT_EQ(manifest.at("config").at("epochs"), 2);

  const auto e = cli({"eval", "--data", data.string(), "--list", "test.txt", "--model", model.string(),
                      "--batch", "8"});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_EQ(value_of(e.out, "top1"), value_of(t.out, "best_val_acc"));

  // Exact reproduction through the library path.
  auto loaded = load_model<float>(model);
  PipelineConfig pipe;
  pipe.resolution = 64;
  BatchIterator it(load_split(data, data / "test.txt"), 8, pipe, false);
  EXPECT_EQ(evaluate(loaded, it).accuracy, manifest.at("best_eval_accuracy").get<double>());
}

TEST(Cli, BenchWritesJson) {
  support::TempDir dir("cli_bench");
  const auto json_path = dir.path() / "b.json";
  const auto r = cli({"bench", "--preset", "micro", "--batch", "2", "--iters", "2", "--warmup", "0",
                      "--repeats", "2", "--json", json_path.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("fps"), std::string::npos);
  std::ifstream in(json_path);
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j.at("batch_seconds").size(), 4u);
}

TEST(Cli, GradcamWritesOverlay) {
  support::TempDir dir("cli_cam");
  const auto data = dir.path() / "data";
  ASSERT_EQ(cli({"synth", "--out", data.string(), "--per-class", "1"}).code, 0);
  const auto model = dir.path() / "m.eqw";
  save_model(ExquisiteNet<float>::build(ModelConfig::micro(4), 0), model);
  const auto split = load_split(data, data / "train.txt");
  const auto heat = dir.path() / "h.ppm";
  const auto r = cli({"gradcam", "--model", model.string(), "--image", (data / split.entries[0].path).string(),
                      "--class", "1", "--out", heat.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(value_of(r.out, "layer"), "dfseb5");
  EXPECT_EQ(read_ppm(heat).dims(), (Dims{1, 3, 64, 64}));
}
