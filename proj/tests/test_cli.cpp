#include "unveil/cli.hpp"
#include "unveil/config.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace unveil;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("unveil_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Small enough to run every stage in a few seconds.
fs::path tiny_config(const fs::path& dir) {
  const json cfg = {{"dataset_size", 60},
                    {"model", {{"d_model", 16}, {"heads", 2}, {"d_ff", 32}, {"encoder_layers", 1}, {"decoder_layers", 1}}},
                    {"sft", {{"epochs", 1}, {"batch_size", 4}, {"learning_rate", 3e-3}}},
                    {"aar", {{"k", 2}, {"batch_size", 4}}},
                    {"eval", {{"iou_grid", {0.0, 0.5, 1.0}}}}};
  const auto p = dir / "tiny.json";
  std::ofstream(p) << cfg.dump(2);
  return p;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("override parsing") {
  json doc = json::object();
  config::apply_override(doc, "sft.epochs=3");
  config::apply_override(doc, "aar.normalize_advantages=false");
  config::apply_override(doc, "judge.kind=http");
  config::apply_override(doc, "eval.iou_grid=[0,1]");
  CHECK(doc["sft"]["epochs"] == 3);
  CHECK(doc["aar"]["normalize_advantages"] == false);
  CHECK(doc["judge"]["kind"] == "http");
  CHECK(doc["eval"]["iou_grid"] == json::array({0, 1}));
  CHECK_THROWS_AS(config::apply_override(doc, "noequals"), config::ConfigError);
  CHECK_THROWS_AS(config::apply_override(doc, "=1"), config::ConfigError);
  CHECK_THROWS_AS(config::apply_override(doc, "sft..epochs=1"), config::ConfigError);
  CHECK_THROWS_AS(config::apply_override(doc, "sft.epochs.x=1"), config::ConfigError);
}

TEST_CASE("resolution, seed derivation and schema errors") {
  const auto cfg = config::resolve(std::nullopt, {"sft.epochs=2"}, std::string("/tmp/x"), 5);
  CHECK(cfg.sft.epochs == 2);
  CHECK(cfg.seed == 5);
  CHECK(cfg.model.init_seed == 6);
  CHECK(cfg.sft.seed == 5);
  CHECK(cfg.aar.seed == 5);
  CHECK(cfg.out == "/tmp/x");
  CHECK(config::resolve(std::nullopt, {"sft.seed=9"}, std::nullopt, 5).sft.seed == 9);
  CHECK(config::from_json(cfg.to_json()).to_json() == cfg.to_json());

  CHECK_THROWS_AS(config::resolve(std::nullopt, {"nope=1"}, std::nullopt, std::nullopt), config::ConfigError);
  CHECK_THROWS_AS(config::resolve(std::nullopt, {"sft.nope=1"}, std::nullopt, std::nullopt), config::ConfigError);
  CHECK_THROWS_AS(config::resolve(std::nullopt, {"sft.epochs=\"many\""}, std::nullopt, std::nullopt),
                  config::ConfigError);
  CHECK_THROWS_AS(config::resolve(std::nullopt, {"aar.k=1"}, std::nullopt, std::nullopt), config::ConfigError);
  CHECK_THROWS_AS(config::resolve(std::string("/nonexistent/c.json"), {}, std::nullopt, std::nullopt),
                  config::ConfigError);
}

TEST_CASE("exit codes for usage, config and prerequisite errors") {
  const auto dir = scratch("codes");
  const auto out = dir.string();
  CHECK(invoke({"--out", out, "aar"}).code == cli::kPrerequisiteError);
  CHECK(invoke({"--out", out, "sft"}).code == cli::kPrerequisiteError);
  const auto bad = invoke({"--out", out, "--set", "nope=1", "gen"});
  CHECK(bad.code == cli::kConfigError);
  const auto err = json::parse(bad.err);
  CHECK(err["error"] == "config");
  CHECK(err["message"].get<std::string>().find("nope") != std::string::npos);
  CHECK(invoke({"frobnicate"}).code == cli::kConfigError);
  CHECK(invoke({}).code == cli::kConfigError);
  CHECK(invoke({"--help"}).code == cli::kOk);
  fs::remove_all(dir);
}

TEST_CASE("gen is reproducible and snapshots its config") {
  const auto dir = scratch("gen");
  for (const char* run : {"a", "b"}) {
    REQUIRE(invoke({"gen", "--out", (dir / run).string(), "--set", "dataset_size=25"}).code == cli::kOk);
  }
  CHECK(slurp(dir / "a/gen/dataset.jsonl") == slurp(dir / "b/gen/dataset.jsonl"));
  CHECK(slurp(dir / "a/gen/splits.json") == slurp(dir / "b/gen/splits.json"));
  const auto snap = json::parse(slurp(dir / "a/gen/config.json"));
  CHECK(snap["dataset_size"] == 25);
  CHECK(config::from_json(snap).dataset_size == 25);
  fs::remove_all(dir);
}

TEST_CASE("full pipeline on a tiny config") {
  const auto dir = scratch("pipeline");
  const auto cfg = tiny_config(dir).string();
  const auto out = (dir / "run").string();
  auto step = [&](std::vector<std::string> args) {
    args.insert(args.begin(), {"--config", cfg, "--out", out});
    const auto r = invoke(args);
    INFO(args.back() << ": " << r.err);
    REQUIRE(r.code == cli::kOk);
    return r;
  };
  step({"gen"});
  step({"sft"});
  CHECK(fs::exists(dir / "run/sft/model.ckpt"));
  CHECK(slurp(dir / "run/sft/sft_metrics.csv").find('\n') != std::string::npos);
  step({"aar"});
  CHECK(fs::exists(dir / "run/aar/aar_metrics.csv"));
  const auto shown = step({"eval"});
  CHECK(shown.out.find("aar/test") != std::string::npos);
  const auto report = json::parse(slurp(dir / "run/eval/report.json"));
  CHECK(report["splits"].contains("untrained/test"));
  CHECK(report["splits"].contains("sft/test"));
  CHECK(report["splits"].contains("aar/test"));
  const auto ablate = step({"ablate"});
  CHECK(ablate.out.find("spearman") != std::string::npos);

  step({"build"});
  const auto records = dir / "run/build/records.jsonl";
  CHECK(fs::exists(records));
  CHECK(fs::exists(dir / "run/build/audit.csv"));
  std::string first_id;
  {
    std::ifstream in(records);
    std::string line;
    std::getline(in, line);
    first_id = json::parse(line)["id"].get<std::string>();
  }
  const auto bad_edit = invoke({"--config", cfg, "--out", out, "review", "--in", records.string(), "--correct",
                             first_id + "=category nothing"});
  CHECK(bad_edit.code != cli::kOk);
  step({"review", "--in", records.string(), "--reject", first_id});
  CHECK(slurp(dir / "run/review/audit.csv").find(first_id + ",rejected") != std::string::npos);
  const auto exported = step({"export", "--in", records.string()});
  CHECK(exported.out.find("59 of 60") != std::string::npos);
  fs::remove_all(dir);
}

}  // TEST_SUITE cli
