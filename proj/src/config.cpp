#include "unveil/config.hpp"

#include <fstream>
#include <sstream>

namespace unveil::config {

using nlohmann::json;

namespace {

json eval_to_json(const EvalPlan& e) {
  return {{"splits", e.splits}, {"iou_grid", e.iou_grid}, {"ablation_split", e.ablation_split}};
}

json judge_to_json(const JudgeEndpoint& b) {
  return {{"kind", b.kind}, {"url", b.url}, {"timeout_ms", b.timeout_ms}, {"fallback_to_reference", b.fallback_to_reference}};
}

json generation_to_json(const GenerationEndpoint& b) {
  return {{"kind", b.kind},
          {"url", b.url},
          {"timeout_ms", b.timeout_ms},
          {"retries", b.retries},
          {"max_in_flight", b.max_in_flight}};
}

// Every key of `doc` must exist in `schema`; arrays and scalars are leaves.
void check_keys(const json& doc, const json& schema, const std::string& prefix) {
  if (!doc.is_object()) throw ConfigError("config: '" + (prefix.empty() ? std::string("<root>") : prefix) + "' must be an object");
  for (const auto& [key, value] : doc.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if ((prefix == "sft" || prefix == "aar") && key == "preset") continue;
    if (!schema.contains(key)) throw ConfigError("config: unknown key '" + path + "'");
    if (schema.at(key).is_object()) check_keys(value, schema.at(key), path);
  }
}

void merge(json& into, const json& from) {
  for (const auto& [key, value] : from.items()) {
    if (value.is_object() && into.contains(key) && into[key].is_object()) {
      merge(into[key], value);
    } else {
      into[key] = value;
    }
  }
}

bool has_path(const json& doc, const std::string& section, const std::string& key) {
  return doc.contains(section) && doc.at(section).is_object() && doc.at(section).contains(key);
}

}  // namespace

void RunConfig::validate() const {
  world.validate();
  split.validate(world);
  if (dataset_size < 1) throw std::invalid_argument("dataset_size must be >= 1");
  model.validate();
  sft.validate();
  aar.validate();
  for (double t : eval.iou_grid) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("eval.iou_grid values must lie in [0,1]");
  }
  if (judge.kind != "reference" && judge.kind != "http") throw std::invalid_argument("judge.kind must be reference or http");
  if (judge.kind == "http" && judge.url.empty()) throw std::invalid_argument("judge.url is required for an http judge");
  if (generation.kind != "mock" && generation.kind != "http") {
    throw std::invalid_argument("generation.kind must be mock or http");
  }
  if (generation.kind == "http" && generation.url.empty()) {
    throw std::invalid_argument("generation.url is required for an http backend");
  }
  if (generation.max_in_flight < 1) throw std::invalid_argument("generation.max_in_flight must be >= 1");
  if (generation.retries < 0) throw std::invalid_argument("generation.retries must be >= 0");
  if (!(build.min_iou >= 0.0 && build.min_iou <= 1.0)) throw std::invalid_argument("build.min_iou must lie in [0,1]");
  if (out.empty()) throw std::invalid_argument("out must not be empty");
}

json RunConfig::to_json() const {
  return {{"world", world.to_json()},
          {"split", split.to_json()},
          {"dataset_size", dataset_size},
          {"model", model.to_json()},
          {"sft", sft.to_json()},
          {"aar", aar.to_json()},
          {"eval", eval_to_json(eval)},
          {"judge", judge_to_json(judge)},
          {"generation", generation_to_json(generation)},
          {"build", {{"min_iou", build.min_iou}}},
          {"out", out},
          {"seed", seed}};
}

RunConfig from_json(const json& doc) {
  check_keys(doc, RunConfig{}.to_json(), "");
  RunConfig c;
  try {
    if (doc.contains("world")) c.world = world::WorldConfig::from_json(doc.at("world"));
    if (doc.contains("split")) c.split = world::SplitPlan::from_json(doc.at("split"));
    c.dataset_size = doc.value("dataset_size", c.dataset_size);
    c.seed = doc.value("seed", c.seed);
    c.out = doc.value("out", c.out);

    // Training seeds follow the global seed unless pinned.
    json model = doc.value("model", json::object());
    json sft = doc.value("sft", json::object());
    json aar = doc.value("aar", json::object());
    if (!has_path(doc, "model", "init_seed")) model["init_seed"] = c.seed + 1;
    if (!has_path(doc, "sft", "seed")) sft["seed"] = c.seed;
    if (!has_path(doc, "aar", "seed")) aar["seed"] = c.seed;
    c.model = model::ModelConfig::from_json(model);
    c.sft = train::SftConfig::from_json(sft);
    c.aar = train::AarConfig::from_json(aar);

    const json e = doc.value("eval", json::object());
    c.eval.splits = e.value("splits", c.eval.splits);
    c.eval.iou_grid = e.value("iou_grid", c.eval.iou_grid);
    c.eval.ablation_split = e.value("ablation_split", c.eval.ablation_split);

    const json jb = doc.value("judge", json::object());
    c.judge.kind = jb.value("kind", c.judge.kind);
    c.judge.url = jb.value("url", c.judge.url);
    c.judge.timeout_ms = jb.value("timeout_ms", c.judge.timeout_ms);
    c.judge.fallback_to_reference = jb.value("fallback_to_reference", c.judge.fallback_to_reference);

    const json gb = doc.value("generation", json::object());
    c.generation.kind = gb.value("kind", c.generation.kind);
    c.generation.url = gb.value("url", c.generation.url);
    c.generation.timeout_ms = gb.value("timeout_ms", c.generation.timeout_ms);
    c.generation.retries = gb.value("retries", c.generation.retries);
    c.generation.max_in_flight = gb.value("max_in_flight", c.generation.max_in_flight);

    c.build.min_iou = doc.value("build", json::object()).value("min_iou", c.build.min_iou);
    c.validate();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("config: override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json* node = &doc;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) throw ConfigError("config: empty segment in key '" + key + "'");
    parts.push_back(part);
  }
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    json& next = (*node)[parts[i]];
    if (next.is_null()) next = json::object();
    if (!next.is_object()) throw ConfigError("config: '" + parts[i] + "' in '" + key + "' is not a section");
    node = &next;
  }
  (*node)[parts.back()] = value;
}

RunConfig resolve(const std::optional<std::string>& config_path, const std::vector<std::string>& overrides,
                  const std::optional<std::string>& out, const std::optional<std::uint64_t>& seed) {
  json doc = json::object();
  if (config_path) {
    std::ifstream in(*config_path);
    if (!in) throw ConfigError("config: cannot read '" + *config_path + "'");
    json file = json::parse(in, nullptr, false);
    if (file.is_discarded() || !file.is_object()) throw ConfigError("config: '" + *config_path + "' is not a JSON object");
    merge(doc, file);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  if (out) doc["out"] = *out;
  if (seed) doc["seed"] = *seed;
  return from_json(doc);
}

}  // namespace unveil::config
