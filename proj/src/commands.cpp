#include "unveil/cli.hpp"

#include "unveil/config.hpp"
#include "unveil/eval.hpp"
#include "unveil/judge.hpp"
#include "unveil/maubuild.hpp"
#include "unveil/records.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

namespace unveil::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class PrerequisiteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::optional<std::string> config;
  std::vector<std::string> overrides;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> data;
  std::optional<std::string> from;
  std::optional<std::string> input;
  std::vector<std::string> accept, reject, correct;
};

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
  if (!f) throw std::runtime_error("write failed: " + p.string());
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

// Creates <out>/<stage> and stores the resolved config there.
fs::path stage_dir(const config::RunConfig& cfg, const std::string& stage) {
  const fs::path dir = fs::path(cfg.out) / stage;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw config::ConfigError("config: cannot create run directory " + dir.string() + ": " + ec.message());
  write_text(dir / "config.json", cfg.to_json().dump(2) + "\n");
  return dir;
}

fs::path require(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw PrerequisiteError(what + " not found at " + p.string());
  return p;
}

std::vector<Sample> load_dataset(const config::RunConfig& cfg, const Options& o) {
  const fs::path path = require(o.data ? fs::path(*o.data) : fs::path(cfg.out) / "gen" / "dataset.jsonl",
                                "dataset (run `gen` first or pass --data)");
  try {
    return read_samples(path.string(), cfg.world);
  } catch (const std::runtime_error& e) {
    throw PrerequisiteError(std::string("dataset unreadable under this world config: ") + e.what());
  }
}

std::vector<Sample> with_tag(const std::vector<Sample>& samples, const std::string& tag) {
  std::vector<Sample> out;
  for (const auto& s : samples) {
    const bool held = s.has_tag(world::kHeldoutCategory) || s.has_tag(world::kHeldoutDataset);
    // `test` means the regular test split; held-out slices are reported on their own.
    if (tag == world::kTest ? (s.has_tag(tag) && !held) : s.has_tag(tag)) out.push_back(s);
  }
  return out;
}

model::PolicyModel untrained_model(const config::RunConfig& cfg) {
  return model::PolicyModel(cfg.model, cfg.world.make_vocab(),
                            {cfg.world.height_patches, cfg.world.width_patches, cfg.world.feature_dim});
}

model::PolicyModel load_model(const fs::path& p, const std::string& what) {
  require(p, what);
  try {
    return model::load_checkpoint(p.string());
  } catch (const std::exception& e) {
    throw PrerequisiteError(what + " unreadable: " + e.what());
  }
}

void write_ids(const fs::path& p, const std::set<std::string>& ids) {
  std::string text;
  for (const auto& id : ids) text += id + "\n";
  write_text(p, text);
}

std::unique_ptr<rewards::RelevanceJudge> make_judge(const config::RunConfig& cfg) {
  if (cfg.judge.kind == "reference") return std::make_unique<rewards::ReferenceJudge>();
  auto remote = std::make_unique<rewards::HttpJudge>(cfg.judge.url, cfg.judge.timeout_ms);
  if (!cfg.judge.fallback_to_reference) return remote;
  return std::make_unique<rewards::FallbackJudge>(std::move(remote), std::make_unique<rewards::ReferenceJudge>());
}

std::unique_ptr<mau::GenerationBackend> make_backend(const config::RunConfig& cfg) {
  if (cfg.generation.kind == "mock") return std::make_unique<mau::MockBackend>(cfg.world.make_vocab());
  return std::make_unique<mau::HttpBackend>(cfg.generation.url, cfg.generation.timeout_ms, cfg.generation.retries);
}

// Records JSONL written by build/reflect, most recent stage first.
fs::path default_records(const config::RunConfig& cfg, const Options& o) {
  if (o.input) return require(*o.input, "records file");
  const fs::path reflected = fs::path(cfg.out) / "reflect" / "records.jsonl";
  if (fs::exists(reflected)) return reflected;
  return require(fs::path(cfg.out) / "build" / "records.jsonl", "records file (run `build` first or pass --in)");
}

std::vector<BuiltRecord> load_records(const config::RunConfig& cfg, const fs::path& p) {
  try {
    return read_jsonl(p.string(), cfg.world, cfg.world.make_vocab());
  } catch (const std::runtime_error& e) {
    throw PrerequisiteError(std::string("records unreadable under this world config: ") + e.what());
  }
}

// ------------------------------------------------------------------ commands

int cmd_gen(const config::RunConfig& cfg, const Options&, std::ostream& out) {
  const auto dir = stage_dir(cfg, "gen");
  const auto samples = world::apply_split(world::generate_dataset(cfg.world, cfg.dataset_size), cfg.split, cfg.world);
  write_samples((dir / "dataset.jsonl").string(), samples, cfg.world);
  std::map<std::string, int> counts;
  for (const auto& s : samples) {
    for (const auto& t : s.split_tags) ++counts[t];
  }
  write_text(dir / "splits.json", json(counts).dump(2) + "\n");
  out << "gen: " << samples.size() << " samples -> " << (dir / "dataset.jsonl").string() << "\n";
  return kOk;
}

int cmd_sft(const config::RunConfig& cfg, const Options& o, std::ostream& out) {
  const auto train = with_tag(load_dataset(cfg, o), world::kTrain);
  if (train.empty()) throw PrerequisiteError("dataset has no train samples");
  const auto dir = stage_dir(cfg, "sft");
  auto result = train::run_sft(untrained_model(cfg), train, cfg.sft);
  model::save_checkpoint(result.model, (dir / "model.ckpt").string());
  std::string csv = "epoch,mean_loss,running_accuracy,train_accuracy\n";
  for (const auto& e : result.epochs) {
    csv += std::to_string(e.epoch) + "," + fmt(e.mean_loss) + "," + fmt(e.running_accuracy) + "," +
           (e.train_accuracy ? fmt(*e.train_accuracy) : "") + "\n";
  }
  write_text(dir / "sft_metrics.csv", csv);
  write_ids(dir / "trained_ids.txt", result.trained_ids);
  const auto& last = result.epochs.back();
  out << "sft: " << result.epochs.size() << " epochs, loss " << fmt(last.mean_loss);
  if (last.train_accuracy) out << ", train token accuracy " << fmt(*last.train_accuracy);
  out << "\n";
  return kOk;
}

int cmd_aar(const config::RunConfig& cfg, const Options& o, std::ostream& out) {
  const fs::path ckpt = o.from ? fs::path(*o.from) : fs::path(cfg.out) / "sft" / "model.ckpt";
  auto policy = load_model(require(ckpt, "SFT checkpoint (run `sft` first)"), "SFT checkpoint");
  const auto samples = load_dataset(cfg, o);
  const auto train = with_tag(samples, world::kTrain);
  const auto dev = with_tag(samples, world::kDev);
  if (train.empty()) throw PrerequisiteError("dataset has no train samples");
  const auto dir = stage_dir(cfg, "aar");
  auto judge = make_judge(cfg);
  auto result = train::run_aar(std::move(policy), train, dev, cfg.aar, *judge);
  model::save_checkpoint(result.model, (dir / "model.ckpt").string());
  std::string csv = train::aar_metrics_csv_header() + "\n";
  for (const auto& it : result.curve) csv += train::aar_metrics_csv_row(it) + "\n";
  write_text(dir / "aar_metrics.csv", csv);
  write_ids(dir / "trained_ids.txt", result.trained_ids);
  out << "aar: " << result.curve.size() << " iterations";
  if (!result.curve.empty() && result.curve.back().dev_acc) {
    out << ", dev ACC " << fmt(*result.curve.back().dev_acc) << ", dev mIoU " << fmt(*result.curve.back().dev_mean_iou);
  }
  out << "\n";
  return kOk;
}

int cmd_eval(const config::RunConfig& cfg, const Options& o, std::ostream& out) {
  const auto samples = load_dataset(cfg, o);
  std::vector<std::pair<std::string, model::PolicyModel>> methods = {{"untrained", untrained_model(cfg)}};
  for (const std::string stage : {"sft", "aar"}) {
    const fs::path p = fs::path(cfg.out) / stage / "model.ckpt";
    if (fs::exists(p)) methods.emplace_back(stage, load_model(p, stage + " checkpoint"));
  }
  const auto dir = stage_dir(cfg, "eval");
  eval::EvalReport report;
  report.metadata = {{"methods", json::array()}, {"seed", cfg.seed}, {"splits", cfg.eval.splits}};
  for (const auto& [name, m] : methods) {
    report.metadata["methods"].push_back(name);
    for (const auto& split : cfg.eval.splits) report.splits[name + "/" + split] = eval::evaluate_split(m, with_tag(samples, split));
  }
  write_text(dir / "report.json", report.to_json().dump(2) + "\n");
  write_text(dir / "report.csv", report.to_csv());
  out << report.summary_table();
  return kOk;
}

int cmd_ablate(const config::RunConfig& cfg, const Options& o, std::ostream& out) {
  fs::path ckpt;
  if (o.from) {
    ckpt = *o.from;
  } else {
    ckpt = fs::path(cfg.out) / "aar" / "model.ckpt";
    if (!fs::exists(ckpt)) ckpt = fs::path(cfg.out) / "sft" / "model.ckpt";
  }
  const auto m = load_model(require(ckpt, "trained checkpoint (run `sft` or `aar` first)"), "checkpoint");
  const auto samples = with_tag(load_dataset(cfg, o), cfg.eval.ablation_split);
  const auto dir = stage_dir(cfg, "ablate");
  eval::EvalReport report;
  report.curve = eval::run_injection_ablation(m, samples, cfg.eval.iou_grid);
  std::vector<double> x, y;
  for (const auto& r : report.curve) {
    x.push_back(r.target_iou);
    y.push_back(r.acc);
  }
  const double rho = eval::spearman(x, y);
  report.metadata = {{"checkpoint", ckpt.filename().string()},
                     {"split", cfg.eval.ablation_split},
                     {"spearman", std::isnan(rho) ? json(nullptr) : json(rho)}};
  write_text(dir / "curve.csv", eval::curve_csv(report.curve));
  write_text(dir / "curve.json", report.to_json().dump(2) + "\n");
  out << eval::curve_csv(report.curve) << "spearman," << (std::isnan(rho) ? std::string("nan") : fmt(rho)) << "\n";
  return kOk;
}

int cmd_build(const config::RunConfig& cfg, const Options& o, std::ostream& out) {
  const auto samples = load_dataset(cfg, o);
  const auto dir = stage_dir(cfg, "build");
  auto backend = make_backend(cfg);
  mau::PipelineOptions opts;
  opts.max_in_flight = cfg.generation.max_in_flight;
  opts.rules.min_iou = cfg.build.min_iou;
  const auto result = mau::run_pipeline(samples, cfg.world, mau::PromptBundle::defaults(), *backend, opts);
  const Vocab vocab = cfg.world.make_vocab();
  write_jsonl((dir / "records.jsonl").string(), result.records, cfg.world, vocab);
  write_text(dir / "audit.csv", mau::audit_csv(result.audit));
  std::map<std::string, int> counts;
  for (const auto& r : result.records) ++counts[to_string(r.provenance.review_status)];
  out << "build:";
  for (const auto& [k, v] : counts) out << " " << k << "=" << v;
  out << "\n";
  return kOk;
}

int cmd_reflect(const config::RunConfig& cfg, const Options& o, std::ostream& out) {
  const auto in_path = default_records(cfg, o);
  auto records = load_records(cfg, in_path);
  const auto dir = stage_dir(cfg, "reflect");
  auto backend = make_backend(cfg);
  const auto prompts = mau::PromptBundle::defaults();
  const Vocab vocab = cfg.world.make_vocab();
  std::vector<mau::AuditEntry> audit;
  int redone = 0;
  for (auto& r : records) {
    const auto st = r.provenance.review_status;
    if (st == ReviewStatus::Accepted || st == ReviewStatus::Corrected) continue;
    if (r.provenance.raw.empty()) {
      audit.push_back({r.sample.id, st, "no first-pass text to reflect"});
      continue;
    }
    try {
      r.provenance.reflected = mau::reflect(r.provenance.raw, prompts, *backend);
    } catch (const std::exception& e) {
      audit.push_back({r.sample.id, st, std::string("backend error: ") + e.what()});
      continue;
    }
    r.response_text = r.provenance.reflected;
    r.sample.reference_response = response_tokens(vocab, r.response_text);
    r.provenance.review_status = ReviewStatus::Pending;
    auto reviewed = mau::review_filter({r}, vocab, {cfg.build.min_iou});
    audit.push_back(reviewed.audit.front());
    r = reviewed.accepted.empty() ? reviewed.rejected.front() : reviewed.accepted.front();
    ++redone;
  }
  write_jsonl((dir / "records.jsonl").string(), records, cfg.world, vocab);
  write_text(dir / "audit.csv", mau::audit_csv(audit));
  out << "reflect: " << redone << " records re-reflected\n";
  return kOk;
}

int cmd_review(const config::RunConfig& cfg, const Options& o, std::ostream& out) {
  const auto path = default_records(cfg, o);
  auto records = load_records(cfg, path);
  const Vocab vocab = cfg.world.make_vocab();
  std::map<std::string, BuiltRecord*> by_id;
  for (auto& r : records) by_id[r.sample.id] = &r;
  auto find = [&](const std::string& id) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw config::ConfigError("review: no record with id '" + id + "'");
    return it->second;
  };
  std::vector<mau::AuditEntry> audit;
  for (const auto& id : o.accept) {
    find(id)->provenance.review_status = ReviewStatus::Accepted;
    audit.push_back({id, ReviewStatus::Accepted, "manual"});
  }
  for (const auto& id : o.reject) {
    find(id)->provenance.review_status = ReviewStatus::Rejected;
    audit.push_back({id, ReviewStatus::Rejected, "manual"});
  }
  for (const auto& c : o.correct) {
    const auto eq = c.find('=');
    if (eq == std::string::npos) throw config::ConfigError("review: --correct expects ID=TEXT");
    BuiltRecord* r = find(c.substr(0, eq));
    const std::string text = c.substr(eq + 1);
    const auto parsed = parse_response(vocab, response_tokens(vocab, text));
    if (!parsed.schema_valid || parsed.parsed_category != r->sample.gt_category || !parsed.parsed_bbox ||
        iou(*parsed.parsed_bbox, r->sample.gt_bbox) < cfg.build.min_iou) {
      throw config::ConfigError("review: correction for '" + r->sample.id + "' does not match its ground truth");
    }
    r->response_text = text;
    r->sample.reference_response = response_tokens(vocab, text);
    r->provenance.review_status = ReviewStatus::Corrected;
    audit.push_back({r->sample.id, ReviewStatus::Corrected, "manual"});
  }
  if (!audit.empty()) {
    write_jsonl(path.string(), records, cfg.world, vocab);
    const auto dir = stage_dir(cfg, "review");
    std::ofstream log(dir / "audit.csv", std::ios::app);
    if (fs::file_size(dir / "audit.csv") == 0) log << "id,decision,reason\n";
    for (const auto& a : audit) log << a.id << ',' << to_string(a.decision) << ',' << a.reason << '\n';
  }
  int listed = 0;
  for (const auto& r : records) {
    const auto st = r.provenance.review_status;
    if (st == ReviewStatus::Accepted || st == ReviewStatus::Corrected) continue;
    out << r.sample.id << '\t' << to_string(st) << '\t' << r.response_text << '\n';
    ++listed;
  }
  out << "review: " << audit.size() << " edits, " << listed << " records awaiting review\n";
  return kOk;
}

int cmd_export(const config::RunConfig& cfg, const Options& o, std::ostream& out) {
  const auto records = load_records(cfg, default_records(cfg, o));
  std::vector<BuiltRecord> kept;
  for (const auto& r : records) {
    const auto st = r.provenance.review_status;
    if (st == ReviewStatus::Accepted || st == ReviewStatus::Corrected) kept.push_back(r);
  }
  const auto dir = stage_dir(cfg, "export");
  write_jsonl((dir / "dataset.jsonl").string(), kept, cfg.world, cfg.world.make_vocab());
  out << "export: " << kept.size() << " of " << records.size() << " records -> " << (dir / "dataset.jsonl").string()
      << "\n";
  return kOk;
}

int fail(std::ostream& err, int code, const std::string& kind, const std::string& message) {
  err << json{{"error", kind}, {"message", message}}.dump() << "\n";
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Abnormality-aware localization and diagnosis on a synthetic patch world"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  app.add_option("--config", o.config, "JSON config file");
  app.add_option("--set", o.overrides, "Dotted key=value override (repeatable)")->take_all();
  app.add_option("--out", o.out, "Run directory");
  auto* seed_opt = app.add_option("--seed", seed, "Global seed");

  using Handler = int (*)(const config::RunConfig&, const Options&, std::ostream&);
  const std::vector<std::tuple<std::string, std::string, Handler>> commands = {
      {"gen", "Generate the synthetic dataset and its split", cmd_gen},
      {"sft", "Instruction tuning from the generated dataset", cmd_sft},
      {"aar", "Reward-driven fine-tuning of the SFT checkpoint", cmd_aar},
      {"eval", "Evaluate untrained, SFT and AAR checkpoints", cmd_eval},
      {"ablate", "Bounding-box injection ablation", cmd_ablate},
      {"build", "Generate, reflect and review dataset records", cmd_build},
      {"reflect", "Re-run the reflection pass on records not yet accepted", cmd_reflect},
      {"review", "List records awaiting review; apply manual decisions", cmd_review},
      {"export", "Write accepted and corrected records as a training dataset", cmd_export},
  };
  std::map<CLI::App*, Handler> handlers;
  for (const auto& [name, desc, fn] : commands) {
    auto* sub = app.add_subcommand(name, desc)->fallthrough();
    handlers[sub] = fn;
    if (name == "sft" || name == "aar" || name == "eval" || name == "ablate" || name == "build") {
      sub->add_option("--data", o.data, "Dataset JSONL (default <out>/gen/dataset.jsonl)");
    }
    if (name == "aar" || name == "ablate") sub->add_option("--from", o.from, "Checkpoint to start from");
    if (name == "reflect" || name == "review" || name == "export") sub->add_option("--in", o.input, "Records JSONL");
    if (name == "review") {
      sub->add_option("--accept", o.accept, "Accept a record by id")->take_all();
      sub->add_option("--reject", o.reject, "Reject a record by id")->take_all();
      sub->add_option("--correct", o.correct, "Replace a response: ID=TEXT")->take_all();
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    return fail(err, kConfigError, "usage", e.what());
  }
  if (*seed_opt) o.seed = seed;

  try {
    const auto cfg = config::resolve(o.config, o.overrides, o.out, o.seed);
    for (auto* sub : app.get_subcommands()) return handlers.at(sub)(cfg, o, out);
    return fail(err, kConfigError, "usage", "no subcommand");
  } catch (const config::ConfigError& e) {
    return fail(err, kConfigError, "config", e.what());
  } catch (const PrerequisiteError& e) {
    return fail(err, kPrerequisiteError, "prerequisite", e.what());
  } catch (const train::DivergenceError& e) {
    return fail(err, kDivergence, "divergence", e.what());
  } catch (const std::exception& e) {
    return fail(err, kRuntimeError, "runtime", e.what());
  }
}

}  // namespace unveil::cli
