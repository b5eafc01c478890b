#include "unveil/maubuild.hpp"
#include "unveil/records.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace unveil;
using namespace unveil::mau;
namespace fs = std::filesystem;

namespace {

struct Setup {
  world::WorldConfig world = world::WorldConfig::defaults();
  Vocab vocab = world.make_vocab();
};

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("unveil_test_" + name);
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

// Record passes the schema and names the ground truth exactly.
bool faithful(const BuiltRecord& r, const Vocab& v) {
  const auto p = parse_response(v, v.encode(r.response_text));
  return p.schema_valid && *p.parsed_category == r.sample.gt_category && iou(*p.parsed_bbox, r.sample.gt_bbox) >= 0.99;
}

// Always fails, like an unreachable endpoint.
class DownBackend final : public GenerationBackend {
 public:
  std::string generate(const GenerationRequest&) override { throw BackendError("down"); }
  std::string id() const override { return "down"; }
};

}  // namespace

TEST_SUITE("maubuild") {

TEST_CASE("template filling") {
  CHECK(fill_template("a {{x}} b {{ y }} {{x}}", {{"x", "1"}, {"y", "2"}}) == "a 1 b 2 1");
  CHECK(fill_template("no slots", {}) == "no slots");
  CHECK_THROWS_AS(fill_template("{{x}} {{missing}}", {{"x", "1"}}), MissingSlot);
  try {
    fill_template("{{gone}}", {});
  } catch (const MissingSlot& e) {
    CHECK(std::string(e.what()).find("gone") != std::string::npos);
  }
  const auto p = PromptBundle::defaults();
  CHECK(PromptBundle::from_json(p.to_json()).to_json() == p.to_json());
}

TEST_CASE("mock diagnosis is deterministic and reflection canonicalizes") {
  const Setup s;
  MockBackend backend(s.vocab);
  const auto prompts = PromptBundle::defaults();
  const std::string canonical = "abnormality bbox 1 2 5 6 category cyst";
  bool reordered = false;
  for (const auto& sample : world::generate_dataset(s.world, 30)) {
    const auto in = diagnosis_inputs(sample, s.world, s.vocab);
    const auto raw = build_diagnosis(in, prompts, backend);
    CHECK(raw == build_diagnosis(in, prompts, backend));
    const auto fixed = reflect(raw, prompts, backend);
    reordered |= fixed != raw;
    TokenSeq want = encode_response(s.vocab, sample.gt_category, sample.gt_bbox);
    want.pop_back();
    CHECK(s.vocab.encode(fixed) == want);
  }
  CHECK(reordered);
  CHECK(reflect(canonical, prompts, backend) == canonical);
  CHECK(reflect("category cyst abnormality bbox 1 2 5 6", prompts, backend) == canonical);
  CHECK(reflect("unparseable words", prompts, backend) == "unparseable words");
  CHECK_THROWS_AS(reflect("  \n", prompts, backend), std::invalid_argument);
  CHECK_THROWS_AS(backend.generate({}), BackendError);
}

TEST_CASE("review filter rejects wrong category and loose boxes") {
  const Setup s;
  const auto samples = world::generate_dataset(s.world, 3);
  std::vector<BuiltRecord> recs;
  for (const auto& x : samples) recs.push_back(record_from_sample(x, s.vocab));

  const int wrong = (samples[0].gt_category + 1) % s.vocab.category_count();
  recs[0].response_text = "abnormality category " + s.vocab.category_name(wrong) + " bbox 0 0 2 2";

  // one extra column: iou w/(w+1), under 0.99 for any box on the grid
  const BBox g = samples[1].gt_bbox;
  const BBox grown = g.x2 < s.world.width_patches ? BBox(g.x1, g.y1, g.x2 + 1, g.y2) : BBox(g.x1 - 1, g.y1, g.x2, g.y2);
  TokenSeq t = encode_response(s.vocab, samples[1].gt_category, grown);
  t.pop_back();
  recs[1].response_text = s.vocab.decode(t);
  REQUIRE(iou(grown, g) < 0.99);

  const auto out = review_filter(recs, s.vocab);
  REQUIRE(out.audit.size() == 3);
  CHECK(out.audit[0].decision == ReviewStatus::Rejected);
  CHECK(out.audit[0].reason.find("category") != std::string::npos);
  CHECK(out.audit[1].decision == ReviewStatus::Rejected);
  CHECK(out.audit[1].reason.find("iou") != std::string::npos);
  CHECK(out.audit[2].decision == ReviewStatus::Accepted);
  CHECK(out.accepted.size() == 1);
  CHECK(out.rejected.size() == 2);

  ReviewRules loose;
  loose.min_iou = 0.0;
  CHECK(review_filter({recs[1]}, s.vocab, loose).accepted.size() == 1);

  recs[0].provenance.review_status = ReviewStatus::Corrected;
  CHECK(review_filter({recs[0]}, s.vocab).audit[0].decision == ReviewStatus::Corrected);
  CHECK(audit_csv(out.audit).rfind("id,decision,reason\n", 0) == 0);
}

TEST_CASE("mock pipeline: every accepted record is faithful and output is byte-stable") {
  const Setup s;
  const auto samples = world::generate_dataset(s.world, 100);
  const auto prompts = PromptBundle::defaults();
  const auto dir = scratch("pipeline");
  std::string first;
  for (int run = 0; run < 2; ++run) {
    MockBackend backend(s.vocab);
    PipelineOptions opts;
    opts.max_in_flight = run == 0 ? 1 : 4;
    const auto result = run_pipeline(samples, s.world, prompts, backend, opts);
    REQUIRE(result.records.size() == 100);
    for (size_t i = 0; i < 100; ++i) {
      CHECK(result.records[i].sample.id == samples[i].id);
      CHECK(result.records[i].provenance.review_status == ReviewStatus::Accepted);
      CHECK(faithful(result.records[i], s.vocab));
    }
    const auto path = dir / ("r" + std::to_string(run) + ".jsonl");
    write_jsonl(path.string(), result.records, s.world, s.vocab);
    if (run == 0) {
      first = slurp(path);
    } else {
      CHECK(slurp(path) == first);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("pipeline over http and with a failing backend") {
  const Setup s;
  const auto samples = world::generate_dataset(s.world, 6);
  const auto prompts = PromptBundle::defaults();
  MockGenerationServer server(s.vocab);
  HttpBackend http(server.url(), 2000, 1);
  MockBackend local(s.vocab);
  const auto remote = run_pipeline(samples, s.world, prompts, http);
  const auto direct = run_pipeline(samples, s.world, prompts, local);
  for (size_t i = 0; i < samples.size(); ++i) {
    CHECK(remote.records[i].response_text == direct.records[i].response_text);
    CHECK(remote.records[i].provenance.review_status == ReviewStatus::Accepted);
  }

  DownBackend down;
  const auto failed = run_pipeline(samples, s.world, prompts, down);
  for (size_t i = 0; i < samples.size(); ++i) {
    CHECK(failed.records[i].provenance.review_status == ReviewStatus::Pending);
    CHECK(failed.audit[i].reason.find("backend error") != std::string::npos);
  }

  std::string dead;
  {
    MockGenerationServer gone(s.vocab);
    dead = gone.url();
  }
  HttpBackend unreachable(dead, 300, 1);
  CHECK(run_pipeline({samples[0]}, s.world, prompts, unreachable).records[0].provenance.review_status ==
        ReviewStatus::Pending);
}

}  // TEST_SUITE maubuild

TEST_SUITE("records") {

TEST_CASE("jsonl round trip regenerates images") {
  const Setup s;
  const auto samples = world::generate_dataset(s.world, 5);
  const auto dir = scratch("records");
  const auto path = (dir / "d.jsonl").string();
  write_samples(path, samples, s.world);
  const auto back = read_samples(path, s.world);
  REQUIRE(back.size() == samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    CHECK(back[i].id == samples[i].id);
    CHECK(back[i].image.patch_features == samples[i].image.patch_features);
    CHECK(back[i].reference_response == samples[i].reference_response);
    CHECK(back[i].query == samples[i].query);
  }
  CHECK_THROWS_AS(read_jsonl((dir / "missing.jsonl").string(), s.world, s.vocab), std::runtime_error);
  fs::remove_all(dir);

  for (auto st : {ReviewStatus::Pending, ReviewStatus::Accepted, ReviewStatus::Corrected, ReviewStatus::Rejected}) {
    CHECK(review_status_from_string(to_string(st)) == st);
  }
}

TEST_CASE("a record whose region disagrees with its image is refused") {
  const Setup s;
  const auto sample = world::generate_dataset(s.world, 1)[0];
  auto j = record_to_json(record_from_sample(sample, s.vocab), s.world, s.vocab);
  CHECK(record_from_json(j, s.world, s.vocab).sample.gt_bbox == sample.gt_bbox);
  j["image"]["region"][0] = j["image"]["region"][0].get<double>() + 1;
  CHECK_THROWS_AS(record_from_json(j, s.world, s.vocab), std::runtime_error);
  auto k = record_to_json(record_from_sample(sample, s.vocab), s.world, s.vocab);
  const int wrong = (sample.gt_category + 1) % s.vocab.category_count();
  k["image"]["category"] = s.vocab.category_name(wrong);
  CHECK_THROWS_AS(record_from_json(k, s.world, s.vocab), std::runtime_error);
}

}  // TEST_SUITE records
