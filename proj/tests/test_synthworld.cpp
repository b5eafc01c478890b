#include "unveil/synthworld.hpp"

#include <doctest.h>

#include <map>
#include <set>

using namespace unveil;
using world::WorldConfig;

namespace {

bool same(const Sample& a, const Sample& b) {
  return a.id == b.id && a.image.patch_features == b.image.patch_features && a.query == b.query &&
         a.reference_response == b.reference_response && a.gt_bbox == b.gt_bbox && a.gt_category == b.gt_category;
}

}  // namespace

TEST_SUITE("synthworld") {

TEST_CASE("generation is deterministic") {
  const auto cfg = WorldConfig::defaults();
  const auto a = world::generate_dataset(cfg, 100), b = world::generate_dataset(cfg, 100);
  REQUIRE(a.size() == 100);
  for (size_t i = 0; i < a.size(); ++i) CHECK(same(a[i], b[i]));
  auto other = cfg;
  other.seed = 8;
  CHECK(!same(a[0], world::generate_dataset(other, 1)[0]));
}

TEST_CASE("samples are consistent with their ground truth") {
  const auto cfg = WorldConfig::defaults();
  const Vocab vocab = cfg.make_vocab();
  for (const auto& s : world::generate_dataset(cfg, 200)) {
    s.image.validate();
    const auto r = parse_response(vocab, s.reference_response);
    CHECK(r.schema_valid);
    CHECK(r.parsed_category == s.gt_category);
    CHECK(r.parsed_bbox == s.gt_bbox);
    CHECK(s.gt_bbox.x2 <= cfg.width_patches);
    CHECK(s.gt_bbox.y2 <= cfg.height_patches);
    CHECK(s.image.patch_count() == cfg.height_patches * cfg.width_patches);
    CHECK(static_cast<int>(s.query.size()) <= 16);
  }
}

TEST_CASE("noise-free abnormal patches carry the category signature exactly") {
  auto cfg = WorldConfig::defaults();
  cfg.noise_scale = 0.0;
  cfg.decoy = false;
  cfg.hint_fraction = 0.0;
  const Matrix sig = cfg.signatures();
  for (const auto& s : world::generate_dataset(cfg, 50)) {
    for (int p : patches_in_region(s.image)) CHECK(s.image.patch_features.row(p) == sig.row(s.gt_category));
  }
}

TEST_CASE("categories are balanced") {
  const auto cfg = WorldConfig::defaults();
  std::map<int, int> counts;
  for (const auto& s : world::generate_dataset(cfg, 1000)) ++counts[s.gt_category];
  REQUIRE(counts.size() == 4);
  for (const auto& [c, n] : counts) {
    CHECK(n >= 200);
    CHECK(n <= 300);
  }
}

TEST_CASE("config validation") {
  auto cfg = WorldConfig::defaults();
  cfg.min_box = 9;
  cfg.max_box = 9;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = WorldConfig::defaults();
  cfg.categories.resize(1);
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK_THROWS_AS(world::generate_dataset(WorldConfig::defaults(), 0), std::invalid_argument);
  CHECK(WorldConfig::from_json(WorldConfig::defaults().to_json()).to_json() == WorldConfig::defaults().to_json());
}

TEST_CASE("default split fractions and disjointness") {
  const auto cfg = WorldConfig::defaults();
  const auto split = world::apply_split(world::generate_dataset(cfg, 1000), world::SplitPlan{}, cfg);
  int train = 0, test = 0, dev = 0;
  std::set<std::string> ids;
  for (const auto& s : split) {
    CHECK(s.has_tag(world::kTrain) != s.has_tag(world::kTest));
    if (s.has_tag(world::kDev)) CHECK(s.has_tag(world::kTest));
    train += s.has_tag(world::kTrain);
    test += s.has_tag(world::kTest);
    dev += s.has_tag(world::kDev);
    CHECK(ids.insert(s.id).second);
  }
  CHECK(train == 800);
  CHECK(test == 200);
  CHECK(dev == 100);
}

TEST_CASE("held-out families never reach train") {
  const auto cfg = WorldConfig::defaults();
  const auto samples = world::generate_dataset(cfg, 600);

  world::SplitPlan plan;
  plan.heldout_category_families = {"thorax"};
  for (const auto& s : world::apply_split(samples, plan, cfg)) {
    const bool thorax = world::category_family_of(cfg, s) == "thorax";
    CHECK(s.has_tag(world::kHeldoutCategory) == thorax);
    if (thorax) CHECK(!s.has_tag(world::kTrain));
  }

  plan = {};
  plan.heldout_dataset_families = {"xray"};
  for (const auto& s : world::apply_split(samples, plan, cfg)) {
    if (world::dataset_family_of(cfg, s) == "xray") {
      CHECK(s.has_tag(world::kHeldoutDataset));
      CHECK(s.has_tag(world::kTest));
      CHECK(!s.has_tag(world::kTrain));
    }
  }

  plan = {};
  plan.heldout_category_families = {"abdomen@ct"};
  int held = 0, abdomen_train = 0;
  for (const auto& s : world::apply_split(samples, plan, cfg)) {
    const bool fam = world::category_family_of(cfg, s) == "abdomen";
    const bool ct = world::dataset_family_of(cfg, s) == "ct";
    CHECK(s.has_tag(world::kHeldoutCategory) == (fam && ct));
    held += s.has_tag(world::kHeldoutCategory);
    abdomen_train += fam && s.has_tag(world::kTrain);
  }
  CHECK(held > 0);
  CHECK(abdomen_train > 0);  // the family is still seen in other datasets

  plan = {};
  plan.heldout_category_families = {"liver"};
  CHECK_THROWS(world::apply_split(samples, plan, cfg));
  plan = {};
  plan.heldout_category_families = {"thorax", "abdomen"};
  CHECK_THROWS_AS(world::apply_split(samples, plan, cfg), std::invalid_argument);
}

TEST_CASE("iou hints hit their target") {
  const BBox gt(0, 0, 10, 10);
  CHECK(world::make_iou_hint(gt, 1.0, 32, 32) == gt);
  CHECK(iou(world::make_iou_hint(gt, 0.0, 32, 32), gt) == 0.0);
  const double mid = iou(world::make_iou_hint(gt, 0.5, 32, 32), gt);
  CHECK(mid >= 0.49);
  CHECK(mid <= 0.51);
  for (int i = 0; i <= 10; ++i) {
    const double t = i / 10.0;
    CHECK(std::abs(iou(world::make_iou_hint(BBox(3, 2, 6, 5), t, 16, 16), BBox(3, 2, 6, 5)) - t) <= 0.01);
  }
  // a box spanning the grid width cannot be shifted off itself
  CHECK_THROWS_AS(world::make_iou_hint(BBox(0, 0, 8, 2), 0.0, 8, 8), std::domain_error);
  CHECK_THROWS_AS(world::make_iou_hint(gt, 1.5, 32, 32), std::invalid_argument);
  CHECK_THROWS_AS(world::make_iou_hint(BBox(1, 1, 1, 1), 0.5, 32, 32), std::invalid_argument);

  const BBox q = world::make_quantized_iou_hint(BBox(2, 2, 6, 5), 0.5, 8, 8);
  CHECK(q.x1 == std::floor(q.x1));
  CHECK(q.width() == 4);
}

}  // TEST_SUITE synthworld
