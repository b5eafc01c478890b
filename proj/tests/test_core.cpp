#include "oracles.hpp"

#include "unveil/core.hpp"
#include "unveil/synthworld.hpp"
#include "unveil/vocab.hpp"

#include <doctest.h>

#include <algorithm>
#include <limits>
#include <random>

using namespace unveil;

TEST_SUITE("core") {

TEST_CASE("iou of identical, disjoint and overlapping boxes") {
  CHECK(iou({0, 0, 10, 10}, {0, 0, 10, 10}) == 1.0);
  CHECK(iou({0, 0, 10, 10}, {20, 20, 30, 30}) == 0.0);
  const double v = iou({0, 0, 10, 10}, {5, 5, 15, 15});
  CHECK(v == doctest::Approx(oracle::raster_iou({0, 0, 10, 10}, {5, 5, 15, 15}, 4, 16)).epsilon(1e-12));
  CHECK(v == doctest::Approx(25.0 / 175.0).epsilon(1e-12));
}

TEST_CASE("iou of zero-area boxes is 0") {
  CHECK(iou({1, 1, 1, 1}, {1, 1, 1, 1}) == 0.0);
  CHECK(iou({0, 0, 0, 5}, {0, 0, 3, 5}) == 0.0);
}

TEST_CASE("bbox rejects reversed or non-finite corners") {
  CHECK_THROWS_AS(BBox(2, 0, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(BBox(0, 3, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(BBox(0, 0, std::numeric_limits<double>::infinity(), 1), std::invalid_argument);
  CHECK_THROWS_AS(BBox(std::numeric_limits<double>::quiet_NaN(), 0, 1, 1), std::invalid_argument);
}

TEST_CASE("iou properties on random boxes") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (int i = 0; i < 500; ++i) {
    auto box = [&] {
      double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
      return BBox(std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d));
    };
    const BBox a = box(), b = box();
    const double tx = u(rng), ty = u(rng);
    const double v = iou(a, b);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(v == iou(b, a));
    CHECK(iou(a.translated(tx, ty), b.translated(tx, ty)) == doctest::Approx(v).epsilon(1e-9));
    if (a.area() > 0) CHECK(iou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("iou matches a lattice rasterization") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    const BBox a = oracle::lattice_box(rng, 4, 8), b = oracle::lattice_box(rng, 4, 8);
    CHECK(iou(a, b) == doctest::Approx(oracle::raster_iou(a, b, 4, 8)).epsilon(1e-9));
  }
}

TEST_CASE("patches_in_region by center containment") {
  const auto all = patches_in_region(BBox(0, 0, 4, 4), 4, 4);
  CHECK(all.size() == 16);
  CHECK(patches_in_region(BBox(1, 1, 1, 3), 4, 4).empty());
  CHECK(patches_in_region(BBox(0, 0, 2, 2), 4, 4) == std::vector<int>{0, 1, 4, 5});
  // a box covering only half of each patch contains no centers
  CHECK(patches_in_region(BBox(0, 0, 0.5, 4), 4, 4).empty());
  // row-major indexing on a non-square grid
  CHECK(patches_in_region(BBox(2, 1, 3, 2), 3, 5) == std::vector<int>{7});
}

}  // TEST_SUITE core

TEST_SUITE("vocab") {

TEST_CASE("vocab ids are contiguous and round-trip") {
  const Vocab v = world::WorldConfig::defaults().make_vocab();
  for (Token t = 0; t < v.size(); ++t) {
    CHECK(v.valid(t));
    CHECK(v.encode(v.decode({t})) == TokenSeq{t});
  }
  CHECK(!v.valid(v.size()));
  CHECK(v.encode("Nodule BBOX") == v.encode("nodule bbox"));
  CHECK(v.encode("zebra") == TokenSeq{Vocab::kUnk});
}

TEST_CASE("response encode/parse round trip") {
  const Vocab v = world::WorldConfig::defaults().make_vocab();
  const auto r = parse_response(v, encode_response(v, 2, BBox(1, 2, 5, 6)));
  CHECK(r.schema_valid);
  CHECK(r.parsed_category == 2);
  CHECK(r.parsed_bbox == BBox(1, 2, 5, 6));
}

TEST_CASE("parser is total and tolerant") {
  const Vocab v = world::WorldConfig::defaults().make_vocab();
  const auto empty = parse_response(v, {});
  CHECK(!empty.schema_valid);
  CHECK(!empty.parsed_bbox);
  CHECK(!empty.parsed_category);

  // category before bbox still parses
  TokenSeq permuted{v.abnormality(), v.category(), v.category_token(1), v.bbox(),
                    v.coord_token(0), v.coord_token(1), v.coord_token(3), v.coord_token(4), Vocab::kEos};
  const auto p = parse_response(v, permuted);
  CHECK(p.schema_valid);
  CHECK(p.parsed_category == 1);
  CHECK(p.parsed_bbox == BBox(0, 1, 3, 4));

  // content after EOS is ignored
  TokenSeq late{Vocab::kEos, v.bbox(), v.coord_token(0), v.coord_token(0), v.coord_token(1), v.coord_token(1),
                v.category(), v.category_token(0)};
  CHECK(!parse_response(v, late).schema_valid);

  // reversed corners and truncated boxes do not produce a bbox
  CHECK(!parse_response(v, {v.bbox(), v.coord_token(3), v.coord_token(0), v.coord_token(1), v.coord_token(1)}).parsed_bbox);
  CHECK(!parse_response(v, {v.bbox(), v.coord_token(0), v.coord_token(0)}).parsed_bbox);

  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> tok(0, v.size() - 1);
  for (int i = 0; i < 500; ++i) {
    TokenSeq junk(static_cast<size_t>(i % 15));
    for (auto& t : junk) t = tok(rng);
    const auto r = parse_response(v, junk);
    CHECK(r.schema_valid == (r.parsed_bbox.has_value() && r.parsed_category.has_value()));
  }
}

TEST_CASE("coordinates are quantized and clamped for tokenization") {
  const Vocab v = world::WorldConfig::defaults().make_vocab();
  const auto r = parse_response(v, encode_response(v, 0, BBox(0.4, 1.6, 2.5, 99)));
  REQUIRE(r.parsed_bbox);
  CHECK(r.parsed_bbox->x1 == 0);
  CHECK(r.parsed_bbox->y1 == 2);
  CHECK(r.parsed_bbox->x2 == 3);
  CHECK(r.parsed_bbox->y2 == v.max_coord());
}

}  // TEST_SUITE vocab
