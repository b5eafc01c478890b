#include "oracles.hpp"

#include "unveil/judge.hpp"
#include "unveil/nn.hpp"
#include "unveil/rewards.hpp"
#include "unveil/synthworld.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace unveil;
using namespace unveil::rewards;

namespace {

RewardBreakdown raw(double llm, double loc, double att) {
  RewardBreakdown r;
  r.r_llm = llm;
  r.r_loc = loc;
  r.r_att = att;
  return r;
}

}  // namespace

TEST_SUITE("rewards") {

TEST_CASE("localization reward") {
  CHECK(localization_reward(BBox(1, 1, 4, 4), BBox(1, 1, 4, 4)) == 1.0);
  CHECK(localization_reward(std::nullopt, BBox(1, 1, 4, 4)) == 0.0);
  CHECK(localization_reward(BBox(0, 0, 10, 10), BBox(5, 5, 15, 15)) ==
        doctest::Approx(oracle::raster_iou({0, 0, 10, 10}, {5, 5, 15, 15}, 2, 16)));
}

TEST_CASE("vision relevance examples") {
  CHECK(vision_relevance_reward(Matrix::Zero(1, 16), {0, 1, 2}, 16) == doctest::Approx(3.0 / 16.0));
  CHECK(vision_relevance_reward(Matrix(0, 16), {0, 1}, 16) == 0.0);
  Matrix two(1, 2);
  two << std::log(2.0), 0.0;
  CHECK(vision_relevance_reward(two, {0}, 2) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("vision relevance bounds and partition") {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> rows(0, 4);
  for (int it = 0; it < 200; ++it) {
    const int n = rows(rng), P = 12;
    const Matrix logits = nn::random_normal(n, P, 3.0, rng);
    std::vector<int> inside, outside;
    for (int j = 0; j < P; ++j) (j % 3 == it % 3 ? inside : outside).push_back(j);
    const double a = vision_relevance_reward(logits, inside, P);
    const double b = vision_relevance_reward(logits, outside, P);
    CHECK(a >= 0.0);
    CHECK(a <= n + 1e-12);
    CHECK(std::abs(a + b - n) < 1e-6);
    CHECK(a == doctest::Approx(oracle::softmax_mass(logits, inside)).epsilon(1e-9));
  }
  // large logits stay finite
  Matrix big(1, 3);
  big << 1000, 999, -1000;
  CHECK(vision_relevance_reward(big, {0}, 3) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
}

TEST_CASE("group normalization example") {
  const auto out = normalize_and_aggregate({raw(0.1, 0.2, 1.0), raw(0.3, 0.4, 2.0)});
  CHECK(*out[0].r_loc_norm == doctest::Approx(0.5));
  CHECK(*out[1].r_att_norm == 1.0);
  CHECK(*out[0].r_combined == doctest::Approx(1.1).epsilon(1e-15));
  CHECK(*out[1].r_combined == doctest::Approx(2.3).epsilon(1e-15));
}

TEST_CASE("group normalization degenerate and single groups") {
  const auto zero = normalize_and_aggregate({raw(0.5, 0.0, 0.0), raw(0.2, 0.0, 0.0)});
  for (const auto& r : zero) {
    CHECK(*r.r_loc_norm == 0.0);
    CHECK(*r.r_att_norm == 0.0);
    CHECK(*r.r_combined == r.r_llm);
  }
  const auto one = normalize_and_aggregate({raw(0.2, 0.3, 0.7)});
  CHECK(*one[0].r_loc_norm == 1.0);
  CHECK(*one[0].r_att_norm == 1.0);
  CHECK_THROWS_AS(normalize_and_aggregate({}), std::invalid_argument);
}

TEST_CASE("group normalization properties") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int it = 0; it < 200; ++it) {
    std::vector<RewardBreakdown> g;
    for (int k = 0; k < 8; ++k) g.push_back(raw(u(rng), u(rng), 3 * u(rng)));
    const auto out = normalize_and_aggregate(g);
    double max_loc = 0, max_att = 0;
    for (size_t a = 0; a < out.size(); ++a) {
      max_loc = std::max(max_loc, *out[a].r_loc_norm);
      max_att = std::max(max_att, *out[a].r_att_norm);
      CHECK(*out[a].r_combined == doctest::Approx(out[a].r_llm + *out[a].r_loc_norm + *out[a].r_att_norm));
      for (size_t b = 0; b < out.size(); ++b) {
        if (g[a].r_loc < g[b].r_loc) CHECK(*out[a].r_loc_norm <= *out[b].r_loc_norm);
        if (g[a].r_att < g[b].r_att) CHECK(*out[a].r_att_norm <= *out[b].r_att_norm);
      }
    }
    CHECK(max_loc == 1.0);
    CHECK(max_att == 1.0);
  }
}

TEST_CASE("channel mask removes channels from the combined reward") {
  ChannelMask mask;
  mask.att = false;
  const auto out = normalize_and_aggregate({raw(0.1, 0.2, 1.0), raw(0.3, 0.4, 2.0)}, mask);
  CHECK(*out[0].r_combined == doctest::Approx(0.1 + 0.5));
  CHECK(*out[1].r_combined == doctest::Approx(0.3 + 1.0));
}

TEST_CASE("bellman update examples") {
  auto s = bellman_q_update(0, 1, 0.99, 0, 0.1);
  CHECK(s.delta == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(s.new_q == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(bellman_q_update(0.7, 3, 0.9, 2, 0.0).new_q == 0.7);
  s = bellman_q_update(1, 0, 0.5, 2, 0.3);
  CHECK(s.delta == 0.0);
  CHECK(s.new_q == 1.0);
  CHECK_THROWS_AS(bellman_q_update(0, 0, 1.5, 0, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(bellman_q_update(0, 0, 0.5, 0, -0.1), std::invalid_argument);
}

TEST_CASE("iterated bellman updates reach the value-iteration fixed point") {
  const oracle::TabularMdp mdp;
  const double gamma = 0.9;
  const auto exact = oracle::value_iteration(mdp, gamma);
  std::array<std::array<double, 2>, 3> q{};
  for (int sweep = 0; sweep < 2000; ++sweep) {
    for (int s = 0; s < 3; ++s) {
      for (int a = 0; a < 2; ++a) {
        const int n = mdp.next[s][a];
        q[s][a] = bellman_q_update(q[s][a], mdp.reward[s][a], gamma, std::max(q[n][0], q[n][1]), 0.5).new_q;
      }
    }
  }
  for (int s = 0; s < 3; ++s) {
    for (int a = 0; a < 2; ++a) CHECK(std::abs(q[s][a] - exact[s][a]) < 1e-6);
  }
}

}  // TEST_SUITE rewards

TEST_SUITE("judge") {

TEST_CASE("reference rubric") {
  const auto cfg = world::WorldConfig::defaults();
  const Vocab v = cfg.make_vocab();
  const Sample s = world::generate_dataset(cfg, 1)[0];
  ReferenceJudge judge;
  auto score = [&](const TokenSeq& t) { return judge.judge(parse_response(v, t), s, v).score; };
  CHECK(score(s.reference_response) == doctest::Approx(1.0));
  CHECK(score({}) == 0.0);
  const int wrong = (s.gt_category + 1) % v.category_count();
  CHECK(score(encode_response(v, wrong, s.gt_bbox)) == doctest::Approx(0.4));
  // category right, no bbox: schema invalid
  CHECK(score({v.category(), v.category_token(s.gt_category), Vocab::kEos}) == doctest::Approx(0.6));
}

TEST_CASE("http judge against the mock server") {
  const auto cfg = world::WorldConfig::defaults();
  const Vocab v = cfg.make_vocab();
  const Sample s = world::generate_dataset(cfg, 1)[0];
  const auto resp = parse_response(v, s.reference_response);
  MockJudgeServer server({{v.decode(s.reference_response), {0.9, "good"}}});
  HttpJudge judge(server.url(), 2000);
  const auto verdict = judge.judge(resp, s, v);
  CHECK(verdict.score == doctest::Approx(0.9));
  CHECK(verdict.rationale == "good");
  CHECK(judge.judge(parse_response(v, {}), s, v).score == doctest::Approx(0.5));
  CHECK(server.requests() == 2);

  server.server().set_raw_reply("not json");
  CHECK_THROWS_AS(judge.judge(resp, s, v), JudgeError);
  FallbackJudge fallback(std::make_unique<HttpJudge>(server.url(), 2000), std::make_unique<ReferenceJudge>());
  CHECK(fallback.judge(resp, s, v).score == doctest::Approx(1.0));
  CHECK(fallback.fallbacks() == 1);
}

TEST_CASE("http judge rejects out-of-range scores and dead endpoints") {
  const auto cfg = world::WorldConfig::defaults();
  const Vocab v = cfg.make_vocab();
  const Sample s = world::generate_dataset(cfg, 1)[0];
  const auto resp = parse_response(v, s.reference_response);
  MockJudgeServer server({}, {1.5, "too high"});
  CHECK_THROWS_AS(HttpJudge(server.url(), 2000).judge(resp, s, v), JudgeError);

  server.server().set_delay_ms(400);
  CHECK_THROWS_AS(HttpJudge(server.url(), 100).judge(resp, s, v), JudgeError);

  std::string dead;
  {
    MockJudgeServer gone;
    dead = gone.url();
  }
  CHECK_THROWS_AS(HttpJudge(dead, 500).judge(resp, s, v), JudgeError);
}

}  // TEST_SUITE judge
