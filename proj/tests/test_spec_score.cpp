#include <cmath>
#include <algorithm>
#include <limits>

#include "doctest.h"
#include "tlgrpo/rng.hpp"
#include "tlgrpo/spec_score.hpp"

using namespace tlgrpo::score;
using doctest::Approx;

TEST_CASE("score_lower on its branches") {
  const double s = 10.0, t = 2.0;
  CHECK(score_lower(s, s, t) == 1.0);
  CHECK(score_lower(s + 5, s, t) == 1.0);
  CHECK(score_lower(s - t / 2, s, t) == Approx(0.25).epsilon(1e-15));
  CHECK(score_lower(s - t, s, t) == 0.0);
  CHECK(score_lower(s - 3 * t, s, t) == 0.0);
}

TEST_CASE("score_upper on its branches") {
  const double s = 10.0, t = 2.0;
  CHECK(score_upper(s, s, t) == 1.0);
  CHECK(score_upper(s + t / 2, s, t) == Approx(0.125).epsilon(1e-15));
  CHECK(score_upper(s + 2 * t, s, t) == 0.0);
  CHECK(score_upper(s - 100, s, t) == 1.0);
}

TEST_CASE("score_range matches the one-sided scores on its transitions") {
  const double l = 1.0, u = 3.0, tl = 0.5, tu = 0.4;
  CHECK(score_range((l + u) / 2, l, u, tl, tu) == 1.0);
  CHECK(score_range(l - tl / 2, l, u, tl, tu) == Approx(0.25));
  CHECK(score_range(u + tu / 2, l, u, tl, tu) == Approx(0.125));
  for (double v = l - 1; v < u + 1; v += 0.01) {
    if (v < l) CHECK(score_range(v, l, u, tl, tu) == score_lower(v, l, tl));
    if (v > u) CHECK(score_range(v, l, u, tl, tu) == score_upper(v, u, tu));
  }
  CHECK_THROWS_AS(score_range(2.0, 3.0, 1.0, tl, tu), InvalidSpec);
}

TEST_CASE("score functions reject non-finite input and bad widths") {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const double inf = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(score_lower(nan, 1.0, 1.0), InvalidInput);
  CHECK_THROWS_AS(score_upper(inf, 1.0, 1.0), InvalidInput);
  CHECK_THROWS_AS(score_lower(1.0, 1.0, 0.0), InvalidInput);
  CHECK_THROWS_AS(score_upper(1.0, 1.0, -1.0), InvalidInput);
}

TEST_CASE("continuity at every breakpoint") {
  tlgrpo::Rng rng(11);
  for (int k = 0; k < 200; ++k) {
    const double s = rng.uniform(-50, 50), tl = rng.uniform(0.01, 10), tu = rng.uniform(0.01, 10);
    const double u = s + rng.uniform(0, 10);
    for (double b : {s - tl, s}) {
      const double d = 1e-9 * tl;
      CHECK(std::abs(score_lower(b - d, s, tl) - score_lower(b + d, s, tl)) < 1e-6);
      CHECK(std::abs(score_range(b - d, s, u, tl, tu) - score_range(b + d, s, u, tl, tu)) < 1e-6);
    }
    for (double b : {u, u + tu}) {
      const double d = 1e-9 * tu;
      CHECK(std::abs(score_upper(b - d, u, tu) - score_upper(b + d, u, tu)) < 1e-6);
      CHECK(std::abs(score_range(b - d, s, u, tl, tu) - score_range(b + d, s, u, tl, tu)) < 1e-6);
    }
  }
}

TEST_CASE("geometric mean") {
  CHECK(geometric_mean({1, 1, 1, 1}) == 1.0);
  CHECK(geometric_mean({1, 0, 1}) == 0.0);
  CHECK(geometric_mean({0.25, 1.0}) == Approx(0.5).epsilon(1e-15));
  CHECK_THROWS_AS(geometric_mean({}), InvalidInput);
  // Many small factors stay representable in log space.
  std::vector<double> tiny(400, 1e-3);
  CHECK(geometric_mean(tiny) == Approx(1e-3).epsilon(1e-12));
}

TEST_CASE("final reward") {
  CHECK(final_reward(0.8, -1.0, RewardMode::Train) == 0.0);
  CHECK(final_reward(0.8, -1.0, RewardMode::Eval) == 0.8);
  CHECK(final_reward(0.3, 0.0, RewardMode::Train) == 0.3);
  CHECK(final_reward(0.8, -0.5, RewardMode::Train) == Approx(0.3));
  CHECK(format_penalty(FormatViolation::Malformed) == -1.0);
  CHECK(format_penalty(FormatViolation::BudgetOverrun) == -0.5);
  CHECK(format_penalty(FormatViolation::None) == 0.0);
}

TEST_CASE("default thresholds") {
  CHECK(default_thresholds(SpecKind::LowerBound, 79.14, 0).tau_lower == Approx(15.828).epsilon(1e-14));
  CHECK(default_thresholds(SpecKind::UpperBound, 17.77e-6, 0).tau_upper == Approx(3.554e-6).epsilon(1e-14));
  CHECK(default_thresholds(SpecKind::LowerBound, 0.0, 0).tau_lower == kAbsoluteThresholdFloor);
  const auto r = default_thresholds(SpecKind::Range, -2.0, 4.0, 0.1, 0.3);
  CHECK(r.tau_lower == Approx(0.2));
  CHECK(r.tau_upper == Approx(1.2));
}

TEST_CASE("spec sets validate names and kinds") {
  CHECK_THROWS_AS(SpecSet(std::vector<Objective>{}), InvalidSpec);
  CHECK_THROWS_AS(SpecSet({make_objective("a", SpecKind::LowerBound, 1), make_objective("a", SpecKind::UpperBound, 2)}),
                  InvalidSpec);
  CHECK_THROWS_AS(make_objective("r", SpecKind::Range, 2, 1), InvalidSpec);
  CHECK(spec_kind_from_string("upper") == SpecKind::UpperBound);
  CHECK_THROWS_AS(spec_kind_from_string("between"), InvalidSpec);
}

namespace {

SpecSet example_query() {
  return SpecSet({make_objective("gain", SpecKind::LowerBound, 79.14, 0, "dB"),
                  make_objective("gbw", SpecKind::LowerBound, 0.59e6, 0, "Hz"),
                  make_objective("pw", SpecKind::UpperBound, 17.77e-6, 0, "W"),
                  make_objective("pm", SpecKind::LowerBound, 70.95, 0, "deg")});
}

}  // namespace

TEST_CASE("worked example query") {
  const auto specs = example_query();
  MetricVector m({{"gain", 64.5553}, {"gbw", 23314.7}, {"pw", 6.29918e-06}, {"pm", 89.5388}});
  const auto p = objective_scores(m, specs);
  // Reference values from an independent evaluation of the piecewise formulas.
  CHECK(p[0] == Approx(0.00617020771020341).epsilon(1e-12));
  CHECK(p[1] == 0.0);
  CHECK(p[2] == 1.0);
  CHECK(p[3] == 1.0);
  CHECK(performance_reward(m, specs) == 0.0);

  MetricVector near({{"gain", 75.0}, {"gbw", 0.6e6}, {"pw", 18.5e-6}, {"pm", 72.0}});
  CHECK(performance_reward(near, specs) == Approx(0.7232151785295035).epsilon(1e-12));

  MetricVector at_target({{"gain", 79.14}, {"gbw", 0.59e6}, {"pw", 17.77e-6}, {"pm", 70.95}});
  CHECK(performance_reward(at_target, specs) == 1.0);

  MetricVector far({{"gain", 79.14}, {"gbw", 0.59e6}, {"pw", 1.0}, {"pm", 70.95}});
  CHECK(performance_reward(far, specs) == 0.0);
}

TEST_CASE("missing metric names the objective") {
  const auto specs = example_query();
  MetricVector m({{"gain", 80.0}, {"gbw", 1e6}, {"pm", 80.0}});
  try {
    performance_reward(m, specs);
    FAIL("expected MissingMetric");
  } catch (const MissingMetric& e) {
    CHECK(std::string(e.what()).find("pw") != std::string::npos);
  }
}

TEST_CASE("score breakdown") {
  const auto specs = example_query();
  MetricVector m({{"gain", 75.0}, {"gbw", 0.6e6}, {"pw", 18.5e-6}, {"pm", 72.0}});
  const auto b = score(m, specs, -0.5, RewardMode::Train);
  CHECK(b.per_objective.size() == 4);
  CHECK(b.per_objective[0].first == "gain");
  CHECK(b.final == Approx(b.performance - 0.5));
  CHECK(score(m, specs, -0.5, RewardMode::Eval).final == b.performance);
}

TEST_CASE("aggregate properties on random inputs") {
  tlgrpo::Rng rng(12);
  for (int k = 0; k < 500; ++k) {
    std::vector<double> p(2 + rng.below(6));
    for (auto& x : p) x = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
    const double P = geometric_mean(p);
    CHECK(P <= *std::max_element(p.begin(), p.end()) + 1e-15);
    CHECK((P == 0.0) == (std::find(p.begin(), p.end(), 0.0) != p.end()));
  }
}
