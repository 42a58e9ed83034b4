#include <cmath>
#include <numeric>

#include "doctest.h"
#include "tlgrpo/rl_core.hpp"

using namespace tlgrpo;
using namespace tlgrpo::rl;
using doctest::Approx;

namespace {

struct Fixture {
  std::vector<env::TaskDefinition> tasks{env::build_task(31, 4, 4, "rl-a"), env::build_task(32, 6, 4, "rl-b")};
  std::vector<env::QueryInstance> queries;

  Fixture() {
    for (const auto& t : tasks)
      for (auto& q : env::synthesize_queries(t, 6, 33, 0.1)) queries.push_back(std::move(q));
  }
};

}  // namespace

TEST_CASE("group advantages") {
  const std::vector<double> r{0.24, 0.42, 0.44, 0.48, 0.52};
  const auto a = group_advantages(r);
  CHECK(std::accumulate(a.begin(), a.end(), 0.0) == Approx(0.0).scale(1.0).epsilon(1e-12));
  double ss = 0.0;
  for (const double x : a) ss += x * x;
  CHECK(ss / a.size() == Approx(1.0).epsilon(1e-12));
  CHECK(a[0] < 0);
  CHECK(a[4] > 0);

  for (const double x : group_advantages(std::vector<double>(8, 0.3))) CHECK(x == 0.0);
  CHECK_THROWS_AS(group_advantages(std::vector<double>{1.0}), std::invalid_argument);
}

TEST_CASE("clipped surrogate") {
  CHECK(clipped_surrogate(1.0, 0.5, 0.2, 0.28) == 0.5);
  CHECK(clipped_surrogate(2.0, 1.0, 0.2, 0.28) == Approx(1.28));
  CHECK(clipped_surrogate(0.5, 1.0, 0.2, 0.28) == Approx(0.5));
  CHECK(clipped_surrogate(0.5, -1.0, 0.2, 0.28) == Approx(-0.8));
  CHECK(clipped_surrogate(2.0, -1.0, 0.2, 0.28) == Approx(-2.0));
}

TEST_CASE("algorithm names round-trip") {
  for (auto a : {Algorithm::TLGRPO, Algorithm::TrajGRPO, Algorithm::SingleTurnGRPO})
    CHECK(algorithm_from_string(to_string(a)) == a);
  CHECK_THROWS_AS(algorithm_from_string("ppo"), std::invalid_argument);
}

TEST_CASE("planned iterations") {
  TrainConfig c;
  c.batch_queries = 32;
  CHECK(planned_iterations(c, 10000) == 313);
  c.epochs = 2;
  CHECK(planned_iterations(c, 10000) == 625);
  c.iterations = 7;
  CHECK(planned_iterations(c, 10000) == 7);
}

TEST_CASE("trajectory split yields T contexts over growing prefixes") {
  Fixture f;
  const auto& q = f.queries[0];
  const auto& t = env::find_task(f.tasks, q.task_id);
  Rng rng(1);
  const auto traj = rollout_trajectory(policy::PolicyParameters{}, q, t, 5, rng);
  REQUIRE(traj.turns.size() == 5);
  const auto ctx = split_history(traj, q, t);
  REQUIRE(ctx.size() == 5);
  for (std::size_t k = 0; k < ctx.size(); ++k) {
    CHECK(ctx[k].turn_index == static_cast<int>(k));
    CHECK(ctx[k].prefix.size() == k + 1);
  }
  CHECK(traj.value() == std::max_element(traj.turns.begin(), traj.turns.end(), [](auto& a, auto& b) {
                          return a.reward < b.reward;
                        })->reward);
  CHECK_THROWS_AS(rollout_trajectory(policy::PolicyParameters{}, q, t, 6, rng), std::invalid_argument);
}

TEST_CASE("single-turn episodes equal the first TL-GRPO group") {
  Fixture f;
  const auto& q = f.queries[3];
  const auto& t = env::find_task(f.tasks, q.task_id);
  policy::PolicyParameters w;
  Rng init(9);
  for (auto& x : w.weights) x = 0.3 * init.normal();

  Rng r1(77);
  const auto single = single_turn_episodes(w, q, t, 8, r1);

  Rng seed_rng(5);
  const auto traj = rollout_trajectory(w, q, t, 5, seed_rng);
  const auto ctx = split_history(traj, q, t);
  Rng r2(77);
  const auto group = sample_turn_group(w, ctx[0], t, q, 8, r2);

  REQUIRE(single.members.size() == group.members.size());
  for (std::size_t i = 0; i < group.members.size(); ++i) {
    CHECK(single.members[i].choices == group.members[i].choices);
    CHECK(single.members[i].reward == group.members[i].reward);
    CHECK(single.members[i].advantage == group.members[i].advantage);
  }
}

TEST_CASE("the update at the frozen policy has unit ratios") {
  Fixture f;
  const auto& q = f.queries[1];
  const auto& t = env::find_task(f.tasks, q.task_id);
  policy::PolicyParameters w;
  Rng rng(4);
  const auto g = single_turn_episodes(w, q, t, 8, rng);
  std::vector<UpdateSample> batch;
  double mean_adv = 0.0;
  for (const auto& m : g.members) {
    batch.push_back({&g.context.features, &m.choices, m.log_prob_old, &m.component_log_prob_old, m.advantage});
    mean_adv += m.advantage / g.members.size();
  }
  TrainConfig c;
  std::vector<double> grad;
  const auto s = surrogate_objective(w, batch, c, nullptr, &grad);
  CHECK(s.clip_fraction == 0.0);
  CHECK(s.objective == Approx(mean_adv).scale(1.0).epsilon(1e-12));
  CHECK(s.loss == -s.objective);
  CHECK(grad.size() == w.weights.size());
}

TEST_CASE("update rejects a sample without a recorded old log-prob") {
  Fixture f;
  const auto& q = f.queries[1];
  const auto& t = env::find_task(f.tasks, q.task_id);
  Rng rng(4);
  const auto g = single_turn_episodes(policy::PolicyParameters{}, q, t, 4, rng);
  std::vector<UpdateSample> batch{
      {&g.context.features, &g.members[0].choices, std::nan(""), nullptr, g.members[0].advantage}};
  CHECK_THROWS_AS(surrogate_objective(policy::PolicyParameters{}, batch, TrainConfig{}, nullptr, nullptr),
                  std::invalid_argument);
}

TEST_CASE("training budget per query") {
  Fixture f;
  for (auto [alg, expected] : {std::pair{Algorithm::TLGRPO, 45u}, {Algorithm::TrajGRPO, 40u},
                               {Algorithm::SingleTurnGRPO, 8u}}) {
    TrainConfig c;
    c.algorithm = alg;
    c.batch_queries = 4;
    c.iterations = 1;
    const auto r = train(c, f.tasks, f.queries);
    REQUIRE(r.budget.size() == 4);
    for (const auto& b : r.budget) {
      CHECK(b.total_samples() == expected);
      CHECK(b.initial_simulations >= 1);
    }
    const auto audit = budget_audit(r.budget, c);
    CHECK(audit.passed());
    CHECK_NOTHROW(require_audit(audit));
  }
}

TEST_CASE("a tampered budget fails the audit") {
  Fixture f;
  TrainConfig c;
  c.batch_queries = 2;
  c.iterations = 1;
  auto r = train(c, f.tasks, f.queries);
  r.budget[1].group.samples -= 1;
  const auto audit = budget_audit(r.budget, c);
  CHECK_FALSE(audit.passed());
  CHECK_THROWS_AS(require_audit(audit), AuditFailure);
}

TEST_CASE("training is reproducible and independent of lanes") {
  Fixture f;
  TrainConfig c;
  c.batch_queries = 4;
  c.iterations = 3;
  c.seed = 12;
  const auto a = train(c, f.tasks, f.queries);
  c.lanes = 3;
  const auto b = train(c, f.tasks, f.queries);
  CHECK(a.policy.weights == b.policy.weights);
  CHECK(a.mean_rewards == b.mean_rewards);
  CHECK(a.iterations == 3);
}

TEST_CASE("parallel_for visits every index once") {
  std::vector<int> hits(100, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { ++hits[i]; });
  for (const int h : hits) CHECK(h == 1);
}
