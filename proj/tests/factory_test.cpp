// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing,
// software distributed under the License is distributed on an
// "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, either express or implied.  See the License for the
// specific language governing permissions and limitations
// under the License.

#include <gtest/gtest.h>

#include <cmath>

#include "costflow/factory.hpp"
#include "gen.hpp"

using namespace costflow;

namespace {

AssetDef Asset(std::string name, double hours, int nodes, TagMap tags = {}) {
  AssetDef a;
  a.name = std::move(name);
  a.partitioning = {{"CC-MAIN-2023-40"}, 1};
  a.tags = std::move(tags);
  a.resource_hints = ResourceHints{hours, nodes, 4.0};
  return a;
}

const PartitionKey kKey{"CC-MAIN-2023-40", 0};

BackendDescriptor RandomBackend(gen::Gen& g, std::string id) {
  SimProfile p;
  p.speed_factor = g.Real(0.5, 3.0);
  p.bootstrap_delay_hours = g.Coin(0.2) ? 0.0 : g.Real(0, 0.3);
  p.base_failure_prob = g.Real(0, 0.3);
  p.knobs = {g.Coin(), g.Coin(), g.Coin(), g.Coin() ? 2.0 : 1.0};
  BackendDescriptor d{std::move(id), "b", {Rate::FromUsd(g.Real(0, 10)), Rate::FromUsd(g.Real(0, 5)),
                                           Rate::FromUsd(g.Real(0, 1))},
                      p, !g.Coin(0.15)};
  if (g.Coin(0.15)) d.sim_profile.reset();
  return d;
}

// Independent estimate: bootstrap + scaled run time, each component rounded
// half-up to cents.
struct OracleEstimate {
  long double cost_cents;
  long double duration_ms;
};

OracleEstimate Estimate(const BackendDescriptor& d, const AssetDef& a) {
  const SimProfile p = d.sim_profile.value_or(SimProfile{});
  double run_h = a.resource_hints->est_base_duration_hours / p.speed_factor;
  const bool maintenance = a.tags.count("maintenance_heavy") && a.tags.at("maintenance_heavy") == "true";
  if (maintenance && !p.knobs.parallel_vacuum) run_h *= 1.25;
  if (!p.knobs.maximize_resource_allocation) run_h *= 1.15;
  const long double ms = std::llround(p.bootstrap_delay_hours * 3.6e6) + std::llround(run_h * 3.6e6);
  const int n = a.resource_hints->node_count;
  auto part = [&](Rate r) {
    const long double exact_cents = ms * n * static_cast<long double>(r.micros()) / 3.6e10L;
    return std::floor(exact_cents + 0.5L);
  };
  return {part(d.rate_card.instance) + part(d.rate_card.surcharge) + part(d.rate_card.storage), ms};
}

}  // namespace

TEST(Estimate, ZeroEverything) {
  BackendDescriptor d{"x", "x", {Rate::FromUsd(5), Rate::FromUsd(1), Rate::FromUsd(1)}, SimProfile{}, true};
  const auto est = EstimateStep(d, SpecFor(Asset("a", 0.0, 3), kKey));
  EXPECT_EQ(est.duration_hours, 0.0);
  EXPECT_EQ(est.cost.total, Money{});
}

TEST(Estimate, EmrDefaultProfileHandComputed) {
  BackendDescriptor d{"emr_sim", "emr", {Rate::FromUsd(1.0), Rate::FromUsd(0.2), Rate::FromUsd(0.05)},
                      DefaultEmrProfile(), true};
  const auto est = EstimateStep(d, SpecFor(Asset("edges", 10.0, 1), kKey));
  EXPECT_DOUBLE_EQ(est.duration_hours, 10.15);
  // 10.15 x 1.25 = 12.6875 before rounding; components round to cents first.
  EXPECT_EQ(est.cost.compute, Money::Parse("10.15"));
  EXPECT_EQ(est.cost.surcharge, Money::Parse("2.03"));
  EXPECT_EQ(est.cost.storage, Money::Parse("0.51"));
  EXPECT_EQ(est.cost.total, Money::Parse("12.69"));
  EXPECT_NEAR(est.cost.total.usd(), 12.6875, 0.005);
}

TEST(Estimate, DbrFasterButDearerOnEdges) {
  BackendRegistry reg(DefaultBackends());
  const StepSpec spec = SpecFor(Asset("edges", 9.99, 10, {{"maintenance_heavy", "true"}}), kKey);
  const auto emr = EstimateStep(reg, "emr_sim", spec);
  const auto dbr = EstimateStep(reg, "dbr_sim", spec);
  EXPECT_LT(dbr.duration_hours, emr.duration_hours);
  EXPECT_GT(dbr.cost.total, emr.cost.total);
  EXPECT_THROW(EstimateStep(reg, "nope", spec), Error);
}

TEST(Select, Examples) {
  BackendRegistry reg(DefaultBackends());
  SelectionPolicy policy{"emr_sim", 0.5, {}, {"emr_sim", "dbr_sim"}};
  auto hinted = Asset("graph", 0.4, 10);
  hinted.backend_hint = "dbr_sim";
  policy.cost_weight = 1.0;
  EXPECT_EQ(SelectBackend(hinted, kKey, policy, reg), "dbr_sim");
  const auto edges = Asset("edges", 10.0, 10);
  EXPECT_EQ(SelectBackend(edges, kKey, policy, reg), "emr_sim");
  policy.cost_weight = 0.0;
  EXPECT_EQ(SelectBackend(edges, kKey, policy, reg), "dbr_sim");
}

TEST(Select, RulesThenDefaultThenScore) {
  BackendRegistry reg(DefaultBackends());
  SelectionPolicy policy{"local", 0.0, {}, {}};
  policy.rules.push_back({{{{"op", "extract_edges"}}, std::nullopt}, "emr_sim"});
  policy.rules.push_back({{{}, std::string("CC-MAIN-2023")}, "dbr_sim"});
  EXPECT_EQ(SelectBackend(Asset("e", 1, 1, {{"op", "extract_edges"}}), kKey, policy, reg), "emr_sim");
  EXPECT_EQ(SelectBackend(Asset("g", 1, 1), kKey, policy, reg), "dbr_sim");
  EXPECT_EQ(SelectBackend(Asset("g", 1, 1), {"CC-MAIN-2024-10", 0}, policy, reg), "dbr_sim");  // fastest
  policy.cost_weight = 1.0;
  EXPECT_EQ(SelectBackend(Asset("g", 1, 1), {"CC-MAIN-2024-10", 0}, policy, reg), "local");  // free
  auto bare = Asset("g", 1, 1);
  bare.resource_hints.reset();
  EXPECT_EQ(SelectBackend(bare, {"X", 0}, policy, reg), "local");
  policy.default_backend = "emr_sim";
  EXPECT_EQ(SelectBackend(bare, {"X", 0}, policy, reg), "emr_sim");
}

TEST(Select, Errors) {
  BackendRegistry empty;
  SelectionPolicy policy{"emr_sim", 0.5, {}, {}};
  try {
    SelectBackend(Asset("a", 1, 1), kKey, policy, empty);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kEmptyRegistry);
  }
  BackendRegistry reg(DefaultBackends());
  auto a = Asset("a", 1, 1);
  a.backend_hint = "gcp";
  EXPECT_THROW(SelectBackend(a, kKey, policy, reg), Error);
  EXPECT_THROW(ValidatePolicy({"gcp", 0.5, {}, {}}, reg), Error);
  EXPECT_THROW(ValidatePolicy({"emr_sim", 1.5, {}, {}}, reg), Error);
  EXPECT_NO_THROW(ValidatePolicy({"emr_sim", 1.0, {}, {"dbr_sim"}}, reg));
  EXPECT_THROW(SelectByScore({}, 0.5), Error);
}

TEST(Select, TieBreakBySmallestId) {
  EXPECT_EQ(SelectByScore({{"zeta", 1.0, 1.0}, {"alpha", 1.0, 1.0}, {"mid", 1.0, 1.0}}, 0.5), "alpha");
  EXPECT_EQ(SelectByScore({{"b", 0.0, 0.0}, {"a", 0.0, 0.0}}, 0.3), "a");
}

TEST(SelectProperty, HintAlwaysWins) {
  gen::Gen g(100);
  for (int trial = 0; trial < 100; ++trial) {
    BackendRegistry reg;
    std::vector<std::string> ids;
    for (int i = g.Int(1, 5); i > 0; --i) {
      const std::string id = "b" + std::to_string(i);
      reg.Add(RandomBackend(g, id));
      ids.push_back(id);
    }
    SelectionPolicy policy{g.Pick(ids), g.Unit(), {}, {}};
    for (int r = g.Int(0, 3); r > 0; --r) policy.rules.push_back({{{}, std::string("CC")}, g.Pick(ids)});
    auto asset = Asset("x", g.Real(0, 20), g.Int(1, 20));
    asset.backend_hint = g.Pick(ids);
    EXPECT_EQ(SelectBackend(asset, kKey, policy, reg), *asset.backend_hint);
  }
}

TEST(SelectProperty, ExtremeWeightsMatchBruteForce) {
  gen::Gen g(101);
  for (int trial = 0; trial < 300; ++trial) {
    BackendRegistry reg;
    for (int i = g.Int(1, 6); i > 0; --i) reg.Add(RandomBackend(g, "b" + std::to_string(i)));
    std::vector<std::string> candidates;
    for (const auto& [id, d] : reg.all()) {
      if (g.Coin(0.3)) candidates.push_back(id);
    }
    const auto asset = Asset("x", g.Real(0.01, 20), g.Int(1, 20),
                             g.Coin() ? TagMap{{"maintenance_heavy", "true"}} : TagMap{});
    std::optional<std::string> best_cost, best_dur;
    long double min_cost = 0, min_dur = 0;
    for (const auto& [id, d] : reg.all()) {  // ascending id
      if (!d.available) continue;
      if (!candidates.empty() && std::find(candidates.begin(), candidates.end(), id) == candidates.end()) continue;
      const auto est = Estimate(d, asset);
      if (!best_cost || est.cost_cents < min_cost) best_cost = id, min_cost = est.cost_cents;
      if (!best_dur || est.duration_ms < min_dur) best_dur = id, min_dur = est.duration_ms;
    }
    for (double w : {1.0, 0.0}) {
      const SelectionPolicy policy{reg.all().begin()->first, w, {}, candidates};
      const auto& want = w == 1.0 ? best_cost : best_dur;
      if (!want) {
        EXPECT_THROW(SelectBackend(asset, kKey, policy, reg), Error);
        continue;
      }
      EXPECT_EQ(SelectBackend(asset, kKey, policy, reg), *want) << "trial " << trial << " w " << w;
    }
  }
}

TEST(SelectProperty, UniformCostScalingNeverChangesSelection) {
  gen::Gen g(102);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<ScoredCandidate> cands;
    for (int i = g.Int(1, 6); i > 0; --i) {
      cands.push_back({"b" + std::to_string(i), g.Coin(0.1) ? 0.0 : g.Real(0, 1000), g.Real(0, 30)});
    }
    const double w = g.Unit();
    const std::string base = SelectByScore(cands, w);
    for (double scale : {1e-3, 0.5, 3.0, 1e4}) {
      auto scaled = cands;
      for (auto& c : scaled) c.cost_usd *= scale;
      EXPECT_EQ(SelectByScore(scaled, w), base) << "trial " << trial << " scale " << scale;
    }
  }
}

TEST(SelectProperty, NeverReturnsUnknownBackend) {
  gen::Gen g(103);
  for (int trial = 0; trial < 200; ++trial) {
    BackendRegistry reg;
    for (int i = g.Int(1, 4); i > 0; --i) reg.Add(RandomBackend(g, "b" + std::to_string(i)));
    const SelectionPolicy policy{reg.all().begin()->first, g.Unit(), {}, {}};
    try {
      EXPECT_TRUE(reg.Contains(SelectBackend(Asset("x", g.Real(0, 5), g.Int(1, 5)), kKey, policy, reg)));
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::kEmptyRegistry);  // every backend unavailable
    }
  }
}
