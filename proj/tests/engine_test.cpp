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

#include <filesystem>
#include <fstream>
#include <sstream>

#include "costflow/crawl_workload.hpp"
#include "costflow/engine.hpp"
#include "costflow/pipeline_file.hpp"
#include "gen.hpp"
#include "oracle/crawl_reference.hpp"
#include "oracle/scheduler_oracle.hpp"
#include "oracle/state_table.hpp"

using namespace costflow;
namespace fs = std::filesystem;

namespace {

const std::string kT = "CC-MAIN-2023-40";
constexpr Millis kHour = 3'600'000;

const std::vector<EngineEventKind> kEvents = {EngineEventKind::kLaunch, EngineEventKind::kStart,
                                              EngineEventKind::kSucceed, EngineEventKind::kFail,
                                              EngineEventKind::kCancel, EngineEventKind::kHeartbeatTimeout};

EngineEvent Make(EngineEventKind k, Millis at) {
  if (k == EngineEventKind::kFail) return EngineEvent::Fail(at, "OOM");
  return {k, at, {}};
}

// Deterministic, failure-free backends with no bootstrap.
BackendDescriptor Quiet(std::string id, double speed = 1.0, double rate = 1.0) {
  SimProfile p;
  p.speed_factor = speed;
  return {std::move(id), "quiet", {Rate::FromUsd(rate), Rate::FromUsd(rate / 4), Rate::FromUsd(rate / 20)}, p, true};
}

AssetDef Def(std::string name, std::vector<std::string> deps, double hours, PartitionSpec parts = {{kT}, 1},
             std::optional<std::string> hint = std::nullopt, TagMap tags = {}) {
  AssetDef a;
  a.name = std::move(name);
  a.deps = std::move(deps);
  a.partitioning = std::move(parts);
  a.backend_hint = std::move(hint);
  a.tags = std::move(tags);
  a.resource_hints = ResourceHints{hours, 2, 8.0};
  return a;
}

// nodes -> edges -> graph -> graph_aggr, one hour each.
std::vector<AssetDef> FourAssets(PartitionSpec parts = {{kT}, 1}) {
  return {Def("nodes", {}, 1.0, parts), Def("edges", {"nodes"}, 1.0, parts),
          Def("graph", {"nodes", "edges"}, 1.0, parts), Def("graph_aggr", {"graph"}, 1.0, parts)};
}

struct Harness {
  BackendRegistry registry{{Quiet("q")}};
  SelectionPolicy policy{"q", 1.0, {}, {}};
  std::map<std::pair<std::string, int>, Fate> fates;  // (step_key, attempt)

  RunPlan Plan(const std::vector<AssetDef>& defs, const PartitionFilter& filter = {}) const {
    return PlanRun(std::make_shared<const AssetGraph>(ValidateGraph(defs)), filter, policy, registry);
  }

  EngineOptions Options(int concurrency = 4) const {
    EngineOptions o;
    o.max_concurrency = concurrency;
    auto scripted = fates;
    o.make_backend = [scripted](const BackendDescriptor& d) {
      auto b = MakeBackend(d);
      for (const auto& [k, f] : scripted) b->ScriptFate(k.first, k.second, f);
      return b;
    };
    return o;
  }
};

std::vector<const StepAttempt*> AttemptsOf(const RunRecord& r, const std::string& step) {
  std::vector<const StepAttempt*> out;
  for (const auto& a : r.attempts) {
    if (a.step_key == step) out.push_back(&a);
  }
  return out;
}

oracle::StepDeps DepsOf(const RunPlan& plan) {
  oracle::StepDeps deps;
  std::set<std::string> planned;
  for (const auto& s : plan.steps) planned.insert(s.step_key);
  for (const auto& s : plan.steps) {
    auto& v = deps[s.step_key];
    for (const auto& d : plan.graph->asset(s.asset).deps) {
      if (planned.count(StepKey(d, s.partition))) v.push_back(StepKey(d, s.partition));
    }
  }
  return deps;
}

fs::path ScratchDir(const std::string& name) {
  const auto dir = fs::current_path() / "engine_test_scratch" / name;
  fs::remove_all(dir);
  return dir;
}

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// State machine
// ---------------------------------------------------------------------------

TEST(Transition, TableMatchesOracle) {
  for (auto s : {AttemptState::kQueued, AttemptState::kLaunching, AttemptState::kRunning, AttemptState::kSuccess,
                 AttemptState::kFailure, AttemptState::kCanceled}) {
    for (auto k : kEvents) {
      StepAttempt a;
      a.state = s;
      const auto want = oracle::ExpectedNext(std::string(AttemptStateName(s)), std::string(EngineEventName(k)));
      if (!want) {
        try {
          Transition(a, Make(k, 1));
          ADD_FAILURE() << AttemptStateName(s) << " + " << EngineEventName(k) << " accepted";
        } catch (const Error& e) {
          EXPECT_EQ(e.code(), Errc::kIllegalTransition);
        }
        continue;
      }
      EXPECT_EQ(AttemptStateName(Transition(a, Make(k, 1)).state), *want);
    }
  }
}

TEST(Transition, Examples) {
  StepAttempt a;
  a = Transition(a, EngineEvent::Launch(10));
  EXPECT_EQ(a.started_at, 10);
  a = Transition(a, EngineEvent::Start(20));
  const StepAttempt running = a;
  a = Transition(a, EngineEvent::Succeed(30));
  EXPECT_EQ(a.state, AttemptState::kSuccess);
  EXPECT_EQ(a.ended_at, 30);
  EXPECT_THROW(Transition(a, EngineEvent::Cancel(40)), Error);
  const auto hb = Transition(running, EngineEvent::HeartbeatTimeout(50));
  EXPECT_EQ(hb.state, AttemptState::kFailure);
  EXPECT_EQ(hb.error_code, "HEARTBEAT_TIMEOUT");
  EXPECT_THROW(Transition(running, EngineEvent::Fail(5, "")), Error);
}

TEST(Transition, AllSequencesUpToSixMatchOracleAndAbsorb) {
  std::size_t checked = 0;
  std::vector<std::size_t> idx;
  for (std::size_t len = 0; len <= 6; ++len) {
    idx.assign(len, 0);
    while (true) {
      StepAttempt a;
      std::string state = "QUEUED";
      bool dead = false;  // oracle says illegal at some point
      for (std::size_t i = 0; i < len && !dead; ++i) {
        const auto k = kEvents[idx[i]];
        const auto want = oracle::ExpectedNext(state, std::string(EngineEventName(k)));
        const bool was_terminal = IsTerminal(a.state);
        try {
          a = Transition(a, Make(k, static_cast<Millis>(i)));
          ASSERT_TRUE(want.has_value()) << state << " + " << EngineEventName(k);
          ASSERT_FALSE(was_terminal);
          ASSERT_EQ(AttemptStateName(a.state), *want);
          ASSERT_EQ(a.ended_at.has_value(), IsTerminal(a.state));
          state = *want;
        } catch (const Error&) {
          ASSERT_FALSE(want.has_value()) << state << " + " << EngineEventName(k);
          dead = true;
        }
      }
      ++checked;
      std::size_t p = 0;
      while (p < len && ++idx[p] == kEvents.size()) idx[p++] = 0;
      if (p == len) break;
    }
  }
  EXPECT_EQ(checked, 1u + 6 + 36 + 216 + 1296 + 7776 + 46656);
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

TEST(PartitionFilterTest, Parse) {
  const auto f = PartitionFilter::Parse("CC-MAIN-2023-*/1, CC-MAIN-2024-10");
  EXPECT_TRUE(f.Matches({"CC-MAIN-2023-40", 1}));
  EXPECT_FALSE(f.Matches({"CC-MAIN-2023-40", 0}));
  EXPECT_TRUE(f.Matches({"CC-MAIN-2024-10", 3}));
  EXPECT_FALSE(f.Matches({"CC-MAIN-2024-11", 0}));
  EXPECT_TRUE(PartitionFilter::Parse("").Matches({"x", 9}));
  EXPECT_TRUE(PartitionFilter::Parse("*").Matches({"x", 9}));
  EXPECT_THROW(PartitionFilter::Parse("a/x"), Error);
  EXPECT_THROW(PartitionFilter::Parse("a/"), Error);
  EXPECT_THROW(PartitionFilter::Parse("/1"), Error);
  const auto exact = PartitionFilter::Exact({{"a", 1}});
  EXPECT_TRUE(exact.Matches({"a", 1}));
  EXPECT_FALSE(exact.Matches({"a", 0}));
  EXPECT_EQ(exact.ToString(), "a/1");
}

TEST(Plan, HintRoutedReplayPipeline) {
  const auto p = RequirePipeline(LoadPipelineFile(fs::path(COSTFLOW_SOURCE_DIR) / "pipelines/table1_replay.json"));
  const auto setup = PrepareRun(p, {}, std::nullopt);
  std::vector<std::string> backends;
  for (const auto& s : setup.plan.steps) backends.push_back(s.backend_id);
  EXPECT_EQ(backends, (std::vector<std::string>{"emr_sim", "emr_sim", "dbr_sim", "emr_sim"}));
}

TEST(Plan, CardinalityOrderAndEmptySelection) {
  Harness h;
  const auto plan = h.Plan(FourAssets({{"t1", "t2"}, 1}));
  ASSERT_EQ(plan.steps.size(), 8u);
  std::map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < plan.steps.size(); ++i) pos[plan.steps[i].step_key] = i;
  for (const auto& s : plan.steps) {
    for (const auto& d : plan.graph->asset(s.asset).deps) EXPECT_LT(pos.at(StepKey(d, s.partition)), pos.at(s.step_key));
  }
  EXPECT_EQ(h.Plan(FourAssets({{"t1", "t2"}, 1}), PartitionFilter::Parse("t2")).steps.size(), 4u);
  try {
    h.Plan(FourAssets(), PartitionFilter::Parse("nothing"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kEmptySelection);
  }
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

TEST(Execute, AllSuccess) {
  Harness h;
  const auto r = ExecuteRun(h.Plan(FourAssets()), h.registry, {}, 1, "run", nullptr, h.Options());
  EXPECT_EQ(r.run_state, RunState::kSuccess);
  ASSERT_EQ(r.attempts.size(), 4u);
  for (const auto& a : r.attempts) {
    EXPECT_EQ(a.state, AttemptState::kSuccess);
    EXPECT_DOUBLE_EQ(a.duration_hours, 1.0);
    EXPECT_EQ(*a.cost, ComputeStepCost(1.0, 2, h.registry.Get("q").rate_card));
  }
  EXPECT_EQ(r.ended_at, 4 * kHour);  // strictly serial chain
  const Money one = r.attempts[0].cost->total;
  EXPECT_EQ(r.cost_report.aggregated_total, one + one + one + one);
}

TEST(Execute, OomRetriedThenSucceeds) {
  Harness h;
  h.fates[{"edges/" + kT + "/0", 1}] = Fate::Failure("OOM", 0.5);
  h.fates[{"edges/" + kT + "/0", 2}] = Fate::Success();
  const auto r = ExecuteRun(h.Plan(FourAssets()), h.registry, {}, 1, "run", nullptr, h.Options());
  EXPECT_EQ(r.run_state, RunState::kSuccess);
  const auto edges = AttemptsOf(r, "edges/" + kT + "/0");
  ASSERT_EQ(edges.size(), 2u);
  EXPECT_EQ(edges[0]->state, AttemptState::kFailure);
  EXPECT_EQ(edges[0]->error_code, "OOM");
  EXPECT_DOUBLE_EQ(edges[0]->duration_hours, 0.5);
  EXPECT_TRUE(edges[0]->cost.has_value());
  EXPECT_EQ(edges[1]->state, AttemptState::kSuccess);
  EXPECT_EQ(r.attempts.size(), 5u);
  EXPECT_EQ(r.cost_report.rows.size(), 5u);
}

TEST(Execute, NonRetryableFailureStopsDownstream) {
  Harness h;
  h.fates[{"edges/" + kT + "/0", 1}] = Fate::Failure("USER_CODE_ERROR", 0.2);
  const auto r = ExecuteRun(h.Plan(FourAssets()), h.registry, {}, 1, "run", nullptr, h.Options());
  EXPECT_EQ(r.run_state, RunState::kFailure);
  EXPECT_EQ(AttemptsOf(r, "edges/" + kT + "/0").size(), 1u);
  EXPECT_TRUE(AttemptsOf(r, "graph/" + kT + "/0").empty());
  EXPECT_TRUE(AttemptsOf(r, "graph_aggr/" + kT + "/0").empty());
}

TEST(Execute, RetriesStopAtMaxAttempts) {
  Harness h;
  for (int i = 1; i <= 5; ++i) h.fates[{"nodes/" + kT + "/0", i}] = Fate::Failure("SPOT_RECLAIM", 0.1);
  RetryPolicy retry;
  retry.max_attempts = 3;
  const auto r = ExecuteRun(h.Plan(FourAssets()), h.registry, retry, 1, "run", nullptr, h.Options());
  EXPECT_EQ(r.run_state, RunState::kFailure);
  EXPECT_EQ(AttemptsOf(r, "nodes/" + kT + "/0").size(), 3u);
  EXPECT_EQ(r.attempts.size(), 3u);
}

TEST(Execute, CancelWhileEdgesRunning) {
  Harness h;
  const Millis cancel_at = kHour + kHour / 2;
  const auto r = ExecuteRun(h.Plan(FourAssets()), h.registry, {}, 1, "run", nullptr, h.Options(), cancel_at);
  EXPECT_EQ(r.run_state, RunState::kCanceled);
  EXPECT_EQ(r.cancel_requested_at, cancel_at);
  const auto edges = AttemptsOf(r, "edges/" + kT + "/0");
  ASSERT_EQ(edges.size(), 1u);
  EXPECT_EQ(edges[0]->state, AttemptState::kCanceled);
  EXPECT_EQ(edges[0]->ended_at, cancel_at);
  EXPECT_DOUBLE_EQ(edges[0]->duration_hours, 0.5);  // billed up to the cancel
  EXPECT_GT(edges[0]->cost->total, Money{});
  EXPECT_TRUE(AttemptsOf(r, "graph/" + kT + "/0").empty());
  EXPECT_TRUE(AttemptsOf(r, "graph_aggr/" + kT + "/0").empty());
}

TEST(Execute, CancelSemantics) {
  Harness h;
  RunExecution exec(h.Plan(FourAssets()), h.registry, {}, 1, "run", nullptr, h.Options());
  exec.RunUntil(kHour / 2);
  exec.RequestCancel();
  EXPECT_EQ(exec.record().run_state, RunState::kCanceled);
  try {
    exec.RequestCancel();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kAlreadyTerminal);
  }
  RunExecution done(h.Plan(FourAssets()), h.registry, {}, 1, "run2", nullptr, h.Options());
  done.RunToCompletion();
  EXPECT_THROW(done.RequestCancel(), Error);
  EXPECT_EQ(done.record().run_state, RunState::kSuccess);
  EXPECT_EQ(done.log().back().kind, "RUN_FINISHED");
}

TEST(Execute, HeartbeatTimeoutFailsAndRetries) {
  Harness h;
  h.fates[{"edges/" + kT + "/0", 1}] = Fate::Stall(0.5);
  const auto r = ExecuteRun(h.Plan(FourAssets()), h.registry, {}, 1, "run", nullptr, h.Options());
  EXPECT_EQ(r.run_state, RunState::kSuccess);
  const auto edges = AttemptsOf(r, "edges/" + kT + "/0");
  ASSERT_EQ(edges.size(), 2u);
  EXPECT_EQ(edges[0]->error_code, "HEARTBEAT_TIMEOUT");
  const Millis stall = kHour + kHour / 2;
  // Last heartbeat lands at most one interval before the stall; the timeout
  // fires 30 s (+1 ms) after it.
  EXPECT_GE(*edges[0]->ended_at, stall + 25'000);
  EXPECT_LE(*edges[0]->ended_at, stall + 30'001);
}

TEST(Execute, StallWithoutRetryFailsRun) {
  Harness h;
  h.fates[{"nodes/" + kT + "/0", 1}] = Fate::Stall(0.1);
  RetryPolicy retry;
  retry.max_attempts = 1;
  const auto r = ExecuteRun(h.Plan(FourAssets()), h.registry, retry, 1, "run", nullptr, h.Options());
  EXPECT_EQ(r.run_state, RunState::kFailure);
  EXPECT_EQ(r.attempts.size(), 1u);
  EXPECT_EQ(r.attempts[0].error_code, "HEARTBEAT_TIMEOUT");
}

TEST(Execute, DeterministicGivenSeed) {
  const auto p = RequirePipeline(LoadPipelineFile(fs::path(COSTFLOW_SOURCE_DIR) / "pipelines/example.json"));
  std::set<std::string> distinct;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto a = PrepareRun(p, {}, seed);
    auto b = PrepareRun(p, {}, seed);
    RunExecution ea(std::move(a.plan), a.registry, a.retry, a.seed, a.run_id, a.workload, a.options);
    RunExecution eb(std::move(b.plan), b.registry, b.retry, b.seed, b.run_id, b.workload, b.options);
    ea.RunToCompletion();
    eb.RunToCompletion();
    EXPECT_EQ(SerializeRunRecord(ea.record()), SerializeRunRecord(eb.record()));
    ASSERT_EQ(ea.log().size(), eb.log().size());
    for (std::size_t i = 0; i < ea.log().size(); ++i) EXPECT_EQ(ea.log()[i].ToLine(), eb.log()[i].ToLine());
    distinct.insert(SerializeRunRecord(ea.record()));
  }
  EXPECT_EQ(distinct.size(), 3u);
}

TEST(Execute, RandomDagsRespectScheduleOracle) {
  gen::Gen g(300);
  const std::vector<std::string> codes = {"OOM", "SPOT_RECLAIM", "USER_CODE_ERROR", "BOOTSTRAP_FAILED"};
  for (int trial = 0; trial < 150; ++trial) {
    const int n = g.Int(1, 6);
    PartitionSpec parts;
    for (int t = g.Int(1, 2); t > 0; --t) parts.time_partitions.push_back("t" + std::to_string(t));
    parts.domain_segments = g.Int(1, 2);
    std::vector<AssetDef> defs;
    for (int i = 0; i < n; ++i) {
      std::vector<std::string> deps;
      for (int j = 0; j < i; ++j) {
        if (g.Coin(0.4)) deps.push_back("a" + std::to_string(j));
      }
      defs.push_back(Def("a" + std::to_string(i), deps, g.Real(0.0, 0.3), parts));
    }
    Harness h;
    h.registry = BackendRegistry({Quiet("q"), Quiet("r", 2.0, 3.0)});
    h.policy.cost_weight = g.Unit();
    RetryPolicy retry;
    retry.max_attempts = g.Int(1, 3);
    retry.retry_on = {"OOM", "SPOT_RECLAIM", "HEARTBEAT_TIMEOUT"};
    const auto plan = h.Plan(defs, g.Coin(0.2) ? PartitionFilter::Parse("t1") : PartitionFilter{});
    for (const auto& s : plan.steps) {
      for (int a = 1; a <= 3; ++a) {
        const int roll = g.Int(0, 9);
        if (roll < 2) h.fates[{s.step_key, a}] = Fate::Failure(g.Pick(codes), g.Unit() * 0.99);
        else if (roll == 2) h.fates[{s.step_key, a}] = Fate::Stall(g.Unit() * 0.99);
      }
    }
    const int concurrency = g.Int(1, 4);
    const auto deps = DepsOf(plan);
    RunExecution exec(plan, h.registry, retry, g.U64(), "run", nullptr, h.Options(concurrency));
    exec.RunToCompletion();
    const auto& r = exec.record();
    for (const auto& v : oracle::CheckSchedule(deps, exec.log(), retry.max_attempts, concurrency)) {
      ADD_FAILURE() << "trial " << trial << ": " << v;
    }
    // A retry follows only a failure whose code is retryable.
    bool all_ok = true;
    for (const auto& s : plan.steps) {
      const auto atts = AttemptsOf(r, s.step_key);
      for (std::size_t k = 0; k + 1 < atts.size(); ++k) {
        EXPECT_EQ(atts[k]->state, AttemptState::kFailure);
        EXPECT_TRUE(retry.retry_on.count(*atts[k]->error_code)) << *atts[k]->error_code;
      }
      all_ok = all_ok && !atts.empty() && atts.back()->state == AttemptState::kSuccess;
      for (const auto* a : atts) {
        EXPECT_TRUE(IsTerminal(a->state));
        EXPECT_EQ(a->cost.has_value(), true);
      }
    }
    EXPECT_EQ(r.run_state == RunState::kSuccess, all_ok) << "trial " << trial;
  }
}

TEST(Execute, FailureRateOrderingAcrossDefaultProfiles) {
  BackendRegistry reg(DefaultBackends());
  RetryPolicy once;
  once.max_attempts = 1;
  std::map<std::string, int> failures;
  for (const std::string backend : {"emr_sim", "dbr_sim"}) {
    const SelectionPolicy policy{backend, 1.0, {}, {}};
    auto graph = std::make_shared<const AssetGraph>(ValidateGraph({Def("edges", {}, 0.02, {{kT}, 1}, backend)}));
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const auto r = ExecuteRun(PlanRun(graph, {}, policy, reg), reg, once, seed, "fig3-" + std::to_string(seed));
      if (r.run_state == RunState::kFailure) ++failures[backend];
    }
  }
  EXPECT_GT(failures["emr_sim"], failures["dbr_sim"]);
}

TEST(Execute, CrawlOutputsMatchReferenceAndAreBackendIndependent) {
  const std::vector<std::string> times = {"CC-MAIN-2023-40", "CC-MAIN-2023-50"};
  const auto corpus = crawl::GenerateCorpus(11, 9, 4, times);
  auto workload = std::make_shared<const CrawlWorkload>(corpus);
  const PartitionSpec parts{times, 2};
  std::vector<AssetDef> defs = {Def("nodes", {}, 0.1, parts), Def("edges", {"nodes"}, 0.1, parts),
                                Def("graph", {"nodes", "edges"}, 0.1, parts), Def("graph_aggr", {"graph"}, 0.1, parts)};
  std::vector<std::map<std::string, std::vector<std::string>>> outputs;
  for (const std::string backend : {"local", "emr_sim", "dbr_sim"}) {
    BackendRegistry reg({Quiet("emr_sim", 1.0, 3.0), Quiet("dbr_sim", 1.75, 9.0), BackendDescriptor{"local", "l", {}, std::nullopt, true}});
    const SelectionPolicy policy{backend, 1.0, {}, {}};
    for (auto& d : defs) d.backend_hint = backend;
    auto plan = PlanRun(std::make_shared<const AssetGraph>(ValidateGraph(defs)), {}, policy, reg);
    RunExecution exec(std::move(plan), reg, {}, 5, "crawl", workload);
    exec.RunToCompletion();
    ASSERT_EQ(exec.record().run_state, RunState::kSuccess);
    outputs.push_back(exec.outputs());
  }
  EXPECT_EQ(outputs[0], outputs[1]);
  EXPECT_EQ(outputs[0], outputs[2]);
  for (const auto& t : times) {
    for (int s = 0; s < 2; ++s) {
      const auto ref = oracle::ReferencePartition(corpus, t, 2, s);
      const PartitionKey k{t, s};
      EXPECT_EQ(outputs[0].at(StepKey("nodes", k)), ref.nodes);
      EXPECT_EQ(outputs[0].at(StepKey("edges", k)), ref.edges);
      EXPECT_EQ(outputs[0].at(StepKey("graph", k)), ref.graph);
      EXPECT_EQ(outputs[0].at(StepKey("graph_aggr", k)), ref.graph_aggr);
    }
  }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

TEST(Persist, RunDirectoryLayout) {
  const auto p = RequirePipeline(LoadPipelineFile(fs::path(COSTFLOW_SOURCE_DIR) / "pipelines/example.json"));
  auto setup = PrepareRun(p, PartitionFilter::Parse("CC-MAIN-2023-40/0"), std::nullopt);
  const auto dir = ScratchDir("layout");
  setup.options.run_dir = dir;
  RunExecution exec(std::move(setup.plan), setup.registry, setup.retry, setup.seed, setup.run_id, setup.workload,
                    setup.options);
  exec.RunToCompletion();
  EXPECT_EQ(Slurp(dir / "record.json"), SerializeRunRecord(exec.record()));
  std::string log;
  for (const auto& e : exec.log()) log += e.ToLine() + "\n";
  EXPECT_EQ(Slurp(dir / "events.jsonl"), log);
  for (std::size_t i = 0; i < exec.log().size(); ++i) EXPECT_EQ(exec.log()[i].seq, i);
  EXPECT_TRUE(fs::is_directory(dir / "contexts"));
  EXPECT_TRUE(fs::is_directory(dir / "attempts"));
  if (exec.record().run_state == RunState::kSuccess) {
    const auto out = dir / "outputs" / "graph_aggr" / "CC-MAIN-2023-40" / "0.jsonl";
    ASSERT_TRUE(fs::exists(out));
    std::string want;
    for (const auto& l : *exec.Output(StepKey("graph_aggr", {"CC-MAIN-2023-40", 0}))) want += l + "\n";
    EXPECT_EQ(Slurp(out), want);
  }
}

TEST(Persist, RecordJsonRoundtrip) {
  gen::Gen g(301);
  const auto p = RequirePipeline(LoadPipelineFile(fs::path(COSTFLOW_SOURCE_DIR) / "pipelines/example.json"));
  for (int i = 0; i < 10; ++i) {
    auto s = PrepareRun(p, {}, g.U64());
    std::optional<Millis> cancel;
    if (g.Coin(0.3)) cancel = g.Int(0, 20) * kHour / 4;
    const auto r = ExecuteRun(std::move(s.plan), s.registry, s.retry, s.seed, s.run_id, s.workload, s.options, cancel);
    const std::string text = SerializeRunRecord(r);
    const auto back = RunRecordFromJson(nlohmann::json::parse(text));
    EXPECT_EQ(SerializeRunRecord(back), text);
    EXPECT_EQ(back.attempts, r.attempts);
  }
  EXPECT_THROW(RunRecordFromJson(nlohmann::json::parse("{\"run_id\":\"x\"}")), Error);
  EXPECT_THROW(RunRecordFromJson(nlohmann::json::parse(R"({"run_id":"x","run_state":"DONE","cost_report":{}})")), Error);
}

TEST(Persist, ExampleRecordGolden) {
  const auto p = RequirePipeline(LoadPipelineFile(fs::path(COSTFLOW_SOURCE_DIR) / "pipelines/example.json"));
  auto s = PrepareRun(p, {}, 42);
  const auto r = ExecuteRun(std::move(s.plan), s.registry, s.retry, s.seed, s.run_id, s.workload, s.options);
  char got[17];
  std::snprintf(got, sizeof got, "%016llx", static_cast<unsigned long long>(Fnv1a64(SerializeRunRecord(r))));
  std::ifstream in(std::string(COSTFLOW_GOLDEN_DIR) + "/example_record_seed42.txt");
  ASSERT_TRUE(in) << "missing golden; checksum is " << got << " for run " << r.run_id;
  std::string want;
  in >> want;
  EXPECT_EQ(got, want);
}
