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

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "costflow/asset_graph.hpp"
#include "costflow/backends.hpp"
#include "costflow/cost.hpp"
#include "costflow/error.hpp"
#include "costflow/factory.hpp"
#include "costflow/hash.hpp"
#include "costflow/step_protocol.hpp"

namespace costflow {

// ---------------------------------------------------------------------------
// Attempt state machine
// ---------------------------------------------------------------------------

enum class AttemptState { kQueued, kLaunching, kRunning, kSuccess, kFailure, kCanceled };

constexpr std::string_view AttemptStateName(AttemptState s) {
  switch (s) {
    case AttemptState::kQueued: return "QUEUED";
    case AttemptState::kLaunching: return "LAUNCHING";
    case AttemptState::kRunning: return "RUNNING";
    case AttemptState::kSuccess: return "SUCCESS";
    case AttemptState::kFailure: return "FAILURE";
    case AttemptState::kCanceled: return "CANCELED";
  }
  return "?";
}

inline std::optional<AttemptState> ParseAttemptState(std::string_view name) {
  for (auto s : {AttemptState::kQueued, AttemptState::kLaunching, AttemptState::kRunning, AttemptState::kSuccess,
                 AttemptState::kFailure, AttemptState::kCanceled}) {
    if (AttemptStateName(s) == name) return s;
  }
  return std::nullopt;
}

constexpr bool IsTerminal(AttemptState s) {
  return s == AttemptState::kSuccess || s == AttemptState::kFailure || s == AttemptState::kCanceled;
}

enum class EngineEventKind { kLaunch, kStart, kSucceed, kFail, kCancel, kHeartbeatTimeout };

constexpr std::string_view EngineEventName(EngineEventKind k) {
  switch (k) {
    case EngineEventKind::kLaunch: return "LAUNCH";
    case EngineEventKind::kStart: return "START";
    case EngineEventKind::kSucceed: return "SUCCEED";
    case EngineEventKind::kFail: return "FAIL";
    case EngineEventKind::kCancel: return "CANCEL";
    case EngineEventKind::kHeartbeatTimeout: return "HEARTBEAT_TIMEOUT";
  }
  return "?";
}

struct EngineEvent {
  EngineEventKind kind = EngineEventKind::kLaunch;
  Millis at = 0;
  std::string error_code;  // kFail only

  static EngineEvent Launch(Millis at) { return {EngineEventKind::kLaunch, at, {}}; }
  static EngineEvent Start(Millis at) { return {EngineEventKind::kStart, at, {}}; }
  static EngineEvent Succeed(Millis at) { return {EngineEventKind::kSucceed, at, {}}; }
  static EngineEvent Fail(Millis at, std::string code) { return {EngineEventKind::kFail, at, std::move(code)}; }
  static EngineEvent Cancel(Millis at) { return {EngineEventKind::kCancel, at, {}}; }
  static EngineEvent HeartbeatTimeout(Millis at) { return {EngineEventKind::kHeartbeatTimeout, at, {}}; }
};

struct StepAttempt {
  std::string step_key;
  int attempt = 1;
  std::string backend_id;
  AttemptState state = AttemptState::kQueued;
  std::optional<Millis> started_at;  // entered LAUNCHING
  std::optional<Millis> ended_at;    // set iff terminal
  double duration_hours = 0.0;
  std::optional<CostBreakdown> cost;  // set iff terminal
  std::optional<std::string> error_code;

  bool operator==(const StepAttempt&) const = default;
};

/// Legal moves: QUEUED -> LAUNCHING -> RUNNING -> SUCCESS | FAILURE, CANCEL
/// from any non-terminal state, and a heartbeat timeout while RUNNING.
/// Terminal states absorb nothing.
inline StepAttempt Transition(StepAttempt attempt, const EngineEvent& event) {
  auto illegal = [&]() {
    return Error(Errc::kIllegalTransition,
                 std::string(AttemptStateName(attempt.state)) + " + " + std::string(EngineEventName(event.kind)));
  };
  if (IsTerminal(attempt.state)) throw illegal();
  auto finish = [&](AttemptState s) {
    attempt.state = s;
    attempt.ended_at = event.at;
  };
  switch (event.kind) {
    case EngineEventKind::kLaunch:
      if (attempt.state != AttemptState::kQueued) throw illegal();
      attempt.state = AttemptState::kLaunching;
      attempt.started_at = event.at;
      break;
    case EngineEventKind::kStart:
      if (attempt.state != AttemptState::kLaunching) throw illegal();
      attempt.state = AttemptState::kRunning;
      break;
    case EngineEventKind::kSucceed:
      if (attempt.state != AttemptState::kRunning) throw illegal();
      finish(AttemptState::kSuccess);
      break;
    case EngineEventKind::kFail:
      if (attempt.state != AttemptState::kRunning) throw illegal();
      if (event.error_code.empty()) throw Error(Errc::kInvalidArgument, "FAIL needs an error code");
      finish(AttemptState::kFailure);
      attempt.error_code = event.error_code;
      break;
    case EngineEventKind::kHeartbeatTimeout:
      if (attempt.state != AttemptState::kRunning) throw illegal();
      finish(AttemptState::kFailure);
      attempt.error_code = std::string(error_code::kHeartbeatTimeout);
      break;
    case EngineEventKind::kCancel:
      finish(AttemptState::kCanceled);
      break;
  }
  return attempt;
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

struct RetryPolicy {
  int max_attempts = 3;
  std::set<std::string> retry_on = {std::string(error_code::kOom), std::string(error_code::kSpotReclaim),
                                    std::string(error_code::kBootstrapFailed),
                                    std::string(error_code::kHeartbeatTimeout)};

  bool ShouldRetry(const std::string& code, int attempt) const {
    return attempt < max_attempts && retry_on.count(code) != 0;
  }
};

inline void ValidateRetry(const RetryPolicy& retry) {
  if (retry.max_attempts < 1) throw Error(Errc::kInvalidConfig, "max_attempts must be >= 1");
  for (const auto& code : retry.retry_on) {
    if (!IsKnownErrorCode(code)) throw Error(Errc::kInvalidConfig, "unknown error code '" + code + "' in retry_on");
  }
}

/// Comma-separated terms "time[/segment]". A time ending in '*' is a prefix
/// match; "*" alone matches every time id. An empty filter selects all.
class PartitionFilter {
 public:
  PartitionFilter() = default;

  static PartitionFilter Parse(std::string_view text) {
    PartitionFilter f;
    std::size_t i = 0;
    while (i <= text.size()) {
      auto comma = text.find(',', i);
      if (comma == std::string_view::npos) comma = text.size();
      std::string_view term = text.substr(i, comma - i);
      while (!term.empty() && term.front() == ' ') term.remove_prefix(1);
      while (!term.empty() && term.back() == ' ') term.remove_suffix(1);
      if (!term.empty()) f.terms_.push_back(ParseTerm(term));
      i = comma + 1;
    }
    f.text_ = std::string(text);
    return f;
  }

  static PartitionFilter Exact(const std::vector<PartitionKey>& keys) {
    PartitionFilter f;
    for (const auto& k : keys) f.terms_.push_back({k.time_id, false, k.domain_segment});
    return f;
  }

  bool Matches(const PartitionKey& key) const {
    if (terms_.empty()) return true;
    return std::any_of(terms_.begin(), terms_.end(), [&](const Term& t) {
      const bool time_ok = t.prefix ? key.time_id.rfind(t.time, 0) == 0 : key.time_id == t.time;
      return time_ok && (!t.segment || *t.segment == key.domain_segment);
    });
  }

  std::string ToString() const {
    if (!text_.empty() || terms_.empty()) return text_;
    std::string out;
    for (const auto& t : terms_) {
      if (!out.empty()) out += ",";
      out += t.time + (t.prefix ? "*" : "");
      if (t.segment) out += "/" + std::to_string(*t.segment);
    }
    return out;
  }

 private:
  struct Term {
    std::string time;
    bool prefix = false;
    std::optional<int> segment;
  };

  static Term ParseTerm(std::string_view term) {
    Term t;
    std::string_view time = term;
    if (auto slash = term.rfind('/'); slash != std::string_view::npos) {
      std::string_view seg = term.substr(slash + 1);
      if (seg.empty() || !std::all_of(seg.begin(), seg.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        throw Error(Errc::kInvalidArgument, "bad segment in partition filter term '" + std::string(term) + "'");
      }
      t.segment = std::stoi(std::string(seg));
      time = term.substr(0, slash);
    }
    if (!time.empty() && time.back() == '*') {
      t.prefix = true;
      time.remove_suffix(1);
    }
    if (time.empty() && !t.prefix) throw Error(Errc::kInvalidArgument, "empty time in filter term");
    t.time = std::string(time);
    return t;
  }

  std::vector<Term> terms_;
  std::string text_;
};

struct PlannedStep {
  std::string step_key;
  std::string asset;
  PartitionKey partition;
  std::string backend_id;
};

struct RunPlan {
  std::shared_ptr<const AssetGraph> graph;
  std::vector<PlannedStep> steps;  // asset topo order, then partition order
};

inline RunPlan PlanRun(std::shared_ptr<const AssetGraph> graph, const PartitionFilter& filter,
                       const SelectionPolicy& policy, const BackendRegistry& registry) {
  RunPlan plan;
  plan.graph = graph;
  for (const auto& name : TopoOrder(*graph)) {
    const AssetDef& def = graph->asset(name);
    for (const auto& key : ExpandPartitions(def)) {
      if (!filter.Matches(key)) continue;
      std::string backend = SelectBackend(def, key, policy, registry);
      if (!registry.Get(backend).available) throw Error(Errc::kBackendUnavailable, backend);
      plan.steps.push_back({StepKey(name, key), name, key, std::move(backend)});
    }
  }
  if (plan.steps.empty()) throw Error(Errc::kEmptySelection, "partition filter '" + filter.ToString() + "'");
  return plan;
}

// ---------------------------------------------------------------------------
// Workloads
// ---------------------------------------------------------------------------

struct UpstreamOutput {
  const AssetDef* asset = nullptr;
  std::vector<std::string> lines;
};

/// The computation behind each asset. Runs inside a backend worker with the
/// context it resolved from its environment.
class Workload {
 public:
  virtual ~Workload() = default;
  virtual std::vector<std::string> Materialize(const StepContext& ctx, const AssetDef& asset,
                                               const std::map<std::string, UpstreamOutput>& upstream) const = 0;
};

/// Materializes nothing. Used for cost replays.
class NullWorkload : public Workload {
 public:
  std::vector<std::string> Materialize(const StepContext&, const AssetDef&,
                                       const std::map<std::string, UpstreamOutput>&) const override {
    return {};
  }
};

// ---------------------------------------------------------------------------
// Run record and run log
// ---------------------------------------------------------------------------

enum class RunState { kRunning, kSuccess, kFailure, kCanceled };

constexpr std::string_view RunStateName(RunState s) {
  switch (s) {
    case RunState::kRunning: return "RUNNING";
    case RunState::kSuccess: return "SUCCESS";
    case RunState::kFailure: return "FAILURE";
    case RunState::kCanceled: return "CANCELED";
  }
  return "?";
}

inline RunState ParseRunState(std::string_view name) {
  for (auto s : {RunState::kRunning, RunState::kSuccess, RunState::kFailure, RunState::kCanceled}) {
    if (RunStateName(s) == name) return s;
  }
  throw Error(Errc::kParseError, "unknown run_state '" + std::string(name) + "'");
}

struct RunRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> plan;  // (step_key, backend_id)
  std::vector<StepAttempt> attempts;
  RunState run_state = RunState::kRunning;
  std::optional<Millis> cancel_requested_at;
  Millis ended_at = 0;
  RunCostReport cost_report;

  bool terminal() const { return run_state != RunState::kRunning; }
};

inline nlohmann::json ToJson(const StepAttempt& a) {
  using nlohmann::json;
  return {{"step_key", a.step_key},
          {"attempt", a.attempt},
          {"backend_id", a.backend_id},
          {"state", AttemptStateName(a.state)},
          {"started_at", a.started_at ? json(MillisToSeconds(*a.started_at)) : json(nullptr)},
          {"ended_at", a.ended_at ? json(MillisToSeconds(*a.ended_at)) : json(nullptr)},
          {"duration_hours", a.duration_hours},
          {"cost", a.cost ? ToJson(*a.cost) : json(nullptr)},
          {"error_code", a.error_code ? json(*a.error_code) : json(nullptr)}};
}

inline nlohmann::json ToJson(const RunRecord& r) {
  using nlohmann::json;
  json plan = json::array();
  for (const auto& [step, backend] : r.plan) plan.push_back({{"step_key", step}, {"backend_id", backend}});
  json attempts = json::array();
  for (const auto& a : r.attempts) attempts.push_back(ToJson(a));
  return {{"run_id", r.run_id},
          {"seed", r.seed},
          {"run_state", RunStateName(r.run_state)},
          {"plan", plan},
          {"attempts", attempts},
          {"cancel_requested_at", r.cancel_requested_at ? json(MillisToSeconds(*r.cancel_requested_at)) : json(nullptr)},
          {"ended_at", MillisToSeconds(r.ended_at)},
          {"cost_report", ToJson(r.cost_report)}};
}

/// Canonical serialization: sorted keys, two-space indent, trailing newline.
inline std::string SerializeRunRecord(const RunRecord& r) { return ToJson(r).dump(2) + "\n"; }

inline RunRecord RunRecordFromJson(const nlohmann::json& j) {
  auto seconds_to_ms = [](const nlohmann::json& v) -> std::optional<Millis> {
    if (v.is_null()) return std::nullopt;
    return static_cast<Millis>(std::llround(v.get<double>() * 1000.0));
  };
  try {
    RunRecord r;
    r.run_id = j.at("run_id").get<std::string>();
    r.seed = j.value("seed", std::uint64_t{0});
    r.run_state = ParseRunState(j.at("run_state").get<std::string>());
    for (const auto& p : j.value("plan", nlohmann::json::array())) {
      r.plan.emplace_back(p.at("step_key").get<std::string>(), p.at("backend_id").get<std::string>());
    }
    for (const auto& a : j.value("attempts", nlohmann::json::array())) {
      StepAttempt att;
      att.step_key = a.at("step_key").get<std::string>();
      att.attempt = a.at("attempt").get<int>();
      att.backend_id = a.at("backend_id").get<std::string>();
      auto state = ParseAttemptState(a.at("state").get<std::string>());
      if (!state) throw Error(Errc::kParseError, "bad attempt state");
      att.state = *state;
      att.started_at = seconds_to_ms(a.value("started_at", nlohmann::json(nullptr)));
      att.ended_at = seconds_to_ms(a.value("ended_at", nlohmann::json(nullptr)));
      att.duration_hours = a.value("duration_hours", 0.0);
      if (a.contains("cost") && !a.at("cost").is_null()) att.cost = CostBreakdownFromJson(a.at("cost"));
      if (a.contains("error_code") && !a.at("error_code").is_null()) {
        att.error_code = a.at("error_code").get<std::string>();
      }
      r.attempts.push_back(std::move(att));
    }
    r.cancel_requested_at = seconds_to_ms(j.value("cancel_requested_at", nlohmann::json(nullptr)));
    r.ended_at = seconds_to_ms(j.value("ended_at", nlohmann::json(0.0))).value_or(0);
    r.cost_report = RunCostReportFromJson(j.at("cost_report"));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::kParseError, std::string("run record: ") + e.what());
  }
}

/// One entry of the per-run append-only log. seq is run-wide and dense, so a
/// client resuming with after_seq=N sees exactly the entries N+1, N+2, ...
struct RunLogEntry {
  std::uint64_t seq = 0;
  Millis at = 0;
  std::string kind;
  std::string step_key;
  int attempt = 0;
  nlohmann::json data = nlohmann::json::object();

  nlohmann::json ToJson() const {
    return {{"seq", seq},   {"ts", MillisToSeconds(at)}, {"kind", kind}, {"step_key", step_key},
            {"attempt", attempt}, {"data", data}};
  }
  std::string ToLine() const { return ToJson().dump(); }
};

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

struct EngineOptions {
  int max_concurrency = 4;
  double heartbeat_timeout_s = kDefaultHeartbeatTimeoutSeconds;
  // Extra env delivered to every step context.
  std::map<std::string, std::string> env;
  // When set, the run log, attempt logs, contexts, outputs, and the record are
  // written under this directory.
  std::optional<std::filesystem::path> run_dir;
  // Backend client factory; tests substitute scripted backends.
  std::function<std::shared_ptr<ScheduledBackend>(const BackendDescriptor&)> make_backend = MakeBackend;
};

/// Stable uuid-shaped id derived from content.
inline std::string MakeRunId(std::uint64_t seed, std::string_view fingerprint) {
  const std::uint64_t a = Fnv1a64(fingerprint, Fnv1a64(seed, kFnvOffset));
  const std::uint64_t b = SplitMix64(a ^ 0x5bd1e995ULL).Next();
  char buf[40];
  std::snprintf(buf, sizeof buf, "%08llx-%04llx-%04llx-%04llx-%012llx", static_cast<unsigned long long>(a >> 32),
                static_cast<unsigned long long>((a >> 16) & 0xffff), static_cast<unsigned long long>(a & 0xffff),
                static_cast<unsigned long long>(b >> 48), static_cast<unsigned long long>(b & 0xffffffffffffULL));
  return buf;
}

/// One run driven on a virtual clock. Time only moves inside Advance/RunUntil;
/// every state change goes through Transition and is appended to the run log.
class RunExecution {
 public:
  RunExecution(RunPlan plan, BackendRegistry registry, RetryPolicy retry, std::uint64_t seed, std::string run_id,
               std::shared_ptr<const Workload> workload, EngineOptions options = {})
      : plan_(std::move(plan)),
        registry_(std::move(registry)),
        retry_(std::move(retry)),
        seed_(seed),
        workload_(workload ? std::move(workload) : std::make_shared<NullWorkload>()),
        options_(std::move(options)) {
    ValidateRetry(retry_);
    if (options_.max_concurrency < 1) throw Error(Errc::kInvalidConfig, "max_concurrency must be >= 1");
    if (!(options_.heartbeat_timeout_s > 0.0)) throw Error(Errc::kInvalidConfig, "heartbeat timeout must be > 0");
    if (!plan_.graph || plan_.steps.empty()) throw Error(Errc::kEmptySelection, "plan has no steps");
    record_.run_id = std::move(run_id);
    record_.seed = seed;
    for (std::size_t i = 0; i < plan_.steps.size(); ++i) {
      const auto& s = plan_.steps[i];
      record_.plan.emplace_back(s.step_key, s.backend_id);
      step_index_[s.step_key] = i;
      step_status_.push_back(StepProgress::kPending);
    }
    for (const auto& [id, d] : registry_.all()) backends_[id] = options_.make_backend(d);
    if (options_.run_dir) {
      injector_ = std::make_unique<FileContextInjector>(*options_.run_dir / "contexts");
      std::filesystem::create_directories(*options_.run_dir);
      log_file_.open(*options_.run_dir / "events.jsonl", std::ios::binary | std::ios::trunc);
    } else {
      injector_ = std::make_unique<MemoryContextInjector>();
    }
    Append("RUN_STARTED", "", 0, {{"seed", seed_}, {"steps", plan_.steps.size()}});
    Process();
  }

  RunExecution(const RunExecution&) = delete;
  RunExecution& operator=(const RunExecution&) = delete;

  const std::string& run_id() const { return record_.run_id; }
  Millis now() const { return now_; }
  bool Done() const { return record_.terminal(); }
  const RunRecord& record() const { return record_; }
  const std::vector<RunLogEntry>& log() const { return log_; }

  ScheduledBackend& backend(const std::string& id) {
    auto it = backends_.find(id);
    if (it == backends_.end()) throw Error(Errc::kUnknownBackend, id);
    return *it->second;
  }

  /// Materialized output of a successful step.
  const std::vector<std::string>* Output(const std::string& step_key) const {
    auto it = outputs_.find(step_key);
    return it == outputs_.end() ? nullptr : &it->second;
  }
  const std::map<std::string, std::vector<std::string>>& outputs() const { return outputs_; }

  /// Raw telemetry lines of every attempt, keyed "step_key#attempt".
  const std::map<std::string, std::vector<std::string>>& attempt_logs() const { return attempt_logs_; }

  /// Next virtual time something can happen, if any.
  std::optional<Millis> NextWake() const {
    if (Done()) return std::nullopt;
    std::optional<Millis> wake;
    auto consider = [&](Millis t) {
      t = std::max(t, now_);
      if (!wake || t < *wake) wake = t;
    };
    for (const auto& live : live_) {
      const Attempt& a = attempts_[live];
      if (auto t = backends_.at(a.record().backend_id)->NextChange(a.handle, now_)) consider(*t);
      if (a.record().state == AttemptState::kRunning && a.reader.last_heartbeat()) {
        const Millis last = static_cast<Millis>(std::llround(*a.reader.last_heartbeat() * 1000.0));
        consider(last + static_cast<Millis>(std::llround(options_.heartbeat_timeout_s * 1000.0)) + 1);
      }
    }
    return wake;
  }

  /// Moves the clock to the next wake and processes it. False when done.
  bool Advance() {
    auto wake = NextWake();
    if (!wake) return false;
    now_ = *wake;
    Process();
    return true;
  }

  /// Processes every wake at or before t, then parks the clock at t.
  void RunUntil(Millis t) {
    while (!Done()) {
      auto wake = NextWake();
      if (!wake || *wake > t) break;
      now_ = *wake;
      Process();
    }
    if (!Done() && t > now_) {
      now_ = t;
      Process();
    }
  }

  void RunToCompletion() {
    while (Advance()) {
    }
    if (!Done()) {
      // Nothing left to wake on but the run never finished; only possible when
      // a step stalls and liveness cannot fire. Treat as failure.
      Finish();
    }
  }

  /// Cancels every non-terminal attempt and stops scheduling.
  void RequestCancel() {
    if (Done()) throw Error(Errc::kAlreadyTerminal, record_.run_id);
    cancel_requested_ = true;
    record_.cancel_requested_at = now_;
    Append("RUN_CANCEL_REQUESTED", "", 0, nlohmann::json::object());
    for (auto idx : std::vector<std::size_t>(live_.begin(), live_.end())) {
      Attempt& a = attempts_[idx];
      Collect(a);
      if (IsTerminal(a.record().state)) continue;
      backends_.at(a.record().backend_id)->CancelStep(a.handle, now_);
      Apply(idx, EngineEvent::Cancel(now_));
    }
    Process();
  }

 private:
  enum class StepProgress { kPending, kActive, kSucceeded, kFailed };

  struct Attempt {
    std::size_t record_index = 0;
    std::size_t step = 0;
    StepHandle handle;
    EventReader reader;
    int node_count = 1;
    std::vector<StepAttempt>* records = nullptr;

    StepAttempt& record() { return (*records)[record_index]; }
    const StepAttempt& record() const { return (*records)[record_index]; }
  };

  const PlannedStep& planned(std::size_t i) const { return plan_.steps[i]; }

  void Append(std::string kind, std::string step_key, int attempt, nlohmann::json data) {
    RunLogEntry e{log_.size(), now_, std::move(kind), std::move(step_key), attempt, std::move(data)};
    if (log_file_.is_open()) {
      log_file_ << e.ToLine() << '\n';
      log_file_.flush();
    }
    log_.push_back(std::move(e));
  }

  std::string AttemptKey(const Attempt& a) const {
    return a.record().step_key + "#" + std::to_string(a.record().attempt);
  }

  // Pulls new telemetry lines for an attempt and forwards them to the run log.
  void Collect(Attempt& a) {
    const auto& backend = backends_.at(a.record().backend_id);
    auto lines = backend->ReadLog(a.handle, now_, a.reader.lines_consumed());
    if (lines.empty()) return;
    auto& raw = attempt_logs_[AttemptKey(a)];
    raw.insert(raw.end(), lines.begin(), lines.end());
    auto update = a.reader.Consume(lines);
    for (const auto& ev : update.events) {
      if (ev.kind == EventKind::kHeartbeat) continue;
      Append("STEP_EVENT", a.record().step_key, a.record().attempt, nlohmann::json::parse(EncodeEvent(ev)));
    }
    if (!update.new_gaps.empty()) {
      Append("STEP_EVENT_GAP", a.record().step_key, a.record().attempt, {{"missing_seqs", update.new_gaps}});
    }
  }

  void Apply(std::size_t idx, const EngineEvent& ev) {
    Attempt& a = attempts_[idx];
    a.record() = Transition(a.record(), ev);
    StepAttempt& rec = a.record();
    nlohmann::json data = nlohmann::json::object();
    if (rec.state == AttemptState::kLaunching) {
      data = {{"backend_id", rec.backend_id}, {"external_id", a.handle.external_id}};
    }
    if (IsTerminal(rec.state)) {
      const Millis elapsed =
          a.handle.external_id.empty() ? 0 : backends_.at(rec.backend_id)->Elapsed(a.handle, now_);
      rec.duration_hours = MillisToHours(elapsed);
      rec.cost = ComputeStepCost(elapsed, a.node_count, registry_.Get(rec.backend_id).rate_card);
      data = {{"duration_hours", rec.duration_hours}, {"total_usd", rec.cost->total.ToString()}};
      if (rec.error_code) data["error_code"] = *rec.error_code;
      live_.erase(idx);
      OnTerminal(idx);
    }
    Append("STEP_" + std::string(AttemptStateName(rec.state)), rec.step_key, rec.attempt, std::move(data));
  }

  void OnTerminal(std::size_t idx) {
    Attempt& a = attempts_[idx];
    const StepAttempt& rec = a.record();
    switch (rec.state) {
      case AttemptState::kSuccess:
        step_status_[a.step] = StepProgress::kSucceeded;
        outputs_[rec.step_key] = backends_.at(rec.backend_id)->Output(a.handle);
        break;
      case AttemptState::kFailure:
        if (!cancel_requested_ && retry_.ShouldRetry(*rec.error_code, rec.attempt)) {
          retry_queue_.push_back({a.step, rec.attempt + 1});
        } else {
          step_status_[a.step] = StepProgress::kFailed;
        }
        break;
      default:
        step_status_[a.step] = StepProgress::kFailed;
        break;
    }
  }

  // Polls one live attempt and applies whatever the backend reports.
  void Observe(std::size_t idx) {
    Attempt& a = attempts_[idx];
    Collect(a);
    auto& backend = backends_.at(a.record().backend_id);
    const StepStatus status = backend->PollStep(a.handle, now_);
    if (status.state == StepState::kLaunching) return;
    if (a.record().state == AttemptState::kLaunching && status.state != StepState::kCanceled) {
      Apply(idx, EngineEvent::Start(now_));
    }
    switch (status.state) {
      case StepState::kSuccess: Apply(idx, EngineEvent::Succeed(now_)); return;
      case StepState::kFailure: Apply(idx, EngineEvent::Fail(now_, status.error_code)); return;
      case StepState::kCanceled: Apply(idx, EngineEvent::Cancel(now_)); return;
      default: break;
    }
    if (a.record().state == AttemptState::kRunning && a.reader.last_heartbeat() &&
        CheckLiveness(*a.reader.last_heartbeat(), MillisToSeconds(now_), options_.heartbeat_timeout_s) ==
            Liveness::kTimedOut) {
      backend->CancelStep(a.handle, now_);
      Apply(idx, EngineEvent::HeartbeatTimeout(now_));
    }
  }

  bool Blocked(std::size_t step) const {
    const PlannedStep& s = planned(step);
    for (const auto& dep : plan_.graph->asset(s.asset).deps) {
      auto it = step_index_.find(StepKey(dep, s.partition));
      // Upstream outside the selection counts as already materialized.
      if (it == step_index_.end()) continue;
      if (step_status_[it->second] != StepProgress::kSucceeded) return true;
    }
    return false;
  }

  void Launch(std::size_t step, int attempt_no) {
    const PlannedStep& s = planned(step);
    const AssetDef& def = plan_.graph->asset(s.asset);
    const StepSpec spec = SpecFor(def, s.partition);

    StepAttempt rec;
    rec.step_key = s.step_key;
    rec.attempt = attempt_no;
    rec.backend_id = s.backend_id;
    record_.attempts.push_back(rec);
    Attempt a;
    a.records = &record_.attempts;
    a.record_index = record_.attempts.size() - 1;
    a.step = step;
    a.node_count = spec.node_count;
    attempts_.push_back(std::move(a));
    const std::size_t idx = attempts_.size() - 1;
    step_status_[step] = StepProgress::kActive;
    Append("STEP_QUEUED", s.step_key, attempt_no, {{"backend_id", s.backend_id}});

    StepContext ctx;
    ctx.run_id = record_.run_id;
    ctx.step_key = s.step_key;
    ctx.partition = s.partition;
    ctx.tags = def.tags;
    ctx.env = options_.env;
    ctx.backend_id = s.backend_id;
    ctx.attempt = attempt_no;

    std::map<std::string, UpstreamOutput> upstream;
    for (const auto& dep : def.deps) {
      auto it = outputs_.find(StepKey(dep, s.partition));
      upstream[dep] = {&plan_.graph->asset(dep), it == outputs_.end() ? std::vector<std::string>{} : it->second};
    }

    StepJob job;
    const std::string name = s.step_key + "#" + std::to_string(attempt_no);
    std::string file_name = name;
    std::replace(file_name.begin(), file_name.end(), '/', '_');
    job.env = injector_->Inject(file_name, EncodeContext(ctx));
    job.injector = injector_.get();
    auto workload = workload_;
    job.work = [workload, &def, upstream = std::move(upstream)](const StepContext& resolved) {
      return workload->Materialize(resolved, def, upstream);
    };

    attempts_[idx].handle = backends_.at(s.backend_id)->SubmitStep(spec, ctx, job, seed_, now_);
    live_.insert(idx);
    Apply(idx, EngineEvent::Launch(now_));
  }

  void Schedule() {
    if (cancel_requested_) return;
    while (static_cast<int>(live_.size()) < options_.max_concurrency) {
      if (!retry_queue_.empty()) {
        auto [step, attempt] = retry_queue_.front();
        retry_queue_.erase(retry_queue_.begin());
        Launch(step, attempt);
        continue;
      }
      std::optional<std::size_t> next;
      for (std::size_t i = 0; i < plan_.steps.size(); ++i) {
        if (step_status_[i] == StepProgress::kPending && !Blocked(i)) {
          next = i;
          break;
        }
      }
      if (!next) return;
      Launch(*next, 1);
    }
  }

  // Settles everything that happens at now_: observe, schedule, repeat until
  // quiescent, then finish the run if nothing is left.
  void Process() {
    for (int guard = 0; guard < 1'000'000; ++guard) {
      const std::size_t log_size = log_.size();
      for (auto idx : std::vector<std::size_t>(live_.begin(), live_.end())) Observe(idx);
      Schedule();
      if (log_.size() == log_size) break;
    }
    if (live_.empty() && retry_queue_.empty() && !Done()) {
      bool schedulable = false;
      if (!cancel_requested_) {
        for (std::size_t i = 0; i < plan_.steps.size(); ++i) {
          if (step_status_[i] == StepProgress::kPending && !Blocked(i)) schedulable = true;
        }
      }
      if (!schedulable) Finish();
    }
  }

  void Finish() {
    if (Done()) return;
    for (auto idx : std::vector<std::size_t>(live_.begin(), live_.end())) {
      backends_.at(attempts_[idx].record().backend_id)->CancelStep(attempts_[idx].handle, now_);
      Apply(idx, EngineEvent::Cancel(now_));
    }
    const bool all_ok = std::all_of(step_status_.begin(), step_status_.end(),
                                    [](StepProgress p) { return p == StepProgress::kSucceeded; });
    if (cancel_requested_) {
      record_.run_state = RunState::kCanceled;
    } else {
      record_.run_state = all_ok ? RunState::kSuccess : RunState::kFailure;
    }
    record_.ended_at = now_;
    std::vector<CostRow> rows;
    for (const auto& a : record_.attempts) {
      if (!a.cost) continue;
      rows.push_back({a.step_key, a.attempt, a.backend_id, a.duration_hours, *a.cost});
    }
    record_.cost_report = MakeRunCostReport(record_.run_id, std::move(rows));
    Append("RUN_FINISHED", "", 0,
           {{"run_state", RunStateName(record_.run_state)},
            {"aggregated_total_usd", record_.cost_report.aggregated_total.ToString()}});
    Persist();
  }

  void Persist() {
    if (!options_.run_dir) return;
    const auto& dir = *options_.run_dir;
    {
      std::ofstream out(dir / "record.json", std::ios::binary | std::ios::trunc);
      out << SerializeRunRecord(record_);
    }
    std::filesystem::create_directories(dir / "attempts");
    for (const auto& [key, lines] : attempt_logs_) {
      std::string file = key;
      std::replace(file.begin(), file.end(), '/', '_');
      std::ofstream out(dir / "attempts" / (file + ".jsonl"), std::ios::binary | std::ios::trunc);
      for (const auto& line : lines) out << line << '\n';
    }
    for (const auto& [step_key, lines] : outputs_) {
      auto id = ParseStepKey(step_key);
      if (!id) continue;
      const auto out_dir = dir / "outputs" / id->asset / id->partition.time_id;
      std::filesystem::create_directories(out_dir);
      std::ofstream out(out_dir / (std::to_string(id->partition.domain_segment) + ".jsonl"),
                        std::ios::binary | std::ios::trunc);
      for (const auto& line : lines) out << line << '\n';
    }
  }

  RunPlan plan_;
  BackendRegistry registry_;
  RetryPolicy retry_;
  std::uint64_t seed_;
  std::shared_ptr<const Workload> workload_;
  EngineOptions options_;

  Millis now_ = 0;
  bool cancel_requested_ = false;
  RunRecord record_;
  std::vector<RunLogEntry> log_;
  std::ofstream log_file_;
  std::unique_ptr<ContextInjector> injector_;
  std::map<std::string, std::shared_ptr<ScheduledBackend>> backends_;
  std::map<std::string, std::size_t> step_index_;
  std::vector<StepProgress> step_status_;
  std::vector<Attempt> attempts_;
  std::set<std::size_t> live_;
  std::vector<std::pair<std::size_t, int>> retry_queue_;
  std::map<std::string, std::vector<std::string>> outputs_;
  std::map<std::string, std::vector<std::string>> attempt_logs_;
};

/// Runs a plan to completion. cancel_at scripts a cancel request at that
/// virtual time.
inline RunRecord ExecuteRun(RunPlan plan, const BackendRegistry& registry, const RetryPolicy& retry,
                            std::uint64_t seed, std::string run_id, std::shared_ptr<const Workload> workload = nullptr,
                            EngineOptions options = {}, std::optional<Millis> cancel_at = std::nullopt) {
  RunExecution exec(std::move(plan), registry, retry, seed, std::move(run_id), std::move(workload), std::move(options));
  if (cancel_at) {
    exec.RunUntil(*cancel_at);
    if (!exec.Done()) exec.RequestCancel();
  }
  exec.RunToCompletion();
  return exec.record();
}

}  // namespace costflow
