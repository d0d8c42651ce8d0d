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
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "costflow/asset_graph.hpp"
#include "costflow/cost.hpp"
#include "costflow/error.hpp"
#include "costflow/hash.hpp"
#include "costflow/money.hpp"
#include "costflow/step_protocol.hpp"

namespace costflow {

// Stable error codes reported by backends and the engine.
namespace error_code {
inline constexpr std::string_view kOom = "OOM";
inline constexpr std::string_view kSpotReclaim = "SPOT_RECLAIM";
inline constexpr std::string_view kBootstrapFailed = "BOOTSTRAP_FAILED";
inline constexpr std::string_view kUserCodeError = "USER_CODE_ERROR";
inline constexpr std::string_view kHeartbeatTimeout = "HEARTBEAT_TIMEOUT";
}  // namespace error_code

inline bool IsKnownErrorCode(std::string_view code) {
  return code == error_code::kOom || code == error_code::kSpotReclaim || code == error_code::kBootstrapFailed ||
         code == error_code::kUserCodeError || code == error_code::kHeartbeatTimeout;
}

// Duration multiplier when a maintenance-heavy step runs without parallel
// Delta vacuum deletes.
inline constexpr double kVacuumPenalty = 1.25;
// Duration multiplier when resource allocation is not maximized.
inline constexpr double kResourceAllocationPenalty = 1.15;
// Memory multiplier below which memory-heavy steps fail twice as often.
inline constexpr double kMemoryMultiplierThreshold = 2.0;

struct SimKnobs {
  bool node_labels_enabled = true;
  bool maximize_resource_allocation = true;
  bool parallel_vacuum = true;
  double memory_multiplier = 2.0;

  bool operator==(const SimKnobs&) const = default;
};

struct SimProfile {
  double speed_factor = 1.0;
  double bootstrap_delay_hours = 0.0;
  double base_failure_prob = 0.0;
  double heartbeat_interval_s = kDefaultHeartbeatIntervalSeconds;
  SimKnobs knobs;

  bool operator==(const SimProfile&) const = default;
};

inline void ValidateProfile(const SimProfile& p) {
  if (!(p.speed_factor > 0.0) || !std::isfinite(p.speed_factor)) {
    throw Error(Errc::kInvalidConfig, "speed_factor must be > 0");
  }
  if (!(p.bootstrap_delay_hours >= 0.0)) throw Error(Errc::kInvalidConfig, "bootstrap_delay_hours must be >= 0");
  if (!(p.base_failure_prob >= 0.0 && p.base_failure_prob <= 1.0)) {
    throw Error(Errc::kInvalidConfig, "base_failure_prob must be in [0, 1]");
  }
  if (!(p.heartbeat_interval_s > 0.0)) throw Error(Errc::kInvalidConfig, "heartbeat_interval_s must be > 0");
  if (!(p.knobs.memory_multiplier > 0.0)) throw Error(Errc::kInvalidConfig, "memory_multiplier must be > 0");
}

/// Asset-level properties that interact with profile knobs, read from tags
/// maintenance_heavy=true and memory_heavy=true.
struct StepTraits {
  bool maintenance_heavy = false;
  bool memory_heavy = false;

  static StepTraits FromTags(const TagMap& tags) {
    auto flag = [&](const char* key) {
      auto it = tags.find(key);
      return it != tags.end() && (it->second == "true" || it->second == "1" || it->second == "yes");
    };
    return {flag("maintenance_heavy"), flag("memory_heavy")};
  }
};

/// Hours of run time once the cluster is up (bootstrap excluded).
inline double EffectiveDuration(double base_duration_hours, const SimProfile& profile, StepTraits traits = {}) {
  if (!(base_duration_hours >= 0.0)) throw Error(Errc::kInvalidArgument, "base duration must be >= 0");
  double hours = base_duration_hours / profile.speed_factor;
  if (traits.maintenance_heavy && !profile.knobs.parallel_vacuum) hours *= kVacuumPenalty;
  if (!profile.knobs.maximize_resource_allocation) hours *= kResourceAllocationPenalty;
  return hours;
}

inline double EffectiveFailureProb(const SimProfile& profile, StepTraits traits = {}) {
  double p = profile.base_failure_prob;
  if (!profile.knobs.node_labels_enabled) p = std::min(1.0, p * 2.0);
  if (traits.memory_heavy && profile.knobs.memory_multiplier < kMemoryMultiplierThreshold) p = std::min(1.0, p * 2.0);
  return p;
}

struct BackendDescriptor {
  std::string backend_id;
  std::string display_name;
  RateCard rate_card;
  std::optional<SimProfile> sim_profile;  // absent for in-process execution
  bool available = true;

  /// Identity profile for the local backend.
  SimProfile profile() const { return sim_profile.value_or(SimProfile{}); }
};

// Calibration defaults. Speed and failure rates are chosen to echo the
// observed EMR/DBR contrast; rates are per node-hour assuming a 10-node
// cluster behind the recorded edges steps.
inline SimProfile DefaultEmrProfile() {
  SimProfile p;
  p.speed_factor = 1.0;
  p.bootstrap_delay_hours = 0.15;
  p.base_failure_prob = 0.20;
  return p;
}

inline SimProfile DefaultDbrProfile() {
  SimProfile p;
  p.speed_factor = 1.75;
  p.bootstrap_delay_hours = 0.08;
  p.base_failure_prob = 0.10;
  return p;
}

/// EMR before tuning: no node labels, default resource allocation, serial
/// vacuum, memory not doubled.
inline SimProfile UntunedEmrProfile() {
  SimProfile p = DefaultEmrProfile();
  p.knobs = {false, false, false, 1.0};
  return p;
}

inline std::vector<BackendDescriptor> DefaultBackends() {
  return {
      {"dbr_sim", "Databricks (simulated)",
       {Rate::FromUsd(8.8075), Rate::FromUsd(4.2170), Rate::FromUsd(0.3935)}, DefaultDbrProfile(), true},
      {"emr_sim", "EMR (simulated)",
       {Rate::FromUsd(3.0894), Rate::FromUsd(0.8027), Rate::FromUsd(0.1373)}, DefaultEmrProfile(), true},
      {"local", "Local process", {}, std::nullopt, true},
  };
}

/// Descriptors keyed by backend id.
class BackendRegistry {
 public:
  BackendRegistry() = default;

  explicit BackendRegistry(const std::vector<BackendDescriptor>& descriptors) {
    for (const auto& d : descriptors) Add(d);
  }

  void Add(const BackendDescriptor& d) {
    if (d.backend_id.empty()) throw Error(Errc::kInvalidConfig, "backend_id is empty");
    if (d.sim_profile) ValidateProfile(*d.sim_profile);
    if (!by_id_.emplace(d.backend_id, d).second) {
      throw Error(Errc::kInvalidConfig, "duplicate backend_id '" + d.backend_id + "'");
    }
  }

  const BackendDescriptor& Get(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw Error(Errc::kUnknownBackend, id);
    return it->second;
  }

  bool Contains(const std::string& id) const { return by_id_.count(id) != 0; }
  bool empty() const { return by_id_.empty(); }
  std::size_t size() const { return by_id_.size(); }
  const std::map<std::string, BackendDescriptor>& all() const { return by_id_; }

 private:
  std::map<std::string, BackendDescriptor> by_id_;
};

// ---------------------------------------------------------------------------
// Step submission
// ---------------------------------------------------------------------------

struct StepSpec {
  std::string asset;
  PartitionKey partition;
  double base_duration_hours = 0.0;
  int node_count = 1;
  StepTraits traits;
};

struct StepHandle {
  std::string backend_id;
  std::string external_id;
  double submitted_at = 0.0;  // virtual seconds

  bool operator==(const StepHandle&) const = default;
};

enum class StepState { kLaunching, kRunning, kSuccess, kFailure, kCanceled };

constexpr std::string_view StepStateName(StepState s) {
  switch (s) {
    case StepState::kLaunching: return "LAUNCHING";
    case StepState::kRunning: return "RUNNING";
    case StepState::kSuccess: return "SUCCESS";
    case StepState::kFailure: return "FAILURE";
    case StepState::kCanceled: return "CANCELED";
  }
  return "?";
}

struct StepStatus {
  StepState state = StepState::kLaunching;
  std::string error_code;  // set for kFailure

  bool terminal() const {
    return state == StepState::kSuccess || state == StepState::kFailure || state == StepState::kCanceled;
  }
  bool operator==(const StepStatus&) const = default;
};

enum class CancelAck { kCanceled, kAlreadyTerminal };

/// Predetermined outcome of one attempt.
struct Fate {
  enum class Outcome { kSuccess, kFailure, kStall };

  Outcome outcome = Outcome::kSuccess;
  std::string error_code;
  // Point within the run phase where a failure or stall happens, in [0, 1).
  double at_fraction = 0.0;

  static Fate Success() { return {}; }
  static Fate Failure(std::string_view code, double at = 0.5) { return {Outcome::kFailure, std::string(code), at}; }
  static Fate Stall(double at = 0.5) { return {Outcome::kStall, {}, at}; }
};

/// Fate drawn from the per-attempt stream keyed by (seed, run_id, step_key,
/// attempt). The first draw decides failure so the failure frequency does not
/// depend on the code distribution.
inline Fate DrawFate(std::uint64_t seed, const std::string& run_id, const std::string& step_key, int attempt,
                     double failure_prob) {
  auto rng = StreamFor(seed, {"fate", run_id, step_key, std::to_string(attempt)});
  const double u = rng.NextUnit();
  const double pick = rng.NextUnit();
  const double at = rng.NextUnit();
  if (u >= failure_prob) return Fate::Success();
  std::string_view code;
  if (pick < 0.40) {
    code = error_code::kOom;
  } else if (pick < 0.70) {
    code = error_code::kSpotReclaim;
  } else if (pick < 0.85) {
    code = error_code::kBootstrapFailed;
  } else {
    code = error_code::kUserCodeError;
  }
  return Fate::Failure(code, code == error_code::kBootstrapFailed ? 0.0 : at);
}

/// What a worker runs: the injected environment, where to resolve it, and the
/// step's computation producing materialized output lines.
struct StepJob {
  std::map<std::string, std::string> env;
  const ContextInjector* injector = nullptr;
  std::function<std::vector<std::string>(const StepContext&)> work;
};

/// Execution backend interface. Implementations must be safe to call from
/// several engine workers at once.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual const BackendDescriptor& descriptor() const = 0;

  virtual StepHandle SubmitStep(const StepSpec& spec, const StepContext& ctx, const StepJob& job, std::uint64_t seed,
                                Millis now) = 0;
  virtual StepStatus PollStep(const StepHandle& handle, Millis now) const = 0;
  virtual CancelAck CancelStep(const StepHandle& handle, Millis now) = 0;

  /// Telemetry lines with timestamp <= now, starting at line index `from`.
  virtual std::vector<std::string> ReadLog(const StepHandle& handle, Millis now, std::size_t from = 0) const = 0;

  /// Next virtual time after `now` at which PollStep's answer changes.
  virtual std::optional<Millis> NextChange(const StepHandle& handle, Millis now) const = 0;

  /// Materialized output of a successful attempt.
  virtual std::vector<std::string> Output(const StepHandle& handle) const = 0;

  /// Elapsed billable time from submission to terminal (or to `now`).
  virtual Millis Elapsed(const StepHandle& handle, Millis now) const = 0;
};

/// Shared machinery: every outcome and timing is fixed at submit time, and
/// later calls only read that schedule against the virtual clock.
class ScheduledBackend : public Backend {
 public:
  explicit ScheduledBackend(BackendDescriptor descriptor) : descriptor_(std::move(descriptor)) {
    if (descriptor_.sim_profile) ValidateProfile(*descriptor_.sim_profile);
  }

  const BackendDescriptor& descriptor() const override { return descriptor_; }

  /// Forces the fate of a future (step_key, attempt) submission.
  void ScriptFate(const std::string& step_key, int attempt, Fate fate) {
    std::lock_guard lock(mu_);
    scripted_[{step_key, attempt}] = std::move(fate);
  }

  StepHandle SubmitStep(const StepSpec& spec, const StepContext& ctx, const StepJob& job, std::uint64_t seed,
                        Millis now) override {
    if (!descriptor_.available) throw Error(Errc::kBackendUnavailable, descriptor_.backend_id);
    if (!(spec.base_duration_hours >= 0.0) || spec.node_count < 1 || spec.asset.empty()) {
      throw Error(Errc::kInvalidSpec, "bad step spec for '" + spec.asset + "'");
    }
    if (ctx.step_key != StepKey(spec.asset, spec.partition) || ctx.partition != spec.partition) {
      throw Error(Errc::kInvalidSpec, "context " + ctx.step_key + " does not match spec");
    }
    ValidateContext(ctx);

    const SimProfile profile = descriptor_.profile();
    Attempt a;
    a.run_id = ctx.run_id;
    a.step_key = ctx.step_key;
    a.asset = spec.asset;
    a.attempt = ctx.attempt;
    a.node_count = spec.node_count;
    a.submitted = now;
    a.running = now + HoursToMillis(profile.bootstrap_delay_hours);
    a.run_ms = HoursToMillis(EffectiveDuration(spec.base_duration_hours, profile, spec.traits));
    a.heartbeat_ms = std::max<Millis>(1, static_cast<Millis>(std::llround(profile.heartbeat_interval_s * 1000.0)));

    {
      std::lock_guard lock(mu_);
      auto it = scripted_.find({ctx.step_key, ctx.attempt});
      if (it != scripted_.end()) {
        a.fate = it->second;
      } else {
        a.fate = DrawFate(seed, ctx.run_id, ctx.step_key, ctx.attempt, FailureProbability(spec));
      }
    }

    if (a.fate.outcome == Fate::Outcome::kSuccess) RunWork(a, ctx, job);
    a.stop = a.running + static_cast<Millis>(std::floor(a.fate.at_fraction * static_cast<double>(a.run_ms)));
    if (a.fate.outcome == Fate::Outcome::kSuccess) a.stop = a.running + a.run_ms;

    std::lock_guard lock(mu_);
    StepHandle handle{descriptor_.backend_id, descriptor_.backend_id + "-" + std::to_string(++counter_),
                      MillisToSeconds(now)};
    attempts_.emplace(handle.external_id, std::move(a));
    return handle;
  }

  StepStatus PollStep(const StepHandle& handle, Millis now) const override {
    std::lock_guard lock(mu_);
    return StatusAt(Find(handle), now);
  }

  CancelAck CancelStep(const StepHandle& handle, Millis now) override {
    std::lock_guard lock(mu_);
    Attempt& a = Find(handle);
    if (StatusAt(a, now).terminal()) return CancelAck::kAlreadyTerminal;
    a.canceled_at = now;
    return CancelAck::kCanceled;
  }

  std::vector<std::string> ReadLog(const StepHandle& handle, Millis now, std::size_t from = 0) const override {
    std::lock_guard lock(mu_);
    const Attempt& a = Find(handle);
    const Millis horizon = a.canceled_at ? std::min(now, *a.canceled_at) : now;
    std::vector<std::string> lines;
    for (std::size_t i = from; i < a.LineCount(); ++i) {
      StepEvent ev = a.EventAt(i, descriptor_);
      if (ev.ts > MillisToSeconds(horizon)) break;
      if (a.canceled_at && IsTerminal(ev.kind)) break;
      lines.push_back(EncodeEvent(ev));
    }
    return lines;
  }

  std::optional<Millis> NextChange(const StepHandle& handle, Millis now) const override {
    std::lock_guard lock(mu_);
    const Attempt& a = Find(handle);
    if (StatusAt(a, now).terminal()) return std::nullopt;
    if (now < a.running) return a.running;
    if (a.fate.outcome == Fate::Outcome::kStall) return std::nullopt;
    return a.stop;
  }

  std::vector<std::string> Output(const StepHandle& handle) const override {
    std::lock_guard lock(mu_);
    return Find(handle).output;
  }

  Millis Elapsed(const StepHandle& handle, Millis now) const override {
    std::lock_guard lock(mu_);
    const Attempt& a = Find(handle);
    Millis end = now;
    if (a.canceled_at) end = std::min(end, *a.canceled_at);
    if (a.fate.outcome != Fate::Outcome::kStall) end = std::min(end, a.stop);
    return std::max<Millis>(0, end - a.submitted);
  }

 protected:
  virtual double FailureProbability(const StepSpec& spec) const {
    return EffectiveFailureProb(descriptor_.profile(), spec.traits);
  }

 private:
  struct Attempt {
    std::string run_id;
    std::string step_key;
    std::string asset;
    int attempt = 1;
    int node_count = 1;
    Millis submitted = 0;
    Millis running = 0;
    Millis run_ms = 0;
    Millis stop = 0;  // terminal time, or last-heartbeat horizon for a stall
    Millis heartbeat_ms = 5000;
    Fate fate;
    std::optional<Millis> canceled_at;
    std::vector<std::string> output;
    std::string failure_message;

    std::size_t HeartbeatCount() const {
      if (stop <= running) return 0;
      return static_cast<std::size_t>((stop - running - 1) / heartbeat_ms);
    }

    // CONTEXT_LOADED, start LOG, heartbeats, then the terminal block.
    std::size_t LineCount() const {
      std::size_t n = 2 + HeartbeatCount();
      switch (fate.outcome) {
        case Fate::Outcome::kSuccess: return n + 2;
        case Fate::Outcome::kFailure: return n + 1;
        case Fate::Outcome::kStall: return n;
      }
      return n;
    }

    StepEvent EventAt(std::size_t i, const BackendDescriptor& d) const {
      const std::uint64_t seq = i;
      const std::size_t beats = HeartbeatCount();
      if (i == 0) {
        return {seq, run_id, step_key, EventKind::kContextLoaded, MillisToSeconds(running),
                Json{{"attempt", attempt}, {"backend_id", d.backend_id}}};
      }
      if (i == 1) {
        return MakeLogEvent(seq, run_id, step_key, MillisToSeconds(running), "INFO",
                            "running " + asset + " on " + d.display_name + " with " + std::to_string(node_count) +
                                " node(s)");
      }
      if (i < 2 + beats) {
        const Millis ts = running + static_cast<Millis>(i - 1) * heartbeat_ms;
        return {seq, run_id, step_key, EventKind::kHeartbeat, MillisToSeconds(ts), Json::object()};
      }
      const double end = MillisToSeconds(stop);
      if (fate.outcome == Fate::Outcome::kFailure) {
        return {seq, run_id, step_key, EventKind::kStepFailed, end,
                Json{{"error_code", fate.error_code},
                     {"message", failure_message.empty() ? "step failed: " + fate.error_code : failure_message}}};
      }
      if (i == 2 + beats) {
        return {seq, run_id, step_key, EventKind::kMaterialization, end,
                Json{{"asset", asset}, {"row_count", output.size()}}};
      }
      return {seq, run_id, step_key, EventKind::kStepSucceeded, end, Json::object()};
    }
  };

  static StepStatus StatusAt(const Attempt& a, Millis now) {
    if (a.canceled_at && *a.canceled_at <= now) return {StepState::kCanceled, {}};
    if (now < a.running) return {StepState::kLaunching, {}};
    switch (a.fate.outcome) {
      case Fate::Outcome::kSuccess:
        return now < a.stop ? StepStatus{StepState::kRunning, {}} : StepStatus{StepState::kSuccess, {}};
      case Fate::Outcome::kFailure:
        return now < a.stop ? StepStatus{StepState::kRunning, {}} : StepStatus{StepState::kFailure, a.fate.error_code};
      case Fate::Outcome::kStall:
        return {StepState::kRunning, {}};
    }
    return {StepState::kRunning, {}};
  }

  // The worker side: resolve the injected context and run the computation.
  // Failures here turn the fate into a failure of the matching kind.
  void RunWork(Attempt& a, const StepContext& ctx, const StepJob& job) const {
    StepContext resolved = ctx;
    if (job.injector) {
      try {
        resolved = job.injector->Resolve(job.env);
      } catch (const std::exception& e) {
        a.fate = Fate::Failure(error_code::kBootstrapFailed, 0.0);
        a.failure_message = std::string("context injection failed: ") + e.what();
        return;
      }
    }
    if (!job.work) return;
    try {
      a.output = job.work(resolved);
    } catch (const std::exception& e) {
      a.fate = Fate::Failure(error_code::kUserCodeError, 1.0 - 1e-9);
      a.failure_message = e.what();
      a.output.clear();
    }
  }

  Attempt& Find(const StepHandle& handle) {
    auto it = attempts_.find(handle.external_id);
    if (handle.backend_id != descriptor_.backend_id || it == attempts_.end()) {
      throw Error(Errc::kUnknownHandle, handle.external_id);
    }
    return it->second;
  }

  const Attempt& Find(const StepHandle& handle) const {
    return const_cast<ScheduledBackend*>(this)->Find(handle);
  }

  BackendDescriptor descriptor_;
  mutable std::mutex mu_;
  std::uint64_t counter_ = 0;
  std::map<std::string, Attempt> attempts_;
  std::map<std::pair<std::string, int>, Fate> scripted_;
};

/// In-process execution: no bootstrap, real-time speed, and no injected
/// infrastructure failures. User code can still fail.
class LocalBackend : public ScheduledBackend {
 public:
  explicit LocalBackend(BackendDescriptor descriptor) : ScheduledBackend(Strip(std::move(descriptor))) {}

 protected:
  double FailureProbability(const StepSpec&) const override { return 0.0; }

 private:
  static BackendDescriptor Strip(BackendDescriptor d) {
    d.sim_profile.reset();
    return d;
  }
};

/// EMR-like or DBR-like cluster simulated from its profile.
class SimulatedBackend : public ScheduledBackend {
 public:
  explicit SimulatedBackend(BackendDescriptor descriptor) : ScheduledBackend(std::move(descriptor)) {
    if (!this->descriptor().sim_profile) {
      throw Error(Errc::kInvalidConfig, "simulated backend '" + this->descriptor().backend_id + "' needs a sim_profile");
    }
  }
};

/// Client factory: descriptors with a sim profile get a simulated cluster,
/// the rest run in-process.
inline std::shared_ptr<ScheduledBackend> MakeBackend(const BackendDescriptor& d) {
  if (d.sim_profile) return std::make_shared<SimulatedBackend>(d);
  return std::make_shared<LocalBackend>(d);
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json ToJson(const SimProfile& p) {
  return {{"speed_factor", p.speed_factor},
          {"bootstrap_delay_hours", p.bootstrap_delay_hours},
          {"base_failure_prob", p.base_failure_prob},
          {"heartbeat_interval_s", p.heartbeat_interval_s},
          {"knobs",
           {{"node_labels_enabled", p.knobs.node_labels_enabled},
            {"maximize_resource_allocation", p.knobs.maximize_resource_allocation},
            {"parallel_vacuum", p.knobs.parallel_vacuum},
            {"memory_multiplier", p.knobs.memory_multiplier}}}};
}

inline nlohmann::json ToJson(const RateCard& r) {
  return {{"instance_rate_per_node_hour", r.instance.usd()},
          {"surcharge_rate_per_node_hour", r.surcharge.usd()},
          {"storage_rate_per_node_hour", r.storage.usd()}};
}

inline nlohmann::json ToJson(const BackendDescriptor& d) {
  nlohmann::json j = {{"backend_id", d.backend_id},
                      {"display_name", d.display_name},
                      {"rate_card", ToJson(d.rate_card)},
                      {"available", d.available}};
  j["sim_profile"] = d.sim_profile ? ToJson(*d.sim_profile) : nlohmann::json(nullptr);
  return j;
}

}  // namespace costflow
