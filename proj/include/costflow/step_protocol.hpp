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
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "costflow/asset_graph.hpp"
#include "costflow/error.hpp"

namespace costflow {

using Json = nlohmann::json;

// Environment variable naming the file that holds a step's encoded context.
inline constexpr const char* kContextEnvVar = "COSTFLOW_CONTEXT_FILE";

inline constexpr double kDefaultHeartbeatIntervalSeconds = 5.0;
inline constexpr double kDefaultHeartbeatTimeoutSeconds = 30.0;

struct StepContext {
  std::string run_id;
  std::string step_key;
  PartitionKey partition;
  TagMap tags;
  std::map<std::string, std::string> env;
  std::string backend_id;
  int attempt = 1;

  bool operator==(const StepContext&) const = default;
};

inline void ValidateContext(const StepContext& ctx) {
  if (ctx.attempt < 1) throw Error(Errc::kInvalidArgument, "attempt must be >= 1");
  auto id = ParseStepKey(ctx.step_key);
  if (!id || id->partition != ctx.partition) {
    throw Error(Errc::kInvalidArgument, "step_key '" + ctx.step_key + "' does not match partition");
  }
}

// ---------------------------------------------------------------------------
// Context payload
// ---------------------------------------------------------------------------

/// Canonical JSON: object keys sorted, compact separators, UTF-8.
inline std::string EncodeContext(const StepContext& ctx) {
  ValidateContext(ctx);
  Json j = {
      {"attempt", ctx.attempt},
      {"backend_id", ctx.backend_id},
      {"env", ctx.env},
      {"partition", {{"domain_segment", ctx.partition.domain_segment}, {"time_id", ctx.partition.time_id}}},
      {"run_id", ctx.run_id},
      {"step_key", ctx.step_key},
      {"tags", ctx.tags},
  };
  return j.dump(-1, ' ', false, Json::error_handler_t::replace);
}

namespace detail {

template <typename T>
T RequireField(const Json& obj, const char* name, const char* what) {
  auto it = obj.find(name);
  if (it == obj.end()) throw Error(Errc::kMalformedPayload, std::string(what) + ": missing field '" + name + "'");
  try {
    return it->get<T>();
  } catch (const Json::exception&) {
    throw Error(Errc::kMalformedPayload, std::string(what) + ": field '" + name + "' has the wrong type");
  }
}

inline std::map<std::string, std::string> StringMapField(const Json& obj, const char* name, const char* what) {
  auto it = obj.find(name);
  if (it == obj.end()) return {};
  if (!it->is_object()) throw Error(Errc::kMalformedPayload, std::string(what) + ": '" + name + "' is not an object");
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : it->items()) {
    if (!v.is_string()) {
      throw Error(Errc::kMalformedPayload, std::string(what) + ": '" + name + "." + k + "' is not a string");
    }
    out.emplace(k, v.get<std::string>());
  }
  return out;
}

}  // namespace detail

/// Inverse of EncodeContext. Unknown fields are ignored.
inline StepContext DecodeContext(std::string_view payload) {
  Json j;
  try {
    j = Json::parse(payload);
  } catch (const Json::parse_error& e) {
    throw Error(Errc::kMalformedPayload, "offset " + std::to_string(e.byte) + ": " + e.what());
  }
  if (!j.is_object()) throw Error(Errc::kMalformedPayload, "context payload is not an object");
  StepContext ctx;
  ctx.attempt = detail::RequireField<int>(j, "attempt", "context");
  ctx.backend_id = detail::RequireField<std::string>(j, "backend_id", "context");
  ctx.run_id = detail::RequireField<std::string>(j, "run_id", "context");
  ctx.step_key = detail::RequireField<std::string>(j, "step_key", "context");
  ctx.env = detail::StringMapField(j, "env", "context");
  ctx.tags = detail::StringMapField(j, "tags", "context");
  const Json part = detail::RequireField<Json>(j, "partition", "context");
  if (!part.is_object()) throw Error(Errc::kMalformedPayload, "context: 'partition' is not an object");
  ctx.partition.time_id = detail::RequireField<std::string>(part, "time_id", "context.partition");
  ctx.partition.domain_segment = detail::RequireField<int>(part, "domain_segment", "context.partition");
  try {
    ValidateContext(ctx);
  } catch (const Error& e) {
    throw Error(Errc::kMalformedPayload, e.detail());
  }
  return ctx;
}

// ---------------------------------------------------------------------------
// Telemetry events
// ---------------------------------------------------------------------------

enum class EventKind { kContextLoaded, kLog, kHeartbeat, kMaterialization, kStepSucceeded, kStepFailed };

constexpr std::string_view EventKindName(EventKind kind) {
  switch (kind) {
    case EventKind::kContextLoaded: return "CONTEXT_LOADED";
    case EventKind::kLog: return "LOG";
    case EventKind::kHeartbeat: return "HEARTBEAT";
    case EventKind::kMaterialization: return "MATERIALIZATION";
    case EventKind::kStepSucceeded: return "STEP_SUCCEEDED";
    case EventKind::kStepFailed: return "STEP_FAILED";
  }
  return "?";
}

inline std::optional<EventKind> ParseEventKind(std::string_view name) {
  for (auto kind : {EventKind::kContextLoaded, EventKind::kLog, EventKind::kHeartbeat, EventKind::kMaterialization,
                    EventKind::kStepSucceeded, EventKind::kStepFailed}) {
    if (EventKindName(kind) == name) return kind;
  }
  return std::nullopt;
}

constexpr bool IsTerminal(EventKind kind) {
  return kind == EventKind::kStepSucceeded || kind == EventKind::kStepFailed;
}

struct StepEvent {
  std::uint64_t seq = 0;
  std::string run_id;
  std::string step_key;
  EventKind kind = EventKind::kLog;
  double ts = 0.0;  // virtual seconds
  Json payload = Json::object();

  bool operator==(const StepEvent&) const = default;
};

namespace detail {

inline bool HasString(const Json& p, const char* key) { return p.contains(key) && p.at(key).is_string(); }

// Empty string when the payload fits the kind.
inline std::string PayloadProblem(EventKind kind, const Json& payload) {
  if (!payload.is_object()) return "payload is not an object";
  switch (kind) {
    case EventKind::kLog:
      if (!HasString(payload, "level") || !HasString(payload, "message")) return "LOG needs level and message";
      break;
    case EventKind::kMaterialization:
      if (!HasString(payload, "asset") || !payload.contains("row_count") ||
          !payload.at("row_count").is_number_integer() || payload.at("row_count").get<std::int64_t>() < 0) {
        return "MATERIALIZATION needs asset and nonnegative row_count";
      }
      break;
    case EventKind::kStepFailed:
      if (!HasString(payload, "error_code") || !HasString(payload, "message")) {
        return "STEP_FAILED needs error_code and message";
      }
      break;
    default:
      break;
  }
  return {};
}

}  // namespace detail

inline StepEvent MakeLogEvent(std::uint64_t seq, std::string run_id, std::string step_key, double ts,
                              std::string level, std::string message) {
  return {seq, std::move(run_id), std::move(step_key), EventKind::kLog, ts,
          Json{{"level", std::move(level)}, {"message", std::move(message)}}};
}

/// One line of UTF-8 JSON, keys sorted, no trailing newline.
inline std::string EncodeEvent(const StepEvent& ev) {
  if (auto problem = detail::PayloadProblem(ev.kind, ev.payload); !problem.empty()) {
    throw Error(Errc::kInvalidArgument, problem);
  }
  Json j = {
      {"kind", EventKindName(ev.kind)}, {"payload", ev.payload}, {"run_id", ev.run_id},
      {"seq", ev.seq},                  {"step_key", ev.step_key}, {"ts", ev.ts},
  };
  return j.dump(-1, ' ', false, Json::error_handler_t::replace);
}

inline StepEvent DecodeEvent(std::string_view line) {
  Json j;
  try {
    j = Json::parse(line);
  } catch (const Json::parse_error& e) {
    throw Error(Errc::kMalformedEvent, "offset " + std::to_string(e.byte));
  }
  if (!j.is_object()) throw Error(Errc::kMalformedEvent, "event is not an object");
  try {
    StepEvent ev;
    auto seq = j.at("seq");
    if (!seq.is_number_unsigned()) throw Error(Errc::kMalformedEvent, "seq must be a nonnegative integer");
    ev.seq = seq.get<std::uint64_t>();
    ev.run_id = j.at("run_id").get<std::string>();
    ev.step_key = j.at("step_key").get<std::string>();
    auto kind = ParseEventKind(j.at("kind").get<std::string>());
    if (!kind) throw Error(Errc::kMalformedEvent, "unknown kind '" + j.at("kind").get<std::string>() + "'");
    ev.kind = *kind;
    auto ts = j.at("ts");
    if (!ts.is_number()) throw Error(Errc::kMalformedEvent, "ts must be a number");
    ev.ts = ts.get<double>();
    ev.payload = j.value("payload", Json::object());
    if (auto problem = detail::PayloadProblem(ev.kind, ev.payload); !problem.empty()) {
      throw Error(Errc::kMalformedEvent, problem);
    }
    return ev;
  } catch (const Json::exception& e) {
    throw Error(Errc::kMalformedEvent, e.what());
  }
}

struct LineDiagnostic {
  std::size_t line_index = 0;
  std::string message;
};

struct EventReadResult {
  // Per step_key, ascending seq.
  std::map<std::string, std::vector<StepEvent>> by_step;
  // Missing seq numbers below each step's highest observed seq.
  std::map<std::string, std::vector<std::uint64_t>> gaps;
  std::vector<LineDiagnostic> diagnostics;

  /// All events, grouped by step_key then seq.
  std::vector<StepEvent> Flatten() const {
    std::vector<StepEvent> out;
    for (const auto& [key, events] : by_step) out.insert(out.end(), events.begin(), events.end());
    return out;
  }
};

/// Batch reader over an arbitrary interleaving of lines from many steps.
/// Malformed lines and duplicate seqs are reported, never fatal.
inline EventReadResult ReadEvents(std::span<const std::string> lines) {
  EventReadResult result;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    try {
      StepEvent ev = DecodeEvent(lines[i]);
      result.by_step[ev.step_key].push_back(std::move(ev));
    } catch (const Error& e) {
      result.diagnostics.push_back({i, e.what()});
    }
  }
  for (auto& [key, events] : result.by_step) {
    std::stable_sort(events.begin(), events.end(),
                     [](const StepEvent& a, const StepEvent& b) { return a.seq < b.seq; });
    std::vector<StepEvent> unique;
    unique.reserve(events.size());
    for (auto& ev : events) {
      if (!unique.empty() && unique.back().seq == ev.seq) {
        result.diagnostics.push_back({0, "duplicate seq " + std::to_string(ev.seq) + " for " + key});
        continue;
      }
      unique.push_back(std::move(ev));
    }
    events = std::move(unique);
    std::vector<std::uint64_t> missing;
    std::uint64_t expected = 0;
    for (const auto& ev : events) {
      for (; expected < ev.seq; ++expected) missing.push_back(expected);
      expected = ev.seq + 1;
    }
    if (!missing.empty()) result.gaps[key] = std::move(missing);
  }
  return result;
}

/// Incremental single-attempt reader used by the engine: lines arrive in log
/// order, gaps are noted as they appear.
class EventReader {
 public:
  struct Update {
    std::vector<StepEvent> events;
    std::vector<std::uint64_t> new_gaps;
  };

  Update Consume(std::span<const std::string> lines) {
    Update update;
    for (const auto& line : lines) {
      ++line_count_;
      if (line.empty()) continue;
      StepEvent ev;
      try {
        ev = DecodeEvent(line);
      } catch (const Error& e) {
        diagnostics_.push_back({line_count_ - 1, e.what()});
        continue;
      }
      if (ev.seq < next_seq_) {
        diagnostics_.push_back({line_count_ - 1, "stale seq " + std::to_string(ev.seq)});
        continue;
      }
      for (; next_seq_ < ev.seq; ++next_seq_) {
        update.new_gaps.push_back(next_seq_);
        gaps_.push_back(next_seq_);
      }
      next_seq_ = ev.seq + 1;
      last_ts_ = ev.ts;
      if (ev.kind == EventKind::kHeartbeat || ev.kind == EventKind::kContextLoaded) last_heartbeat_ = ev.ts;
      if (IsTerminal(ev.kind)) terminal_ = ev;
      update.events.push_back(std::move(ev));
    }
    return update;
  }

  std::size_t lines_consumed() const { return line_count_; }
  std::optional<double> last_heartbeat() const { return last_heartbeat_; }
  const std::optional<StepEvent>& terminal() const { return terminal_; }
  const std::vector<std::uint64_t>& gaps() const { return gaps_; }
  const std::vector<LineDiagnostic>& diagnostics() const { return diagnostics_; }

 private:
  std::size_t line_count_ = 0;
  std::uint64_t next_seq_ = 0;
  double last_ts_ = 0.0;
  std::optional<double> last_heartbeat_;
  std::optional<StepEvent> terminal_;
  std::vector<std::uint64_t> gaps_;
  std::vector<LineDiagnostic> diagnostics_;
};

/// Checks the shape of one attempt's stream: first event CONTEXT_LOADED,
/// seqs 0..n-1, at most one terminal and it is last. With require_terminal the
/// terminal must exist (a canceled attempt's log legitimately lacks one).
inline std::optional<std::string> ValidateStream(std::span<const StepEvent> events, bool require_terminal = true) {
  if (events.empty()) return std::string("stream is empty");
  if (events.front().kind != EventKind::kContextLoaded) return std::string("first event is not CONTEXT_LOADED");
  std::size_t terminals = 0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (events[i].seq != i) return "seq " + std::to_string(events[i].seq) + " at position " + std::to_string(i);
    if (IsTerminal(events[i].kind)) {
      ++terminals;
      if (i + 1 != events.size()) return std::string("terminal event is not last");
    }
  }
  if (terminals > 1) return std::string("more than one terminal event");
  if (require_terminal && terminals == 0) return std::string("missing terminal event");
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Liveness
// ---------------------------------------------------------------------------

enum class Liveness { kAlive, kTimedOut };

/// The boundary is inclusive: elapsed == timeout is still alive.
inline Liveness CheckLiveness(double last_heartbeat_ts, double now, double timeout) {
  if (!(timeout > 0.0)) throw Error(Errc::kInvalidArgument, "timeout must be > 0");
  return now - last_heartbeat_ts > timeout ? Liveness::kTimedOut : Liveness::kAlive;
}

// ---------------------------------------------------------------------------
// Context injection
// ---------------------------------------------------------------------------

/// Delivers encoded contexts to step workers. The worker side only sees the
/// environment map and resolves kContextEnvVar through Load().
class ContextInjector {
 public:
  virtual ~ContextInjector() = default;

  /// Stores the payload and returns the env entries a worker needs.
  virtual std::map<std::string, std::string> Inject(const std::string& name, const std::string& payload) = 0;
  virtual std::string Load(const std::string& location) const = 0;

  StepContext Resolve(const std::map<std::string, std::string>& env) const {
    auto it = env.find(kContextEnvVar);
    if (it == env.end()) throw Error(Errc::kMalformedPayload, std::string(kContextEnvVar) + " is not set");
    return DecodeContext(Load(it->second));
  }
};

class FileContextInjector : public ContextInjector {
 public:
  explicit FileContextInjector(std::filesystem::path dir) : dir_(std::move(dir)) {}

  std::map<std::string, std::string> Inject(const std::string& name, const std::string& payload) override {
    std::filesystem::create_directories(dir_);
    const auto path = dir_ / (name + ".json");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << payload;
    if (!out) throw Error(Errc::kInvalidArgument, "cannot write context file " + path.string());
    return {{kContextEnvVar, path.string()}};
  }

  std::string Load(const std::string& location) const override {
    std::ifstream in(location, std::ios::binary);
    if (!in) throw Error(Errc::kFileNotFound, location);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
  }

 private:
  std::filesystem::path dir_;
};

class MemoryContextInjector : public ContextInjector {
 public:
  std::map<std::string, std::string> Inject(const std::string& name, const std::string& payload) override {
    const std::string location = "mem://" + name;
    payloads_[location] = payload;
    return {{kContextEnvVar, location}};
  }

  std::string Load(const std::string& location) const override {
    auto it = payloads_.find(location);
    if (it == payloads_.end()) throw Error(Errc::kFileNotFound, location);
    return it->second;
  }

 private:
  std::map<std::string, std::string> payloads_;
};

}  // namespace costflow
