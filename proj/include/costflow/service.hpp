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

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "costflow/cost.hpp"
#include "costflow/engine.hpp"
#include "costflow/error.hpp"
#include "costflow/pipeline_file.hpp"

namespace costflow {

inline int HttpStatusFor(Errc code) {
  switch (code) {
    case Errc::kUnknownRun:
    case Errc::kFileNotFound: return 404;
    case Errc::kAlreadyTerminal: return 409;
    default: return 400;
  }
}

/// Run coordinator behind the HTTP API. Every mutation takes the one mutex,
/// so engine state changes are serialized; readers get snapshots.
class Service {
 public:
  struct Options {
    std::filesystem::path runs_dir = "runs";
    // Terminal run records to serve alongside live runs.
    std::vector<std::filesystem::path> fixtures;
    // Pacing: every pace_wall_ms of wall time, live runs advance tick_virtual_ms.
    int pace_wall_ms = 50;
    Millis tick_virtual_ms = 60'000;
    std::vector<BackendDescriptor> backends = DefaultBackends();
  };

  explicit Service(Options options) : options_(std::move(options)) {
    for (const auto& path : options_.fixtures) LoadRecordFile(path, {});
    ReplayRunsDir();
  }

  ~Service() { Stop(); }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // -- coordinator API ------------------------------------------------------

  /// Body: {"pipeline": {...} | "pipeline_path": "...", "partitions": "...",
  ///        "time_range": "a..b", "seed": n, "cancel_at_s": t}
  std::string Launch(const nlohmann::json& body) {
    if (!body.is_object()) throw Error(Errc::kInvalidArgument, "request body must be a JSON object");
    PipelineLoad load;
    if (body.contains("pipeline")) {
      load = ParsePipeline(body.at("pipeline").dump());
    } else if (body.contains("pipeline_path") && body.at("pipeline_path").is_string()) {
      load = LoadPipelineFile(body.at("pipeline_path").get<std::string>());
    } else {
      throw Error(Errc::kInvalidArgument, "need 'pipeline' or 'pipeline_path'");
    }
    const PipelineFile pipeline = RequirePipeline(load);

    PartitionFilter filter;
    if (body.contains("time_range")) {
      filter = TimeRangeFilter(pipeline.partitions, StringField(body, "time_range"));
    } else if (body.contains("partitions")) {
      filter = PartitionFilter::Parse(StringField(body, "partitions"));
    }
    std::optional<std::uint64_t> seed;
    if (body.contains("seed")) {
      if (!body.at("seed").is_number_unsigned()) throw Error(Errc::kInvalidArgument, "seed must be a nonnegative integer");
      seed = body.at("seed").get<std::uint64_t>();
    }
    std::optional<Millis> cancel_at;
    if (body.contains("cancel_at_s")) {
      if (!body.at("cancel_at_s").is_number()) throw Error(Errc::kInvalidArgument, "cancel_at_s must be a number");
      cancel_at = static_cast<Millis>(std::llround(body.at("cancel_at_s").get<double>() * 1000.0));
    }

    RunSetup setup = PrepareRun(pipeline, filter, seed);
    std::lock_guard lock(mu_);
    // Identical launches share a content id; later ones get a salted id.
    std::string id = setup.run_id;
    for (int salt = 1; runs_.count(id) != 0; ++salt) {
      id = MakeRunId(setup.seed, setup.run_id + "#" + std::to_string(salt));
    }
    setup.options.run_dir = options_.runs_dir / id;
    std::filesystem::remove_all(*setup.options.run_dir);
    Entry entry;
    entry.order = next_order_++;
    entry.cancel_at = cancel_at;
    entry.exec = std::make_unique<RunExecution>(std::move(setup.plan), std::move(setup.registry), std::move(setup.retry),
                                                setup.seed, id, std::move(setup.workload), std::move(setup.options));
    runs_.emplace(id, std::move(entry));
    return id;
  }

  void Cancel(const std::string& id) {
    std::lock_guard lock(mu_);
    Entry& e = Find(id);
    if (!e.exec || e.exec->Done()) throw Error(Errc::kAlreadyTerminal, id);
    e.exec->RequestCancel();
  }

  /// Advances every live run by dt of virtual time.
  void Tick(Millis dt) {
    std::lock_guard lock(mu_);
    for (auto& [id, e] : runs_) {
      if (!e.exec || e.exec->Done()) continue;
      const Millis target = e.exec->now() + dt;
      if (e.cancel_at && *e.cancel_at <= target) {
        e.exec->RunUntil(*e.cancel_at);
        if (!e.exec->Done()) e.exec->RequestCancel();
        e.cancel_at.reset();
      }
      if (!e.exec->Done()) e.exec->RunUntil(target);
    }
  }

  /// Runs everything live to completion (tests).
  void Drain() {
    std::lock_guard lock(mu_);
    for (auto& [id, e] : runs_) {
      if (!e.exec || e.exec->Done()) continue;
      if (e.cancel_at) {
        e.exec->RunUntil(*e.cancel_at);
        if (!e.exec->Done()) e.exec->RequestCancel();
      }
      e.exec->RunToCompletion();
    }
  }

  nlohmann::json ListRuns() const {
    std::lock_guard lock(mu_);
    std::vector<std::pair<std::uint64_t, const std::string*>> order;
    for (const auto& [id, e] : runs_) order.emplace_back(e.order, &id);
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    nlohmann::json out = nlohmann::json::array();
    for (const auto& [_, id] : order) out.push_back(Summary(*id, runs_.at(*id)));
    return out;
  }

  nlohmann::json GetRun(const std::string& id) const {
    std::lock_guard lock(mu_);
    const Entry& e = Find(id);
    nlohmann::json j = ToJson(Record(e));
    j["now_s"] = e.exec ? MillisToSeconds(e.exec->now()) : MillisToSeconds(Record(e).ended_at);
    return j;
  }

  /// Run log entries with seq > after_seq, in order.
  nlohmann::json Events(const std::string& id, std::optional<std::uint64_t> after_seq) const {
    std::lock_guard lock(mu_);
    const Entry& e = Find(id);
    const auto& log = e.exec ? e.exec->log() : e.replayed_log;
    nlohmann::json events = nlohmann::json::array();
    for (const auto& entry : log) {
      if (after_seq && entry.seq <= *after_seq) continue;
      events.push_back(entry.ToJson());
    }
    const auto& rec = Record(e);
    return {{"run_id", id},
            {"events", events},
            {"last_seq", log.empty() ? nlohmann::json(nullptr) : nlohmann::json(log.back().seq)},
            {"terminal", rec.terminal()}};
  }

  nlohmann::json CostReportJson(GroupBy group_by) const {
    std::lock_guard lock(mu_);
    std::vector<RunCostReport> reports;
    std::vector<std::pair<std::uint64_t, const Entry*>> order;
    for (const auto& [id, e] : runs_) order.emplace_back(e.order, &e);
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [_, e] : order) {
      const RunRecord& r = Record(*e);
      if (r.terminal() && !r.cost_report.rows.empty()) reports.push_back(r.cost_report);
    }
    const CostReport report = BuildCostReport(reports, group_by);
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& line : report.series) groups.push_back(nlohmann::json::parse(line));
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : reports) runs.push_back(ToJson(r));
    return {{"group_by", GroupByName(group_by)},
            {"groups", groups},
            {"table", report.table},
            {"run_table", FormatRunTable(reports)},
            {"runs", runs}};
  }

  nlohmann::json Backends() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& d : options_.backends) out.push_back(ToJson(d));
    return out;
  }

  // -- HTTP -----------------------------------------------------------------

  /// Binds and serves on a background thread. Port 0 picks a free port.
  /// Returns the bound port.
  int Start(const std::string& host, int port, bool pace = true) {
    server_ = std::make_unique<httplib::Server>();
    // httplib defaults to SO_REUSEPORT, which lets a second server share a
    // busy port silently. Plain SO_REUSEADDR makes that bind fail instead.
    server_->set_socket_options([](auto sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
    });
    Routes(*server_);
    int bound = port;
    if (port == 0) {
      bound = server_->bind_to_any_port(host);
      if (bound < 0) throw Error(Errc::kPortInUse, host);
    } else if (!server_->bind_to_port(host, port)) {
      throw Error(Errc::kPortInUse, host + ":" + std::to_string(port));
    }
    listener_ = std::thread([this] { server_->listen_after_bind(); });
    // stop() is a no-op until the listener is up; without this a quick Stop()
    // would leave the join waiting forever.
    server_->wait_until_ready();
    if (pace) {
      stop_ = false;
      pacer_ = std::thread([this] { Pace(); });
    }
    return bound;
  }

  void Stop() {
    {
      std::lock_guard lock(pace_mu_);
      stop_ = true;
    }
    pace_cv_.notify_all();
    if (pacer_.joinable()) pacer_.join();
    if (server_) server_->stop();
    if (listener_.joinable()) listener_.join();
  }

 private:
  struct Entry {
    std::uint64_t order = 0;
    std::unique_ptr<RunExecution> exec;     // live or finished this session
    std::optional<RunRecord> stored;        // fixture or replayed from disk
    std::vector<RunLogEntry> replayed_log;  // events.jsonl of a stored run
    std::optional<Millis> cancel_at;
  };

  static std::string StringField(const nlohmann::json& body, const char* key) {
    if (!body.at(key).is_string()) throw Error(Errc::kInvalidArgument, std::string(key) + " must be a string");
    return body.at(key).get<std::string>();
  }

  static const RunRecord& Record(const Entry& e) { return e.exec ? e.exec->record() : *e.stored; }

  Entry& Find(const std::string& id) {
    auto it = runs_.find(id);
    if (it == runs_.end()) throw Error(Errc::kUnknownRun, id);
    return it->second;
  }
  const Entry& Find(const std::string& id) const {
    auto it = runs_.find(id);
    if (it == runs_.end()) throw Error(Errc::kUnknownRun, id);
    return it->second;
  }

  static nlohmann::json Summary(const std::string& id, const Entry& e) {
    const RunRecord& r = Record(e);
    std::set<std::string> backends;
    for (const auto& [step, backend] : r.plan) backends.insert(backend);
    for (const auto& row : r.cost_report.rows) backends.insert(row.backend_id);
    Money total;
    double hours = 0.0;
    for (const auto& a : r.attempts) {
      if (a.cost) total += a.cost->total;
      hours += a.duration_hours;
    }
    if (r.attempts.empty()) {
      total = r.cost_report.aggregated_total;
      hours = r.cost_report.total_duration_hours();
    }
    return {{"run_id", id},
            {"run_state", RunStateName(r.run_state)},
            {"total_usd", total.ToString()},
            {"total_duration_hours", hours},
            {"backends", backends},
            {"steps", r.plan.size()},
            {"attempts", r.attempts.size()}};
  }

  void LoadRecordFile(const std::filesystem::path& path, const std::optional<std::filesystem::path>& events) {
    Entry e;
    e.order = next_order_++;
    e.stored = RunRecordFromJson(nlohmann::json::parse(ReadTextFile(path)));
    if (events && std::filesystem::exists(*events)) {
      std::ifstream in(*events);
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        RunLogEntry entry;
        entry.seq = j.at("seq").get<std::uint64_t>();
        entry.at = static_cast<Millis>(std::llround(j.at("ts").get<double>() * 1000.0));
        entry.kind = j.at("kind").get<std::string>();
        entry.step_key = j.at("step_key").get<std::string>();
        entry.attempt = j.at("attempt").get<int>();
        entry.data = j.at("data");
        e.replayed_log.push_back(std::move(entry));
      }
    }
    const std::string id = e.stored->run_id;
    runs_[id] = std::move(e);
  }

  // Terminal runs from earlier sessions come back read-only.
  void ReplayRunsDir() {
    std::error_code ec;
    if (!std::filesystem::is_directory(options_.runs_dir, ec)) return;
    std::vector<std::filesystem::path> dirs;
    for (const auto& d : std::filesystem::directory_iterator(options_.runs_dir)) {
      if (d.is_directory() && std::filesystem::exists(d.path() / "record.json")) dirs.push_back(d.path());
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      try {
        LoadRecordFile(d / "record.json", d / "events.jsonl");
      } catch (const std::exception&) {
        // A half-written directory is skipped rather than blocking startup.
      }
    }
  }

  void Pace() {
    std::unique_lock lock(pace_mu_);
    while (!stop_) {
      pace_cv_.wait_for(lock, std::chrono::milliseconds(options_.pace_wall_ms), [this] { return stop_; });
      if (stop_) break;
      lock.unlock();
      Tick(options_.tick_virtual_ms);
      lock.lock();
    }
  }

  template <typename F>
  static void Guard(httplib::Response& res, F&& f) {
    try {
      f();
    } catch (const Error& e) {
      res.status = HttpStatusFor(e.code());
      res.set_content(nlohmann::json{{"error", ErrcName(e.code())}, {"message", e.detail()}}.dump(),
                      "application/json");
    } catch (const nlohmann::json::exception& e) {
      res.status = 400;
      res.set_content(nlohmann::json{{"error", "ParseError"}, {"message", e.what()}}.dump(), "application/json");
    }
  }

  static void Json(httplib::Response& res, const nlohmann::json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  void Routes(httplib::Server& s) {
    s.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    s.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });
    s.Get("/runs", [this](const httplib::Request&, httplib::Response& res) {
      Guard(res, [&] { Json(res, ListRuns()); });
    });
    s.Post("/runs", [this](const httplib::Request& req, httplib::Response& res) {
      Guard(res, [&] {
        const std::string id = Launch(nlohmann::json::parse(req.body));
        Json(res, {{"run_id", id}}, 201);
      });
    });
    s.Get(R"(/runs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      Guard(res, [&] { Json(res, GetRun(req.matches[1])); });
    });
    s.Post(R"(/runs/([^/]+)/cancel)", [this](const httplib::Request& req, httplib::Response& res) {
      Guard(res, [&] {
        Cancel(req.matches[1]);
        Json(res, GetRun(req.matches[1]));
      });
    });
    s.Get(R"(/runs/([^/]+)/events)", [this](const httplib::Request& req, httplib::Response& res) {
      Guard(res, [&] {
        std::optional<std::uint64_t> after;
        if (req.has_param("after_seq")) {
          const std::string v = req.get_param_value("after_seq");
          if (v.empty() || !std::all_of(v.begin(), v.end(), [](char c) { return c >= '0' && c <= '9'; })) {
            throw Error(Errc::kInvalidArgument, "after_seq must be a nonnegative integer");
          }
          after = std::stoull(v);
        }
        Json(res, Events(req.matches[1], after));
      });
    });
    s.Get("/reports/cost", [this](const httplib::Request& req, httplib::Response& res) {
      Guard(res, [&] {
        const std::string g = req.has_param("group_by") ? req.get_param_value("group_by") : "asset";
        Json(res, CostReportJson(ParseGroupBy(g)));
      });
    });
    s.Get("/backends", [this](const httplib::Request&, httplib::Response& res) {
      Guard(res, [&] { Json(res, Backends()); });
    });
  }

  Options options_;
  mutable std::mutex mu_;
  std::map<std::string, Entry> runs_;
  std::uint64_t next_order_ = 0;

  std::unique_ptr<httplib::Server> server_;
  std::thread listener_;
  std::thread pacer_;
  std::mutex pace_mu_;
  std::condition_variable pace_cv_;
  bool stop_ = true;
};

}  // namespace costflow
