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
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "costflow/cost.hpp"
#include "costflow/engine.hpp"
#include "costflow/pipeline_file.hpp"
#include "costflow/service.hpp"

namespace costflow::cli {

// Exit codes are a stable contract.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRunFailed = 1;
inline constexpr int kExitUsage = 2;

inline constexpr const char* kRunsDirEnvVar = "COSTFLOW_RUNS_DIR";

inline std::filesystem::path ResolveRunsDir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kRunsDirEnvVar); env && *env) return env;
  return "runs";
}

inline std::string Percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline void WriteFile(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::kFileNotFound, "cannot write " + path.string());
  out << text;
}

/// Loads a RunRecord from a record file or a run directory.
inline RunRecord LoadRunRecord(const std::filesystem::path& path) {
  const auto file = std::filesystem::is_directory(path) ? path / "record.json" : path;
  try {
    return RunRecordFromJson(nlohmann::json::parse(ReadTextFile(file)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::kParseError, file.string() + ": " + e.what());
  }
}

struct RunArgs {
  std::string path;
  std::string partitions;
  std::string time_range;
  std::optional<std::uint64_t> seed;
  std::string report;
  std::optional<double> cancel_at_s;
};

inline int DoValidate(const std::string& path, std::ostream& out, std::ostream& err) {
  const PipelineLoad load = LoadPipelineFile(path);
  if (!load.ok()) {
    for (const auto& d : load.diagnostics) err << path << ": " << d.ToString() << "\n";
    err << load.diagnostics.size() << " problem(s)\n";
    return kExitUsage;
  }
  const auto& p = *load.pipeline;
  const std::size_t steps = p.assets.size() * p.partitions.time_partitions.size() *
                            static_cast<std::size_t>(p.partitions.domain_segments);
  out << path << ": ok (" << p.assets.size() << " assets, " << steps << " steps, " << p.backends.size()
      << " backends)\n";
  return kExitOk;
}

inline int DoRun(const RunArgs& args, const std::filesystem::path& runs_dir, std::ostream& out, std::ostream& err) {
  const PipelineLoad load = LoadPipelineFile(args.path);
  if (!load.ok()) {
    for (const auto& d : load.diagnostics) err << args.path << ": " << d.ToString() << "\n";
    return kExitUsage;
  }
  const PipelineFile& pipeline = *load.pipeline;
  const PartitionFilter filter = args.time_range.empty() ? PartitionFilter::Parse(args.partitions)
                                                         : TimeRangeFilter(pipeline.partitions, args.time_range);
  RunSetup setup = PrepareRun(pipeline, filter, args.seed);
  const auto run_dir = runs_dir / setup.run_id;
  std::filesystem::remove_all(run_dir);
  setup.options.run_dir = run_dir;

  std::optional<Millis> cancel_at;
  if (args.cancel_at_s) cancel_at = static_cast<Millis>(std::llround(*args.cancel_at_s * 1000.0));
  const RunRecord record = ExecuteRun(std::move(setup.plan), setup.registry, setup.retry, setup.seed, setup.run_id,
                                      setup.workload, setup.options, cancel_at);

  const std::vector<RunCostReport> reports = {record.cost_report};
  const std::string table = FormatRunTable(reports);
  out << "run_id: " << record.run_id << "\n"
      << "run_state: " << RunStateName(record.run_state) << "\n"
      << "record: " << (run_dir / "record.json").string() << "\n\n"
      << table;
  if (!args.report.empty()) {
    WriteFile(args.report, table);
    if (!record.cost_report.rows.empty()) {
      std::string series;
      for (const auto& line : BuildCostReport(reports, GroupBy::kAsset).series) series += line + "\n";
      WriteFile(args.report + ".series.jsonl", series);
    }
  }
  if (record.run_state != RunState::kSuccess) {
    err << "run " << record.run_id << " ended " << RunStateName(record.run_state) << "\n";
    return kExitRunFailed;
  }
  return kExitOk;
}

struct ReportArgs {
  std::vector<std::string> runs;
  std::vector<std::string> compare;
  std::string group_by = "asset";
  std::string series;
  std::string table;
};

inline int DoReport(const ReportArgs& args, std::ostream& out) {
  std::vector<std::pair<std::string, RunRecord>> loaded;  // (path, record)
  for (const auto& path : args.runs) loaded.emplace_back(path, LoadRunRecord(path));
  auto find = [&](const std::string& name) -> RunCostReport {
    for (const auto& [path, rec] : loaded) {
      if (rec.run_id == name || path == name || std::filesystem::path(path).stem() == name) return rec.cost_report;
    }
    return LoadRunRecord(name).cost_report;
  };

  std::vector<RunCostReport> reports;
  for (const auto& [path, rec] : loaded) reports.push_back(rec.cost_report);
  std::string text;
  if (!reports.empty()) {
    const CostReport grouped = BuildCostReport(reports, ParseGroupBy(args.group_by));
    text += FormatRunTable(reports) + "\n" + grouped.table;
    if (!args.series.empty()) {
      std::string series;
      for (const auto& line : grouped.series) series += line + "\n";
      WriteFile(args.series, series);
    }
  }
  if (!args.compare.empty()) {
    if (args.compare.size() != 2) throw Error(Errc::kInvalidArgument, "--compare takes exactly two runs");
    const RunCostReport a = find(args.compare[0]);
    const RunCostReport b = find(args.compare[1]);
    const ComparisonMetrics m = CompareRuns(a, b);
    if (!text.empty()) text += "\n";
    text += "compare: " + a.run_id + " vs " + b.run_id + "\n";
    text += "cost_reduction_pct: " + Percent(m.cost_reduction_pct) + "\n";
    text += "duration_delta_pct: " + Percent(m.duration_delta_pct) + "\n";
  }
  if (text.empty()) throw Error(Errc::kEmptyInput, "nothing to report; pass --runs or --compare");
  out << text;
  if (!args.table.empty()) WriteFile(args.table, text);
  return kExitOk;
}

namespace detail {
inline std::atomic<bool> g_stop{false};
inline void OnSignal(int) { g_stop = true; }
}  // namespace detail

struct ServeArgs {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::vector<std::string> fixtures;
  int pace_ms = 50;
  double tick_s = 60.0;
};

inline int DoServe(const ServeArgs& args, const std::filesystem::path& runs_dir, std::ostream& out) {
  Service::Options opts;
  opts.runs_dir = runs_dir;
  for (const auto& f : args.fixtures) opts.fixtures.emplace_back(f);
  opts.pace_wall_ms = args.pace_ms;
  opts.tick_virtual_ms = static_cast<Millis>(std::llround(args.tick_s * 1000.0));
  Service service(opts);
  const int port = service.Start(args.host, args.port);
  out << "serving on http://" << args.host << ":" << port << " (runs dir " << runs_dir.string() << ")" << std::endl;
  std::signal(SIGINT, detail::OnSignal);
  std::signal(SIGTERM, detail::OnSignal);
  while (!detail::g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  service.Stop();
  return kExitOk;
}

/// Entry point shared by the binary and the tests. args excludes argv[0].
inline int Main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"costflow: cost-aware multi-backend pipeline runner", "costflow"};
  app.require_subcommand(1);
  std::string runs_dir_flag;
  app.add_option("--runs-dir", runs_dir_flag, std::string("Runs directory (default $") + kRunsDirEnvVar + " or ./runs)");

  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "Check a pipeline file and list every problem");
  validate->add_option("path", validate_path, "Pipeline file")->required();

  RunArgs run_args;
  std::uint64_t run_seed = 0;
  auto* run = app.add_subcommand("run", "Execute a pipeline");
  run->add_option("path", run_args.path, "Pipeline file")->required();
  run->add_option("--partitions", run_args.partitions, "Filter, e.g. 'CC-MAIN-2023-*/1,CC-MAIN-2024-10'");
  auto* run_seed_opt = run->add_option("--seed", run_seed, "Override the file's seed");
  run->add_option("--report", run_args.report, "Write the cost table here (plus <file>.series.jsonl)");
  run->add_option("--cancel-at", run_args.cancel_at_s, "Cancel at this virtual time (seconds)");

  RunArgs backfill_args;
  std::uint64_t backfill_seed = 0;
  auto* backfill = app.add_subcommand("backfill", "Execute every partition in a time range");
  backfill->add_option("path", backfill_args.path, "Pipeline file")->required();
  backfill->add_option("--time-range", backfill_args.time_range, "a..b, inclusive, in declared order")->required();
  auto* backfill_seed_opt = backfill->add_option("--seed", backfill_seed, "Override the file's seed");
  backfill->add_option("--report", backfill_args.report, "Write the cost table here");

  ReportArgs report_args;
  auto* report = app.add_subcommand("report", "Cost tables and comparisons from run records");
  report->add_option("--runs", report_args.runs, "Run record files or run directories");
  report->add_option("--compare", report_args.compare, "Two runs (id, file, or file stem): savings of A over B")
      ->expected(2);
  report->add_option("--group-by", report_args.group_by, "asset | platform")
      ->check(CLI::IsMember({"asset", "platform"}));
  report->add_option("--series", report_args.series, "Write the grouped series (JSON lines) here");
  report->add_option("--out", report_args.table, "Also write the printed report here");

  ServeArgs serve_args;
  auto* serve = app.add_subcommand("serve", "HTTP/JSON API over the runs directory");
  serve->add_option("--host", serve_args.host, "Bind address");
  serve->add_option("--port", serve_args.port, "Port (0 picks a free one)");
  serve->add_option("--fixture", serve_args.fixtures, "Run record to serve read-only (repeatable)");
  serve->add_option("--pace-ms", serve_args.pace_ms, "Wall milliseconds between clock ticks");
  serve->add_option("--tick-s", serve_args.tick_s, "Virtual seconds per tick");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const auto runs_dir = ResolveRunsDir(runs_dir_flag);
  try {
    if (*validate) return DoValidate(validate_path, out, err);
    if (*run) {
      if (*run_seed_opt) run_args.seed = run_seed;
      return DoRun(run_args, runs_dir, out, err);
    }
    if (*backfill) {
      if (*backfill_seed_opt) backfill_args.seed = backfill_seed;
      return DoRun(backfill_args, runs_dir, out, err);
    }
    if (*report) return DoReport(report_args, out);
    if (*serve) return DoServe(serve_args, runs_dir, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace costflow::cli
