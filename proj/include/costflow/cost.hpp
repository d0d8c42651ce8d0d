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
#include <cstdio>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "costflow/error.hpp"
#include "costflow/money.hpp"

namespace costflow {

/// Per-node-hour prices. "instance" is raw compute, "surcharge" the platform
/// margin on top, "storage" attached block storage.
struct RateCard {
  Rate instance;
  Rate surcharge;
  Rate storage;

  bool operator==(const RateCard&) const = default;
};

struct CostBreakdown {
  Money compute;
  Money storage;
  Money surcharge;
  Money total;

  bool operator==(const CostBreakdown&) const = default;
};

/// Total is the exact sum of the three components.
inline CostBreakdown ComposeBreakdown(Money surcharge, Money storage, Money compute) {
  if (surcharge.cents() < 0 || storage.cents() < 0 || compute.cents() < 0) {
    throw Error(Errc::kNegativeComponent, "cost components must be >= 0");
  }
  return {compute, storage, surcharge, compute + storage + surcharge};
}

/// Linear node-hour pricing; each component is rounded half-up to cents
/// before summation.
inline CostBreakdown ComputeStepCost(Millis duration, int node_count, const RateCard& card) {
  if (duration < 0) throw Error(Errc::kNegativeDuration, std::to_string(duration) + " ms");
  if (node_count < 1) throw Error(Errc::kInvalidArgument, "node_count must be >= 1");
  return ComposeBreakdown(ChargeFor(duration, node_count, card.surcharge), ChargeFor(duration, node_count, card.storage),
                          ChargeFor(duration, node_count, card.instance));
}

inline CostBreakdown ComputeStepCost(double duration_hours, int node_count, const RateCard& card) {
  if (!(duration_hours >= 0.0)) throw Error(Errc::kNegativeDuration, std::to_string(duration_hours) + " h");
  return ComputeStepCost(HoursToMillis(duration_hours), node_count, card);
}

struct RunAggregate {
  Money total;
  Money surcharge;

  bool operator==(const RunAggregate&) const = default;
};

inline RunAggregate AggregateRun(std::span<const CostBreakdown> rows) {
  if (rows.empty()) throw Error(Errc::kEmptyRun, "no cost rows");
  RunAggregate agg;
  for (const auto& row : rows) {
    agg.total += row.total;
    agg.surcharge += row.surcharge;
  }
  return agg;
}

struct CostRow {
  std::string step;  // step key, or a bare asset name in replayed reports
  int attempt = 1;
  std::string backend_id;
  double duration_hours = 0.0;
  CostBreakdown cost;

  bool operator==(const CostRow&) const = default;
};

struct RunCostReport {
  std::string run_id;
  std::vector<CostRow> rows;
  Money aggregated_total;
  Money aggregated_surcharge;

  bool operator==(const RunCostReport&) const = default;

  double total_duration_hours() const {
    double sum = 0.0;
    for (const auto& row : rows) sum += row.duration_hours;
    return sum;
  }
};

/// Builds a report whose aggregates are the column sums of rows. A run with no
/// rows (canceled before anything launched) aggregates to zero.
inline RunCostReport MakeRunCostReport(std::string run_id, std::vector<CostRow> rows) {
  RunCostReport report{std::move(run_id), std::move(rows), {}, {}};
  for (const auto& row : report.rows) {
    report.aggregated_total += row.cost.total;
    report.aggregated_surcharge += row.cost.surcharge;
  }
  return report;
}

struct ComparisonMetrics {
  double cost_reduction_pct = 0.0;
  double duration_delta_pct = 0.0;
};

/// Percent savings of run a relative to run b, for cost and summed duration.
inline ComparisonMetrics CompareRuns(const RunCostReport& a, const RunCostReport& b) {
  if (a.rows.empty() || b.rows.empty()) throw Error(Errc::kEmptyRun, "comparison needs nonempty reports");
  const double total_a = a.aggregated_total.usd();
  const double total_b = b.aggregated_total.usd();
  const double dur_a = a.total_duration_hours();
  const double dur_b = b.total_duration_hours();
  if (total_b == 0.0) throw Error(Errc::kZeroDenominator, "run '" + b.run_id + "' has zero total cost");
  if (dur_b == 0.0) throw Error(Errc::kZeroDenominator, "run '" + b.run_id + "' has zero total duration");
  return {(total_b - total_a) / total_b * 100.0, (dur_b - dur_a) / dur_b * 100.0};
}

// ---------------------------------------------------------------------------
// Grouped reports
// ---------------------------------------------------------------------------

enum class GroupBy { kAsset, kPlatform };

inline std::string_view GroupByName(GroupBy g) { return g == GroupBy::kAsset ? "asset" : "platform"; }

inline GroupBy ParseGroupBy(std::string_view name) {
  if (name == "asset") return GroupBy::kAsset;
  if (name == "platform") return GroupBy::kPlatform;
  throw Error(Errc::kInvalidArgument, "group_by must be 'asset' or 'platform', got '" + std::string(name) + "'");
}

inline std::string AssetOfStep(const std::string& step) { return step.substr(0, step.find('/')); }

struct CostGroup {
  std::string key;
  std::size_t rows = 0;
  double duration_hours = 0.0;
  std::vector<double> durations;
  CostBreakdown cost;
};

struct CostReport {
  GroupBy group_by = GroupBy::kAsset;
  std::vector<CostGroup> groups;  // ascending key
  std::string table;
  std::vector<std::string> series;  // one JSON object per line
};

namespace detail {

inline std::string Pad(const std::string& s, std::size_t width, bool right_align) {
  if (s.size() >= width) return s;
  const std::string fill(width - s.size(), ' ');
  return right_align ? fill + s : s + fill;
}

inline std::string FormatHours(double hours) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", hours);
  return buf;
}

inline std::string Dollars(Money m) { return "$" + m.ToString(); }

inline std::string RenderTable(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows,
                               std::size_t left_aligned_columns) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  auto emit = [&](const std::vector<std::string>& cells) {
    std::string line;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c) line += "  ";
      line += Pad(cells[c], width[c], c >= left_aligned_columns);
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out << line << '\n';
  };
  emit(header);
  std::size_t total = 0;
  for (auto w : width) total += w;
  out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
  for (const auto& row : rows) emit(row);
  return out.str();
}

}  // namespace detail

/// Fixed-width table in the column order Run, Step, Platform, Duration,
/// Total Cost, Platform Surcharge, Storage Cost, Compute Cost, Aggregated
/// Total Cost, Aggregated Total Surcharge. Aggregates appear on each run's
/// first row only.
inline std::string FormatRunTable(std::span<const RunCostReport> runs) {
  const std::vector<std::string> header = {"Run",          "Step",
                                           "Platform",     "Duration",
                                           "Total Cost",   "Platform Surcharge",
                                           "Storage Cost", "Compute Cost",
                                           "Aggregated Total Cost", "Aggregated Total Surcharge"};
  std::vector<std::vector<std::string>> rows;
  for (const auto& run : runs) {
    bool first = true;
    for (const auto& row : run.rows) {
      std::string step = row.step;
      if (row.attempt > 1) step += "#" + std::to_string(row.attempt);
      rows.push_back({run.run_id, step, row.backend_id, detail::FormatHours(row.duration_hours),
                      detail::Dollars(row.cost.total), detail::Dollars(row.cost.surcharge),
                      detail::Dollars(row.cost.storage), detail::Dollars(row.cost.compute),
                      first ? detail::Dollars(run.aggregated_total) : "",
                      first ? detail::Dollars(run.aggregated_surcharge) : ""});
      first = false;
    }
  }
  return detail::RenderTable(header, rows, 3);
}

/// Sums every row of every run by asset or by backend. Emits the fixed-width
/// table and a JSON-lines series for charting.
inline CostReport BuildCostReport(std::span<const RunCostReport> runs, GroupBy group_by) {
  std::map<std::string, CostGroup> groups;
  for (const auto& run : runs) {
    for (const auto& row : run.rows) {
      const std::string key = group_by == GroupBy::kAsset ? AssetOfStep(row.step) : row.backend_id;
      auto& g = groups[key];
      g.key = key;
      ++g.rows;
      g.duration_hours += row.duration_hours;
      g.durations.push_back(row.duration_hours);
      g.cost.compute += row.cost.compute;
      g.cost.storage += row.cost.storage;
      g.cost.surcharge += row.cost.surcharge;
      g.cost.total += row.cost.total;
    }
  }
  if (groups.empty()) throw Error(Errc::kEmptyInput, "no cost rows to report");

  CostReport report;
  report.group_by = group_by;
  std::vector<std::vector<std::string>> rows;
  for (auto& [key, g] : groups) {
    rows.push_back({key, std::to_string(g.rows), detail::FormatHours(g.duration_hours), detail::Dollars(g.cost.total),
                    detail::Dollars(g.cost.surcharge), detail::Dollars(g.cost.storage),
                    detail::Dollars(g.cost.compute)});
    nlohmann::json line = {
        {"group", key},
        {"group_by", GroupByName(group_by)},
        {"rows", g.rows},
        {"duration_hours", g.duration_hours},
        {"durations", g.durations},
        {"compute_usd", g.cost.compute.ToString()},
        {"storage_usd", g.cost.storage.ToString()},
        {"surcharge_usd", g.cost.surcharge.ToString()},
        {"total_usd", g.cost.total.ToString()},
    };
    report.series.push_back(line.dump());
    report.groups.push_back(std::move(g));
  }
  const std::string first_col = group_by == GroupBy::kAsset ? "Asset" : "Platform";
  report.table = detail::RenderTable(
      {first_col, "Rows", "Duration", "Total Cost", "Platform Surcharge", "Storage Cost", "Compute Cost"}, rows, 1);
  return report;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json ToJson(const CostBreakdown& c) {
  return {{"compute_usd", c.compute.ToString()},
          {"storage_usd", c.storage.ToString()},
          {"surcharge_usd", c.surcharge.ToString()},
          {"total_usd", c.total.ToString()}};
}

namespace detail {

inline Money MoneyField(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw Error(Errc::kParseError, std::string("missing '") + key + "'");
  const auto& v = j.at(key);
  if (v.is_string()) return Money::Parse(v.get<std::string>());
  if (v.is_number()) {
    // Numbers are accepted for hand-written fixtures; they must be whole cents.
    const double cents = v.get<double>() * 100.0;
    const double rounded = std::round(cents);
    if (std::abs(cents - rounded) > 1e-6) throw Error(Errc::kParseError, std::string("'") + key + "' is not whole cents");
    return Money::FromCents(static_cast<std::int64_t>(rounded));
  }
  throw Error(Errc::kParseError, std::string("'") + key + "' must be a money string");
}

}  // namespace detail

/// Reads the three components and recomputes the total. A stated total that
/// disagrees with the components is rejected.
inline CostBreakdown CostBreakdownFromJson(const nlohmann::json& j) {
  auto c = ComposeBreakdown(detail::MoneyField(j, "surcharge_usd"), detail::MoneyField(j, "storage_usd"),
                            detail::MoneyField(j, "compute_usd"));
  if (j.contains("total_usd") && detail::MoneyField(j, "total_usd") != c.total) {
    throw Error(Errc::kParseError, "total_usd " + detail::MoneyField(j, "total_usd").ToString() +
                                       " != component sum " + c.total.ToString());
  }
  return c;
}

inline nlohmann::json ToJson(const RunCostReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"step", row.step},
                    {"attempt", row.attempt},
                    {"backend_id", row.backend_id},
                    {"duration_hours", row.duration_hours},
                    {"cost", ToJson(row.cost)}});
  }
  return {{"run_id", r.run_id},
          {"rows", rows},
          {"aggregated_total_usd", r.aggregated_total.ToString()},
          {"aggregated_surcharge_usd", r.aggregated_surcharge.ToString()}};
}

/// Aggregates are recomputed from rows; stated aggregates must agree.
inline RunCostReport RunCostReportFromJson(const nlohmann::json& j) {
  try {
    std::vector<CostRow> rows;
    for (const auto& row : j.at("rows")) {
      rows.push_back({row.at("step").get<std::string>(), row.value("attempt", 1), row.at("backend_id").get<std::string>(),
                      row.at("duration_hours").get<double>(), CostBreakdownFromJson(row.at("cost"))});
    }
    auto report = MakeRunCostReport(j.at("run_id").get<std::string>(), std::move(rows));
    if (j.contains("aggregated_total_usd") &&
        detail::MoneyField(j, "aggregated_total_usd") != report.aggregated_total) {
      throw Error(Errc::kParseError, "aggregated_total_usd disagrees with rows for run '" + report.run_id + "'");
    }
    if (j.contains("aggregated_surcharge_usd") &&
        detail::MoneyField(j, "aggregated_surcharge_usd") != report.aggregated_surcharge) {
      throw Error(Errc::kParseError, "aggregated_surcharge_usd disagrees with rows for run '" + report.run_id + "'");
    }
    return report;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::kParseError, e.what());
  }
}

}  // namespace costflow
