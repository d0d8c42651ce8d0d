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
#include <compare>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "costflow/error.hpp"

namespace costflow {

using TagMap = std::map<std::string, std::string>;

struct PartitionSpec {
  std::vector<std::string> time_partitions;
  int domain_segments = 1;

  bool operator==(const PartitionSpec&) const = default;
};

struct PartitionKey {
  std::string time_id;
  int domain_segment = 0;

  auto operator<=>(const PartitionKey&) const = default;
};

struct ResourceHints {
  double est_base_duration_hours = 0.0;
  int node_count = 1;
  double memory_gb_per_node = 1.0;

  bool operator==(const ResourceHints&) const = default;
};

struct AssetDef {
  std::string name;
  std::vector<std::string> deps;
  PartitionSpec partitioning;
  std::optional<std::string> backend_hint;
  TagMap tags;
  // Absent hints mean the step cannot be estimated; the factory then routes
  // it to the policy's default backend.
  std::optional<ResourceHints> resource_hints;
};

// One executable unit: an asset materialized for one partition.
struct StepId {
  std::string asset;
  PartitionKey partition;

  auto operator<=>(const StepId&) const = default;
};

inline std::string StepKey(const std::string& asset, const PartitionKey& key) {
  return asset + "/" + key.time_id + "/" + std::to_string(key.domain_segment);
}

inline std::string StepKey(const StepId& id) { return StepKey(id.asset, id.partition); }

// Parses "asset/time_id/segment". Time ids may not contain '/'.
inline std::optional<StepId> ParseStepKey(const std::string& key) {
  const auto first = key.find('/');
  const auto last = key.rfind('/');
  if (first == std::string::npos || first == last) return std::nullopt;
  StepId id;
  id.asset = key.substr(0, first);
  id.partition.time_id = key.substr(first + 1, last - first - 1);
  const std::string seg = key.substr(last + 1);
  if (id.asset.empty() || id.partition.time_id.empty() || seg.empty()) return std::nullopt;
  if (!std::all_of(seg.begin(), seg.end(), [](char c) { return c >= '0' && c <= '9'; })) return std::nullopt;
  id.partition.domain_segment = std::stoi(seg);
  return id;
}

inline void ValidatePartitionSpec(const PartitionSpec& spec, const std::string& owner) {
  if (spec.domain_segments < 1) {
    throw Error(Errc::kInvalidSpec, owner + ": domain_segments must be >= 1");
  }
  if (spec.time_partitions.empty()) {
    throw Error(Errc::kInvalidSpec, owner + ": at least one time partition is required");
  }
  std::set<std::string> seen;
  for (const auto& id : spec.time_partitions) {
    if (id.empty()) throw Error(Errc::kInvalidSpec, owner + ": empty time partition id");
    if (id.find('/') != std::string::npos) {
      throw Error(Errc::kInvalidSpec, owner + ": time partition id '" + id + "' contains '/'");
    }
    if (!seen.insert(id).second) {
      throw Error(Errc::kInvalidSpec, owner + ": duplicate time partition id '" + id + "'");
    }
  }
}

// Full time x segment cross product, ordered by (time index, segment).
inline std::vector<PartitionKey> ExpandPartitions(const PartitionSpec& spec) {
  std::vector<PartitionKey> keys;
  keys.reserve(spec.time_partitions.size() * static_cast<std::size_t>(std::max(spec.domain_segments, 0)));
  for (const auto& time_id : spec.time_partitions) {
    for (int seg = 0; seg < spec.domain_segments; ++seg) keys.push_back({time_id, seg});
  }
  return keys;
}

inline std::vector<PartitionKey> ExpandPartitions(const AssetDef& asset) {
  return ExpandPartitions(asset.partitioning);
}

/// Validated, immutable asset DAG. Only ValidateGraph constructs one.
class AssetGraph {
 public:
  const std::map<std::string, AssetDef>& assets() const { return assets_; }

  const AssetDef& asset(const std::string& name) const {
    auto it = assets_.find(name);
    if (it == assets_.end()) throw Error(Errc::kInvalidArgument, "unknown asset '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return assets_.count(name) != 0; }

  /// (upstream, downstream) pairs, sorted.
  const std::vector<std::pair<std::string, std::string>>& edges() const { return edges_; }

  std::size_t size() const { return assets_.size(); }

 private:
  friend AssetGraph ValidateGraph(const std::vector<AssetDef>& defs);

  std::map<std::string, AssetDef> assets_;
  std::vector<std::pair<std::string, std::string>> edges_;
};

namespace detail {

// DFS in ascending name order; returns the first cycle found as a closed path.
inline std::optional<std::vector<std::string>> FindCycle(const std::map<std::string, AssetDef>& assets) {
  enum class Mark { kNone, kActive, kDone };
  std::map<std::string, Mark> marks;
  std::vector<std::string> stack;

  std::function<std::optional<std::vector<std::string>>(const std::string&)> visit =
      [&](const std::string& name) -> std::optional<std::vector<std::string>> {
    marks[name] = Mark::kActive;
    stack.push_back(name);
    std::vector<std::string> deps = assets.at(name).deps;
    std::sort(deps.begin(), deps.end());
    for (const auto& dep : deps) {
      const Mark m = marks[dep];
      if (m == Mark::kActive) {
        auto start = std::find(stack.begin(), stack.end(), dep);
        std::vector<std::string> path(start, stack.end());
        path.push_back(dep);
        return path;
      }
      if (m == Mark::kNone) {
        if (auto cycle = visit(dep)) return cycle;
      }
    }
    stack.pop_back();
    marks[name] = Mark::kDone;
    return std::nullopt;
  };

  for (const auto& [name, def] : assets) {
    if (marks[name] == Mark::kNone) {
      if (auto cycle = visit(name)) return cycle;
    }
  }
  return std::nullopt;
}

}  // namespace detail

/// Builds a graph iff names are unique, every dependency resolves, upstream
/// and downstream share a partition spec, and there is no cycle.
inline AssetGraph ValidateGraph(const std::vector<AssetDef>& defs) {
  if (defs.empty()) throw Error(Errc::kInvalidArgument, "asset list is empty");
  AssetGraph graph;
  for (const auto& def : defs) {
    if (def.name.empty()) throw Error(Errc::kInvalidSpec, "asset name is empty");
    if (def.name.find('/') != std::string::npos) {
      throw Error(Errc::kInvalidSpec, "asset name '" + def.name + "' contains '/'");
    }
    ValidatePartitionSpec(def.partitioning, "asset '" + def.name + "'");
    if (def.resource_hints) {
      const auto& hints = *def.resource_hints;
      if (!(hints.est_base_duration_hours >= 0.0)) {
        throw Error(Errc::kInvalidSpec, "asset '" + def.name + "': est_base_duration_hours must be >= 0");
      }
      if (hints.node_count < 1) throw Error(Errc::kInvalidSpec, "asset '" + def.name + "': node_count must be >= 1");
      if (!(hints.memory_gb_per_node > 0.0)) {
        throw Error(Errc::kInvalidSpec, "asset '" + def.name + "': memory_gb_per_node must be > 0");
      }
    }
    if (!graph.assets_.emplace(def.name, def).second) throw Error(Errc::kDuplicateAsset, def.name);
  }
  for (const auto& [name, def] : graph.assets_) {
    std::set<std::string> seen;
    for (const auto& dep : def.deps) {
      auto it = graph.assets_.find(dep);
      if (it == graph.assets_.end()) throw Error(Errc::kUnknownDependency, dep);
      if (!seen.insert(dep).second) continue;
      if (!(it->second.partitioning == def.partitioning)) {
        throw Error(Errc::kPartitionMismatch, "'" + name + "' and its dependency '" + dep + "'");
      }
      graph.edges_.emplace_back(dep, name);
    }
  }
  if (auto cycle = detail::FindCycle(graph.assets_)) throw CycleError(std::move(*cycle));
  std::sort(graph.edges_.begin(), graph.edges_.end());
  return graph;
}

/// Kahn's algorithm with ascending-name tie-break.
inline std::vector<std::string> TopoOrder(const AssetGraph& graph) {
  std::map<std::string, int> indegree;
  std::map<std::string, std::vector<std::string>> downstream;
  for (const auto& [name, def] : graph.assets()) indegree[name] = 0;
  for (const auto& [up, down] : graph.edges()) {
    ++indegree[down];
    downstream[up].push_back(down);
  }
  std::priority_queue<std::string, std::vector<std::string>, std::greater<>> ready;
  for (const auto& [name, deg] : indegree) {
    if (deg == 0) ready.push(name);
  }
  std::vector<std::string> order;
  order.reserve(graph.size());
  while (!ready.empty()) {
    std::string name = ready.top();
    ready.pop();
    order.push_back(name);
    for (const auto& down : downstream[name]) {
      if (--indegree[down] == 0) ready.push(down);
    }
  }
  return order;
}

/// Every (asset, partition) step of the graph.
inline std::set<StepId> AllSteps(const AssetGraph& graph) {
  std::set<StepId> steps;
  for (const auto& [name, def] : graph.assets()) {
    for (const auto& key : ExpandPartitions(def)) steps.insert({name, key});
  }
  return steps;
}

/// Steps not yet completed whose same-partition upstream steps all are.
inline std::set<StepId> ReadySteps(const AssetGraph& graph, const std::set<StepId>& completed) {
  std::set<StepId> ready;
  for (const auto& [name, def] : graph.assets()) {
    for (const auto& key : ExpandPartitions(def)) {
      StepId id{name, key};
      if (completed.count(id)) continue;
      const bool deps_done = std::all_of(def.deps.begin(), def.deps.end(), [&](const std::string& dep) {
        return completed.count(StepId{dep, key}) != 0;
      });
      if (deps_done) ready.insert(std::move(id));
    }
  }
  return ready;
}

}  // namespace costflow
