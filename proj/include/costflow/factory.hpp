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
#include <optional>
#include <string>
#include <vector>

#include "costflow/asset_graph.hpp"
#include "costflow/backends.hpp"
#include "costflow/cost.hpp"
#include "costflow/error.hpp"

namespace costflow {

/// Matches when every listed tag equals the asset's tag and, if given, the
/// partition's time id starts with time_prefix.
struct RulePredicate {
  TagMap tags;
  std::optional<std::string> time_prefix;

  bool Matches(const AssetDef& asset, const PartitionKey& partition) const {
    for (const auto& [key, value] : tags) {
      auto it = asset.tags.find(key);
      if (it == asset.tags.end() || it->second != value) return false;
    }
    if (time_prefix && partition.time_id.rfind(*time_prefix, 0) != 0) return false;
    return true;
  }
};

struct RoutingRule {
  RulePredicate when;
  std::string backend_id;
};

struct SelectionPolicy {
  std::string default_backend;
  double cost_weight = 0.5;  // 1 = cheapest, 0 = fastest
  std::vector<RoutingRule> rules;
  // Backends eligible for score-based selection; empty means all available.
  std::vector<std::string> candidates;
};

inline void ValidatePolicy(const SelectionPolicy& policy, const BackendRegistry& registry) {
  if (!(policy.cost_weight >= 0.0 && policy.cost_weight <= 1.0)) {
    throw Error(Errc::kInvalidConfig, "cost_weight must be in [0, 1]");
  }
  if (!registry.Contains(policy.default_backend)) {
    throw Error(Errc::kUnknownBackend, "default_backend '" + policy.default_backend + "'");
  }
  for (const auto& rule : policy.rules) {
    if (!registry.Contains(rule.backend_id)) throw Error(Errc::kUnknownBackend, "rule backend '" + rule.backend_id + "'");
  }
  for (const auto& id : policy.candidates) {
    if (!registry.Contains(id)) throw Error(Errc::kUnknownBackend, "candidate '" + id + "'");
  }
}

inline StepSpec SpecFor(const AssetDef& asset, const PartitionKey& partition) {
  const ResourceHints hints = asset.resource_hints.value_or(ResourceHints{});
  return {asset.name, partition, hints.est_base_duration_hours, hints.node_count, StepTraits::FromTags(asset.tags)};
}

struct StepEstimate {
  double duration_hours = 0.0;
  CostBreakdown cost;
};

/// Bootstrap plus effective run time, billed at the backend's rate card.
inline StepEstimate EstimateStep(const BackendDescriptor& backend, const StepSpec& spec) {
  const SimProfile profile = backend.profile();
  const Millis total = HoursToMillis(profile.bootstrap_delay_hours) +
                       HoursToMillis(EffectiveDuration(spec.base_duration_hours, profile, spec.traits));
  return {MillisToHours(total), ComputeStepCost(total, spec.node_count, backend.rate_card)};
}

inline StepEstimate EstimateStep(const BackendRegistry& registry, const std::string& backend_id, const StepSpec& spec) {
  return EstimateStep(registry.Get(backend_id), spec);
}

struct ScoredCandidate {
  std::string backend_id;
  double cost_usd = 0.0;
  double duration_hours = 0.0;
};

// Scores within this distance count as a tie.
inline constexpr double kScoreTieEpsilon = 1e-9;

/// Minimizes w * cost/max_cost + (1 - w) * duration/max_duration. Ties go to
/// the smallest backend id.
inline std::string SelectByScore(std::vector<ScoredCandidate> candidates, double cost_weight) {
  if (candidates.empty()) throw Error(Errc::kEmptyRegistry, "no candidate backends");
  std::sort(candidates.begin(), candidates.end(),
            [](const ScoredCandidate& a, const ScoredCandidate& b) { return a.backend_id < b.backend_id; });
  double max_cost = 0.0;
  double max_duration = 0.0;
  for (const auto& c : candidates) {
    max_cost = std::max(max_cost, c.cost_usd);
    max_duration = std::max(max_duration, c.duration_hours);
  }
  auto score = [&](const ScoredCandidate& c) {
    const double nc = max_cost > 0.0 ? c.cost_usd / max_cost : 0.0;
    const double nd = max_duration > 0.0 ? c.duration_hours / max_duration : 0.0;
    return cost_weight * nc + (1.0 - cost_weight) * nd;
  };
  std::size_t best = 0;
  double best_score = score(candidates[0]);
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const double s = score(candidates[i]);
    if (s < best_score - kScoreTieEpsilon) {
      best = i;
      best_score = s;
    }
  }
  return candidates[best].backend_id;
}

/// Precedence: the asset's backend hint, then the first matching rule, then
/// score minimization over eligible backends. Assets without resource hints
/// cannot be estimated and fall back to the policy default.
inline std::string SelectBackend(const AssetDef& asset, const PartitionKey& partition, const SelectionPolicy& policy,
                                 const BackendRegistry& registry) {
  if (registry.empty()) throw Error(Errc::kEmptyRegistry, "backend registry is empty");
  if (asset.backend_hint) {
    if (!registry.Contains(*asset.backend_hint)) throw Error(Errc::kUnknownBackend, *asset.backend_hint);
    return *asset.backend_hint;
  }
  for (const auto& rule : policy.rules) {
    if (rule.when.Matches(asset, partition)) {
      if (!registry.Contains(rule.backend_id)) throw Error(Errc::kUnknownBackend, rule.backend_id);
      return rule.backend_id;
    }
  }
  if (!asset.resource_hints) {
    if (!registry.Contains(policy.default_backend)) throw Error(Errc::kUnknownBackend, policy.default_backend);
    return policy.default_backend;
  }
  const StepSpec spec = SpecFor(asset, partition);
  std::vector<ScoredCandidate> scored;
  for (const auto& [id, descriptor] : registry.all()) {
    if (!descriptor.available) continue;
    if (!policy.candidates.empty() &&
        std::find(policy.candidates.begin(), policy.candidates.end(), id) == policy.candidates.end()) {
      continue;
    }
    const StepEstimate est = EstimateStep(descriptor, spec);
    scored.push_back({id, est.cost.total.usd(), est.duration_hours});
  }
  if (scored.empty()) throw Error(Errc::kEmptyRegistry, "no available candidate backend");
  return SelectByScore(std::move(scored), policy.cost_weight);
}

}  // namespace costflow
