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

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "costflow/asset_graph.hpp"
#include "costflow/backends.hpp"
#include "costflow/crawl.hpp"
#include "costflow/crawl_workload.hpp"
#include "costflow/engine.hpp"
#include "costflow/error.hpp"
#include "costflow/factory.hpp"

namespace costflow {

// Pipeline definition file: one JSON document. Sections:
//   seed, partitions, assets, policy, backends, retry, corpus, engine, env
// See schema/pipeline.schema.json for the full shape.

struct CorpusParams {
  std::uint64_t seed = 0;
  int n_hosts = 10;
  int pages_per_host = 5;
};

struct EngineParams {
  int max_concurrency = 4;
  double heartbeat_timeout_s = kDefaultHeartbeatTimeoutSeconds;
};

struct PipelineFile {
  std::string name;
  std::uint64_t seed = 0;
  PartitionSpec partitions;
  std::vector<AssetDef> assets;
  SelectionPolicy policy;
  std::vector<BackendDescriptor> backends;
  RetryPolicy retry;
  std::optional<CorpusParams> corpus;
  EngineParams engine;
  std::map<std::string, std::string> env;
  // The parsed document, canonicalized; feeds run id derivation.
  nlohmann::json source;
};

struct Diagnostic {
  std::string location;  // JSON pointer, or "line N" for syntax errors
  Errc code = Errc::kInvalidConfig;
  std::string message;

  std::string ToString() const {
    return (location.empty() ? std::string("/") : location) + ": " + std::string(ErrcName(code)) + ": " + message;
  }
};

struct PipelineLoad {
  std::optional<PipelineFile> pipeline;  // set iff diagnostics is empty
  std::vector<Diagnostic> diagnostics;

  bool ok() const { return diagnostics.empty(); }
};

namespace detail {

// Typed field access that records problems instead of throwing, so one pass
// reports every violation.
class FieldReader {
 public:
  explicit FieldReader(std::vector<Diagnostic>& diags) : diags_(diags) {}

  void Report(const std::string& where, Errc code, std::string message) {
    diags_.push_back({where, code, std::move(message)});
  }

  const nlohmann::json* Find(const nlohmann::json& obj, const std::string& where, const char* key, bool required) {
    if (!obj.is_object()) return nullptr;
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) {
      if (required) Report(where + "/" + key, Errc::kInvalidConfig, "missing required field");
      return nullptr;
    }
    return &*it;
  }

  template <typename T>
  std::optional<T> Get(const nlohmann::json& obj, const std::string& where, const char* key, bool required) {
    const nlohmann::json* v = Find(obj, where, key, required);
    if (!v) return std::nullopt;
    const std::string path = where + "/" + key;
    if constexpr (std::is_same_v<T, std::string>) {
      if (!v->is_string()) return Wrong(path, "a string");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v->is_boolean()) return Wrong(path, "a boolean");
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v->is_number_unsigned()) return Wrong(path, "a nonnegative integer");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v->is_number_integer()) return Wrong(path, "an integer");
    } else {
      if (!v->is_number()) return Wrong(path, "a number");
    }
    return v->get<T>();
  }

  std::optional<std::map<std::string, std::string>> StringMap(const nlohmann::json& obj, const std::string& where,
                                                              const char* key) {
    const nlohmann::json* v = Find(obj, where, key, false);
    if (!v) return std::map<std::string, std::string>{};
    if (!v->is_object()) return Wrong(where + "/" + key, "an object of strings");
    std::map<std::string, std::string> out;
    for (const auto& [k, val] : v->items()) {
      if (!val.is_string()) {
        Report(where + "/" + key + "/" + k, Errc::kInvalidConfig, "expected a string");
        continue;
      }
      out[k] = val.get<std::string>();
    }
    return out;
  }

  std::vector<std::string> StringList(const nlohmann::json& obj, const std::string& where, const char* key,
                                      bool required) {
    std::vector<std::string> out;
    const nlohmann::json* v = Find(obj, where, key, required);
    if (!v) return out;
    if (!v->is_array()) {
      Report(where + "/" + key, Errc::kInvalidConfig, "expected an array of strings");
      return out;
    }
    for (std::size_t i = 0; i < v->size(); ++i) {
      if (!(*v)[i].is_string()) {
        Report(where + "/" + key + "/" + std::to_string(i), Errc::kInvalidConfig, "expected a string");
        continue;
      }
      out.push_back((*v)[i].get<std::string>());
    }
    return out;
  }

 private:
  std::nullopt_t Wrong(const std::string& path, const char* what) {
    Report(path, Errc::kInvalidConfig, std::string("expected ") + what);
    return std::nullopt;
  }

  std::vector<Diagnostic>& diags_;
};

inline std::size_t LineOfOffset(std::string_view text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

inline std::optional<BackendDescriptor> ReadBackend(FieldReader& r, const nlohmann::json& j, const std::string& at) {
  // A bare string names a built-in descriptor.
  if (j.is_string()) {
    for (const auto& d : DefaultBackends()) {
      if (d.backend_id == j.get<std::string>()) return d;
    }
    r.Report(at, Errc::kUnknownBackend, "no built-in backend '" + j.get<std::string>() + "'");
    return std::nullopt;
  }
  if (!j.is_object()) {
    r.Report(at, Errc::kInvalidConfig, "expected a backend object or built-in id");
    return std::nullopt;
  }
  BackendDescriptor d;
  auto id = r.Get<std::string>(j, at, "backend_id", true);
  if (!id) return std::nullopt;
  d.backend_id = *id;
  d.display_name = r.Get<std::string>(j, at, "display_name", false).value_or(d.backend_id);
  d.available = r.Get<bool>(j, at, "available", false).value_or(true);
  if (const auto* rc = r.Find(j, at, "rate_card", true)) {
    const std::string rat = at + "/rate_card";
    auto rate = [&](const char* key) {
      auto v = r.Get<double>(*rc, rat, key, true);
      if (v && !(*v >= 0.0 && std::isfinite(*v))) {
        r.Report(rat + "/" + key, Errc::kInvalidConfig, "rate must be finite and >= 0");
        return Rate{};
      }
      return v ? Rate::FromUsd(*v) : Rate{};
    };
    d.rate_card = {rate("instance_rate_per_node_hour"), rate("surcharge_rate_per_node_hour"),
                   rate("storage_rate_per_node_hour")};
  }
  if (const auto* sp = r.Find(j, at, "sim_profile", false)) {
    const std::string pat = at + "/sim_profile";
    SimProfile p;
    p.speed_factor = r.Get<double>(*sp, pat, "speed_factor", true).value_or(1.0);
    p.bootstrap_delay_hours = r.Get<double>(*sp, pat, "bootstrap_delay_hours", false).value_or(0.0);
    p.base_failure_prob = r.Get<double>(*sp, pat, "base_failure_prob", false).value_or(0.0);
    p.heartbeat_interval_s =
        r.Get<double>(*sp, pat, "heartbeat_interval_s", false).value_or(kDefaultHeartbeatIntervalSeconds);
    if (const auto* kn = r.Find(*sp, pat, "knobs", false)) {
      const std::string kat = pat + "/knobs";
      p.knobs.node_labels_enabled = r.Get<bool>(*kn, kat, "node_labels_enabled", false).value_or(true);
      p.knobs.maximize_resource_allocation =
          r.Get<bool>(*kn, kat, "maximize_resource_allocation", false).value_or(true);
      p.knobs.parallel_vacuum = r.Get<bool>(*kn, kat, "parallel_vacuum", false).value_or(true);
      p.knobs.memory_multiplier = r.Get<double>(*kn, kat, "memory_multiplier", false).value_or(2.0);
    }
    try {
      ValidateProfile(p);
    } catch (const Error& e) {
      r.Report(pat, e.code(), e.detail());
    }
    d.sim_profile = p;
  }
  return d;
}

inline std::optional<AssetDef> ReadAsset(FieldReader& r, const nlohmann::json& j, const std::string& at,
                                         const PartitionSpec& partitions) {
  if (!j.is_object()) {
    r.Report(at, Errc::kInvalidConfig, "expected an asset object");
    return std::nullopt;
  }
  AssetDef a;
  auto name = r.Get<std::string>(j, at, "name", true);
  if (!name) return std::nullopt;
  a.name = *name;
  if (a.name.empty() || a.name.find('/') != std::string::npos) {
    r.Report(at + "/name", Errc::kInvalidConfig, "asset name must be nonempty and contain no '/'");
  }
  a.deps = r.StringList(j, at, "deps", false);
  a.partitioning = partitions;
  a.backend_hint = r.Get<std::string>(j, at, "backend_hint", false);
  a.tags = r.StringMap(j, at, "tags").value_or(TagMap{});
  if (const auto* rh = r.Find(j, at, "resource_hints", false)) {
    const std::string hat = at + "/resource_hints";
    ResourceHints h;
    h.est_base_duration_hours = r.Get<double>(*rh, hat, "est_base_duration_hours", true).value_or(0.0);
    h.node_count = r.Get<int>(*rh, hat, "node_count", false).value_or(1);
    h.memory_gb_per_node = r.Get<double>(*rh, hat, "memory_gb_per_node", false).value_or(1.0);
    if (!(h.est_base_duration_hours >= 0.0)) {
      r.Report(hat + "/est_base_duration_hours", Errc::kInvalidConfig, "must be >= 0");
    }
    if (h.node_count < 1) r.Report(hat + "/node_count", Errc::kInvalidConfig, "must be >= 1");
    if (!(h.memory_gb_per_node > 0.0)) r.Report(hat + "/memory_gb_per_node", Errc::kInvalidConfig, "must be > 0");
    a.resource_hints = h;
  }
  return a;
}

}  // namespace detail

/// Parses and validates a pipeline document, reporting every violation.
inline PipelineLoad ParsePipeline(std::string_view text) {
  PipelineLoad out;
  auto& diags = out.diagnostics;
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    diags.push_back({"line " + std::to_string(detail::LineOfOffset(text, e.byte == 0 ? 0 : e.byte - 1)),
                     Errc::kParseError, e.what()});
    return out;
  }
  if (!doc.is_object()) {
    diags.push_back({"", Errc::kParseError, "top level must be an object"});
    return out;
  }

  detail::FieldReader r(diags);
  PipelineFile p;
  p.source = doc;
  p.name = r.Get<std::string>(doc, "", "name", false).value_or("");
  p.seed = r.Get<std::uint64_t>(doc, "", "seed", false).value_or(0);
  p.env = r.StringMap(doc, "", "env").value_or(std::map<std::string, std::string>{});

  if (const auto* parts = r.Find(doc, "", "partitions", true)) {
    p.partitions.time_partitions = r.StringList(*parts, "/partitions", "time_partitions", true);
    p.partitions.domain_segments = r.Get<int>(*parts, "/partitions", "domain_segments", false).value_or(1);
    try {
      ValidatePartitionSpec(p.partitions, "partitions");
    } catch (const Error& e) {
      diags.push_back({"/partitions", e.code(), e.detail()});
    }
  }

  // Backends first: asset hints and policy refer to them.
  if (const auto* bs = r.Find(doc, "", "backends", false)) {
    if (!bs->is_array()) {
      r.Report("/backends", Errc::kInvalidConfig, "expected an array");
    } else {
      std::set<std::string> seen;
      for (std::size_t i = 0; i < bs->size(); ++i) {
        const std::string at = "/backends/" + std::to_string(i);
        auto d = detail::ReadBackend(r, (*bs)[i], at);
        if (!d) continue;
        if (!seen.insert(d->backend_id).second) {
          r.Report(at + "/backend_id", Errc::kInvalidConfig, "duplicate backend_id '" + d->backend_id + "'");
          continue;
        }
        p.backends.push_back(std::move(*d));
      }
    }
  } else {
    p.backends = DefaultBackends();
  }
  std::set<std::string> backend_ids;
  for (const auto& d : p.backends) backend_ids.insert(d.backend_id);
  auto check_backend = [&](const std::string& where, const std::string& id) {
    if (!backend_ids.count(id)) r.Report(where, Errc::kUnknownBackend, "unknown backend '" + id + "'");
  };

  if (const auto* assets = r.Find(doc, "", "assets", true)) {
    if (!assets->is_array() || assets->empty()) {
      r.Report("/assets", Errc::kInvalidConfig, "expected a nonempty array");
    } else {
      std::map<std::string, std::size_t> index;
      for (std::size_t i = 0; i < assets->size(); ++i) {
        const std::string at = "/assets/" + std::to_string(i);
        auto a = detail::ReadAsset(r, (*assets)[i], at, p.partitions);
        if (!a) continue;
        if (a->backend_hint) check_backend(at + "/backend_hint", *a->backend_hint);
        if (!index.emplace(a->name, i).second) {
          r.Report(at + "/name", Errc::kDuplicateAsset, a->name);
          continue;
        }
        p.assets.push_back(std::move(*a));
      }
      for (std::size_t i = 0; i < p.assets.size(); ++i) {
        for (std::size_t k = 0; k < p.assets[i].deps.size(); ++k) {
          const auto& dep = p.assets[i].deps[k];
          if (!index.count(dep)) {
            r.Report("/assets/" + std::to_string(index.at(p.assets[i].name)) + "/deps/" + std::to_string(k),
                     Errc::kUnknownDependency, dep);
          }
        }
      }
    }
  }

  if (const auto* pol = r.Find(doc, "", "policy", true)) {
    if (auto d = r.Get<std::string>(*pol, "/policy", "default_backend", true)) {
      p.policy.default_backend = *d;
      check_backend("/policy/default_backend", *d);
    }
    p.policy.cost_weight = r.Get<double>(*pol, "/policy", "cost_weight", false).value_or(0.5);
    if (!(p.policy.cost_weight >= 0.0 && p.policy.cost_weight <= 1.0)) {
      r.Report("/policy/cost_weight", Errc::kInvalidConfig, "must be in [0, 1]");
    }
    p.policy.candidates = r.StringList(*pol, "/policy", "candidates", false);
    for (std::size_t i = 0; i < p.policy.candidates.size(); ++i) {
      check_backend("/policy/candidates/" + std::to_string(i), p.policy.candidates[i]);
    }
    if (const auto* rules = r.Find(*pol, "/policy", "rules", false)) {
      if (!rules->is_array()) {
        r.Report("/policy/rules", Errc::kInvalidConfig, "expected an array");
      } else {
        for (std::size_t i = 0; i < rules->size(); ++i) {
          const std::string at = "/policy/rules/" + std::to_string(i);
          const auto& rule = (*rules)[i];
          RoutingRule rr;
          if (auto b = r.Get<std::string>(rule, at, "backend", true)) {
            rr.backend_id = *b;
            check_backend(at + "/backend", *b);
          }
          if (const auto* m = r.Find(rule, at, "match", false)) {
            rr.when.tags = r.StringMap(*m, at + "/match", "tags").value_or(TagMap{});
            rr.when.time_prefix = r.Get<std::string>(*m, at + "/match", "time_prefix", false);
          }
          p.policy.rules.push_back(std::move(rr));
        }
      }
    }
  }

  if (const auto* rt = r.Find(doc, "", "retry", false)) {
    p.retry.max_attempts = r.Get<int>(*rt, "/retry", "max_attempts", false).value_or(p.retry.max_attempts);
    if (p.retry.max_attempts < 1) r.Report("/retry/max_attempts", Errc::kInvalidConfig, "must be >= 1");
    if (r.Find(*rt, "/retry", "retry_on", false)) {
      auto codes = r.StringList(*rt, "/retry", "retry_on", false);
      p.retry.retry_on.clear();
      for (std::size_t i = 0; i < codes.size(); ++i) {
        if (!IsKnownErrorCode(codes[i])) {
          r.Report("/retry/retry_on/" + std::to_string(i), Errc::kInvalidConfig, "unknown error code '" + codes[i] + "'");
        }
        p.retry.retry_on.insert(codes[i]);
      }
    }
  }

  if (const auto* c = r.Find(doc, "", "corpus", false)) {
    CorpusParams cp;
    cp.seed = r.Get<std::uint64_t>(*c, "/corpus", "seed", false).value_or(p.seed);
    cp.n_hosts = r.Get<int>(*c, "/corpus", "n_hosts", false).value_or(cp.n_hosts);
    cp.pages_per_host = r.Get<int>(*c, "/corpus", "pages_per_host", false).value_or(cp.pages_per_host);
    if (cp.n_hosts < 1) r.Report("/corpus/n_hosts", Errc::kInvalidConfig, "must be >= 1");
    if (cp.pages_per_host < 1) r.Report("/corpus/pages_per_host", Errc::kInvalidConfig, "must be >= 1");
    p.corpus = cp;
  }

  if (const auto* e = r.Find(doc, "", "engine", false)) {
    p.engine.max_concurrency = r.Get<int>(*e, "/engine", "max_concurrency", false).value_or(4);
    p.engine.heartbeat_timeout_s =
        r.Get<double>(*e, "/engine", "heartbeat_timeout_s", false).value_or(kDefaultHeartbeatTimeoutSeconds);
    if (p.engine.max_concurrency < 1) r.Report("/engine/max_concurrency", Errc::kInvalidConfig, "must be >= 1");
    if (!(p.engine.heartbeat_timeout_s > 0.0)) {
      r.Report("/engine/heartbeat_timeout_s", Errc::kInvalidConfig, "must be > 0");
    }
  }

  // Graph-level checks only make sense once the per-field ones pass; cycles
  // are reported with their path.
  if (diags.empty()) {
    try {
      ValidateGraph(p.assets);
    } catch (const CycleError& e) {
      std::string path;
      for (const auto& n : e.path()) path += (path.empty() ? "" : " -> ") + n;
      diags.push_back({"/assets", Errc::kCycleDetected, path});
    } catch (const Error& e) {
      diags.push_back({"/assets", e.code(), e.detail()});
    }
  }
  if (diags.empty() && p.corpus) {
    for (const auto& a : p.assets) {
      if (!CrawlWorkload::StageOf(a)) {
        diags.push_back({"/assets", Errc::kInvalidConfig,
                         "asset '" + a.name + "' has no crawl op but the file declares a corpus"});
      }
    }
  }

  if (diags.empty()) out.pipeline = std::move(p);
  return out;
}

inline std::string ReadTextFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::kFileNotFound, path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline PipelineLoad LoadPipelineFile(const std::filesystem::path& path) { return ParsePipeline(ReadTextFile(path)); }

/// Throws the first diagnostic when the document is invalid.
inline PipelineFile RequirePipeline(const PipelineLoad& load) {
  if (!load.ok()) throw Error(load.diagnostics.front().code, load.diagnostics.front().ToString());
  return *load.pipeline;
}

/// "a..b", inclusive, by declared order of time partitions.
inline std::vector<std::string> ExpandTimeRange(const PartitionSpec& spec, std::string_view range) {
  const auto dots = range.find("..");
  if (dots == std::string_view::npos) throw Error(Errc::kInvalidArgument, "time range must look like a..b");
  const std::string from(range.substr(0, dots));
  const std::string to(range.substr(dots + 2));
  auto index_of = [&](const std::string& id) {
    auto it = std::find(spec.time_partitions.begin(), spec.time_partitions.end(), id);
    if (it == spec.time_partitions.end()) throw Error(Errc::kInvalidArgument, "unknown time id '" + id + "'");
    return static_cast<std::size_t>(it - spec.time_partitions.begin());
  };
  const std::size_t a = index_of(from);
  const std::size_t b = index_of(to);
  if (a > b) throw Error(Errc::kEmptyRange, std::string(range));
  return {spec.time_partitions.begin() + static_cast<std::ptrdiff_t>(a),
          spec.time_partitions.begin() + static_cast<std::ptrdiff_t>(b) + 1};
}

inline PartitionFilter TimeRangeFilter(const PartitionSpec& spec, std::string_view range) {
  std::string text;
  for (const auto& id : ExpandTimeRange(spec, range)) text += (text.empty() ? "" : ",") + id;
  return PartitionFilter::Parse(text);
}

inline std::shared_ptr<const Workload> MakeWorkload(const PipelineFile& p) {
  if (!p.corpus) return std::make_shared<NullWorkload>();
  return std::make_shared<CrawlWorkload>(
      crawl::GenerateCorpus(p.corpus->seed, p.corpus->n_hosts, p.corpus->pages_per_host, p.partitions.time_partitions));
}

/// Everything needed to start one run of a pipeline.
struct RunSetup {
  RunPlan plan;
  BackendRegistry registry;
  RetryPolicy retry;
  std::uint64_t seed = 0;
  std::string run_id;
  std::shared_ptr<const Workload> workload;
  EngineOptions options;
};

/// The run id hashes the canonical document, the seed, and the expanded step
/// list, so the same command always names the same run.
inline RunSetup PrepareRun(const PipelineFile& p, const PartitionFilter& filter, std::optional<std::uint64_t> seed,
                           std::shared_ptr<const Workload> workload = nullptr) {
  RunSetup s;
  s.registry = BackendRegistry(p.backends);
  ValidatePolicy(p.policy, s.registry);
  auto graph = std::make_shared<const AssetGraph>(ValidateGraph(p.assets));
  s.plan = PlanRun(graph, filter, p.policy, s.registry);
  s.retry = p.retry;
  s.seed = seed.value_or(p.seed);
  std::string fingerprint = p.source.dump();
  for (const auto& step : s.plan.steps) fingerprint += "\n" + step.step_key + "@" + step.backend_id;
  s.run_id = MakeRunId(s.seed, fingerprint);
  s.workload = workload ? std::move(workload) : MakeWorkload(p);
  s.options.max_concurrency = p.engine.max_concurrency;
  s.options.heartbeat_timeout_s = p.engine.heartbeat_timeout_s;
  s.options.env = p.env;
  return s;
}

}  // namespace costflow
