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

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "costflow/crawl.hpp"
#include "costflow/engine.hpp"

namespace costflow {

/// Runs the crawl stages as asset computations. An asset's stage comes from
/// its "op" tag, else its name; upstream inputs are found by their stage.
class CrawlWorkload : public Workload {
 public:
  explicit CrawlWorkload(crawl::Corpus corpus) : corpus_(std::move(corpus)) {}

  const crawl::Corpus& corpus() const { return corpus_; }

  static std::optional<crawl::Stage> StageOf(const AssetDef& asset) {
    auto it = asset.tags.find("op");
    return crawl::StageByName(it != asset.tags.end() ? it->second : asset.name);
  }

  std::vector<std::string> Materialize(const StepContext& ctx, const AssetDef& asset,
                                       const std::map<std::string, UpstreamOutput>& upstream) const override {
    auto stage = StageOf(asset);
    if (!stage) throw Error(Errc::kInvalidArgument, "asset '" + asset.name + "' has no crawl op");
    switch (*stage) {
      case crawl::Stage::kNodesOnly:
        return crawl::ToLines(crawl::SeedsForSegment(crawl::NodesOnly(corpus_.raw_seeds).seeds,
                                                     asset.partitioning.domain_segments,
                                                     ctx.partition.domain_segment));
      case crawl::Stage::kExtractEdges: {
        const auto seeds = crawl::SeedsFromLines(Input(asset, upstream, crawl::Stage::kNodesOnly));
        return crawl::ToLines(
            crawl::ExtractEdges(crawl::RecordsForTime(corpus_.records, ctx.partition.time_id), seeds).edges);
      }
      case crawl::Stage::kBuildGraph: {
        const auto seeds = crawl::SeedsFromLines(Input(asset, upstream, crawl::Stage::kNodesOnly));
        const auto edges = crawl::EdgesFromLines(Input(asset, upstream, crawl::Stage::kExtractEdges));
        return crawl::ToLines(crawl::BuildGraph(seeds, edges).edges);
      }
      case crawl::Stage::kAggregateDomains:
        return crawl::ToLines(
            crawl::AggregateDomains(crawl::GraphFromLines(Input(asset, upstream, crawl::Stage::kBuildGraph))));
    }
    return {};
  }

 private:
  static const std::vector<std::string>& Input(const AssetDef& asset,
                                               const std::map<std::string, UpstreamOutput>& upstream,
                                               crawl::Stage wanted) {
    for (const auto& [name, out] : upstream) {
      if (out.asset && StageOf(*out.asset) == wanted) return out.lines;
    }
    throw Error(Errc::kInvalidArgument, "asset '" + asset.name + "' lacks an upstream for its crawl op");
  }

  crawl::Corpus corpus_;
};

}  // namespace costflow
