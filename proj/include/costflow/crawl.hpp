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
#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "costflow/error.hpp"
#include "costflow/hash.hpp"

namespace costflow::crawl {

struct CrawlRecord {
  std::string url;
  std::string fetched_at;  // time partition id
  std::string body;

  bool operator==(const CrawlRecord&) const = default;
};

struct SeedNode {
  std::string normalized_url;
  std::string host;

  auto operator<=>(const SeedNode&) const = default;
};

struct PageEdge {
  std::string src_url;
  std::string dst_url;
  std::optional<std::string> anchor_text;

  auto operator<=>(const PageEdge&) const = default;
};

struct GraphEdge {
  std::string src_url;
  std::string dst_url;
  std::int64_t multiplicity = 1;

  auto operator<=>(const GraphEdge&) const = default;
};

struct PageGraph {
  std::vector<GraphEdge> edges;  // sorted by (src_url, dst_url), unique

  bool operator==(const PageGraph&) const = default;
};

struct DomainEdge {
  std::string src_domain;
  std::string dst_domain;
  std::int64_t weight = 0;

  auto operator<=>(const DomainEdge&) const = default;
};

// ---------------------------------------------------------------------------
// URLs
// ---------------------------------------------------------------------------

struct ParsedUrl {
  std::string host;  // lowercase, may carry :port
  std::string path;  // raw path, "" or starting with '/'
};

namespace detail {

inline std::string Lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

inline bool ValidHost(std::string_view host) {
  std::string_view name = host;
  if (auto colon = host.find(':'); colon != std::string_view::npos) {
    std::string_view port = host.substr(colon + 1);
    if (port.empty() || !std::all_of(port.begin(), port.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      return false;
    }
    name = host.substr(0, colon);
  }
  if (name.empty() || name.find('.') == std::string_view::npos) return false;
  if (name.front() == '.' || name.back() == '.' || name.front() == '-' || name.find("..") != std::string_view::npos) {
    return false;
  }
  return std::all_of(name.begin(), name.end(),
                     [](char c) { return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '.' || c == '-'; });
}

inline bool HasWhitespace(std::string_view s) {
  return std::any_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

// Splits "scheme:" off the front, if the prefix is a syntactically valid scheme.
inline std::optional<std::string> SchemeOf(std::string_view s) {
  auto colon = s.find(':');
  if (colon == std::string_view::npos || colon == 0) return std::nullopt;
  auto stop = s.find_first_of("/?#");
  if (stop != std::string_view::npos && stop < colon) return std::nullopt;
  std::string_view scheme = s.substr(0, colon);
  if (!std::isalpha(static_cast<unsigned char>(scheme.front()))) return std::nullopt;
  for (char c : scheme) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '+' && c != '-' && c != '.') return std::nullopt;
  }
  return Lower(scheme);
}

inline std::string StripQueryAndFragment(std::string_view path) {
  return std::string(path.substr(0, path.find_first_of("?#")));
}

// Collapses duplicate slashes and resolves "." / ".." segments.
inline std::string CleanPath(std::string_view path) {
  std::vector<std::string> segments;
  std::size_t i = 0;
  while (i <= path.size()) {
    auto next = path.find('/', i);
    if (next == std::string_view::npos) next = path.size();
    std::string_view seg = path.substr(i, next - i);
    if (seg == "..") {
      if (!segments.empty()) segments.pop_back();
    } else if (!seg.empty() && seg != ".") {
      segments.emplace_back(seg);
    }
    i = next + 1;
  }
  std::string out;
  for (const auto& seg : segments) out += "/" + seg;
  return out;
}

}  // namespace detail

/// Accepts "http://host/path", "https://...", "//host/path" and bare
/// "host/path". Rejects whitespace, other schemes, and hosts without a dot.
inline std::optional<ParsedUrl> ParseUrl(std::string_view raw) {
  if (raw.empty() || detail::HasWhitespace(raw)) return std::nullopt;
  std::string_view rest = raw;
  if (auto scheme = detail::SchemeOf(raw)) {
    if (*scheme != "http" && *scheme != "https") return std::nullopt;
    rest.remove_prefix(scheme->size() + 1);
    if (rest.substr(0, 2) != "//") return std::nullopt;
    rest.remove_prefix(2);
  } else if (rest.substr(0, 2) == "//") {
    rest.remove_prefix(2);
  }
  const auto host_end = rest.find_first_of("/?#");
  ParsedUrl url;
  url.host = detail::Lower(rest.substr(0, host_end));
  if (!detail::ValidHost(url.host)) return std::nullopt;
  if (host_end != std::string_view::npos) url.path = detail::StripQueryAndFragment(rest.substr(host_end));
  if (!url.path.empty() && url.path.front() != '/') url.path.insert(0, "/");
  return url;
}

inline std::string NormalizedForm(const ParsedUrl& url) { return url.host + detail::CleanPath(url.path); }

/// Lowercase host, no scheme, query, fragment, duplicate or trailing slash.
inline std::optional<std::string> NormalizeUrl(std::string_view raw) {
  auto url = ParseUrl(raw);
  if (!url) return std::nullopt;
  return NormalizedForm(*url);
}

/// Host part of a normalized url.
inline std::string HostOf(std::string_view normalized_url) {
  return std::string(normalized_url.substr(0, normalized_url.find('/')));
}

/// Resolves an href found on the page at base_raw_url. Returns nullopt for
/// non-web schemes and unparseable targets.
inline std::optional<std::string> ResolveHref(const ParsedUrl& base, std::string_view href) {
  while (!href.empty() && std::isspace(static_cast<unsigned char>(href.front()))) href.remove_prefix(1);
  while (!href.empty() && std::isspace(static_cast<unsigned char>(href.back()))) href.remove_suffix(1);
  if (href.empty()) return std::nullopt;
  if (detail::SchemeOf(href)) return NormalizeUrl(href);
  if (href.substr(0, 2) == "//") return NormalizeUrl(href);
  if (detail::HasWhitespace(href)) return std::nullopt;
  if (href.front() == '#' || href.front() == '?') return NormalizedForm(base);
  std::string path = detail::StripQueryAndFragment(href);
  if (path.front() != '/') {
    const auto dir_end = base.path.rfind('/');
    const std::string dir = dir_end == std::string::npos ? "/" : base.path.substr(0, dir_end + 1);
    path = dir + path;
  }
  return base.host + detail::CleanPath(path);
}

/// Stable domain bucket: FNV-1a 64 of the host bytes, modulo n_segments.
inline int AssignDomainSegment(std::string_view host, int n_segments) {
  if (n_segments < 1) throw Error(Errc::kInvalidArgument, "n_segments must be >= 1");
  return static_cast<int>(Fnv1a64(host) % static_cast<std::uint64_t>(n_segments));
}

// ---------------------------------------------------------------------------
// Anchor scanning
// ---------------------------------------------------------------------------

struct Anchor {
  std::string href;
  std::optional<std::string> text;
};

/// Minimal scanner for <a ... href=...>text</a>. Attribute values may be
/// double-quoted, single-quoted, or bare.
inline std::vector<Anchor> ScanAnchors(std::string_view body) {
  std::vector<Anchor> anchors;
  const std::string lower = detail::Lower(body);
  std::size_t pos = 0;
  while ((pos = lower.find("<a", pos)) != std::string::npos) {
    const std::size_t after = pos + 2;
    if (after >= lower.size() || !std::isspace(static_cast<unsigned char>(lower[after]))) {
      pos = after;
      continue;
    }
    const std::size_t tag_end = lower.find('>', after);
    if (tag_end == std::string::npos) break;
    std::optional<std::string> href;
    std::size_t attr = after;
    while ((attr = lower.find("href", attr)) != std::string::npos && attr < tag_end) {
      std::size_t i = attr + 4;
      const bool boundary = std::isspace(static_cast<unsigned char>(lower[attr - 1]));
      while (i < tag_end && std::isspace(static_cast<unsigned char>(lower[i]))) ++i;
      if (!boundary || i >= tag_end || lower[i] != '=') {
        attr += 4;
        continue;
      }
      ++i;
      while (i < tag_end && std::isspace(static_cast<unsigned char>(lower[i]))) ++i;
      if (i < tag_end && (body[i] == '"' || body[i] == '\'')) {
        const char quote = body[i];
        const std::size_t close = body.find(quote, i + 1);
        if (close != std::string_view::npos && close < tag_end) href = std::string(body.substr(i + 1, close - i - 1));
      } else {
        std::size_t j = i;
        while (j < tag_end && !std::isspace(static_cast<unsigned char>(body[j]))) ++j;
        href = std::string(body.substr(i, j - i));
      }
      break;
    }
    const std::size_t close_tag = lower.find("</a", tag_end);
    std::optional<std::string> text;
    if (close_tag != std::string::npos) {
      std::string_view raw = body.substr(tag_end + 1, close_tag - tag_end - 1);
      while (!raw.empty() && std::isspace(static_cast<unsigned char>(raw.front()))) raw.remove_prefix(1);
      while (!raw.empty() && std::isspace(static_cast<unsigned char>(raw.back()))) raw.remove_suffix(1);
      if (!raw.empty()) text = std::string(raw);
    }
    if (href) anchors.push_back({std::move(*href), std::move(text)});
    pos = tag_end + 1;
  }
  return anchors;
}

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

struct NodesResult {
  std::vector<SeedNode> seeds;  // sorted by normalized_url, unique
  std::size_t dropped = 0;
};

inline NodesResult NodesOnly(const std::vector<std::string>& raw_seeds) {
  NodesResult result;
  std::map<std::string, SeedNode> unique;
  for (const auto& raw : raw_seeds) {
    auto url = ParseUrl(raw);
    if (!url) {
      ++result.dropped;
      continue;
    }
    std::string normalized = NormalizedForm(*url);
    unique.emplace(normalized, SeedNode{normalized, url->host});
  }
  for (auto& [key, node] : unique) result.seeds.push_back(std::move(node));
  return result;
}

struct EdgesResult {
  std::vector<PageEdge> edges;  // sorted
  std::vector<std::string> diagnostics;
};

inline EdgesResult ExtractEdges(const std::vector<CrawlRecord>& records, const std::vector<SeedNode>& seeds) {
  std::set<std::string> seed_hosts;
  for (const auto& s : seeds) seed_hosts.insert(s.host);
  EdgesResult result;
  for (const auto& record : records) {
    auto base = ParseUrl(record.url);
    if (!base) {
      result.diagnostics.push_back("unparseable record url '" + record.url + "'");
      continue;
    }
    if (!seed_hosts.count(base->host)) continue;
    const std::string src = NormalizedForm(*base);
    for (auto& anchor : ScanAnchors(record.body)) {
      auto dst = ResolveHref(*base, anchor.href);
      if (!dst) {
        result.diagnostics.push_back("skipped href '" + anchor.href + "' on " + src);
        continue;
      }
      result.edges.push_back({src, std::move(*dst), std::move(anchor.text)});
    }
  }
  std::sort(result.edges.begin(), result.edges.end());
  return result;
}

/// Joins edges to seed hosts, drops exact self-loops, and collapses duplicate
/// (src, dst) pairs into a multiplicity.
inline PageGraph BuildGraph(const std::vector<SeedNode>& nodes, const std::vector<PageEdge>& edges) {
  std::set<std::string> seed_hosts;
  for (const auto& s : nodes) seed_hosts.insert(s.host);
  std::map<std::pair<std::string, std::string>, std::int64_t> counts;
  for (const auto& e : edges) {
    if (!seed_hosts.count(HostOf(e.src_url))) continue;
    if (e.src_url == e.dst_url) continue;
    ++counts[{e.src_url, e.dst_url}];
  }
  PageGraph graph;
  for (const auto& [key, n] : counts) graph.edges.push_back({key.first, key.second, n});
  return graph;
}

inline std::vector<DomainEdge> AggregateDomains(const PageGraph& graph) {
  std::map<std::pair<std::string, std::string>, std::int64_t> weights;
  for (const auto& e : graph.edges) {
    std::string src = HostOf(e.src_url);
    std::string dst = HostOf(e.dst_url);
    if (src == dst) continue;
    weights[{std::move(src), std::move(dst)}] += e.multiplicity;
  }
  std::vector<DomainEdge> out;
  for (const auto& [key, w] : weights) out.push_back({key.first, key.second, w});
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

struct Corpus {
  std::vector<CrawlRecord> records;
  std::vector<std::string> raw_seeds;

  bool operator==(const Corpus&) const = default;
};

namespace detail {

inline constexpr std::string_view kHostWords[] = {"acme",  "globex", "initech", "umbrella", "stark",  "wayne",
                                                  "tyrell", "cyberdyne", "soylent", "hooli", "vandelay", "wonka"};
inline constexpr std::string_view kTlds[] = {".com", ".at", ".de", ".io", ".org"};
inline constexpr std::string_view kAnchorWords[] = {"partners", "about us", "research", "supplier", "news",
                                                    "careers", "contact", "innovation"};

inline std::string HostName(std::uint64_t seed, int index) {
  auto rng = StreamFor(seed, {"host", std::to_string(index)});
  std::string host(kHostWords[rng.NextBelow(std::size(kHostWords))]);
  host += "-" + std::to_string(index);
  host += kTlds[rng.NextBelow(std::size(kTlds))];
  return host;
}

inline std::string PagePath(int page) {
  if (page == 0) return "/";
  if (page % 3 == 0) return "/docs/p" + std::to_string(page) + "/";
  return "/p" + std::to_string(page);
}

inline std::string UpperHost(std::string host) {
  std::transform(host.begin(), host.end(), host.begin(), [](unsigned char c) { return std::toupper(c); });
  return host;
}

}  // namespace detail

/// Deterministic desk-scale crawl. Seed hosts get pages_per_host pages per
/// time id; a few non-seed hosts are crawled too. Links exercise absolute,
/// scheme-relative, root-relative, relative, fragment, and non-web hrefs.
inline Corpus GenerateCorpus(std::uint64_t seed, int n_hosts, int pages_per_host,
                             const std::vector<std::string>& time_ids) {
  if (n_hosts < 1 || pages_per_host < 1 || time_ids.empty()) {
    throw Error(Errc::kInvalidArgument, "corpus sizes must be >= 1");
  }
  Corpus corpus;
  std::vector<std::string> hosts;
  for (int i = 0; i < n_hosts; ++i) hosts.push_back(detail::HostName(seed, i));
  const int n_external = n_hosts / 4;  // none for tiny corpora: one host means no inter-domain links
  std::vector<std::string> externals;
  for (int i = 0; i < n_external; ++i) externals.push_back("ext-" + std::to_string(i) + ".example.net");

  auto seed_rng = StreamFor(seed, {"seeds"});
  for (const auto& host : hosts) {
    switch (seed_rng.NextBelow(4)) {
      case 0: corpus.raw_seeds.push_back("https://" + host + "/"); break;
      case 1: corpus.raw_seeds.push_back("http://" + detail::UpperHost(host)); break;
      case 2: corpus.raw_seeds.push_back(host); break;
      default: corpus.raw_seeds.push_back("https://" + host + "/#home"); break;
    }
    if (seed_rng.NextBelow(5) == 0) corpus.raw_seeds.push_back("HTTPS://" + detail::UpperHost(host) + "/");
  }
  corpus.raw_seeds.push_back("not a url");

  for (const auto& time_id : time_ids) {
    auto rng = StreamFor(seed, {"links", time_id});
    auto make_body = [&](const std::string& host, int page) {
      std::string body = "<html><body><h1>" + host + "</h1>\n";
      const int n_links = static_cast<int>(rng.NextBelow(6));
      for (int l = 0; l < n_links; ++l) {
        const std::string text(detail::kAnchorWords[rng.NextBelow(std::size(detail::kAnchorWords))]);
        std::string href;
        const int target_page = static_cast<int>(rng.NextBelow(static_cast<std::uint64_t>(pages_per_host)));
        const std::string& other = hosts[rng.NextBelow(hosts.size())];
        switch (rng.NextBelow(10)) {
          case 0: href = "https://" + other + detail::PagePath(target_page); break;
          case 1: href = "http://" + detail::UpperHost(other) + detail::PagePath(target_page) + "?ref=" + host; break;
          case 2: href = "//" + other + detail::PagePath(target_page) + "#section"; break;
          case 3: href = detail::PagePath(target_page); break;
          case 4: href = "p" + std::to_string(target_page); break;
          case 5: href = "../p" + std::to_string(target_page); break;
          case 6: href = "#top"; break;
          case 7:
            href = externals.empty() ? "https://" + other + "/x" + std::to_string(target_page)
                                     : "https://" + externals[rng.NextBelow(externals.size())] + "/x" +
                                           std::to_string(target_page);
            break;
          case 8: href = "mailto:info@" + host; break;
          default: href = "https://" + other + "//" + "p" + std::to_string(target_page) + "/"; break;
        }
        const char* quote = rng.NextBelow(3) == 0 ? "'" : "\"";
        body += "<p>See <a class=\"ref\" href=" + std::string(quote) + href + quote + ">" + text + "</a></p>\n";
      }
      if (page == 0 && rng.NextBelow(4) == 0) body += "<A HREF=\"/\">Home</A>\n";
      body += "</body></html>";
      return body;
    };
    for (const auto& host : hosts) {
      for (int page = 0; page < pages_per_host; ++page) {
        const std::string body = make_body(host, page);
        corpus.records.push_back({"https://" + host + detail::PagePath(page), time_id, body});
      }
    }
    for (const auto& ext : externals) {
      corpus.records.push_back({"https://" + ext + "/", time_id, make_body(ext, 0)});
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Line formats. Each materialized output is a sorted list of JSON lines.
// ---------------------------------------------------------------------------

inline std::string ToLine(const CrawlRecord& r) {
  return nlohmann::json{{"body", r.body}, {"fetched_at", r.fetched_at}, {"url", r.url}}.dump();
}

inline CrawlRecord CrawlRecordFromLine(const std::string& line) {
  try {
    auto j = nlohmann::json::parse(line);
    return {j.at("url").get<std::string>(), j.at("fetched_at").get<std::string>(), j.at("body").get<std::string>()};
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::kParseError, std::string("corpus record: ") + e.what());
  }
}

inline std::string ToLine(const SeedNode& s) {
  return nlohmann::json{{"host", s.host}, {"normalized_url", s.normalized_url}}.dump();
}

inline std::string ToLine(const PageEdge& e) {
  nlohmann::json j{{"dst_url", e.dst_url}, {"src_url", e.src_url}};
  j["anchor_text"] = e.anchor_text ? nlohmann::json(*e.anchor_text) : nlohmann::json(nullptr);
  return j.dump();
}

inline std::string ToLine(const GraphEdge& e) {
  return nlohmann::json{{"dst_url", e.dst_url}, {"multiplicity", e.multiplicity}, {"src_url", e.src_url}}.dump();
}

inline std::string ToLine(const DomainEdge& e) {
  return nlohmann::json{{"dst_domain", e.dst_domain}, {"src_domain", e.src_domain}, {"weight", e.weight}}.dump();
}

template <typename T>
std::vector<std::string> ToLines(const std::vector<T>& items) {
  std::vector<std::string> lines;
  lines.reserve(items.size());
  for (const auto& item : items) lines.push_back(ToLine(item));
  std::sort(lines.begin(), lines.end());
  return lines;
}

inline std::vector<SeedNode> SeedsFromLines(const std::vector<std::string>& lines) {
  std::vector<SeedNode> out;
  for (const auto& line : lines) {
    auto j = nlohmann::json::parse(line);
    out.push_back({j.at("normalized_url").get<std::string>(), j.at("host").get<std::string>()});
  }
  return out;
}

inline std::vector<PageEdge> EdgesFromLines(const std::vector<std::string>& lines) {
  std::vector<PageEdge> out;
  for (const auto& line : lines) {
    auto j = nlohmann::json::parse(line);
    std::optional<std::string> text;
    if (j.contains("anchor_text") && j.at("anchor_text").is_string()) text = j.at("anchor_text").get<std::string>();
    out.push_back({j.at("src_url").get<std::string>(), j.at("dst_url").get<std::string>(), std::move(text)});
  }
  return out;
}

inline PageGraph GraphFromLines(const std::vector<std::string>& lines) {
  PageGraph g;
  for (const auto& line : lines) {
    auto j = nlohmann::json::parse(line);
    g.edges.push_back(
        {j.at("src_url").get<std::string>(), j.at("dst_url").get<std::string>(), j.at("multiplicity").get<std::int64_t>()});
  }
  std::sort(g.edges.begin(), g.edges.end());
  return g;
}

// ---------------------------------------------------------------------------
// Partitioned execution
// ---------------------------------------------------------------------------

enum class Stage { kNodesOnly, kExtractEdges, kBuildGraph, kAggregateDomains };

inline std::optional<Stage> StageByName(std::string_view name) {
  if (name == "nodes_only" || name == "nodes") return Stage::kNodesOnly;
  if (name == "extract_edges" || name == "edges") return Stage::kExtractEdges;
  if (name == "build_graph" || name == "graph") return Stage::kBuildGraph;
  if (name == "aggregate_domains" || name == "graph_aggr") return Stage::kAggregateDomains;
  return std::nullopt;
}

/// Seeds belonging to one domain segment.
inline std::vector<SeedNode> SeedsForSegment(const std::vector<SeedNode>& seeds, int n_segments, int segment) {
  std::vector<SeedNode> out;
  for (const auto& s : seeds) {
    if (AssignDomainSegment(s.host, n_segments) == segment) out.push_back(s);
  }
  return out;
}

inline std::vector<CrawlRecord> RecordsForTime(const std::vector<CrawlRecord>& records, const std::string& time_id) {
  std::vector<CrawlRecord> out;
  for (const auto& r : records) {
    if (r.fetched_at == time_id) out.push_back(r);
  }
  return out;
}

struct PartitionOutputs {
  std::vector<std::string> nodes;
  std::vector<std::string> edges;
  std::vector<std::string> graph;
  std::vector<std::string> graph_aggr;

  bool operator==(const PartitionOutputs&) const = default;
};

/// All four stages for one (time id, segment) partition.
inline PartitionOutputs RunPartition(const Corpus& corpus, const std::string& time_id, int n_segments, int segment) {
  const auto seeds = SeedsForSegment(NodesOnly(corpus.raw_seeds).seeds, n_segments, segment);
  const auto edges = ExtractEdges(RecordsForTime(corpus.records, time_id), seeds).edges;
  const auto graph = BuildGraph(seeds, edges);
  return {ToLines(seeds), ToLines(edges), ToLines(graph.edges), ToLines(AggregateDomains(graph))};
}

}  // namespace costflow::crawl
