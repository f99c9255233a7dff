#pragma once

// Orders attributed components: generalizability (number of paren sub-tasks
// with accuracy above threshold) descending, then the chosen mean metric
// descending, then (layer, index) ascending so the order is total.

#include <algorithm>
#include <string>
#include <vector>

#include <json.hpp>

#include "steerlab/attribution.hpp"
#include "steerlab/errors.hpp"

namespace steerlab {

// `effect` orders heads by mean patching effect (no generalizability stage).
enum class RankMetric { recall, precision, f1, effect };

inline std::string to_string(RankMetric m) {
  switch (m) {
    case RankMetric::recall: return "recall";
    case RankMetric::precision: return "precision";
    case RankMetric::f1: return "f1";
    case RankMetric::effect: return "effect";
  }
  return "?";
}

inline RankMetric parse_rank_metric(const std::string& s) {
  if (s == "recall") return RankMetric::recall;
  if (s == "precision") return RankMetric::precision;
  if (s == "f1") return RankMetric::f1;
  if (s == "effect") return RankMetric::effect;
  throw UsageError("unknown ranking metric '" + s + "' (expected recall, precision or f1)");
}

inline double metric_value(const ComponentReport& r, RankMetric m) {
  switch (m) {
    case RankMetric::recall: return r.mean_recall;
    case RankMetric::precision: return r.mean_precision;
    case RankMetric::f1: return r.mean_f1;
    case RankMetric::effect: break;
  }
  return 0.0;
}

struct RankedEntry {
  ComponentId id;
  int generalizability = 0;
  double metric = 0.0;
};

struct RankedList {
  RankMetric metric = RankMetric::f1;
  std::vector<RankedEntry> entries;

  std::vector<ComponentId> top(std::size_t k) const {
    if (k > entries.size())
      throw ConfigError("requested top " + std::to_string(k) + " of a ranking with " +
                        std::to_string(entries.size()) + " entries");
    std::vector<ComponentId> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(entries[i].id);
    return out;
  }
};

inline bool ranked_before(const RankedEntry& a, const RankedEntry& b) {
  if (a.generalizability != b.generalizability) return a.generalizability > b.generalizability;
  if (a.metric != b.metric) return a.metric > b.metric;
  if (a.id.layer != b.id.layer) return a.id.layer < b.id.layer;
  if (a.id.kind != b.id.kind) return a.id.kind < b.id.kind;
  return a.id.index < b.id.index;
}

inline RankedList rank_components(const std::vector<ComponentReport>& reports, RankMetric metric) {
  if (reports.empty()) throw ConfigError("cannot rank an empty component set");
  RankedList list;
  list.metric = metric;
  for (const auto& r : reports) list.entries.push_back({r.id, r.generalizability, metric_value(r, metric)});
  std::sort(list.entries.begin(), list.entries.end(), ranked_before);
  return list;
}

// Arithmetic ranking has no accuracy stage: order by mean recall alone.
inline RankedList rank_by_recall_only(const std::vector<ComponentReport>& reports) {
  if (reports.empty()) throw ConfigError("cannot rank an empty component set");
  RankedList list;
  list.metric = RankMetric::recall;
  for (const auto& r : reports) list.entries.push_back({r.id, 0, r.mean_recall});
  std::sort(list.entries.begin(), list.entries.end(), ranked_before);
  return list;
}

inline void to_json(nlohmann::json& j, const RankedEntry& e) {
  j = {{"component", e.id}, {"generalizability", e.generalizability}, {"metric", e.metric}};
}
inline void from_json(const nlohmann::json& j, RankedEntry& e) {
  j.at("component").get_to(e.id);
  j.at("generalizability").get_to(e.generalizability);
  j.at("metric").get_to(e.metric);
}
inline void to_json(nlohmann::json& j, const RankedList& l) {
  j = {{"metric", to_string(l.metric)}, {"entries", l.entries}};
}
inline void from_json(const nlohmann::json& j, RankedList& l) {
  l.metric = parse_rank_metric(j.at("metric").get<std::string>());
  j.at("entries").get_to(l.entries);
}

}  // namespace steerlab
