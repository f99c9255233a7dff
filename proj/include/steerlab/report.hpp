#pragma once

// Flat-file exports: CSV tables for component reports and figures, the
// top-k overlap between two rankings, and the run record.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "steerlab/attribution.hpp"
#include "steerlab/errors.hpp"
#include "steerlab/patching.hpp"
#include "steerlab/ranking.hpp"
#include "steerlab/steering.hpp"

namespace steerlab {

// Shortest decimal that round-trips through double, so reruns compare equal.
inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw BundleError("cannot write " + path.string());
  out << text;
  if (!out) throw BundleError("write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BundleError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

inline void to_json(nlohmann::json& j, const ComponentReport& r) {
  j = {{"component", r.id},
       {"accuracy", r.accuracy},
       {"recall", r.recall},
       {"precision", r.precision},
       {"f1", r.f1},
       {"mean_recall", r.mean_recall},
       {"mean_precision", r.mean_precision},
       {"mean_f1", r.mean_f1},
       {"generalizability", r.generalizability},
       {"nonpositive_max", r.nonpositive_max},
       {"recall_only", r.recall_only}};
}

inline void from_json(const nlohmann::json& j, ComponentReport& r) {
  try {
    j.at("component").get_to(r.id);
    j.at("accuracy").get_to(r.accuracy);
    j.at("recall").get_to(r.recall);
    j.at("precision").get_to(r.precision);
    j.at("f1").get_to(r.f1);
    j.at("mean_recall").get_to(r.mean_recall);
    j.at("mean_precision").get_to(r.mean_precision);
    j.at("mean_f1").get_to(r.mean_f1);
    j.at("generalizability").get_to(r.generalizability);
    j.at("nonpositive_max").get_to(r.nonpositive_max);
    j.at("recall_only").get_to(r.recall_only);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed component report: ") + e.what());
  }
}

// |top-k_a(A) ∩ top-k_b(B)| / k_a
inline double overlap(const RankedList& a, std::size_t k_a, const RankedList& b, std::size_t k_b) {
  if (k_a == 0) throw ConfigError("k_a must be >= 1");
  const auto ta = a.top(k_a);
  const auto tb = b.top(k_b);
  const std::set<ComponentId> sb(tb.begin(), tb.end());
  const auto shared = std::count_if(ta.begin(), ta.end(), [&](const ComponentId& c) { return sb.count(c) > 0; });
  return double(shared) / double(k_a);
}

inline std::string reports_csv(const std::vector<ComponentReport>& reports) {
  std::ostringstream o;
  o << "component,layer,index,kind";
  for (const char* m : {"accuracy", "recall", "precision", "f1"})
    for (int n = 1; n <= 4; ++n) o << ',' << m << '_' << n;
  o << ",mean_recall,mean_precision,mean_f1,generalizability,nonpositive_max\n";
  for (const auto& r : reports) {
    o << r.id.label() << ',' << r.id.layer << ',' << r.id.index << ',' << (r.id.is_head() ? "head" : "neuron");
    for (const auto* arr : {&r.accuracy, &r.recall, &r.precision, &r.f1})
      for (double v : *arr) o << ',' << fmt(v);
    o << ',' << fmt(r.mean_recall) << ',' << fmt(r.mean_precision) << ',' << fmt(r.mean_f1) << ','
      << r.generalizability << ',' << r.nonpositive_max << '\n';
  }
  return o.str();
}

// Per-sub-task accuracy histogram; components below 0.01 accuracy are left
// out. Bins are [0.01, 0.1), [0.1, 0.2), ..., [0.9, 1.0].
inline std::string accuracy_histogram_csv(const std::vector<ComponentReport>& reports) {
  std::ostringstream o;
  o << "task,bin_low,bin_high,count\n";
  for (std::size_t t = 0; t < 4; ++t) {
    std::array<int, 10> bins{};
    for (const auto& r : reports) {
      const double a = r.accuracy[t];
      if (a < 0.01) continue;
      bins[static_cast<std::size_t>(std::min(9, static_cast<int>(a * 10.0)))]++;
    }
    for (int b = 0; b < 10; ++b)
      o << to_string(kParenTasks[t]) << ',' << fmt(b == 0 ? 0.01 : b / 10.0) << ',' << fmt((b + 1) / 10.0) << ','
        << bins[static_cast<std::size_t>(b)] << '\n';
  }
  return o.str();
}

inline std::string precision_recall_csv(const std::vector<ComponentReport>& reports) {
  std::ostringstream o;
  o << "component,task,precision,recall,f1\n";
  for (const auto& r : reports)
    for (std::size_t t = 0; t < 4; ++t)
      o << r.id.label() << ',' << to_string(kParenTasks[t]) << ',' << fmt(r.precision[t]) << ',' << fmt(r.recall[t])
        << ',' << fmt(r.f1[t]) << '\n';
  return o.str();
}

// F1 of the top-k components of a ranking, per sub-task.
inline std::string f1_distribution_csv(const std::vector<ComponentReport>& reports, const RankedList& ranked,
                                       std::size_t k) {
  std::map<ComponentId, const ComponentReport*> by_id;
  for (const auto& r : reports) by_id[r.id] = &r;
  std::ostringstream o;
  o << "rank,component,task,f1\n";
  const auto top = ranked.top(std::min(k, ranked.entries.size()));
  for (std::size_t i = 0; i < top.size(); ++i) {
    const auto it = by_id.find(top[i]);
    if (it == by_id.end()) throw ConfigError("ranked component " + top[i].label() + " has no report");
    for (std::size_t t = 0; t < 4; ++t)
      o << i + 1 << ',' << top[i].label() << ',' << to_string(kParenTasks[t]) << ',' << fmt(it->second->f1[t])
        << '\n';
  }
  return o.str();
}

inline nlohmann::json neuron_extremes_json(const NeuronExtremes& e, const Tokenizer* tok) {
  auto list = [&](const std::vector<TokenLogit>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& t : v) {
      nlohmann::json x = {{"token_id", t.token}, {"logit", t.logit}};
      if (tok) x["text"] = tok->decode(t.token);
      a.push_back(x);
    }
    return a;
  };
  return {{"component", e.id},         {"top", list(e.top)},
          {"bottom", list(e.bottom)},  {"mean_coefficient", e.mean_coefficient},
          {"answer_in_top", e.answer_in_top}, {"answer_in_bottom", e.answer_in_bottom},
          {"dual_sign", e.dual_sign}};
}

inline std::string accuracy_csv(const std::vector<SweepPoint>& points, float alpha, const std::string& metric,
                                const std::array<TaskId, 4>& tasks = kParenTasks) {
  std::ostringstream o;
  o << "k,alpha,metric,task,accuracy\n";
  for (const auto& p : points)
    for (std::size_t t = 0; t < 4; ++t)
      o << p.k << ',' << fmt(p.k == 0 ? 1.0 : widen_decimal(alpha)) << ',' << metric << ',' << to_string(tasks[t]) << ',' << fmt(p.accuracy[t]) << '\n';
  return o.str();
}

inline std::string effects_csv(const std::vector<EffectTable>& tables) {
  std::ostringstream o;
  o << "task,layer,head,relative_position,mean_effect,count,undefined\n";
  for (const auto& t : tables)
    for (const auto& [key, cell] : t.cells) {
      const auto [l, h, rel] = key;
      o << to_string(t.task) << ',' << l << ',' << h << ',' << rel << ',' << fmt(cell.mean()) << ',' << cell.count
        << ',' << cell.undefined << '\n';
    }
  return o.str();
}

struct RunRecord {
  std::string run_id;
  std::string command;
  std::string bundle_hash;
  nlohmann::json config;
  std::vector<std::string> artifacts;
  std::map<std::string, double> timings_seconds;
};

inline void to_json(nlohmann::json& j, const RunRecord& r) {
  j = {{"run_id", r.run_id},       {"command", r.command},     {"bundle_hash", r.bundle_hash},
       {"config", r.config},       {"artifacts", r.artifacts}, {"timings_seconds", r.timings_seconds}};
}
inline void from_json(const nlohmann::json& j, RunRecord& r) {
  j.at("run_id").get_to(r.run_id);
  j.at("command").get_to(r.command);
  j.at("bundle_hash").get_to(r.bundle_hash);
  r.config = j.at("config");
  j.at("artifacts").get_to(r.artifacts);
  j.at("timings_seconds").get_to(r.timings_seconds);
}

// Run ids hash the config so identical configs land in the same directory.
inline std::string make_run_id(const std::string& command, const nlohmann::json& config) {
  const std::string text = config.dump();
  return command + "-" + sha256_hex(std::as_bytes(std::span(text.data(), text.size()))).substr(0, 12);
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace steerlab
