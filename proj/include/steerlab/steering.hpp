#pragma once

// Steering: scale the additive contributions of the top-k ranked components
// by a shared multiplier and measure next-token accuracy.

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "steerlab/errors.hpp"
#include "steerlab/model.hpp"
#include "steerlab/parallel.hpp"
#include "steerlab/ranking.hpp"
#include "steerlab/tasks.hpp"

namespace steerlab {

inline SteerPlan build_plan(const RankedList& ranked, std::size_t k, float alpha) {
  if (!(alpha > 0.0f) || !std::isfinite(alpha)) throw ConfigError("alpha must be a positive finite number");
  SteerPlan plan;
  for (const auto& id : ranked.top(k)) plan.entries.push_back({id, alpha});
  return plan;
}

// Top-k of each list, heads first; each list is cut independently.
inline SteerPlan build_joint_plan(const RankedList& heads, std::size_t k_heads, const RankedList& neurons,
                                  std::size_t k_neurons, float alpha) {
  SteerPlan plan = build_plan(heads, k_heads, alpha);
  for (const auto& e : build_plan(neurons, k_neurons, alpha).entries) plan.entries.push_back(e);
  return plan;
}

inline void validate_plan(const ModelConfig& cfg, const SteerPlan& plan) {
  for (const auto& e : plan.entries) {
    validate_component(cfg, e.component);
    if (!(e.alpha > 0.0f)) throw ConfigError("alpha for " + e.component.label() + " must be positive");
  }
}

// Fraction of examples whose argmax next token equals the target.
inline double evaluate_steered(const Engine& engine, const SteerPlan& plan, std::span<const Example> examples,
                               int threads = 1) {
  if (examples.empty()) return 0.0;
  std::vector<char> hit(examples.size());
  parallel_for(examples.size(), threads, [&](std::size_t i) {
    hit[i] = engine.next_token(examples[i].prompt_tokens, plan) == examples[i].target_token ? 1 : 0;
  });
  std::size_t n = 0;
  for (char h : hit) n += static_cast<std::size_t>(h);
  return double(n) / double(examples.size());
}

inline std::array<double, 4> evaluate_tasks(const Engine& engine, const SteerPlan& plan,
                                            const std::array<std::vector<Example>, 4>& sets, int threads = 1) {
  std::array<double, 4> acc{};
  for (std::size_t t = 0; t < 4; ++t) acc[t] = evaluate_steered(engine, plan, sets[t], threads);
  return acc;
}

inline std::vector<float> default_alpha_grid() {
  std::vector<float> grid;
  for (int i = 0; i < 10; ++i) grid.push_back(static_cast<float>(11 + i) / 10.0f);
  return grid;
}

struct AlphaPoint {
  float alpha = 1.0f;
  std::array<double, 4> accuracy{};
  double mean_accuracy = 0.0;
};

struct AlphaSearchResult {
  std::size_t k = 0;
  std::vector<AlphaPoint> grid;
  float selected_alpha = 1.0f;
  double selected_mean = 0.0;
};

// Picks the alpha maximizing the unweighted mean dev accuracy over the four
// sub-tasks; ties go to the smallest alpha.
inline AlphaSearchResult search_alpha(const Engine& engine, const RankedList& ranked, std::size_t k,
                                      const std::array<std::vector<Example>, 4>& dev,
                                      std::vector<float> grid = default_alpha_grid(), int threads = 1) {
  if (grid.empty()) throw ConfigError("alpha grid is empty");
  std::sort(grid.begin(), grid.end());
  AlphaSearchResult res;
  res.k = k;
  for (float a : grid) {
    AlphaPoint p;
    p.alpha = a;
    p.accuracy = evaluate_tasks(engine, build_plan(ranked, k, a), dev, threads);
    for (double v : p.accuracy) p.mean_accuracy += v / 4.0;
    res.grid.push_back(p);
  }
  const AlphaPoint* best = &res.grid.front();
  for (const auto& p : res.grid)
    if (p.mean_accuracy > best->mean_accuracy) best = &p;
  res.selected_alpha = best->alpha;
  res.selected_mean = best->mean_accuracy;
  return res;
}

struct SweepPoint {
  std::size_t k = 0;
  std::array<double, 4> accuracy{};
};

inline std::vector<std::size_t> default_k_values() { return {0, 5, 10, 20, 40, 60}; }

inline std::vector<SweepPoint> sweep_k(const Engine& engine, const RankedList& ranked,
                                       const std::vector<std::size_t>& ks, float alpha,
                                       const std::array<std::vector<Example>, 4>& test, int threads = 1) {
  std::vector<SweepPoint> out;
  for (std::size_t k : ks) out.push_back({k, evaluate_tasks(engine, build_plan(ranked, k, alpha), test, threads)});
  return out;
}

inline void to_json(nlohmann::json& j, const AlphaPoint& p) {
  j = {{"alpha", widen_decimal(p.alpha)}, {"accuracy", p.accuracy}, {"mean_accuracy", p.mean_accuracy}};
}
inline void to_json(nlohmann::json& j, const AlphaSearchResult& r) {
  j = {{"k", r.k}, {"grid", r.grid}, {"selected_alpha", widen_decimal(r.selected_alpha)}, {"selected_mean_accuracy", r.selected_mean}};
}
inline void to_json(nlohmann::json& j, const SweepPoint& p) { j = {{"k", p.k}, {"accuracy", p.accuracy}}; }

}  // namespace steerlab
