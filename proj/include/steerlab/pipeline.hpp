#pragma once

// End-to-end helpers shared by the command-line tool and the acceptance
// suite: dataset assembly, attribution of heads/neurons, and ranking.

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "steerlab/attribution.hpp"
#include "steerlab/errors.hpp"
#include "steerlab/ranking.hpp"
#include "steerlab/tasks.hpp"

namespace steerlab {

struct TaskData {
  std::array<TaskId, 4> tasks = kParenTasks;
  std::array<std::vector<Example>, 4> train, dev, test;

  const std::array<std::vector<Example>, 4>& split(Split s) const {
    return s == Split::train ? train : s == Split::dev ? dev : test;
  }
};

inline TaskData split_sets(const std::array<TaskId, 4>& tasks, const std::array<std::vector<Example>, 4>& all) {
  TaskData d;
  d.tasks = tasks;
  for (std::size_t t = 0; t < 4; ++t) {
    d.train[t] = select_split(all[t], Split::train);
    d.dev[t] = select_split(all[t], Split::dev);
    d.test[t] = select_split(all[t], Split::test);
  }
  return d;
}

inline TaskData make_paren_data(std::uint64_t seed, const Tokenizer& tok, ParenSplitSizes sizes = {}) {
  std::array<std::vector<Example>, 4> all;
  for (TaskId t : kParenTasks) all[task_slot(t)] = gen_paren_dataset(t, seed, tok, sizes);
  return split_sets(kParenTasks, all);
}

inline TaskData make_arith_data(std::uint64_t seed, const Tokenizer& tok, ArithSplitSizes sizes = {}) {
  std::array<std::vector<Example>, 4> all;
  for (TaskId t : kArithTasks) all[task_slot(t)] = gen_arith_dataset(t, seed, tok, sizes);
  return split_sets(kArithTasks, all);
}

inline std::filesystem::path dataset_path(const std::filesystem::path& dir, TaskId t) {
  return dir / (to_string(t) + ".jsonl");
}

// Reads <dir>/<task>.jsonl for each of the four tasks.
inline TaskData load_task_data(const std::filesystem::path& dir, const std::array<TaskId, 4>& tasks) {
  std::array<std::vector<Example>, 4> all;
  for (TaskId t : tasks) {
    const auto p = dataset_path(dir, t);
    if (!std::filesystem::exists(p)) throw UsageError("missing dataset " + p.string() + " (run gen-data first)");
    all[task_slot(t)] = read_jsonl(p);
    for (const auto& ex : all[task_slot(t)])
      if (ex.task != t) throw ValidationError(p.string() + " contains a " + to_string(ex.task) + " example");
  }
  return split_sets(tasks, all);
}

enum class ComponentSet { heads, neurons, both };

inline ComponentSet parse_component_set(const std::string& s) {
  if (s == "heads") return ComponentSet::heads;
  if (s == "neurons") return ComponentSet::neurons;
  if (s == "both") return ComponentSet::both;
  throw UsageError("unknown component set '" + s + "' (expected heads, neurons or both)");
}

struct ParenAttribution {
  std::vector<ComponentReport> heads;
  std::vector<ComponentReport> neurons;
  // mean final-position coefficient per sub-task, aligned with `neurons`
  std::vector<std::array<double, 4>> neuron_mean_coefficient;
  std::size_t neurons_total = 0;
};

inline ParenAttribution attribute_paren(const Engine& engine, const Tokenizer& tok, const TaskData& data,
                                        ComponentSet which, const PromotionConfig& cfg, std::uint64_t seed,
                                        int threads = 1) {
  cfg.validate();
  const auto answers = tok.answer_tokens();
  std::array<BalancedDataset, 4> balanced;
  for (TaskId t : kParenTasks) balanced[task_slot(t)] = gen_balanced_pr_dataset(t, data.train, seed);
  ParenAttribution out;
  if (which != ComponentSet::neurons) {
    const auto rd = collect_paren_readings(engine, all_heads(engine.config()), data.train, answers, nullptr, threads);
    out.heads = paren_reports(rd, balanced, cfg);
  }
  if (which != ComponentSet::heads) {
    const auto table = NeuronProjectionTable::compute(engine.weights(), answers, threads);
    out.neurons_total = table.neuron_count();
    const auto kept = table.retained(cfg.prefilter_depth);
    const auto rd = collect_paren_readings(engine, kept, data.train, answers, &table, threads);
    out.neurons = paren_reports(rd, balanced, cfg);
    for (std::size_t c = 0; c < kept.size(); ++c) {
      std::array<double, 4> m{};
      for (std::size_t t = 0; t < 4; ++t) m[t] = rd.mean_coefficient[t][c];
      out.neuron_mean_coefficient.push_back(m);
    }
  }
  return out;
}

inline int count_generalizing(const std::vector<ComponentReport>& reports, int min_tasks, int max_tasks) {
  int n = 0;
  for (const auto& r : reports) n += r.generalizability >= min_tasks && r.generalizability <= max_tasks ? 1 : 0;
  return n;
}

}  // namespace steerlab
