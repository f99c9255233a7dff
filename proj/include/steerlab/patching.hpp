#pragma once

// Activation-patching baseline. A corrupt prompt adds one "(" to a clean
// paren prompt, so the expected closing token grows by one paren (r -> r').
// A head's effect at a position is measured by running the clean prompt with
// that head output replaced by the corrupt run's value:
//
//   E = 1/2 [ (P_patched(r') - P_clean(r')) / P_clean(r')
//           + (P_clean(r)   - P_patched(r)) / P_patched(r) ]
//
// with probabilities from the full-vocabulary softmax at the final position.
// Positions are aggregated relative to the end of the prompt (0 = final
// token) because prompt lengths differ between examples.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "steerlab/errors.hpp"
#include "steerlab/model.hpp"
#include "steerlab/parallel.hpp"
#include "steerlab/ranking.hpp"
#include "steerlab/tasks.hpp"
#include "steerlab/tokenizer.hpp"

namespace steerlab {

struct PromptPair {
  TaskId task = TaskId::one_paren;
  int num = -1;
  std::vector<TokenId> clean;
  std::vector<TokenId> corrupt;
  TokenId r = 0;        // clean answer
  TokenId r_prime = 0;  // answer for the corrupt prompt
  // the (n+1)-paren closing string is not one token; its first token is used
  bool r_prime_first_token = false;
  int replaced_position = 0;  // index into `clean`
  // no single token for the widened paren token: "(" was inserted before it
  bool two_token_fallback = false;

  int corrupt_position(int clean_position) const {
    return two_token_fallback && clean_position >= replaced_position ? clean_position + 1 : clean_position;
  }
};

inline std::vector<PromptPair> gen_counterfactuals(const Example& clean, const Tokenizer& tok) {
  if (!is_paren(clean.task)) throw ConfigError("counterfactuals are defined for paren tasks only");
  const int n = paren_depth(clean.task);
  const auto next = tok.encode(std::string(static_cast<std::size_t>(n + 1), ')'));
  const auto open = tok.single_token("(");
  std::vector<PromptPair> out;
  for (std::size_t i = 0; i < clean.prompt_tokens.size(); ++i) {
    const std::string text = tok.decode(clean.prompt_tokens[i]);
    const auto at = text.find('(');
    if (at == std::string::npos) continue;
    PromptPair p;
    p.task = clean.task;
    p.num = clean.num;
    p.clean = clean.prompt_tokens;
    p.corrupt = clean.prompt_tokens;
    p.r = clean.target_token;
    p.r_prime = next.front();
    p.r_prime_first_token = next.size() > 1;
    p.replaced_position = static_cast<int>(i);
    std::string widened = text;
    widened.insert(at, "(");
    if (const auto single = tok.single_token(widened)) {
      p.corrupt[i] = *single;
    } else {
      if (!open) throw TokenError("tokenizer has no single \"(\" token");
      p.corrupt.insert(p.corrupt.begin() + static_cast<std::ptrdiff_t>(i), *open);
      p.two_token_fallback = true;
    }
    out.push_back(std::move(p));
  }
  return out;
}

struct FilterResult {
  std::vector<PromptPair> kept;
  std::size_t clean_incorrect = 0;  // pairs dropped because the clean prompt is answered wrongly
  std::size_t logit_failed = 0;     // pairs where the corrupt run does not prefer r' over r
  bool relaxed = false;             // logit criterion dropped because nothing survived it
};

inline FilterResult filter_counterfactuals(const Engine& engine, const std::vector<PromptPair>& pairs,
                                           int threads = 1) {
  std::vector<char> correct(pairs.size()), logit_ok(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    const auto& p = pairs[i];
    correct[i] = engine.next_token(p.clean) == p.r ? 1 : 0;
    const Vector l = engine.logits(p.corrupt);
    logit_ok[i] = l[static_cast<std::size_t>(p.r)] < l[static_cast<std::size_t>(p.r_prime)] ? 1 : 0;
  });
  FilterResult res;
  std::vector<PromptPair> correct_only;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!correct[i]) {
      ++res.clean_incorrect;
      continue;
    }
    correct_only.push_back(pairs[i]);
    if (logit_ok[i])
      res.kept.push_back(pairs[i]);
    else
      ++res.logit_failed;
  }
  if (res.kept.empty() && !correct_only.empty()) {
    res.kept = std::move(correct_only);
    res.relaxed = true;
  }
  return res;
}

// Effect score from the four probabilities; undefined when a denominator is 0.
inline std::optional<double> effect_score(double p_clean_r, double p_clean_rp, double p_patched_r,
                                          double p_patched_rp) {
  if (p_clean_rp == 0.0 || p_patched_r == 0.0) return std::nullopt;
  return 0.5 * ((p_patched_rp - p_clean_rp) / p_clean_rp + (p_clean_r - p_patched_r) / p_patched_r);
}

struct PairRuns {
  Trace clean;
  Trace corrupt;
};

inline PairRuns run_pair(const Engine& engine, const PromptPair& p) {
  return {engine.forward(p.clean), engine.forward(p.corrupt)};
}

inline Patch corrupt_patch(const PromptPair& p, const PairRuns& runs, const ComponentId& head, int clean_position) {
  const auto src = head_output(runs.corrupt, head.layer, head.index, p.corrupt_position(clean_position));
  return {head, clean_position, Vector(src.begin(), src.end())};
}

inline std::optional<double> patch_effect(const Engine& engine, const PromptPair& p, const PairRuns& runs,
                                          const ComponentId& head, int clean_position) {
  if (!head.is_head()) throw ComponentError("patching is defined for attention heads");
  validate_component(engine.weights().config, head);
  const PatchSet patches{corrupt_patch(p, runs, head, clean_position)};
  const Trace patched = engine.resume(runs.clean, head.layer, {}, patches);
  const auto pc = softmax_f64(runs.clean.logits);
  const auto pp = softmax_f64(patched.logits);
  const auto r = static_cast<std::size_t>(p.r), rp = static_cast<std::size_t>(p.r_prime);
  return effect_score(pc[r], pc[rp], pp[r], pp[rp]);
}

struct EffectCell {
  double sum = 0.0;
  std::size_t count = 0;
  std::size_t undefined = 0;

  double mean() const { return count ? sum / double(count) : 0.0; }
};

// Effects for one sub-task keyed by (layer, head, relative position).
struct EffectTable {
  TaskId task = TaskId::one_paren;
  std::size_t pairs = 0;
  bool relaxed = false;
  std::map<std::tuple<int, int, int>, EffectCell> cells;

  double final_position_effect(const ComponentId& head) const {
    const auto it = cells.find({head.layer, head.index, 0});
    return it == cells.end() ? 0.0 : it->second.mean();
  }
};

// Patches every head at every position (or only the final position) of each
// pair. Cells within a pair run in parallel; accumulation is sequential.
inline EffectTable compute_effects(const Engine& engine, TaskId task, const std::vector<PromptPair>& pairs,
                                   bool final_position_only = false, int threads = 1) {
  const auto& cfg = engine.weights().config;
  EffectTable table;
  table.task = task;
  table.pairs = pairs.size();
  for (const auto& p : pairs) {
    const PairRuns runs = run_pair(engine, p);
    const int n = static_cast<int>(p.clean.size());
    const int first = final_position_only ? n - 1 : 0;
    const int positions = n - first;
    const std::size_t cells = static_cast<std::size_t>(cfg.n_layers * cfg.n_heads * positions);
    std::vector<std::optional<double>> values(cells);
    parallel_for(cells, threads, [&](std::size_t idx) {
      const int pos = first + static_cast<int>(idx % static_cast<std::size_t>(positions));
      const int hh = static_cast<int>(idx / static_cast<std::size_t>(positions));
      values[idx] = patch_effect(engine, p, runs, ComponentId::head(hh / cfg.n_heads, hh % cfg.n_heads), pos);
    });
    for (std::size_t idx = 0; idx < cells; ++idx) {
      const int pos = first + static_cast<int>(idx % static_cast<std::size_t>(positions));
      const int hh = static_cast<int>(idx / static_cast<std::size_t>(positions));
      auto& cell = table.cells[{hh / cfg.n_heads, hh % cfg.n_heads, pos - (n - 1)}];
      if (values[idx]) {
        cell.sum += *values[idx];
        ++cell.count;
      } else {
        ++cell.undefined;
      }
    }
  }
  return table;
}

// Heads ordered by the final-position effect averaged over the given tables.
inline RankedList rank_heads_by_effect(const std::vector<EffectTable>& tables, const ModelConfig& cfg) {
  if (tables.empty()) throw ConfigError("no effect tables to rank");
  RankedList list;
  list.metric = RankMetric::effect;
  for (const auto& head : [&] {
         std::vector<ComponentId> v;
         for (int l = 0; l < cfg.n_layers; ++l)
           for (int h = 0; h < cfg.n_heads; ++h) v.push_back(ComponentId::head(l, h));
         return v;
       }()) {
    double s = 0.0;
    for (const auto& t : tables) s += t.final_position_effect(head);
    list.entries.push_back({head, 0, s / double(tables.size())});
  }
  std::sort(list.entries.begin(), list.entries.end(), ranked_before);
  return list;
}

struct HeadPositionScore {
  ComponentId head;
  int relative_position = 0;
  double effect = 0.0;
};

// (head, relative position) entries ordered by effect averaged over tables.
inline std::vector<HeadPositionScore> rank_head_positions(const std::vector<EffectTable>& tables) {
  if (tables.empty()) throw ConfigError("no effect tables to rank");
  std::map<std::tuple<int, int, int>, double> sums;
  for (const auto& t : tables)
    for (const auto& [key, cell] : t.cells) sums[key] += cell.mean();
  std::vector<HeadPositionScore> out;
  for (const auto& [key, s] : sums) {
    const auto [l, h, rel] = key;
    out.push_back({ComponentId::head(l, h), rel, s / double(tables.size())});
  }
  std::stable_sort(out.begin(), out.end(), [](const HeadPositionScore& a, const HeadPositionScore& b) {
    if (a.effect != b.effect) return a.effect > b.effect;
    if (a.relative_position != b.relative_position) return a.relative_position > b.relative_position;
    return a.head < b.head;
  });
  return out;
}

// Heads kept at every position plus individual (head, relative position)
// entries. Everything else is patched from the corrupt run.
struct Circuit {
  std::set<ComponentId> heads;
  std::set<std::pair<ComponentId, int>> head_positions;

  bool contains(const ComponentId& head, int relative_position) const {
    return heads.count(head) > 0 || head_positions.count({head, relative_position}) > 0;
  }

  static Circuit from_heads(const std::vector<ComponentId>& ids) { return {{ids.begin(), ids.end()}, {}}; }

  static Circuit from_head_positions(const std::vector<HeadPositionScore>& ranked, std::size_t k) {
    if (k > ranked.size()) throw ConfigError("circuit size exceeds the ranked entries");
    Circuit c;
    for (std::size_t i = 0; i < k; ++i) c.head_positions.insert({ranked[i].head, ranked[i].relative_position});
    return c;
  }
};

inline Trace circuit_run(const Engine& engine, const PromptPair& p, const PairRuns& runs, const Circuit& circuit) {
  const auto& cfg = engine.weights().config;
  const int n = static_cast<int>(p.clean.size());
  PatchSet patches;
  for (int l = 0; l < cfg.n_layers; ++l)
    for (int h = 0; h < cfg.n_heads; ++h)
      for (int pos = 0; pos < n; ++pos) {
        const auto head = ComponentId::head(l, h);
        if (!circuit.contains(head, pos - (n - 1))) patches.push_back(corrupt_patch(p, runs, head, pos));
      }
  return engine.forward(p.clean, {}, patches);
}

inline double normalized_logit(const Vector& logits, TokenId correct) {
  return double(logits.at(static_cast<std::size_t>(correct))) / double(*std::max_element(logits.begin(), logits.end()));
}

struct FaithfulnessResult {
  double mean = 0.0;
  std::size_t used = 0;
  std::size_t excluded = 0;  // |NL_model - NL_corrupt| below 1e-9
  std::vector<std::optional<double>> per_pair;
};

inline FaithfulnessResult faithfulness(const Engine& engine, const Circuit& circuit,
                                       const std::vector<PromptPair>& pairs, int threads = 1) {
  FaithfulnessResult res;
  res.per_pair.resize(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    const auto& p = pairs[i];
    const PairRuns runs = run_pair(engine, p);
    const double nl_model = normalized_logit(runs.clean.logits, p.r);
    const double nl_corrupt = normalized_logit(runs.corrupt.logits, p.r);
    const double den = nl_model - nl_corrupt;
    if (std::abs(den) < 1e-9) return;
    const double nl_circuit = normalized_logit(circuit_run(engine, p, runs, circuit).logits, p.r);
    res.per_pair[i] = (nl_circuit - nl_corrupt) / den;
  });
  double s = 0.0;
  for (const auto& f : res.per_pair) {
    if (!f) {
      ++res.excluded;
      continue;
    }
    s += *f;
    ++res.used;
  }
  res.mean = res.used ? s / double(res.used) : 0.0;
  return res;
}

inline void to_json(nlohmann::json& j, const PromptPair& p) {
  j = {{"task", to_string(p.task)},
       {"num", p.num},
       {"clean", p.clean},
       {"corrupt", p.corrupt},
       {"r", p.r},
       {"r_prime", p.r_prime},
       {"r_prime_first_token", p.r_prime_first_token},
       {"replaced_position", p.replaced_position},
       {"two_token_fallback", p.two_token_fallback}};
}

}  // namespace steerlab
