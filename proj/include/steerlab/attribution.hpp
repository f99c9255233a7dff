#pragma once

// Logit-lens attribution of final-position component activations.
//
// A component's activation h_c (H^{l,h} for a head, m_i v_i for a neuron) is
// read as vocabulary logits l_c = h_c^T W_U without the final LayerNorm.
// Two verdicts are derived from l_c:
//
//   task_correct: l_c[t] >= max(l_c[T_neg])      (ties count as correct)
//   promotes:     l_c[t] >= tau * max(l_c)        (evaluated literally, also
//                                                  when max(l_c) <= 0)
//
// Neuron logits are computed as m_i * (v_i^T W_U) so the input-independent
// projection of v_i (and its max/min over the vocabulary) is shared across
// prompts.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "steerlab/errors.hpp"
#include "steerlab/model.hpp"
#include "steerlab/parallel.hpp"
#include "steerlab/tasks.hpp"

namespace steerlab {

struct PromotionConfig {
  double tau = 0.5;
  double accuracy_threshold = 0.7;
  int prefilter_depth = 50;

  void validate() const {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("promotion threshold must lie in [0, 1]");
    if (!(accuracy_threshold > 0.0 && accuracy_threshold <= 1.0))
      throw ConfigError("accuracy threshold must lie in (0, 1]");
    if (prefilter_depth < 1) throw ConfigError("prefilter depth must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Verdicts

inline bool task_correct_value(float target_logit, std::span<const float> distractor_logits) {
  if (distractor_logits.empty()) throw ConfigError("task_correct needs a non-empty distractor set");
  return target_logit >= *std::max_element(distractor_logits.begin(), distractor_logits.end());
}

inline bool task_correct(std::span<const float> logits, TokenId target, std::span<const TokenId> distractors) {
  if (distractors.empty()) throw ConfigError("task_correct needs a non-empty distractor set");
  auto in_range = [&](TokenId t) { return t >= 0 && static_cast<std::size_t>(t) < logits.size(); };
  if (!in_range(target)) throw TokenError("target token out of range");
  std::vector<float> neg;
  for (TokenId t : distractors) {
    if (t == target) throw ConfigError("target token must not be a distractor");
    if (!in_range(t)) throw TokenError("distractor token out of range");
    neg.push_back(logits[static_cast<std::size_t>(t)]);
  }
  return task_correct_value(logits[static_cast<std::size_t>(target)], neg);
}

inline bool promotes_value(float target_logit, float max_logit, double tau) {
  return static_cast<double>(target_logit) >= tau * static_cast<double>(max_logit);
}

inline bool promotes(std::span<const float> logits, TokenId target, double tau) {
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) throw TokenError("target token out of range");
  if (logits.empty()) throw DimensionError("promotes: empty logits");
  const float mx = *std::max_element(logits.begin(), logits.end());
  return promotes_value(logits[static_cast<std::size_t>(target)], mx, tau);
}

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Zero denominators yield 0 for the affected metric.
inline PrecisionRecall precision_recall_from_counts(std::size_t true_pos, std::size_t false_pos,
                                                    std::size_t positives) {
  PrecisionRecall pr;
  if (positives > 0) pr.recall = double(true_pos) / double(positives);
  if (true_pos + false_pos > 0) pr.precision = double(true_pos) / double(true_pos + false_pos);
  if (pr.precision + pr.recall > 0.0) pr.f1 = 2.0 * pr.precision * pr.recall / (pr.precision + pr.recall);
  return pr;
}

// ---------------------------------------------------------------------------
// Input-independent neuron projections and the prefilter

struct NeuronProjection {
  float max_logit = 0.0f;
  float min_logit = 0.0f;
  std::array<float, 4> answer_logits{};
  // 0 = highest logit; ties broken by ascending token id
  std::array<std::int64_t, 4> answer_rank{};
};

class NeuronProjectionTable {
 public:
  static NeuronProjectionTable compute(const Weights& w, const AnswerTokenSet& answers, int threads = 1) {
    NeuronProjectionTable table;
    table.layers_ = w.config.n_layers;
    table.d_mlp_ = w.config.d_mlp;
    table.vocab_ = static_cast<std::int64_t>(w.unembedding_rows.rows());
    table.answers_ = answers;
    const std::size_t total = static_cast<std::size_t>(table.layers_) * static_cast<std::size_t>(table.d_mlp_);
    table.entries_.resize(total);
    parallel_for(total, threads, [&](std::size_t idx) {
      const auto l = idx / static_cast<std::size_t>(table.d_mlp_);
      const auto i = idx % static_cast<std::size_t>(table.d_mlp_);
      const Vector proj = project_logits(w, w.layers[l].w_ff_out.row(i));
      auto& e = table.entries_[idx];
      const auto [mn, mx] = std::minmax_element(proj.begin(), proj.end());
      e.min_logit = *mn;
      e.max_logit = *mx;
      for (std::size_t a = 0; a < 4; ++a) {
        const TokenId tok = answers.ids[a];
        const float x = proj[static_cast<std::size_t>(tok)];
        e.answer_logits[a] = x;
        std::int64_t rank = 0;
        for (std::size_t v = 0; v < proj.size(); ++v)
          if (proj[v] > x || (proj[v] == x && static_cast<TokenId>(v) < tok)) ++rank;
        e.answer_rank[a] = rank;
      }
    });
    return table;
  }

  const NeuronProjection& at(int layer, int neuron) const {
    if (layer < 0 || layer >= layers_ || neuron < 0 || neuron >= d_mlp_)
      throw IndexError("neuron L" + std::to_string(layer) + "N" + std::to_string(neuron) + " out of range");
    return entries_[static_cast<std::size_t>(layer) * static_cast<std::size_t>(d_mlp_) +
                    static_cast<std::size_t>(neuron)];
  }

  // Neurons ranking any answer token within the top or bottom `depth` tokens.
  std::vector<ComponentId> retained(int depth) const {
    if (depth < 1) throw ConfigError("prefilter depth must be >= 1");
    std::vector<ComponentId> out;
    for (int l = 0; l < layers_; ++l) {
      for (int i = 0; i < d_mlp_; ++i) {
        const auto& e = at(l, i);
        const bool keep = std::any_of(e.answer_rank.begin(), e.answer_rank.end(), [&](std::int64_t r) {
          return r < depth || vocab_ - 1 - r < depth;
        });
        if (keep) out.push_back(ComponentId::neuron(l, i));
      }
    }
    return out;
  }

  const AnswerTokenSet& answers() const { return answers_; }
  std::size_t neuron_count() const { return entries_.size(); }

 private:
  int layers_ = 0;
  int d_mlp_ = 0;
  std::int64_t vocab_ = 0;
  AnswerTokenSet answers_;
  std::vector<NeuronProjection> entries_;
};

inline std::vector<ComponentId> prefilter_neurons(const Weights& w, const AnswerTokenSet& answers, int depth,
                                                  int threads = 1) {
  return NeuronProjectionTable::compute(w, answers, threads).retained(depth);
}

inline std::vector<ComponentId> all_heads(const ModelConfig& c) {
  std::vector<ComponentId> out;
  for (int l = 0; l < c.n_layers; ++l)
    for (int h = 0; h < c.n_heads; ++h) out.push_back(ComponentId::head(l, h));
  return out;
}

// ---------------------------------------------------------------------------
// Reading a component at the final position

struct Reading {
  std::vector<float> candidates;  // l_c at each requested token
  float max_logit = 0.0f;         // max over the whole vocabulary
};

inline Reading read_component(const Weights& w, const Trace& t, const ComponentId& c,
                              std::span<const TokenId> candidates, const NeuronProjectionTable* table = nullptr) {
  validate_component(w.config, c);
  const int pos = static_cast<int>(t.last());
  Reading r;
  r.candidates.reserve(candidates.size());
  if (c.is_head()) {
    const Vector logits = project_logits(w, head_output(t, c.layer, c.index, pos));
    for (TokenId tok : candidates) r.candidates.push_back(logits.at(static_cast<std::size_t>(tok)));
    r.max_logit = *std::max_element(logits.begin(), logits.end());
    return r;
  }
  const float m = neuron_coefficient(t, c.layer, c.index, pos);
  const auto v = w.layers[static_cast<std::size_t>(c.layer)].w_ff_out.row(static_cast<std::size_t>(c.index));
  for (TokenId tok : candidates)
    r.candidates.push_back(m * dot(v, w.unembedding_rows.row(static_cast<std::size_t>(tok))));
  float mx = 0.0f, mn = 0.0f;
  if (table) {
    mx = table->at(c.layer, c.index).max_logit;
    mn = table->at(c.layer, c.index).min_logit;
  } else {
    const Vector proj = project_logits(w, v);
    const auto [lo, hi] = std::minmax_element(proj.begin(), proj.end());
    mn = *lo;
    mx = *hi;
  }
  r.max_logit = m >= 0.0f ? m * mx : m * mn;
  return r;
}

inline std::vector<TokenId> answer_candidates(const AnswerTokenSet& a) { return {a.ids.begin(), a.ids.end()}; }

// Algorithm-1 accuracy of one component over paren examples (4-way choice).
inline double component_accuracy(const Engine& engine, const ComponentId& c, std::span<const Example> examples,
                                 const AnswerTokenSet& answers, const NeuronProjectionTable* table = nullptr) {
  if (examples.empty()) return 0.0;
  const auto cand = answer_candidates(answers);
  std::size_t correct = 0;
  for (const auto& ex : examples) {
    const Trace t = engine.forward(ex.prompt_tokens);
    const Reading r = read_component(engine.weights(), t, c, cand, table);
    const std::size_t slot = static_cast<std::size_t>(paren_depth(ex.task) - 1);
    std::vector<float> neg;
    for (std::size_t k = 0; k < 4; ++k)
      if (k != slot) neg.push_back(r.candidates[k]);
    if (task_correct_value(r.candidates[slot], neg)) ++correct;
  }
  return double(correct) / double(examples.size());
}

// Recall/precision of "component promotes the positive sub-task's answer".
inline PrecisionRecall precision_recall_f1(const Engine& engine, const ComponentId& c, const BalancedDataset& ds,
                                           double tau, const AnswerTokenSet& answers,
                                           const NeuronProjectionTable* table = nullptr) {
  const TokenId target = answers.closing(paren_depth(ds.positive_task));
  const std::array<TokenId, 1> cand{target};
  std::size_t tp = 0, fp = 0;
  for (const auto& ex : ds.positives) {
    const Reading r = read_component(engine.weights(), engine.forward(ex.prompt_tokens), c, cand, table);
    if (promotes_value(r.candidates[0], r.max_logit, tau)) ++tp;
  }
  for (const auto& ex : ds.negatives) {
    const Reading r = read_component(engine.weights(), engine.forward(ex.prompt_tokens), c, cand, table);
    if (promotes_value(r.candidates[0], r.max_logit, tau)) ++fp;
  }
  return precision_recall_from_counts(tp, fp, ds.positives.size());
}

// ---------------------------------------------------------------------------
// Bulk attribution over the paren train sets

struct ComponentReport {
  ComponentId id;
  std::array<double, 4> accuracy{};
  std::array<double, 4> recall{};
  std::array<double, 4> precision{};
  std::array<double, 4> f1{};
  double mean_recall = 0.0;
  double mean_precision = 0.0;
  double mean_f1 = 0.0;
  int generalizability = 0;
  // promotes() evaluations where max(l_c) <= 0 (the literal reading applies)
  int nonpositive_max = 0;
  bool recall_only = false;
};

inline int generalizability_count(const std::array<double, 4>& accuracy, double threshold) {
  return static_cast<int>(std::count_if(accuracy.begin(), accuracy.end(), [&](double a) { return a >= threshold; }));
}

// Final-position readings of every component for every train prompt; values
// per (task, prompt) are laid out component-major: 4 answer logits then max.
struct ParenReadings {
  std::vector<ComponentId> components;
  AnswerTokenSet answers;
  std::array<std::vector<Example>, 4> train;
  std::array<std::vector<std::vector<float>>, 4> values;
  // mean final-position coefficient per task for neuron components (0 for heads)
  std::array<std::vector<double>, 4> mean_coefficient;

  static constexpr std::size_t kStride = 5;

  std::span<const float> at(std::size_t task, std::size_t prompt, std::size_t component) const {
    return {values[task][prompt].data() + component * kStride, kStride};
  }
};

inline ParenReadings collect_paren_readings(const Engine& engine, std::vector<ComponentId> components,
                                            const std::array<std::vector<Example>, 4>& train,
                                            const AnswerTokenSet& answers,
                                            const NeuronProjectionTable* table, int threads = 1) {
  ParenReadings out;
  out.components = std::move(components);
  out.answers = answers;
  out.train = train;
  const auto cand = answer_candidates(answers);
  const std::size_t C = out.components.size();
  for (std::size_t task = 0; task < 4; ++task) {
    const auto& exs = train[task];
    out.values[task].assign(exs.size(), {});
    std::vector<std::vector<float>> coeff(exs.size());
    parallel_for(exs.size(), threads, [&](std::size_t p) {
      const Trace t = engine.forward(exs[p].prompt_tokens);
      auto& row = out.values[task][p];
      row.resize(C * ParenReadings::kStride);
      coeff[p].assign(C, 0.0f);
      for (std::size_t c = 0; c < C; ++c) {
        const auto& id = out.components[c];
        const Reading r = read_component(engine.weights(), t, id, cand, table);
        std::copy(r.candidates.begin(), r.candidates.end(), row.begin() + static_cast<std::ptrdiff_t>(c * 5));
        row[c * 5 + 4] = r.max_logit;
        if (!id.is_head()) coeff[p][c] = neuron_coefficient(t, id.layer, id.index, static_cast<int>(t.last()));
      }
    });
    out.mean_coefficient[task].assign(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (const auto& v : coeff) s += v[c];
      out.mean_coefficient[task][c] = exs.empty() ? 0.0 : s / double(exs.size());
    }
  }
  return out;
}

inline std::vector<ComponentReport> paren_reports(const ParenReadings& rd, const std::array<BalancedDataset, 4>& balanced,
                                                  const PromotionConfig& cfg) {
  cfg.validate();
  // locate balanced-set examples among the readings
  std::map<std::pair<int, int>, std::size_t> where;
  for (std::size_t task = 0; task < 4; ++task)
    for (std::size_t p = 0; p < rd.train[task].size(); ++p) where[{int(task), rd.train[task][p].num}] = p;
  auto lookup = [&](const Example& ex) {
    auto it = where.find({int(task_slot(ex.task)), ex.num});
    if (it == where.end()) throw ConfigError("balanced dataset example not among the collected train prompts");
    return std::pair<std::size_t, std::size_t>{task_slot(ex.task), it->second};
  };

  std::vector<ComponentReport> reports(rd.components.size());
  for (std::size_t c = 0; c < rd.components.size(); ++c) {
    auto& rep = reports[c];
    rep.id = rd.components[c];
    for (std::size_t task = 0; task < 4; ++task) {
      const auto& exs = rd.train[task];
      std::size_t correct = 0;
      for (std::size_t p = 0; p < exs.size(); ++p) {
        const auto v = rd.at(task, p, c);
        std::array<float, 3> neg{};
        for (std::size_t k = 0, j = 0; k < 4; ++k)
          if (k != task) neg[j++] = v[k];
        if (task_correct_value(v[task], neg)) ++correct;
      }
      rep.accuracy[task] = exs.empty() ? 0.0 : double(correct) / double(exs.size());

      const auto& ds = balanced[task];
      const std::size_t slot = task_slot(ds.positive_task);
      std::size_t tp = 0, fp = 0;
      auto judge = [&](const Example& ex) {
        const auto [t, p] = lookup(ex);
        const auto v = rd.at(t, p, c);
        if (v[4] <= 0.0f) ++rep.nonpositive_max;
        return promotes_value(v[slot], v[4], cfg.tau);
      };
      for (const auto& ex : ds.positives) tp += judge(ex) ? 1 : 0;
      for (const auto& ex : ds.negatives) fp += judge(ex) ? 1 : 0;
      const auto pr = precision_recall_from_counts(tp, fp, ds.positives.size());
      rep.recall[slot] = pr.recall;
      rep.precision[slot] = pr.precision;
      rep.f1[slot] = pr.f1;
    }
    for (std::size_t task = 0; task < 4; ++task) {
      rep.mean_recall += rep.recall[task] / 4.0;
      rep.mean_precision += rep.precision[task] / 4.0;
      rep.mean_f1 += rep.f1[task] / 4.0;
    }
    rep.generalizability = generalizability_count(rep.accuracy, cfg.accuracy_threshold);
  }
  return reports;
}

// Recall of "component promotes the example's answer token" per arithmetic
// operator; there is no distractor set, so accuracy/precision stay 0.
inline std::vector<ComponentReport> arith_reports(const Engine& engine, const std::vector<ComponentId>& components,
                                                  const std::array<std::vector<Example>, 4>& train, double tau,
                                                  const NeuronProjectionTable* table = nullptr, int threads = 1) {
  std::vector<ComponentReport> reports(components.size());
  for (std::size_t c = 0; c < components.size(); ++c) {
    reports[c].id = components[c];
    reports[c].recall_only = true;
  }
  for (std::size_t op = 0; op < 4; ++op) {
    const auto& exs = train[op];
    std::vector<std::vector<char>> hit(exs.size());
    std::vector<std::vector<char>> nonpos(exs.size());
    parallel_for(exs.size(), threads, [&](std::size_t p) {
      const Trace t = engine.forward(exs[p].prompt_tokens);
      const std::array<TokenId, 1> cand{exs[p].target_token};
      hit[p].resize(components.size());
      nonpos[p].resize(components.size());
      for (std::size_t c = 0; c < components.size(); ++c) {
        const Reading r = read_component(engine.weights(), t, components[c], cand, table);
        hit[p][c] = promotes_value(r.candidates[0], r.max_logit, tau) ? 1 : 0;
        nonpos[p][c] = r.max_logit <= 0.0f ? 1 : 0;
      }
    });
    for (std::size_t c = 0; c < components.size(); ++c) {
      std::size_t n = 0;
      for (std::size_t p = 0; p < exs.size(); ++p) {
        n += static_cast<std::size_t>(hit[p][c]);
        reports[c].nonpositive_max += nonpos[p][c];
      }
      reports[c].recall[op] = exs.empty() ? 0.0 : double(n) / double(exs.size());
    }
  }
  for (auto& r : reports) {
    for (double v : r.recall) r.mean_recall += v / 4.0;
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Neuron inspection

struct TokenLogit {
  TokenId token = 0;
  float logit = 0.0f;
};

struct NeuronExtremes {
  ComponentId id;
  std::vector<TokenLogit> top;     // descending logit, ties by ascending id
  std::vector<TokenLogit> bottom;  // ascending logit, ties by ascending id
  std::array<double, 4> mean_coefficient{};
  std::array<bool, 4> answer_in_top{};
  std::array<bool, 4> answer_in_bottom{};
  // answers at both extremes and coefficients of both signs across sub-tasks
  bool dual_sign = false;
};

inline NeuronExtremes neuron_extremes(const Weights& w, const ComponentId& c, int k,
                                      const std::array<double, 4>& mean_coefficient, const AnswerTokenSet& answers) {
  if (c.is_head()) throw ComponentError("neuron_extremes expects an FF neuron");
  validate_component(w.config, c);
  if (k < 1) throw ConfigError("k must be >= 1");
  const auto v = w.layers[static_cast<std::size_t>(c.layer)].w_ff_out.row(static_cast<std::size_t>(c.index));
  const Vector proj = project_logits(w, v);
  std::vector<TokenId> order(proj.size());
  std::iota(order.begin(), order.end(), 0);
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), proj.size());

  NeuronExtremes ex;
  ex.id = c;
  ex.mean_coefficient = mean_coefficient;
  auto desc = [&](TokenId a, TokenId b) {
    const float x = proj[static_cast<std::size_t>(a)], y = proj[static_cast<std::size_t>(b)];
    return x != y ? x > y : a < b;
  };
  auto asc = [&](TokenId a, TokenId b) {
    const float x = proj[static_cast<std::size_t>(a)], y = proj[static_cast<std::size_t>(b)];
    return x != y ? x < y : a < b;
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kk), order.end(), desc);
  for (std::size_t i = 0; i < kk; ++i) ex.top.push_back({order[i], proj[static_cast<std::size_t>(order[i])]});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kk), order.end(), asc);
  for (std::size_t i = 0; i < kk; ++i) ex.bottom.push_back({order[i], proj[static_cast<std::size_t>(order[i])]});

  for (std::size_t a = 0; a < 4; ++a) {
    auto has = [&](const std::vector<TokenLogit>& list) {
      return std::any_of(list.begin(), list.end(), [&](const TokenLogit& tl) { return tl.token == answers.ids[a]; });
    };
    ex.answer_in_top[a] = has(ex.top);
    ex.answer_in_bottom[a] = has(ex.bottom);
  }
  const bool any_top = std::find(ex.answer_in_top.begin(), ex.answer_in_top.end(), true) != ex.answer_in_top.end();
  const bool any_bottom =
      std::find(ex.answer_in_bottom.begin(), ex.answer_in_bottom.end(), true) != ex.answer_in_bottom.end();
  const bool pos = std::any_of(mean_coefficient.begin(), mean_coefficient.end(), [](double m) { return m > 0.0; });
  const bool neg = std::any_of(mean_coefficient.begin(), mean_coefficient.end(), [](double m) { return m < 0.0; });
  ex.dual_sign = any_top && any_bottom && pos && neg;
  return ex;
}

// Mean final-position coefficient per paren sub-task, computed by running
// the given example sets.
inline std::array<double, 4> mean_neuron_coefficients(const Engine& engine, const ComponentId& c,
                                                      const std::array<std::vector<Example>, 4>& sets,
                                                      int threads = 1) {
  std::array<double, 4> means{};
  for (std::size_t task = 0; task < 4; ++task) {
    std::vector<float> vals(sets[task].size());
    parallel_for(vals.size(), threads, [&](std::size_t p) {
      const Trace t = engine.forward(sets[task][p].prompt_tokens);
      vals[p] = neuron_coefficient(t, c.layer, c.index, static_cast<int>(t.last()));
    });
    double s = 0.0;
    for (float v : vals) s += v;
    means[task] = vals.empty() ? 0.0 : s / double(vals.size());
  }
  return means;
}

}  // namespace steerlab
