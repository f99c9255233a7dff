#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "steerlab/attribution.hpp"
#include "support/support.hpp"

using namespace steerlab;

namespace {

// Small model over the GPT-2 vocabulary with layer 0 neuron 3 writing
// strongly along ")" and neuron 5 strongly against "))))".
Weights planted_model() {
  Weights w = fixtures::random_weights(fixtures::small_config(), 21);
  const auto& tok = fixtures::gpt2_tokenizer();
  const auto a = tok.answer_tokens();
  const std::size_t d = 16;
  Vector u1(d, 0.0f), u4(d, 0.0f);
  u1[0] = 30.0f;
  u4[1] = 30.0f;
  std::copy(u1.begin(), u1.end(), w.token_embedding.row(a.closing(1)).begin());
  std::copy(u4.begin(), u4.end(), w.token_embedding.row(a.closing(4)).begin());
  w.unembedding_rows = w.token_embedding;
  auto v3 = w.layers[0].w_ff_out.row(3);
  auto v5 = w.layers[0].w_ff_out.row(5);
  std::fill(v3.begin(), v3.end(), 0.0f);
  std::fill(v5.begin(), v5.end(), 0.0f);
  v3[0] = 1.0f;
  v5[1] = -1.0f;
  return w;
}

const Weights& synthetic() {
  static const Weights w = fixtures::random_weights(fixtures::small_config(), 22);
  return w;
}

}  // namespace

TEST(Verdicts, AgreeWithBruteForceOracle) {
  std::mt19937_64 rng(100);
  std::normal_distribution<float> nd(0.0f, 2.0f);
  std::uniform_int_distribution<int> tok(0, 99), nneg(1, 6), coin(0, 4);
  std::uniform_real_distribution<double> tau_d(0.0, 1.0);
  int ties = 0, nonpositive = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    Vector l(100);
    for (auto& x : l) x = nd(rng);
    if (coin(rng) == 0)
      for (auto& x : l) x = -std::abs(x);  // all non-positive
    const TokenId t = tok(rng);
    std::vector<TokenId> neg;
    while (neg.size() < static_cast<std::size_t>(nneg(rng))) {
      const TokenId c = tok(rng);
      if (c != t && std::find(neg.begin(), neg.end(), c) == neg.end()) neg.push_back(c);
    }
    if (coin(rng) == 0) {
      l[static_cast<std::size_t>(t)] = l[static_cast<std::size_t>(neg[0])];  // exact tie
      ++ties;
    }
    const double tau = trial % 2 ? 0.5 : tau_d(rng);

    bool correct = true;
    for (TokenId d : neg) correct = correct && l[t] >= l[d];
    bool prom = true;
    for (float x : l) prom = prom && double(l[t]) >= tau * double(x);
    nonpositive += *std::max_element(l.begin(), l.end()) <= 0.0f ? 1 : 0;

    ASSERT_EQ(task_correct(l, t, neg), correct) << trial;
    ASSERT_EQ(promotes(l, t, tau), prom) << trial;
  }
  EXPECT_GT(ties, 1000);
  EXPECT_GT(nonpositive, 1000);
}

TEST(Verdicts, InvariantUnderPositiveScaling) {
  std::mt19937_64 rng(101);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::uniform_real_distribution<float> sd(0.01f, 100.0f);
  std::uniform_int_distribution<int> tok(0, 99);
  for (int trial = 0; trial < 10000; ++trial) {
    Vector l(100);
    for (auto& x : l) x = nd(rng);
    const TokenId t = tok(rng);
    const std::vector<TokenId> neg{(t + 1) % 100, (t + 2) % 100, (t + 3) % 100};
    const float s = trial % 2 ? sd(rng) : std::ldexp(1.0f, static_cast<int>(trial % 16) - 8);
    Vector scaled(l);
    for (auto& x : scaled) x *= s;
    ASSERT_EQ(task_correct(l, t, neg), task_correct(scaled, t, neg)) << trial;
    ASSERT_EQ(promotes(l, t, 0.5), promotes(scaled, t, 0.5)) << trial;
  }
}

TEST(Verdicts, ScaledActivationKeepsVerdicts) {
  const Weights& w = synthetic();
  const Engine e(w);
  const auto& tok = fixtures::gpt2_tokenizer();
  const auto a = tok.answer_tokens();
  const Trace t = e.forward(tok.encode(paren_prompt(TaskId::two_paren, 321)));
  for (int l = 0; l < w.config.n_layers; ++l)
    for (int h = 0; h < w.config.n_heads; ++h) {
      const Vector act = component_activation(w, t, ComponentId::head(l, h), int(t.last()));
      for (float s : {0.5f, 2.0f, 8.0f}) {
        Vector scaled(act);
        for (auto& x : scaled) x *= s;
        const Vector l0 = project_logits(w, act), l1 = project_logits(w, scaled);
        for (int n = 1; n <= 4; ++n) {
          std::vector<TokenId> neg;
          for (int k = 1; k <= 4; ++k)
            if (k != n) neg.push_back(a.closing(k));
          EXPECT_EQ(task_correct(l0, a.closing(n), neg), task_correct(l1, a.closing(n), neg));
          EXPECT_EQ(promotes(l0, a.closing(n), 0.5), promotes(l1, a.closing(n), 0.5));
        }
      }
    }
}

TEST(Verdicts, EmptyDistractorsAreRejected) {
  const Vector l{1, 2, 3};
  EXPECT_THROW(task_correct(l, 0, std::vector<TokenId>{}), ConfigError);
  EXPECT_THROW(task_correct(l, 0, std::vector<TokenId>{0}), ConfigError);
  EXPECT_THROW(task_correct(l, 5, std::vector<TokenId>{1}), TokenError);
}

TEST(Verdicts, NonPositiveMaxIsEvaluatedLiterally) {
  // tau * max exceeds max when max < 0, so the target must beat half the max
  EXPECT_TRUE(promotes_value(-1.0f, -2.0f, 0.5));
  EXPECT_FALSE(promotes_value(-1.5f, -1.0f, 0.5));
  EXPECT_TRUE(promotes_value(0.0f, 0.0f, 0.5));
}

TEST(Verdicts, RandomFourWayAccuracyIsChance) {
  std::mt19937_64 rng(102);
  std::normal_distribution<float> nd;
  int hits = 0;
  const int n = 40000;
  for (int i = 0; i < n; ++i) {
    const std::array<float, 3> neg{nd(rng), nd(rng), nd(rng)};
    hits += task_correct_value(nd(rng), neg) ? 1 : 0;
  }
  EXPECT_NEAR(double(hits) / n, 0.25, 0.01);
}

TEST(PrecisionRecall, ZeroDenominatorsGiveZero) {
  const auto none = precision_recall_from_counts(0, 0, 0);
  EXPECT_EQ(none.precision, 0.0);
  EXPECT_EQ(none.recall, 0.0);
  EXPECT_EQ(none.f1, 0.0);
  const auto some = precision_recall_from_counts(3, 1, 6);
  EXPECT_DOUBLE_EQ(some.precision, 0.75);
  EXPECT_DOUBLE_EQ(some.recall, 0.5);
  EXPECT_DOUBLE_EQ(some.f1, 0.6);
}

TEST(Prefilter, RanksMatchFullSort) {
  const Weights& w = synthetic();
  const auto answers = fixtures::gpt2_tokenizer().answer_tokens();
  const auto table = NeuronProjectionTable::compute(w, answers, 4);
  for (int i : {0, 17, 63}) {
    const Vector proj = project_logits(w, w.layers[1].w_ff_out.row(i));
    std::vector<TokenId> order(proj.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](TokenId x, TokenId y) { return proj[x] > proj[y]; });
    for (std::size_t a = 0; a < 4; ++a) {
      const auto pos = std::find(order.begin(), order.end(), answers.ids[a]) - order.begin();
      EXPECT_EQ(table.at(1, i).answer_rank[a], pos);
    }
    EXPECT_EQ(table.at(1, i).max_logit, *std::max_element(proj.begin(), proj.end()));
    EXPECT_EQ(table.at(1, i).min_logit, *std::min_element(proj.begin(), proj.end()));
  }
}

TEST(Prefilter, KeepsPlantedNeuronsAtDepthOne) {
  const Weights w = planted_model();
  const auto kept = prefilter_neurons(w, fixtures::gpt2_tokenizer().answer_tokens(), 1);
  EXPECT_NE(std::find(kept.begin(), kept.end(), ComponentId::neuron(0, 3)), kept.end());
  EXPECT_NE(std::find(kept.begin(), kept.end(), ComponentId::neuron(0, 5)), kept.end());
}

TEST(Prefilter, MonotoneInDepth) {
  const auto table = NeuronProjectionTable::compute(synthetic(), fixtures::gpt2_tokenizer().answer_tokens(), 4);
  std::vector<ComponentId> prev;
  for (int k : {1, 5, 50, 500, 5000, 50000}) {
    const auto cur = table.retained(k);
    EXPECT_TRUE(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end())) << k;
    EXPECT_GE(cur.size(), prev.size());
    prev = cur;
  }
  EXPECT_EQ(prev.size(), table.neuron_count());
  EXPECT_THROW(table.retained(0), ConfigError);
}

TEST(NeuronExtremesTest, DetectsDualSign) {
  const Weights w = planted_model();
  const auto answers = fixtures::gpt2_tokenizer().answer_tokens();
  // v_3 points at ")" only; give neuron 3 a second answer at the other end
  Weights w2 = w;
  auto v = w2.layers[0].w_ff_out.row(3);
  v[1] = -1.0f;
  const auto ex = neuron_extremes(w2, ComponentId::neuron(0, 3), 10, {-0.4, 0.3, 0.2, 0.1}, answers);
  EXPECT_EQ(ex.top.front().token, answers.closing(1));
  EXPECT_EQ(ex.bottom.front().token, answers.closing(4));
  EXPECT_TRUE(ex.answer_in_top[0]);
  EXPECT_TRUE(ex.answer_in_bottom[3]);
  EXPECT_TRUE(ex.dual_sign);
  const auto same_sign = neuron_extremes(w2, ComponentId::neuron(0, 3), 10, {0.4, 0.3, 0.2, 0.1}, answers);
  EXPECT_FALSE(same_sign.dual_sign);
  EXPECT_FALSE(neuron_extremes(w, ComponentId::neuron(0, 3), 10, {-0.4, 0.3, 0.2, 0.1}, answers).dual_sign);
}

TEST(NeuronExtremesTest, NegatedValueSwapsTopAndBottom) {
  Weights w = synthetic();
  const auto answers = fixtures::gpt2_tokenizer().answer_tokens();
  const auto a = neuron_extremes(w, ComponentId::neuron(1, 9), 20, {}, answers);
  for (auto& x : w.layers[1].w_ff_out.row(9)) x = -x;
  const auto b = neuron_extremes(w, ComponentId::neuron(1, 9), 20, {}, answers);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(a.top[i].token, b.bottom[i].token);
    EXPECT_EQ(a.bottom[i].token, b.top[i].token);
  }
  EXPECT_THROW(neuron_extremes(w, ComponentId::head(0, 0), 5, {}, answers), ComponentError);
}

TEST(NeuronExtremesTest, DeadNeuronHasNearZeroMeanCoefficient) {
  Weights w = synthetic();
  for (std::size_t r = 0; r < w.layers[0].w_in.rows(); ++r) w.layers[0].w_in(r, 4) = 0.0f;
  w.layers[0].b_in[4] = -20.0f;
  const Engine e(w);
  std::array<std::vector<Example>, 4> sets;
  for (TaskId t : kParenTasks)
    sets[task_slot(t)] = gen_paren_dataset(t, 1, fixtures::gpt2_tokenizer(), {10, 0, 0});
  for (double m : mean_neuron_coefficients(e, ComponentId::neuron(0, 4), sets, 2)) EXPECT_NEAR(m, 0.0, 1e-6);
}

TEST(Reports, BulkReadingsAgreeWithStandaloneOps) {
  const Weights& w = synthetic();
  const Engine e(w);
  const auto& tok = fixtures::gpt2_tokenizer();
  const auto answers = tok.answer_tokens();
  std::array<std::vector<Example>, 4> train;
  for (TaskId t : kParenTasks) train[task_slot(t)] = gen_paren_dataset(t, 5, tok, {24, 0, 0});
  std::array<BalancedDataset, 4> balanced;
  for (TaskId t : kParenTasks) balanced[task_slot(t)] = gen_balanced_pr_dataset(t, train, 5);

  const auto table = NeuronProjectionTable::compute(w, answers, 4);
  auto comps = all_heads(w.config);
  for (int i : {0, 7, 30}) comps.push_back(ComponentId::neuron(1, i));
  const auto readings = collect_paren_readings(e, comps, train, answers, &table, 4);
  const auto reports = paren_reports(readings, balanced, PromotionConfig{});
  ASSERT_EQ(reports.size(), comps.size());
  for (std::size_t c = 0; c < comps.size(); ++c) {
    for (std::size_t t = 0; t < 4; ++t) {
      EXPECT_DOUBLE_EQ(reports[c].accuracy[t], component_accuracy(e, comps[c], train[t], answers, &table));
      const auto pr = precision_recall_f1(e, comps[c], balanced[t], 0.5, answers, &table);
      EXPECT_DOUBLE_EQ(reports[c].recall[t], pr.recall);
      EXPECT_DOUBLE_EQ(reports[c].precision[t], pr.precision);
      EXPECT_DOUBLE_EQ(reports[c].f1[t], pr.f1);
    }
    EXPECT_EQ(reports[c].generalizability, generalizability_count(reports[c].accuracy, 0.7));
  }
  // without the table the neuron max is recomputed from the full projection
  EXPECT_DOUBLE_EQ(component_accuracy(e, comps.back(), train[2], answers),
                   component_accuracy(e, comps.back(), train[2], answers, &table));
}

TEST(Reports, ArithmeticRecallOnly) {
  const Engine e(synthetic());
  const auto& tok = fixtures::gpt2_tokenizer();
  std::array<std::vector<Example>, 4> train;
  for (TaskId op : kArithTasks) train[task_slot(op)] = gen_arith_dataset(op, 2, tok, {12, 0, 0});
  const auto reports = arith_reports(e, all_heads(e.config()), train, 0.5, nullptr, 4);
  ASSERT_EQ(reports.size(), 8u);
  for (const auto& r : reports) {
    EXPECT_TRUE(r.recall_only);
    EXPECT_EQ(r.generalizability, 0);
    double mean = 0.0;
    for (double v : r.recall) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      mean += v / 4.0;
    }
    EXPECT_DOUBLE_EQ(r.mean_recall, mean);
  }
}

TEST(Reports, ConfigValidation) {
  PromotionConfig c;
  c.validate();
  c.tau = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.prefilter_depth = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}
