#include <cmath>
#include <fstream>
#include <random>

#include <gtest/gtest.h>
#include <json.hpp>

#include "steerlab/model.hpp"
#include "support/support.hpp"

using namespace steerlab;

namespace {

const Weights& tiny() {
  static const Weights w = load_bundle(fixtures::tiny_bundle());
  return w;
}

nlohmann::json read(const std::string& name) {
  std::ifstream in(fixtures::tiny_bundle() / name);
  return nlohmann::json::parse(in);
}

float max_abs_diff(std::span<const float> a, std::span<const float> b) {
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<TokenId> random_tokens(std::mt19937_64& rng, int n, int vocab) {
  std::uniform_int_distribution<TokenId> d(0, vocab - 1);
  std::vector<TokenId> t(static_cast<std::size_t>(n));
  for (auto& x : t) x = d(rng);
  return t;
}

}  // namespace

TEST(Engine, LogitsMatchReferenceImplementation) {
  const Engine e(tiny());
  const auto ref = read("reference_logits.json");
  for (const auto& p : ref.at("prompts")) {
    const auto ids = p.at("token_ids").get<std::vector<TokenId>>();
    const Vector logits = e.logits(ids);
    const auto want = p.at("logits");
    ASSERT_EQ(want.size(), logits.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i)
      worst = std::max(worst, std::abs(double(logits[i]) - std::stod(want[i].get<std::string>())));
    EXPECT_LT(worst, 1e-4) << "prompt of length " << ids.size();
    EXPECT_EQ(TokenId(argmax(logits)), p.at("top5")[0].at("token_id").get<TokenId>());
    for (const auto& t : p.at("top5"))
      EXPECT_NEAR(logits[t.at("token_id").get<std::size_t>()], std::stod(t.at("logit").get<std::string>()), 1e-2);
  }
}

TEST(Engine, ResidualStreamMatchesReference) {
  const Engine e(tiny());
  const auto ref = read("reference_hidden.json");
  const Trace t = e.forward(ref.at("token_ids").get<std::vector<TokenId>>());
  const auto& res = ref.at("residual");
  for (std::size_t l = 0; l < res.size(); ++l)
    for (std::size_t p = 0; p < t.length(); ++p)
      for (std::size_t k = 0; k < 32; ++k) EXPECT_NEAR(t.residual[l](p, k), res[l][p][k].get<double>(), 1e-4);
  const auto& fin = ref.at("final_ln");
  for (std::size_t p = 0; p < t.length(); ++p) {
    const Vector y = layer_norm(t.residual.back().row(p), tiny().ln_final_gamma, tiny().ln_final_beta, 1e-5);
    for (std::size_t k = 0; k < 32; ++k) EXPECT_NEAR(y[k], fin[p][k].get<double>(), 1e-4);
  }
}

TEST(Engine, SublayerOutputsDecomposeIntoComponents) {
  const Engine e(tiny());
  std::mt19937_64 rng(8);
  const auto& w = tiny();
  for (int trial = 0; trial < 5; ++trial) {
    const Trace t = e.forward(random_tokens(rng, 9, 512));
    for (int l = 0; l < w.config.n_layers; ++l)
      for (std::size_t p = 0; p < t.length(); ++p) {
        Vector attn(w.layers[l].b_out);
        for (int h = 0; h < w.config.n_heads; ++h) axpy(1.0f, head_output(t, l, h, int(p)), attn);
        EXPECT_LT(max_abs_diff(attn, t.attn_out[l].row(p)), 1e-5);
        Vector ff(w.layers[l].b_ff_out);
        for (int i = 0; i < w.config.d_mlp; ++i) axpy(1.0f, neuron_contribution(w, t, l, i, int(p)), ff);
        EXPECT_LT(max_abs_diff(ff, t.ff_out[l].row(p)), 1e-5);
      }
  }
}

TEST(Engine, AttentionIsCausal) {
  const Engine e(tiny());
  std::mt19937_64 rng(9);
  auto a = random_tokens(rng, 12, 512);
  auto b = a;
  b[8] = (b[8] + 1) % 512;
  b[11] = (b[11] + 7) % 512;
  const Trace ta = e.forward(a), tb = e.forward(b);
  for (std::size_t l = 0; l < ta.residual.size(); ++l)
    for (std::size_t p = 0; p < 8; ++p) EXPECT_EQ(max_abs_diff(ta.residual[l].row(p), tb.residual[l].row(p)), 0.0f);
  for (std::size_t h = 0; h < 4; ++h) EXPECT_EQ(ta.attention[0][h](3, 7), 0.0f);
}

TEST(Engine, UnitAlphaIsIdentity) {
  const Engine e(tiny());
  std::mt19937_64 rng(10);
  const auto toks = random_tokens(rng, 10, 512);
  SteerPlan plan{{{ComponentId::head(0, 1), 1.0f}, {ComponentId::neuron(2, 17), 1.0f}}};
  EXPECT_LT(max_abs_diff(e.logits(toks), e.logits(toks, plan)), 1e-6);
}

TEST(Engine, SteeringScalesTheHeadContribution) {
  const Engine e(tiny());
  std::mt19937_64 rng(11);
  const auto toks = random_tokens(rng, 7, 512);
  const Trace base = e.forward(toks);
  const Trace steered = e.forward(toks, SteerPlan{{{ComponentId::head(1, 2), 1.5f}}});
  for (std::size_t p = 0; p < toks.size(); ++p)
    for (std::size_t k = 0; k < 32; ++k)
      EXPECT_NEAR(steered.head_outputs[1][2](p, k), 1.5f * base.head_outputs[1][2](p, k), 1e-6);
  // other heads in the same layer see identical inputs
  EXPECT_EQ(steered.head_outputs[1][0], base.head_outputs[1][0]);
  const Trace nsteered = e.forward(toks, SteerPlan{{{ComponentId::neuron(1, 5), 2.0f}}});
  for (std::size_t p = 0; p < toks.size(); ++p)
    EXPECT_NEAR(nsteered.neuron_coefficients[1](p, 5), 2.0f * base.neuron_coefficients[1](p, 5), 1e-6);
}

TEST(Engine, SelfPatchLeavesLogitsUnchanged) {
  const Engine e(tiny());
  std::mt19937_64 rng(12);
  const auto toks = random_tokens(rng, 8, 512);
  const Trace base = e.forward(toks);
  for (int l = 0; l < 3; ++l)
    for (int pos : {0, 4, 7}) {
      const auto h = head_output(base, l, 3, pos);
      const PatchSet ps{{ComponentId::head(l, 3), pos, Vector(h.begin(), h.end())}};
      EXPECT_EQ(e.resume(base, l, {}, ps).logits, base.logits);
      EXPECT_EQ(e.forward(toks, {}, ps).logits, base.logits);
    }
}

TEST(Engine, ResumeMatchesFullForward) {
  const Engine e(tiny());
  std::mt19937_64 rng(13);
  const auto toks = random_tokens(rng, 6, 512);
  const Trace base = e.forward(toks);
  const PatchSet ps{{ComponentId::head(2, 0), 5, Vector(32, 0.25f)}};
  EXPECT_EQ(e.resume(base, 2, {}, ps).logits, e.forward(toks, {}, ps).logits);
  EXPECT_THROW(e.resume(base, 2, SteerPlan{{{ComponentId::head(1, 0), 2.0f}}}), ComponentError);
}

TEST(Engine, InputValidation) {
  const Engine e(tiny());
  EXPECT_THROW(e.forward(std::vector<TokenId>{}), LengthError);
  EXPECT_THROW(e.forward(std::vector<TokenId>{512}), TokenError);
  EXPECT_THROW(e.forward(std::vector<TokenId>(65, 1)), LengthError);
  EXPECT_THROW(e.greedy_decode(std::vector<TokenId>(60, 1), 5), LengthError);
  EXPECT_EQ(e.greedy_decode(std::vector<TokenId>{1, 2}, 3).size(), 3u);
  EXPECT_THROW(e.forward(std::vector<TokenId>{1}, SteerPlan{{{ComponentId::head(3, 0), 2.0f}}}), ComponentError);
}

TEST(Engine, GreedyDecodeAppliesPlanEachStep) {
  const Engine e(tiny());
  const std::vector<TokenId> prompt{5, 9, 33};
  const SteerPlan plan{{{ComponentId::head(2, 1), 3.0f}}};
  const auto out = e.greedy_decode(prompt, 4, plan);
  std::vector<TokenId> seq = prompt;
  for (TokenId t : out) {
    EXPECT_EQ(t, e.next_token(seq, plan));
    seq.push_back(t);
  }
}

TEST(ComponentIdTest, LabelsRoundTrip) {
  EXPECT_EQ(ComponentId::head(9, 10).label(), "L9H10");
  EXPECT_EQ(ComponentId::neuron(19, 11).label(), "L19N11");
  EXPECT_EQ(ComponentId::parse("L9H10"), ComponentId::head(9, 10));
  EXPECT_EQ(ComponentId::parse("L0N3071"), ComponentId::neuron(0, 3071));
  EXPECT_ANY_THROW(ComponentId::parse("L9X1"));
}

TEST(ComponentIdTest, LogitLensIsLinear) {
  const auto& w = tiny();
  const Engine e(w);
  const Trace t = e.forward(std::vector<TokenId>{3, 4, 5});
  const Vector a = component_activation(w, t, ComponentId::neuron(0, 7), 2);
  const Vector la = project_logits(w, a);
  const float m = neuron_coefficient(t, 0, 7, 2);
  const Vector lv = project_logits(w, w.layers[0].w_ff_out.row(7));
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_NEAR(la[i], m * lv[i], 1e-5);
}
