#include <gtest/gtest.h>

#include "steerlab/patching.hpp"
#include "steerlab/tasks.hpp"
#include "support/planted.hpp"

using namespace steerlab;

namespace {

const Weights& planted() {
  static const Weights w = fixtures::planted_paren_weights();
  return w;
}

}  // namespace

TEST(PlantedModel, SolvesEveryParenTask) {
  const Engine engine(planted());
  const auto& tok = fixtures::gpt2_tokenizer();
  for (TaskId t : kParenTasks) {
    int correct = 0, total = 0;
    for (const auto& ex : gen_paren_dataset(t, 3, tok, {40, 10, 10})) {
      correct += engine.next_token(ex.prompt_tokens) == ex.target_token ? 1 : 0;
      ++total;
    }
    EXPECT_EQ(correct, total) << to_string(t);
  }
}

TEST(PlantedModel, CorruptPromptsPreferTheDeeperAnswer) {
  const Engine engine(planted());
  const auto& tok = fixtures::gpt2_tokenizer();
  for (TaskId t : kParenTasks) {
    std::vector<PromptPair> pairs;
    for (const auto& ex : gen_paren_dataset(t, 4, tok, {10, 0, 0}))
      for (auto& p : gen_counterfactuals(ex, tok)) pairs.push_back(p);
    const auto f = filter_counterfactuals(engine, pairs);
    EXPECT_EQ(f.kept.size(), pairs.size()) << to_string(t);
    EXPECT_FALSE(f.relaxed);
  }
}

TEST(PlantedModel, PlantedHeadCarriesTheCircuit) {
  const Engine engine(planted());
  const auto& tok = fixtures::gpt2_tokenizer();
  std::vector<PromptPair> pairs;
  for (const auto& ex : gen_paren_dataset(TaskId::two_paren, 5, tok, {6, 0, 0}))
    for (auto& p : gen_counterfactuals(ex, tok)) pairs.push_back(p);
  const auto f = faithfulness(engine, Circuit::from_heads({fixtures::kPlantedHead}), pairs);
  EXPECT_GT(f.used, 0u);
  EXPECT_GT(f.mean, 0.9);
}
