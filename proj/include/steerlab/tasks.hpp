#pragma once

// Synthetic datasets: four balanced-parentheses sub-tasks and a two-operand
// arithmetic task. All generation is seeded and deterministic.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "steerlab/errors.hpp"
#include "steerlab/tokenizer.hpp"

namespace steerlab {

enum class TaskId { one_paren, two_paren, three_paren, four_paren, add, sub, mul, div };
enum class Split { train, dev, test };

inline constexpr std::array<TaskId, 4> kParenTasks = {TaskId::one_paren, TaskId::two_paren, TaskId::three_paren,
                                                      TaskId::four_paren};
inline constexpr std::array<TaskId, 4> kArithTasks = {TaskId::add, TaskId::sub, TaskId::mul, TaskId::div};

inline bool is_paren(TaskId t) { return static_cast<int>(t) <= static_cast<int>(TaskId::four_paren); }

// 1..4 for paren tasks
inline int paren_depth(TaskId t) {
  if (!is_paren(t)) throw ConfigError("not a parenthesis task");
  return static_cast<int>(t) + 1;
}

// Position within kParenTasks / kArithTasks.
inline std::size_t task_slot(TaskId t) { return static_cast<std::size_t>(t) % 4; }

inline std::string to_string(TaskId t) {
  switch (t) {
    case TaskId::one_paren: return "one-paren";
    case TaskId::two_paren: return "two-paren";
    case TaskId::three_paren: return "three-paren";
    case TaskId::four_paren: return "four-paren";
    case TaskId::add: return "add";
    case TaskId::sub: return "sub";
    case TaskId::mul: return "mul";
    case TaskId::div: return "div";
  }
  return "?";
}

inline TaskId parse_task(const std::string& s) {
  for (TaskId t : kParenTasks)
    if (to_string(t) == s) return t;
  for (TaskId t : kArithTasks)
    if (to_string(t) == s) return t;
  throw UsageError("unknown task '" + s + "'");
}

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "dev") return Split::dev;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + s + "'");
}

inline char operator_symbol(TaskId t) {
  switch (t) {
    case TaskId::add: return '+';
    case TaskId::sub: return '-';
    case TaskId::mul: return '*';
    case TaskId::div: return '/';
    default: throw ConfigError("not an arithmetic task");
  }
}

struct Example {
  TaskId task = TaskId::one_paren;
  Split split = Split::train;
  std::string prompt;
  std::vector<TokenId> prompt_tokens;
  TokenId target_token = 0;
  std::string target_text;
  int num = -1;                     // paren tasks
  std::array<int, 2> operands{};    // arithmetic tasks
};

struct TaskSpec {
  TaskId id;
  std::string prompt_template;  // "{num}" / "{a}" "{b}" placeholders
  std::string target;           // paren tasks; arithmetic targets vary per example
  std::vector<TokenId> distractors;  // empty for arithmetic (recall-only ranking)
};

inline std::string paren_prompt(TaskId t, int num) {
  std::string call = "print(";
  for (int i = 1; i < paren_depth(t); ++i) call += "str(";
  return "#print the string " + std::to_string(num) + "\n" + call + std::to_string(num);
}

inline TaskSpec task_spec(TaskId t, const Tokenizer& tok) {
  if (!is_paren(t)) return {t, std::string("{a} ") + operator_symbol(t) + " {b} =", "", {}};
  const auto answers = tok.answer_tokens();
  TaskSpec spec{t, "", std::string(static_cast<std::size_t>(paren_depth(t)), ')'), {}};
  std::string call = "print(";
  for (int i = 1; i < paren_depth(t); ++i) call += "str(";
  spec.prompt_template = "#print the string {num}\n" + call + "{num}";
  for (int n = 1; n <= 4; ++n)
    if (n != paren_depth(t)) spec.distractors.push_back(answers.closing(n));
  return spec;
}

// Stack-based bracket check over "()[]{}".
inline bool balanced(std::string_view s) {
  std::vector<char> stack;
  for (char c : s) {
    if (c == '(' || c == '[' || c == '{') {
      stack.push_back(c);
    } else if (c == ')' || c == ']' || c == '}') {
      const char open = c == ')' ? '(' : c == ']' ? '[' : '{';
      if (stack.empty() || stack.back() != open) return false;
      stack.pop_back();
    }
  }
  return stack.empty();
}

struct ParenSplitSizes {
  std::size_t train = 350, dev = 150, test = 150;
};

struct ArithSplitSizes {
  std::size_t train = 750, dev = 350, test = 350;
};

namespace detail {

// Independent stream per (seed, task) so datasets do not depend on the
// order in which tasks are generated.
inline std::mt19937_64 task_rng(std::uint64_t seed, TaskId t) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(t) + 1u, 0x5eedu};
  return std::mt19937_64(seq);
}

inline Split split_of(std::size_t i, std::size_t train, std::size_t dev) {
  return i < train ? Split::train : i < train + dev ? Split::dev : Split::test;
}

}  // namespace detail

// Train, dev and test examples in that order; {num} values are distinct
// across the whole dataset so splits never share a number.
inline std::vector<Example> gen_paren_dataset(TaskId t, std::uint64_t seed, const Tokenizer& tok,
                                              ParenSplitSizes sizes = {}) {
  const std::size_t total = sizes.train + sizes.dev + sizes.test;
  if (total > 900) throw ConfigError("at most 900 distinct three-digit numbers are available");
  auto spec = task_spec(t, tok);
  const auto target = tok.answer_tokens().closing(paren_depth(t));
  std::vector<int> nums(900);
  std::iota(nums.begin(), nums.end(), 100);
  auto rng = detail::task_rng(seed, t);
  std::shuffle(nums.begin(), nums.end(), rng);

  std::vector<Example> out;
  out.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    Example ex;
    ex.task = t;
    ex.split = detail::split_of(i, sizes.train, sizes.dev);
    ex.num = nums[i];
    ex.prompt = paren_prompt(t, ex.num);
    ex.prompt_tokens = tok.encode(ex.prompt);
    ex.target_token = target;
    ex.target_text = spec.target;
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<Example> select_split(std::span<const Example> all, Split s) {
  std::vector<Example> out;
  for (const auto& e : all)
    if (e.split == s) out.push_back(e);
  return out;
}

struct BalancedDataset {
  TaskId positive_task;
  std::vector<Example> positives;
  std::vector<Example> negatives;
};

// Positives are the sub-task's train set; the same number of negatives is
// drawn evenly from the other three sub-tasks' train sets. When the count is
// not divisible by three, the extra examples go to the other sub-tasks whose
// names sort first.
inline BalancedDataset gen_balanced_pr_dataset(TaskId positive, const std::array<std::vector<Example>, 4>& train_sets,
                                               std::uint64_t seed) {
  BalancedDataset ds{positive, train_sets[task_slot(positive)], {}};
  std::vector<TaskId> others;
  for (TaskId t : kParenTasks)
    if (t != positive) others.push_back(t);
  std::sort(others.begin(), others.end(), [](TaskId a, TaskId b) { return to_string(a) < to_string(b); });
  const std::size_t want = ds.positives.size();
  auto rng = detail::task_rng(seed ^ 0xba1a9ceULL, positive);
  for (std::size_t k = 0; k < others.size(); ++k) {
    const std::size_t quota = want / 3 + (k < want % 3 ? 1 : 0);
    const auto& pool = train_sets[task_slot(others[k])];
    if (pool.size() < quota) throw ConfigError("not enough " + to_string(others[k]) + " examples for negatives");
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(quota);
    std::sort(idx.begin(), idx.end());
    for (std::size_t i : idx) ds.negatives.push_back(pool[i]);
  }
  return ds;
}

inline int apply_operator(TaskId op, int a, int b) {
  switch (op) {
    case TaskId::add: return a + b;
    case TaskId::sub: return a - b;
    case TaskId::mul: return a * b;
    case TaskId::div: return a / b;
    default: throw ConfigError("not an arithmetic task");
  }
}

// "a op b =" with operands and result in [0, 500]. The prompt must encode to
// four tokens and the answer to a single token (" R" preferred, "R" as
// fallback); pairs failing either check are resampled. (a, b) pairs are
// distinct across the dataset.
inline std::vector<Example> gen_arith_dataset(TaskId op, std::uint64_t seed, const Tokenizer& tok,
                                              ArithSplitSizes sizes = {}) {
  constexpr int kMax = 500;
  const std::size_t total = sizes.train + sizes.dev + sizes.test;
  auto rng = detail::task_rng(seed, op);
  std::uniform_int_distribution<int> operand(0, kMax);
  std::set<std::pair<int, int>> used;
  std::vector<Example> out;
  out.reserve(total);
  std::size_t attempts = 0;
  const std::size_t max_attempts = 2000 * total + 100000;
  while (out.size() < total) {
    if (++attempts > max_attempts)
      throw ConfigError("could not sample enough distinct " + to_string(op) + " examples");
    int a = 0, b = 0;
    switch (op) {
      case TaskId::add:
        a = operand(rng);
        b = operand(rng);
        if (a + b > kMax) continue;
        break;
      case TaskId::sub:
        a = operand(rng);
        b = operand(rng);
        if (a < b) std::swap(a, b);
        break;
      case TaskId::mul:
        a = operand(rng);
        b = operand(rng);
        if (a * b > kMax) continue;
        break;
      case TaskId::div: {
        b = std::uniform_int_distribution<int>(1, kMax)(rng);
        a = b * std::uniform_int_distribution<int>(0, kMax / b)(rng);
        break;
      }
      default: throw ConfigError("not an arithmetic task");
    }
    if (used.contains({a, b})) continue;
    const int result = apply_operator(op, a, b);
    Example ex;
    ex.task = op;
    ex.operands = {a, b};
    ex.prompt = std::to_string(a) + " " + operator_symbol(op) + " " + std::to_string(b) + " =";
    ex.prompt_tokens = tok.encode(ex.prompt);
    if (ex.prompt_tokens.size() != 4) continue;
    std::optional<TokenId> target;
    for (std::string form : {" " + std::to_string(result), std::to_string(result)}) {
      auto full = tok.encode(ex.prompt + form);
      if (full.size() == 5 && std::equal(ex.prompt_tokens.begin(), ex.prompt_tokens.end(), full.begin())) {
        target = full.back();
        ex.target_text = form;
        break;
      }
    }
    if (!target) continue;
    ex.target_token = *target;
    ex.split = detail::split_of(out.size(), sizes.train, sizes.dev);
    used.insert({a, b});
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON-lines persistence

inline nlohmann::json example_to_json(const Example& e) {
  nlohmann::json j = {{"task", to_string(e.task)},
                      {"split", to_string(e.split)},
                      {"prompt", e.prompt},
                      {"prompt_tokens", e.prompt_tokens},
                      {"target_token_id", e.target_token},
                      {"target_text", e.target_text}};
  if (is_paren(e.task))
    j["num"] = e.num;
  else
    j["operands"] = e.operands;
  return j;
}

inline Example example_from_json(const nlohmann::json& j) {
  try {
    Example e;
    e.task = parse_task(j.at("task").get<std::string>());
    e.split = parse_split(j.at("split").get<std::string>());
    e.prompt = j.at("prompt").get<std::string>();
    e.prompt_tokens = j.at("prompt_tokens").get<std::vector<TokenId>>();
    e.target_token = j.at("target_token_id").get<TokenId>();
    e.target_text = j.value("target_text", std::string{});
    if (is_paren(e.task))
      e.num = j.at("num").get<int>();
    else
      e.operands = j.at("operands").get<std::array<int, 2>>();
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError(std::string("malformed dataset record: ") + ex.what());
  }
}

inline void write_jsonl(const std::filesystem::path& path, std::span<const Example> examples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw BundleError("cannot write " + path.string());
  for (const auto& e : examples) out << example_to_json(e).dump() << "\n";
}

inline std::vector<Example> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw BundleError("cannot read dataset " + path.string());
  std::vector<Example> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& ex) {
      throw ValidationError(path.string() + ": " + ex.what());
    }
    out.push_back(example_from_json(j));
  }
  return out;
}

}  // namespace steerlab
