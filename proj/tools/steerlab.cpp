// steerlab: command-line harness for attribution, ranking, steering and
// patching experiments. Every command writes its artifacts plus a run.json
// record into --out.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "steerlab/attribution.hpp"
#include "steerlab/errors.hpp"
#include "steerlab/model.hpp"
#include "steerlab/patching.hpp"
#include "steerlab/pipeline.hpp"
#include "steerlab/ranking.hpp"
#include "steerlab/report.hpp"
#include "steerlab/steering.hpp"
#include "steerlab/tasks.hpp"
#include "steerlab/tokenizer.hpp"
#include "steerlab/weights.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace steerlab;

namespace {

struct Globals {
  std::string bundle;
  std::uint64_t seed = 7;
  std::string out = ".";
  int threads = std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
};

struct Loaded {
  Weights weights;
  Tokenizer tok;
};

std::string require_bundle(const Globals& g) {
  if (g.bundle.empty()) throw UsageError("--bundle is required for this command");
  return g.bundle;
}

Loaded load(const Globals& g) {
  const auto dir = require_bundle(g);
  return {load_bundle(dir), Tokenizer::load_bundle(dir)};
}

std::string bundle_hash(const std::string& dir) {
  const auto manifest = fs::path(dir) / "manifest.json";
  const std::string text = fs::exists(manifest) ? read_text(manifest) : json(checksum_manifest(dir)).dump();
  return sha256_hex(std::as_bytes(std::span(text.data(), text.size())));
}

// Collects artifacts and timings, then writes run.json.
class Run {
 public:
  Run(const Globals& g, std::string command, json config) : g_(g), command_(std::move(command)) {
    config["seed"] = g.seed;
    config["bundle"] = g.bundle;
    record_.command = command_;
    record_.config = std::move(config);
    record_.run_id = make_run_id(command_, record_.config);
    record_.bundle_hash = g.bundle.empty() ? "" : bundle_hash(g.bundle);
    fs::create_directories(g.out);
  }

  fs::path path(const std::string& name) const { return fs::path(g_.out) / name; }

  void text(const std::string& name, const std::string& body) {
    write_text(path(name), body);
    record_.artifacts.push_back(name);
  }
  void json_file(const std::string& name, const json& j) {
    write_json(path(name), j);
    record_.artifacts.push_back(name);
  }
  void lap(const std::string& what) {
    record_.timings_seconds[what] = watch_.seconds();
  }

  void finish() {
    record_.timings_seconds["total"] = total_.seconds();
    write_json(path("run.json"), record_);
  }

 private:
  const Globals& g_;
  std::string command_;
  RunRecord record_;
  Stopwatch watch_, total_;
};

std::vector<std::size_t> parse_sizes(const std::string& s, std::size_t n) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      out.push_back(std::stoul(part));
    } catch (const std::exception&) {
      throw UsageError("bad number '" + part + "' in list '" + s + "'");
    }
  }
  if (n && out.size() != n) throw UsageError("expected " + std::to_string(n) + " comma-separated numbers in '" + s + "'");
  return out;
}

bool is_arith_family(const std::string& tasks) {
  if (tasks == "paren") return false;
  if (tasks == "arith") return true;
  throw UsageError("--tasks must be paren or arith");
}

TaskData task_data(const Globals& g, const Tokenizer& tok, bool arith, const std::string& data_dir,
                   const std::string& sizes) {
  if (!data_dir.empty()) return load_task_data(data_dir, arith ? kArithTasks : kParenTasks);
  if (arith) {
    ArithSplitSizes s;
    if (!sizes.empty()) {
      const auto v = parse_sizes(sizes, 3);
      s = {v[0], v[1], v[2]};
    }
    return make_arith_data(g.seed, tok, s);
  }
  ParenSplitSizes s;
  if (!sizes.empty()) {
    const auto v = parse_sizes(sizes, 3);
    s = {v[0], v[1], v[2]};
  }
  return make_paren_data(g.seed, tok, s);
}

json sweep_json(const std::vector<SweepPoint>& points, const std::array<TaskId, 4>& tasks) {
  json rows = json::array();
  for (const auto& p : points) {
    json acc;
    for (std::size_t t = 0; t < 4; ++t) acc[to_string(tasks[t])] = p.accuracy[t];
    rows.push_back({{"k", p.k}, {"accuracy", acc}});
  }
  return rows;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string task = "all";
  std::string tokenizer;
  std::string paren_sizes, arith_sizes;
};

void cmd_gen_data(const Globals& g, const GenDataArgs& a) {
  const std::string src = !a.tokenizer.empty() ? a.tokenizer : g.bundle;
  if (src.empty()) throw UsageError("gen-data needs --bundle or --tokenizer");
  const auto tok = Tokenizer::load_bundle(src);
  std::vector<TaskId> tasks;
  if (a.task == "all" || a.task == "paren") tasks.insert(tasks.end(), kParenTasks.begin(), kParenTasks.end());
  if (a.task == "all" || a.task == "arith") tasks.insert(tasks.end(), kArithTasks.begin(), kArithTasks.end());
  if (tasks.empty()) tasks.push_back(parse_task(a.task));

  Run run(g, "gen-data", {{"task", a.task}, {"paren_sizes", a.paren_sizes}, {"arith_sizes", a.arith_sizes}});
  for (TaskId t : tasks) {
    std::vector<Example> ex;
    if (is_paren(t)) {
      ParenSplitSizes s;
      if (!a.paren_sizes.empty()) {
        const auto v = parse_sizes(a.paren_sizes, 3);
        s = {v[0], v[1], v[2]};
      }
      ex = gen_paren_dataset(t, g.seed, tok, s);
    } else {
      ArithSplitSizes s;
      if (!a.arith_sizes.empty()) {
        const auto v = parse_sizes(a.arith_sizes, 3);
        s = {v[0], v[1], v[2]};
      }
      ex = gen_arith_dataset(t, g.seed, tok, s);
    }
    const auto name = dataset_path("", t).string();
    write_jsonl(run.path(name), ex);
    std::cout << name << ": " << ex.size() << " examples\n";
  }
  run.finish();
}

struct AttributeArgs {
  std::string tasks = "paren";
  std::string component = "heads";
  std::string data, sizes;
  double tau = 0.5;
  double threshold = 0.7;
  int prefilter = 50;
  int extremes_k = 10;
  std::size_t f1_top = 60;
};

void cmd_attribute(const Globals& g, const AttributeArgs& a) {
  const bool arith = is_arith_family(a.tasks);
  const auto which = parse_component_set(a.component);
  PromotionConfig cfg{a.tau, a.threshold, a.prefilter};
  cfg.validate();
  Run run(g, "attribute",
          {{"tasks", a.tasks}, {"component", a.component}, {"data", a.data}, {"sizes", a.sizes},
           {"tau", a.tau}, {"threshold", a.threshold}, {"prefilter", a.prefilter}});
  const auto m = load(g);
  const Engine engine(m.weights);
  const auto data = task_data(g, m.tok, arith, a.data, a.sizes);
  run.lap("load");

  if (arith) {
    if (which != ComponentSet::heads) throw UsageError("arithmetic attribution covers attention heads only");
    const auto reps = arith_reports(engine, all_heads(engine.config()), data.train, a.tau, nullptr, g.threads);
    run.lap("attribute");
    run.text("reports_heads.csv", reports_csv(reps));
    run.json_file("reports.json", {{"tasks", "arith"}, {"heads", reps}, {"neurons", json::array()}});
    std::cout << "heads: " << reps.size() << "\n";
    run.finish();
    return;
  }

  const auto res = attribute_paren(engine, m.tok, data, which, cfg, g.seed, g.threads);
  run.lap("attribute");
  json summary = {{"tau", a.tau}, {"threshold", a.threshold}};
  if (which != ComponentSet::neurons) {
    run.text("reports_heads.csv", reports_csv(res.heads));
    run.text("accuracy_hist_heads.csv", accuracy_histogram_csv(res.heads));
    run.text("precision_recall_heads.csv", precision_recall_csv(res.heads));
    const auto ranked = rank_components(res.heads, RankMetric::f1);
    run.text("f1_top_heads.csv", f1_distribution_csv(res.heads, ranked, a.f1_top));
    json high = json::array();
    for (const auto& r : res.heads)
      if (r.generalizability >= 1) high.push_back({{"component", r.id}, {"generalizability", r.generalizability}});
    summary["heads"] = {{"count", res.heads.size()},
                        {"exactly_one_task", count_generalizing(res.heads, 1, 1)},
                        {"two_or_more_tasks", count_generalizing(res.heads, 2, 4)},
                        {"high_accuracy", high}};
    std::cout << "heads: " << res.heads.size() << " (accurate on exactly 1 task: "
              << count_generalizing(res.heads, 1, 1) << ", on >= 2: " << count_generalizing(res.heads, 2, 4) << ")\n";
  }
  if (which != ComponentSet::heads) {
    run.text("reports_neurons.csv", reports_csv(res.neurons));
    run.text("accuracy_hist_neurons.csv", accuracy_histogram_csv(res.neurons));
    run.text("precision_recall_neurons.csv", precision_recall_csv(res.neurons));
    json extremes = json::array();
    const auto answers = m.tok.answer_tokens();
    int dual = 0;
    for (std::size_t i = 0; i < res.neurons.size(); ++i) {
      if (res.neurons[i].generalizability < 1) continue;
      const auto ex = neuron_extremes(m.weights, res.neurons[i].id, a.extremes_k, res.neuron_mean_coefficient[i], answers);
      dual += ex.dual_sign ? 1 : 0;
      extremes.push_back(neuron_extremes_json(ex, &m.tok));
    }
    run.json_file("neuron_extremes.json", extremes);
    summary["neurons"] = {{"total", res.neurons_total},
                          {"after_prefilter", res.neurons.size()},
                          {"exactly_one_task", count_generalizing(res.neurons, 1, 1)},
                          {"two_or_more_tasks", count_generalizing(res.neurons, 2, 4)},
                          {"dual_sign", dual}};
    std::cout << "neurons: " << res.neurons.size() << " of " << res.neurons_total << " kept by the prefilter\n";
  }
  run.json_file("reports.json", {{"tasks", "paren"}, {"heads", res.heads}, {"neurons", res.neurons}});
  run.json_file("generalizability.json", summary);
  run.finish();
}

struct RankArgs {
  std::string reports;
  std::string metric = "f1";
  std::string component = "heads";
};

RankedList rank_reports(const std::vector<ComponentReport>& reps, RankMetric metric) {
  const bool recall_only = !reps.empty() && reps.front().recall_only;
  return recall_only ? rank_by_recall_only(reps) : rank_components(reps, metric);
}

void cmd_rank(const Globals& g, const RankArgs& a) {
  const auto metric = parse_rank_metric(a.metric);
  const auto which = parse_component_set(a.component);
  if (which == ComponentSet::both) throw UsageError("rank heads and neurons separately");
  const json j = read_json(a.reports);
  const auto reps = j.at(which == ComponentSet::heads ? "heads" : "neurons").get<std::vector<ComponentReport>>();
  Run run(g, "rank", {{"reports", a.reports}, {"metric", a.metric}, {"component", a.component}});
  const auto ranked = rank_reports(reps, metric);
  run.json_file("ranking.json", ranked);
  for (std::size_t i = 0; i < std::min<std::size_t>(10, ranked.entries.size()); ++i)
    std::cout << i + 1 << ". " << ranked.entries[i].id.label() << " (generalizability "
              << ranked.entries[i].generalizability << ", " << a.metric << " " << ranked.entries[i].metric << ")\n";
  run.finish();
}

struct SteerArgs {
  std::string tasks = "paren";
  std::string component = "heads";
  std::string metric = "f1";
  std::string alpha = "search";
  std::string data, sizes;
  std::string ranking, neuron_ranking;
  std::size_t k = 60;
  std::size_t k_neurons = 0;
  std::string ks = "0,5,10,20,40,60";
  double tau = 0.5;
  double threshold = 0.7;
  int prefilter = 50;
};

struct Rankings {
  RankedList heads, neurons;
  bool have_heads = false, have_neurons = false;
};

Rankings obtain_rankings(const Globals& g, const Loaded& m, const Engine& engine, const TaskData& data, bool arith,
                         ComponentSet which, const SteerArgs& a) {
  Rankings r;
  const auto metric = parse_rank_metric(a.metric);
  if (!a.ranking.empty()) {
    r.heads = read_json(a.ranking).get<RankedList>();
    r.have_heads = true;
  }
  if (!a.neuron_ranking.empty()) {
    r.neurons = read_json(a.neuron_ranking).get<RankedList>();
    r.have_neurons = true;
  }
  const bool need_heads = which != ComponentSet::neurons && !r.have_heads;
  const bool need_neurons = which != ComponentSet::heads && !r.have_neurons;
  if (arith) {
    if (which != ComponentSet::heads) throw UsageError("arithmetic steering covers attention heads only");
    if (need_heads) {
      r.heads = rank_by_recall_only(arith_reports(engine, all_heads(engine.config()), data.train, a.tau, nullptr, g.threads));
      r.have_heads = true;
    }
    return r;
  }
  if (need_heads || need_neurons) {
    const auto set = need_heads && need_neurons ? ComponentSet::both
                     : need_heads              ? ComponentSet::heads
                                               : ComponentSet::neurons;
    const auto res =
        attribute_paren(engine, m.tok, data, set, PromotionConfig{a.tau, a.threshold, a.prefilter}, g.seed, g.threads);
    if (need_heads) r.heads = rank_components(res.heads, metric), r.have_heads = true;
    if (need_neurons) r.neurons = rank_components(res.neurons, metric), r.have_neurons = true;
  }
  return r;
}

SteerPlan plan_for(const Rankings& r, ComponentSet which, std::size_t k, std::size_t k_neurons, float alpha) {
  switch (which) {
    case ComponentSet::heads: return build_plan(r.heads, k, alpha);
    case ComponentSet::neurons: return build_plan(r.neurons, k, alpha);
    case ComponentSet::both: return build_joint_plan(r.heads, k, r.neurons, k_neurons ? k_neurons : k, alpha);
  }
  return {};
}

// Alpha search over dev accuracy using the steered plan for a given k.
AlphaSearchResult choose_alpha(const Globals& g, const Engine& engine, const Rankings& r, ComponentSet which,
                               std::size_t k, std::size_t k_neurons, const TaskData& data,
                               const std::string& alpha) {
  if (alpha != "search") {
    AlphaSearchResult res;
    res.k = k;
    try {
      res.selected_alpha = std::stof(alpha);
    } catch (const std::exception&) {
      throw UsageError("--alpha must be a number or 'search'");
    }
    if (!(res.selected_alpha > 0.0f)) throw UsageError("--alpha must be positive");
    return res;
  }
  if (which == ComponentSet::heads) return search_alpha(engine, r.heads, k, data.dev, default_alpha_grid(), g.threads);
  if (which == ComponentSet::neurons)
    return search_alpha(engine, r.neurons, k, data.dev, default_alpha_grid(), g.threads);
  AlphaSearchResult res;
  res.k = k;
  for (float a : default_alpha_grid()) {
    AlphaPoint p;
    p.alpha = a;
    p.accuracy = evaluate_tasks(engine, plan_for(r, which, k, k_neurons, a), data.dev, g.threads);
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

json steer_config(const SteerArgs& a) {
  return {{"tasks", a.tasks},   {"component", a.component}, {"metric", a.metric},   {"alpha", a.alpha},
          {"data", a.data},     {"sizes", a.sizes},         {"ranking", a.ranking}, {"neuron_ranking", a.neuron_ranking},
          {"k", a.k},           {"k_neurons", a.k_neurons}, {"tau", a.tau},         {"threshold", a.threshold},
          {"prefilter", a.prefilter}};
}

void cmd_steer(const Globals& g, const SteerArgs& a) {
  const bool arith = is_arith_family(a.tasks);
  const auto which = parse_component_set(a.component);
  Run run(g, "steer", steer_config(a));
  const auto m = load(g);
  const Engine engine(m.weights);
  const auto data = task_data(g, m.tok, arith, a.data, a.sizes);
  run.lap("load");
  const auto r = obtain_rankings(g, m, engine, data, arith, which, a);
  run.lap("rank");
  if (r.have_heads) run.json_file("ranking.json", r.heads);
  if (r.have_neurons) run.json_file("ranking_neurons.json", r.neurons);

  const auto search = choose_alpha(g, engine, r, which, a.k, a.k_neurons, data, a.alpha);
  run.lap("alpha_search");
  run.json_file("alpha_search.json", search);
  const auto plan = plan_for(r, which, a.k, a.k_neurons, search.selected_alpha);
  validate_plan(m.weights.config, plan);
  run.json_file("plan.json", plan);

  const std::vector<SweepPoint> points{{0, evaluate_tasks(engine, {}, data.test, g.threads)},
                                       {plan.size(), evaluate_tasks(engine, plan, data.test, g.threads)}};
  run.lap("evaluate");
  run.text("accuracy.csv", accuracy_csv(points, search.selected_alpha, a.metric, data.tasks));
  run.json_file("steer.json", {{"tasks", a.tasks},
                               {"component", a.component},
                               {"metric", arith ? "recall" : a.metric},
                               {"k", a.k},
                               {"alpha", widen_decimal(search.selected_alpha)},
                               {"baseline", sweep_json({points[0]}, data.tasks)[0]["accuracy"]},
                               {"steered", sweep_json({points[1]}, data.tasks)[0]["accuracy"]}});
  for (std::size_t t = 0; t < 4; ++t)
    std::printf("%-12s baseline %.3f  steered %.3f\n", to_string(data.tasks[t]).c_str(), points[0].accuracy[t],
                points[1].accuracy[t]);
  std::printf("alpha %.2f, %zu components\n", search.selected_alpha, plan.size());
  run.finish();
}

void cmd_sweep(const Globals& g, const SteerArgs& a) {
  const bool arith = is_arith_family(a.tasks);
  const auto which = parse_component_set(a.component);
  if (which == ComponentSet::both) throw UsageError("sweep one component kind at a time");
  json cfg = steer_config(a);
  cfg["ks"] = a.ks;
  Run run(g, "sweep", cfg);
  const auto m = load(g);
  const Engine engine(m.weights);
  const auto data = task_data(g, m.tok, arith, a.data, a.sizes);
  const auto r = obtain_rankings(g, m, engine, data, arith, which, a);
  const auto& ranked = which == ComponentSet::heads ? r.heads : r.neurons;
  std::vector<std::size_t> ks;
  for (auto k : parse_sizes(a.ks, 0)) ks.push_back(std::min(k, ranked.entries.size()));
  const std::size_t kmax = ks.empty() ? 0 : *std::max_element(ks.begin(), ks.end());
  const auto search = choose_alpha(g, engine, r, which, kmax, 0, data, a.alpha);
  run.json_file("alpha_search.json", search);
  const auto points = sweep_k(engine, ranked, ks, search.selected_alpha, data.test, g.threads);
  run.lap("sweep");
  run.text("sweep.csv", accuracy_csv(points, search.selected_alpha, a.metric, data.tasks));
  run.json_file("sweep.json", {{"component", a.component},
                               {"metric", arith ? "recall" : a.metric},
                               {"alpha", widen_decimal(search.selected_alpha)},
                               {"points", sweep_json(points, data.tasks)}});
  for (const auto& p : points) {
    std::printf("k=%-4zu", p.k);
    for (double v : p.accuracy) std::printf(" %.3f", v);
    std::printf("\n");
  }
  run.finish();
}

struct PatchArgs {
  std::string task = "all";
  std::string data, sizes;
  std::size_t max_pairs = 20;
  std::size_t max_k = 10;
  std::string position_ks = "1,5,10,20,50,100,200";
  bool final_only = false;
};

std::vector<PromptPair> prepare_pairs(const Globals& g, const Engine& engine, const Tokenizer& tok,
                                      const std::vector<Example>& clean, std::size_t max_pairs, TaskId task,
                                      json& log) {
  std::vector<PromptPair> pairs;
  for (const auto& ex : clean)
    for (auto& p : gen_counterfactuals(ex, tok)) pairs.push_back(std::move(p));
  // sample before the (expensive) filter, keeping enough headroom
  std::mt19937_64 rng(g.seed * 1000003ULL + static_cast<std::uint64_t>(task));
  std::shuffle(pairs.begin(), pairs.end(), rng);
  if (pairs.size() > 4 * max_pairs) pairs.resize(4 * max_pairs);
  auto filtered = filter_counterfactuals(engine, pairs, g.threads);
  if (filtered.kept.size() > max_pairs) filtered.kept.resize(max_pairs);
  log = {{"candidates", pairs.size()},
         {"clean_incorrect", filtered.clean_incorrect},
         {"logit_failed", filtered.logit_failed},
         {"relaxed", filtered.relaxed},
         {"kept", filtered.kept.size()}};
  return filtered.kept;
}

// blank when no pair had a usable denominator
std::string faith_value(const FaithfulnessResult& f) { return f.used ? fmt(f.mean) : ""; }

void cmd_patch(const Globals& g, const PatchArgs& a) {
  std::vector<TaskId> tasks;
  if (a.task == "all")
    tasks.assign(kParenTasks.begin(), kParenTasks.end());
  else
    tasks.push_back(parse_task(a.task));
  for (TaskId t : tasks)
    if (!is_paren(t)) throw UsageError("patching is defined for paren sub-tasks");
  Run run(g, "patch", {{"task", a.task}, {"data", a.data}, {"sizes", a.sizes}, {"max_pairs", a.max_pairs},
                       {"max_k", a.max_k}, {"position_ks", a.position_ks}, {"final_only", a.final_only}});
  const auto m = load(g);
  const Engine engine(m.weights);
  const auto data = task_data(g, m.tok, false, a.data, a.sizes);
  const auto& cfg = m.weights.config;

  std::vector<EffectTable> tables;
  json summary = {{"tasks", json::object()}};
  std::ostringstream faith;
  faith << "task,granularity,k,faithfulness,pairs_used,pairs_excluded\n";
  for (TaskId t : tasks) {
    json train_log, test_log;
    const auto train = prepare_pairs(g, engine, m.tok, data.train[task_slot(t)], a.max_pairs, t, train_log);
    const auto test = prepare_pairs(g, engine, m.tok, data.test[task_slot(t)], a.max_pairs, t, test_log);
    auto table = compute_effects(engine, t, train, a.final_only, g.threads);
    table.relaxed = train_log.at("relaxed").get<bool>();
    const auto heads = rank_heads_by_effect({table}, cfg);
    json curve = json::array();
    for (std::size_t k = 0; k <= std::min(a.max_k, heads.entries.size()); ++k) {
      const auto f = faithfulness(engine, Circuit::from_heads(heads.top(k)), test, g.threads);
      faith << to_string(t) << ",heads," << k << ',' << faith_value(f) << ',' << f.used << ',' << f.excluded << '\n';
      curve.push_back({{"k", k}, {"faithfulness", f.used ? json(f.mean) : json(nullptr)}});
    }
    if (!a.final_only) {
      const auto hp = rank_head_positions({table});
      for (auto k : parse_sizes(a.position_ks, 0)) {
        if (k > hp.size()) break;
        const auto f = faithfulness(engine, Circuit::from_head_positions(hp, k), test, g.threads);
        faith << to_string(t) << ",head_position," << k << ',' << faith_value(f) << ',' << f.used << ','
              << f.excluded << '\n';
      }
    }
    summary["tasks"][to_string(t)] = {{"train_pairs", train_log}, {"test_pairs", test_log}, {"head_curve", curve}};
    tables.push_back(std::move(table));
    std::cout << to_string(t) << ": " << train.size() << " train pairs, " << test.size() << " test pairs"
              << (train_log.at("relaxed").get<bool>() ? " (filter relaxed)" : "") << "\n";
    run.lap(to_string(t));
  }
  run.text("effects.csv", effects_csv(tables));
  run.json_file("ranking.json", rank_heads_by_effect(tables, cfg));
  run.text("faithfulness.csv", faith.str());
  run.json_file("patch.json", summary);
  run.finish();
}

struct OverlapArgs {
  std::string a, b;
  std::size_t ka = 10, kb = 10;
};

void cmd_overlap(const Globals& g, const OverlapArgs& a) {
  const auto la = read_json(a.a).get<RankedList>();
  const auto lb = read_json(a.b).get<RankedList>();
  Run run(g, "overlap", {{"a", a.a}, {"b", a.b}, {"ka", a.ka}, {"kb", a.kb}});
  const double v = overlap(la, a.ka, lb, a.kb);
  run.json_file("overlap.json", {{"a", a.a}, {"b", a.b}, {"ka", a.ka}, {"kb", a.kb}, {"overlap", v}});
  std::printf("%.4f\n", v);
  run.finish();
}

void cmd_report(const std::string& run_dir, const std::string& out) {
  const fs::path dir(run_dir);
  if (!fs::exists(dir / "run.json")) throw BundleError("no run record at " + (dir / "run.json").string());
  const auto record = read_json(dir / "run.json").get<RunRecord>();
  json rep = {{"run_id", record.run_id}, {"command", record.command}, {"config", record.config},
              {"bundle_hash", record.bundle_hash}};
  for (const char* name : {"steer.json", "sweep.json", "alpha_search.json", "generalizability.json", "patch.json",
                           "overlap.json"})
    if (fs::exists(dir / name)) rep[fs::path(name).stem().string()] = read_json(dir / name);
  if (fs::exists(dir / "f1_top_heads.csv")) rep["f1_distribution"] = "f1_top_heads.csv";

  std::ostringstream s;
  s << "run " << record.run_id << " (" << record.command << ")\n";
  if (rep.contains("steer")) {
    const auto& st = rep["steer"];
    s << "steering " << st["component"].get<std::string>() << ", k=" << st["k"] << ", alpha=" << st["alpha"]
      << ", metric=" << st["metric"].get<std::string>() << "\n";
    for (auto it = st["baseline"].begin(); it != st["baseline"].end(); ++it)
      s << "  " << it.key() << ": " << fmt(it.value().get<double>()) << " -> "
        << fmt(st["steered"][it.key()].get<double>()) << "\n";
  }
  if (rep.contains("sweep")) {
    s << "k sweep (alpha " << rep["sweep"]["alpha"] << ")\n";
    for (const auto& p : rep["sweep"]["points"]) s << "  k=" << p["k"] << " " << p["accuracy"].dump() << "\n";
  }
  if (rep.contains("generalizability") && rep["generalizability"].contains("heads")) {
    const auto& h = rep["generalizability"]["heads"];
    s << "heads accurate on exactly 1 task: " << h["exactly_one_task"] << ", on >= 2: " << h["two_or_more_tasks"]
      << "\n";
  }
  if (rep.contains("overlap")) s << "overlap: " << rep["overlap"]["overlap"] << "\n";
  const fs::path target = out.empty() ? dir : fs::path(out);
  write_json(target / "report.json", rep);
  write_text(target / "summary.txt", s.str());
  std::cout << s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"steerlab: component attribution and steering for GPT-2 family models"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--bundle,--model", g.bundle, "Model bundle directory");
  app.add_option("--seed", g.seed, "Dataset and sampling seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "Generate task datasets as JSON lines");
  c_gen->add_option("--task", gen.task, "all, paren, arith or a single task name");
  c_gen->add_option("--tokenizer", gen.tokenizer, "Directory with vocab.json and merges.txt");
  c_gen->add_option("--paren-sizes", gen.paren_sizes, "train,dev,test sizes for paren tasks");
  c_gen->add_option("--arith-sizes", gen.arith_sizes, "train,dev,test sizes for arithmetic tasks");

  AttributeArgs att;
  auto* c_att = app.add_subcommand("attribute", "Score every component on the train sets");
  c_att->add_option("--tasks", att.tasks, "paren or arith");
  c_att->add_option("--component", att.component, "heads, neurons or both");
  c_att->add_option("--data", att.data, "Dataset directory from gen-data (default: generate from --seed)");
  c_att->add_option("--sizes", att.sizes, "train,dev,test sizes when generating");
  c_att->add_option("--tau", att.tau, "Promotion threshold");
  c_att->add_option("--threshold", att.threshold, "Accuracy threshold for generalizability");
  c_att->add_option("--prefilter", att.prefilter, "Neuron prefilter depth");
  c_att->add_option("--extremes-k", att.extremes_k, "Tokens listed per neuron extreme");
  c_att->add_option("--f1-top", att.f1_top, "Top-ranked heads in the F1 distribution export");

  RankArgs rk;
  auto* c_rank = app.add_subcommand("rank", "Rank components from attribute's reports.json");
  c_rank->add_option("--reports", rk.reports, "reports.json")->required();
  c_rank->add_option("--metric", rk.metric, "recall, precision or f1");
  c_rank->add_option("--component", rk.component, "heads or neurons");

  SteerArgs st;
  auto add_steer_options = [&](CLI::App* c) {
    c->add_option("--tasks", st.tasks, "paren or arith");
    c->add_option("--component", st.component, "heads, neurons or both");
    c->add_option("--rank-metric", st.metric, "recall, precision or f1");
    c->add_option("--alpha", st.alpha, "Multiplier, or 'search' to pick it on dev");
    c->add_option("--data", st.data, "Dataset directory from gen-data");
    c->add_option("--sizes", st.sizes, "train,dev,test sizes when generating");
    c->add_option("--ranking", st.ranking, "Precomputed head ranking.json");
    c->add_option("--neuron-ranking", st.neuron_ranking, "Precomputed neuron ranking.json");
    c->add_option("--tau", st.tau, "Promotion threshold");
    c->add_option("--threshold", st.threshold, "Accuracy threshold");
    c->add_option("--prefilter", st.prefilter, "Neuron prefilter depth");
  };
  auto* c_steer = app.add_subcommand("steer", "Steer the top-k components and report test accuracy");
  add_steer_options(c_steer);
  c_steer->add_option("--k", st.k, "Components to steer");
  c_steer->add_option("--k-neurons", st.k_neurons, "Neurons to steer with --component both (default: --k)");
  auto* c_sweep = app.add_subcommand("sweep", "Accuracy as a function of k");
  add_steer_options(c_sweep);
  c_sweep->add_option("--ks", st.ks, "Comma-separated k values");

  PatchArgs pa;
  auto* c_patch = app.add_subcommand("patch", "Activation-patching baseline");
  c_patch->add_option("--task", pa.task, "A paren sub-task or all");
  c_patch->add_option("--data", pa.data, "Dataset directory from gen-data");
  c_patch->add_option("--sizes", pa.sizes, "train,dev,test sizes when generating");
  c_patch->add_option("--max-pairs", pa.max_pairs, "Prompt pairs per task and split");
  c_patch->add_option("--max-k", pa.max_k, "Largest head circuit evaluated");
  c_patch->add_option("--position-ks", pa.position_ks, "Head-position circuit sizes evaluated");
  c_patch->add_flag("--final-only", pa.final_only, "Patch only the final position");

  OverlapArgs ov;
  auto* c_ov = app.add_subcommand("overlap", "Fraction of top-k_a of A found in top-k_b of B");
  c_ov->add_option("--a", ov.a, "ranking.json")->required();
  c_ov->add_option("--b", ov.b, "ranking.json")->required();
  c_ov->add_option("--ka", ov.ka, "k for A");
  c_ov->add_option("--kb", ov.kb, "k for B");

  std::string run_dir;
  auto* c_rep = app.add_subcommand("report", "Consolidate a run directory");
  c_rep->add_option("--run", run_dir, "Run directory containing run.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? exit_codes::ok : exit_codes::usage;
  }

  try {
    if (*c_gen) cmd_gen_data(g, gen);
    if (*c_att) cmd_attribute(g, att);
    if (*c_rank) cmd_rank(g, rk);
    if (*c_steer) cmd_steer(g, st);
    if (*c_sweep) cmd_sweep(g, st);
    if (*c_patch) cmd_patch(g, pa);
    if (*c_ov) cmd_overlap(g, ov);
    if (*c_rep) cmd_report(run_dir, g.out == "." ? "" : g.out);
  } catch (const steerlab::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_codes::io;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_codes::validation;
  }
  return exit_codes::ok;
}
