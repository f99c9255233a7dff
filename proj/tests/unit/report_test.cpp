#include <gtest/gtest.h>

#include "steerlab/report.hpp"

using namespace steerlab;

namespace {

RankedList heads(std::initializer_list<std::pair<int, int>> ids) {
  RankedList l;
  for (auto [a, b] : ids) l.entries.push_back({ComponentId::head(a, b), 0, 0.0});
  return l;
}

}  // namespace

TEST(Overlap, Examples) {
  const auto a = heads({{9, 10}, {8, 1}, {7, 2}, {6, 3}, {5, 4}});
  EXPECT_DOUBLE_EQ(overlap(a, 5, a, 5), 1.0);
  EXPECT_DOUBLE_EQ(overlap(a, 5, heads({{0, 0}, {0, 1}, {0, 2}, {0, 3}, {0, 4}}), 5), 0.0);
  EXPECT_DOUBLE_EQ(overlap(a, 5, heads({{0, 0}, {7, 2}, {0, 2}, {0, 3}, {0, 4}}), 5), 0.2);
  EXPECT_DOUBLE_EQ(overlap(a, 2, a, 5), 1.0);
  EXPECT_THROW(overlap(a, 6, a, 5), ConfigError);
  EXPECT_THROW(overlap(a, 0, a, 5), ConfigError);
}

TEST(Exports, HistogramSkipsNearZeroAccuracy) {
  std::vector<ComponentReport> reps(4);
  reps[0].accuracy = {0.005, 0.0, 0.0, 0.0};
  reps[1].accuracy = {0.05, 0.0, 0.0, 0.0};
  reps[2].accuracy = {1.0, 0.0, 0.0, 0.0};
  reps[3].accuracy = {0.71, 0.0, 0.0, 0.0};
  const auto csv = accuracy_histogram_csv(reps);
  EXPECT_NE(csv.find("one-paren,0.01,0.10000000000000001,1\n"), std::string::npos) << csv;
  EXPECT_NE(csv.find("one-paren,0.69999999999999996,0.80000000000000004,1\n"), std::string::npos) << csv;
  EXPECT_NE(csv.find("one-paren,0.90000000000000002,1,1\n"), std::string::npos) << csv;
  EXPECT_NE(csv.find("two-paren,0.01,0.10000000000000001,0\n"), std::string::npos) << csv;
}

TEST(Exports, ReportCsvHasOneRowPerComponent) {
  std::vector<ComponentReport> reps(3);
  reps[0].id = ComponentId::head(0, 1);
  reps[1].id = ComponentId::head(2, 3);
  reps[2].id = ComponentId::neuron(1, 7);
  const auto csv = reports_csv(reps);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_EQ(csv.rfind("component,layer,index,kind,accuracy_1", 0), 0u);
  EXPECT_NE(csv.find("L1N7,1,7,neuron"), std::string::npos);
}

TEST(RunRecordTest, IdDependsOnlyOnConfig) {
  const nlohmann::json a = {{"seed", 7}, {"k", 60}};
  const nlohmann::json b = {{"k", 60}, {"seed", 7}};
  EXPECT_EQ(make_run_id("steer", a), make_run_id("steer", b));
  EXPECT_NE(make_run_id("steer", a), make_run_id("steer", {{"seed", 8}, {"k", 60}}));
  RunRecord r{"x", "steer", "abc", a, {"plan.json"}, {{"total", 1.5}}};
  const nlohmann::json j = r;
  const auto back = j.get<RunRecord>();
  EXPECT_EQ(back.artifacts, r.artifacts);
  EXPECT_EQ(back.config, a);
}
