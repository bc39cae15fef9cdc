#include <cmath>
#include <cstring>
#include <random>
#include <set>

#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"
#include "qfm/downstream.hpp"
#include "qfm/errors.hpp"

using namespace qfm;
using namespace qfm::downstream;

TEST_CASE("classification metrics on a hand-checked case") {
  const std::vector<int> y{1, 1, 0, 0, 1};
  const std::vector<double> s{0.9, 0.4, 0.5, 0.1, 0.5};
  const auto r = classify_metrics(y, s);
  CHECK(r.tp == 2);
  CHECK(r.fn == 1);
  CHECK(r.fp == 1);
  CHECK(r.tn == 1);
  CHECK(r.acc == doctest::Approx(0.6));
  CHECK(*r.ppv == doctest::Approx(2.0 / 3.0));
  CHECK(*r.f1 == doctest::Approx(2.0 / 3.0));
  // Positives outrank negatives in 4 of 6 pairs, one tie at 0.5.
  CHECK(*r.auc == doctest::Approx((4 + 0.5) / 6));
}

TEST_CASE("rank AUC equals the trapezoid ROC area") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> grid(0, 4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> y;
    std::vector<double> s;
    for (int i = 0; i < 30; ++i) {
      y.push_back(u(rng) < 0.3);
      s.push_back(trial % 2 ? grid(rng) * 0.25 : u(rng));
    }
    const auto auc = rank_auc(y, s);
    const bool both = std::count(y.begin(), y.end(), 1) > 0 && std::count(y.begin(), y.end(), 0) > 0;
    REQUIRE(auc.has_value() == both);
    if (both) CHECK(std::abs(*auc - oracle::trapezoid_auc(y, s)) <= 1e-12);
  }
  CHECK_FALSE(rank_auc({1, 1}, {0.2, 0.3}).has_value());
}

TEST_CASE("undefined ratios are absent") {
  const auto r = classify_metrics({0, 0, 0}, {0.1, 0.2, 0.3});
  CHECK_FALSE(r.tpr.has_value());
  CHECK(r.tnr.has_value());
  CHECK_FALSE(r.ppv.has_value());
  CHECK_FALSE(r.auc.has_value());
  CHECK_THROWS_AS(classify_metrics({0, 1}, {0.5}), ContractError);
}

TEST_CASE("regression metrics") {
  const std::vector<double> y{100, 120, 140}, pred{110, 118, 141}, naive{120, 120, 120};
  const auto r = regress_metrics(y, pred, naive);
  CHECK(r.mae == doctest::Approx(13.0 / 3.0));
  CHECK(r.me == doctest::Approx(3.0));
  // errors 10, -2, 1 around mean 3: squares 49 + 25 + 4 over n - 1
  CHECK(r.sd == doctest::Approx(std::sqrt(78.0 / 2.0)));
  CHECK(*r.mase_percent == doctest::Approx(100.0 * (13.0 / 3.0) / (40.0 / 3.0)));
  CHECK(regress_metrics(y, naive, naive).mase_percent.value() == doctest::Approx(100.0).epsilon(1e-15));
  CHECK_FALSE(regress_metrics(y, pred, y).mase_percent.has_value());
}

namespace {

LabeledDataset small_task(TaskName task, int subjects = 6, std::uint64_t seed = 3) {
  SyntheticTaskSpec s;
  s.task = task;
  s.subjects = subjects;
  s.minutes = 1.0;
  s.seed = seed;
  return generate_task_dataset(s);
}

}  // namespace

TEST_CASE("subject split is disjoint, complete and seeded") {
  const auto d = small_task(TaskName::af, 10);
  const auto a = subject_split(d.segments, 0.8, 4), b = subject_split(d.segments, 0.8, 4);
  CHECK(a.train_subjects == b.train_subjects);
  CHECK(a.train_subjects.size() == 8);
  CHECK(a.test_subjects.size() == 2);
  std::set<std::string> train(a.train_subjects.begin(), a.train_subjects.end());
  for (const auto& s : a.test_subjects) CHECK(train.count(s) == 0);
  CHECK(a.train_indices.size() + a.test_indices.size() == d.segments.size());
  for (auto i : a.test_indices) CHECK(train.count(d.segments[i].subject_id) == 0);
  CHECK(subject_split(d.segments, 0.8, 5).train_subjects != a.train_subjects);
}

TEST_CASE("synthetic task labels") {
  const auto af = small_task(TaskName::af, 8);
  CHECK_NOTHROW(af.validate());
  std::map<std::string, double> per_subject;
  for (std::size_t i = 0; i < af.segments.size(); ++i) {
    const double l = af.labels[i][0];
    CHECK((l == 0.0 || l == 1.0));
    // Labels are constant within a subject.
    if (per_subject.count(af.segments[i].subject_id)) CHECK(per_subject[af.segments[i].subject_id] == l);
    per_subject[af.segments[i].subject_id] = l;
  }
  const auto bp = small_task(TaskName::bp, 4);
  for (const auto& l : bp.labels) {
    REQUIRE(l.size() == 2);
    CHECK(l[0] > l[1]);
    CHECK(l[1] > 30.0);
    CHECK(l[0] < 250.0);
  }
}

TEST_CASE("task dataset container round-trips") {
  const auto d = small_task(TaskName::bp, 2);
  auto bytes = encode_dataset(d);
  CHECK(std::memcmp(bytes.data(), "QFMTASK1", 8) == 0);
  const auto back = decode_dataset(bytes);
  CHECK(back.task == d.task);
  CHECK(back.labels == d.labels);
  CHECK(back.segments == d.segments);
  bytes.push_back(1);
  CHECK_THROWS_AS(decode_dataset(bytes), FormatError);
}

TEST_CASE("fine-tuning, persistence and evaluation") {
  model::Checkpoint ck;
  ck.config = model::ModelConfig::tiny();
  ck.student = model::init_params<float>(ck.config, 1);
  ck.teacher = model::init_params<float>(ck.config, 2);
  const auto d = small_task(TaskName::af, 6);
  FinetuneConfig cfg;
  cfg.max_steps = 20;
  cfg.lr = 1e-2;
  auto m = finetune(ck, d, TaskSpec::make(TaskName::af), cfg);
  CHECK(std::isfinite(m.final_loss));

  auto back = decode_finetuned(encode_finetuned(m));
  const auto p1 = predict(m, d.segments), p2 = predict(back, d.segments);
  CHECK(p1 == p2);
  for (const auto& row : p1) {
    CHECK(row[0] > 0.0);
    CHECK(row[0] < 1.0);
  }
  const auto e = evaluate(m, d);
  const auto split = subject_split(d.segments, cfg.train_fraction, cfg.seed);
  CHECK(e.indices == split.test_indices);
  const auto j = nlohmann::json::parse(report_json(e));
  CHECK(j["task"] == "af");
  CHECK(j["kind"] == "binary_classification");
  CHECK(j["n"] == e.n);
  const auto& c = j["metrics"]["confusion"];
  CHECK(c["tp"].get<int>() + c["fp"].get<int>() + c["tn"].get<int>() + c["fn"].get<int>() == static_cast<int>(e.n));
  CHECK(evaluate(m, d, true).n == d.segments.size());

  CHECK_THROWS_AS(finetune(ck, d, TaskSpec::make(TaskName::bp), cfg), ContractError);
}

TEST_CASE("regression fine-tuning reports SBP and DBP") {
  model::Checkpoint ck;
  ck.config = model::ModelConfig::tiny();
  ck.student = model::init_params<float>(ck.config, 1);
  ck.teacher = model::init_params<float>(ck.config, 2);
  const auto d = small_task(TaskName::bp, 6);
  FinetuneConfig cfg;
  cfg.max_steps = 10;
  auto m = finetune(ck, d, TaskSpec::make(TaskName::bp), cfg);
  const auto e = evaluate(m, d);
  REQUIRE(e.regression.size() == 2);
  CHECK(e.regression[0].first == "SBP");
  const auto j = nlohmann::json::parse(report_json(e));
  CHECK(j["metrics"].contains("DBP"));
  CHECK(j["metrics"]["SBP"]["mae"].get<double>() >= 0.0);
  const auto tsv = predictions_tsv(e, d);
  CHECK(tsv.rfind("index\tsubject_id\tt_start_s", 0) == 0);
}
