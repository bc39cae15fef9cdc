#pragma once

// Desk-scale pretraining experiment shared by `ablate` and the acceptance suite: synthetic mixed-noise
// sessions, SQI labels and mined pairs, a short pretraining run, then linear probes on the teacher,
// the student and a randomly initialized encoder against the 5-class quality label of held-out
// subjects.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "qfm/probe.hpp"
#include "qfm/sqi.hpp"
#include "qfm/train.hpp"

namespace qfm::smoke {

struct SmokeConfig {
  model::ModelConfig model = model::ModelConfig::tiny();
  train::PretrainConfig pretrain;  // max_steps, batch_size and lr are taken from the fields below
  probe::ProbeConfig probe;
  SqiConfig sqi;
  int steps = 200;
  int batch_size = 16;
  double lr = 1e-3;
  int pairs = 500;
  int subjects = 12;
  double minutes = 10.0;
  double noise_level = 1.0;
  int probe_subjects = 16;
  int probe_train_subjects = 11;  // the rest are the held-out probe test set
  std::uint64_t seed = 1;
  int threads = 1;
};

/// Inputs that depend only on the seed and the corpus settings, reusable across model variants.
struct SmokeData {
  std::vector<Segment> segments;
  std::vector<QualityPair> pairs;
  std::vector<train::PairSample<float>> samples;
  std::array<int, 5> label_counts{};
  std::vector<Segment> probe_segments;
  std::vector<int> probe_labels;
  std::vector<std::size_t> probe_train;
  std::vector<std::size_t> probe_test;
};

struct SmokeResult {
  double initial_loss = 0.0;
  double smoothed_final = 0.0;
  double loss_ratio = 0.0;
  double teacher_acc = 0.0;
  double student_acc = 0.0;
  double random_acc = 0.0;
  double chance = 0.0;  // majority-class rate of the probe test labels
  std::size_t n_pairs = 0;
  double seconds = 0.0;
  std::vector<train::StepLog> history;
};

/// Synthetic sessions: one mixed-noise record pair per subject with the heart rate drawn in
/// [55, 110] bpm; subject ids are prefix + zero-padded index.
std::vector<Segment> synthetic_sessions(int subjects, double minutes, double noise_level, std::uint64_t seed,
                                        const std::string& prefix, int threads = 1);

SmokeData prepare(const SmokeConfig& cfg);
SmokeResult run(const SmokeData& data, const SmokeConfig& cfg);

/// Test-set accuracy of a probe fitted on the training rows of `features`.
double probe_accuracy(const Eigen::MatrixXd& features, const SmokeData& data, const probe::ProbeConfig& cfg);

// ---- ablations ----------------------------------------------------------------------------------------

struct AblationPoint {
  std::string value;  // window size, or "amp:pha" loss weights
  std::uint64_t seed = 0;
  SmokeResult result;
};

/// One run per (seed, window); the corpus is prepared once per seed.
std::vector<AblationPoint> ablate_window(const SmokeConfig& base, const std::vector<int>& windows,
                                         const std::vector<std::uint64_t>& seeds);
/// One run per (seed, (lambda_amp, lambda_pha)).
std::vector<AblationPoint> ablate_loss(const SmokeConfig& base, const std::vector<std::pair<double, double>>& weights,
                                       const std::vector<std::uint64_t>& seeds);

std::string loss_label(double lambda_amp, double lambda_pha);

/// Per-run rows, then the mean probe accuracy and loss ratio per value.
std::string ablation_table(const std::string& axis, const std::vector<AblationPoint>& points);

/// Seeds where the teacher probe under value `a` scores strictly below value `b`, and the number
/// of seeds that have both.
std::pair<int, int> count_below(const std::vector<AblationPoint>& points, const std::string& a, const std::string& b);

}  // namespace qfm::smoke
