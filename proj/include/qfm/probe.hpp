#pragma once

// Linear probe: multinomial logistic regression on frozen encoder features.

#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "qfm/model.hpp"
#include "qfm/preprocess.hpp"

namespace qfm::probe {

struct ProbeConfig {
  int classes = 5;
  int iterations = 500;
  double lr = 0.1;
  double l2 = 1e-3;
};

struct LinearProbe {
  Eigen::MatrixXd weights;   // features x classes
  Eigen::RowVectorXd bias;   // 1 x classes
  Eigen::RowVectorXd mean;   // feature standardization
  Eigen::RowVectorXd scale;

  Eigen::MatrixXd logits(const Eigen::MatrixXd& x) const;
  std::vector<int> predict(const Eigen::MatrixXd& x) const;
};

/// Full-batch Adam on the mean cross entropy plus l2 * ||W||^2. Deterministic.
LinearProbe fit_probe(const Eigen::MatrixXd& x, const std::vector<int>& y, const ProbeConfig& cfg = {});

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth);
/// Share of the most frequent class; the accuracy of always guessing it.
double majority_rate(const std::vector<int>& y, int classes);

/// Mean-pooled final-layer features (one row per segment).
Eigen::MatrixXd extract_features(model::EncoderParams<float>& params, const model::ModelConfig& cfg,
                                 const std::vector<Segment>& segments, int threads = 1);

}  // namespace qfm::probe
