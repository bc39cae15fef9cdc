#pragma once

// Self-distillation pretraining: temperature softmax, teacher->student cross entropy, cosine EMA
// teacher, spectral reconstruction terms, AdamW with a cosine learning-rate schedule.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qfm/model.hpp"
#include "qfm/preprocess.hpp"
#include "qfm/spectral.hpp"
#include "qfm/sqi.hpp"

namespace qfm::train {

enum class AmplitudeScale { orthonormal, none };

struct PretrainConfig {
  double tau_s = 0.1;
  double tau_t = 0.04;
  double lambda_amp = 0.5;
  double lambda_pha = 0.5;
  double lr = 1e-4;
  double min_lr = 0.0;
  int warmup_steps = 0;
  double weight_decay = 0.04;
  double beta1 = 0.7;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 512;
  int epochs = 10;
  int max_steps = 0;  // > 0 overrides epochs
  double ema_start = 0.996;
  double ema_end = 1.0;
  bool center_teacher = false;
  double center_momentum = 0.9;
  // Target amplitudes are multiplied by 1/sqrt(N) (orthonormal) or left as raw |X[k]|.
  AmplitudeScale amplitude_scale = AmplitudeScale::orthonormal;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;  // ConfigError
};

/// lambda(s) = end - (end - start) * (1 + cos(pi s / T)) / 2.
double ema_momentum(long step, long total_steps, double start = 0.996, double end = 1.0);
/// Linear warmup, then cosine decay from lr to min_lr over the remaining steps.
double cosine_lr(long step, long total_steps, double lr, double min_lr = 0.0, int warmup_steps = 0);

/// teacher <- lambda * teacher + (1 - lambda) * student, elementwise.
template <typename S>
void ema_update(model::EncoderParams<S>& teacher, model::EncoderParams<S>& student, double lambda);

template <typename S>
ad::Tensor<S> soft_distribution(const ad::Tensor<S>& logits, S tau);

/// -sum_m P_t log P_s, summed over rows. The teacher branch is detached.
template <typename S>
ad::Tensor<S> distillation_loss(const ad::Tensor<S>& teacher_logits, const ad::Tensor<S>& student_logits, S tau_t,
                                S tau_s);

/// One quality-divergent pair ready for the model: normalized inputs and the high-quality spectra.
template <typename S>
struct PairSample {
  ad::Matrix<S> high;
  ad::Matrix<S> low;
  ad::Matrix<S> amplitude;   // channels x bins, scaled per AmplitudeScale
  ad::Matrix<S> phase;       // channels x bins
  ad::Matrix<S> phase_mask;  // 1 where the phase is defined
};

template <typename S>
PairSample<S> make_sample(const Segment& high, const Segment& low, AmplitudeScale scale = AmplitudeScale::orthonormal);

template <typename S>
std::vector<PairSample<S>> make_samples(const std::vector<Segment>& segments, const std::vector<QualityPair>& pairs,
                                        AmplitudeScale scale = AmplitudeScale::orthonormal, int threads = 1);

struct LossValues {
  double dis = 0.0;
  double amp = 0.0;
  double pha = 0.0;
  double pre = 0.0;
};

template <typename S>
struct PairLoss {
  ad::Tensor<S> total;
  ad::Tensor<S> dis, amp, pha;
  ad::Tensor<S> teacher_logits;
};

/// L_pre for one pair: teacher sees the high-quality input, student the low-quality one, the
/// reconstruction head (student) predicts the high-quality spectra. `center` (1 x K, optional) is
/// subtracted from the teacher logits.
template <typename S>
PairLoss<S> composite_loss(ad::Tape<S>& tape, const model::BoundParams<S>& student,
                           const model::BoundParams<S>& teacher, const model::ModelConfig& mcfg,
                           const PretrainConfig& pcfg, const PairSample<S>& sample,
                           const ad::Matrix<S>* center = nullptr);

template <typename S>
struct AdamState {
  model::EncoderParams<S> m;
  model::EncoderParams<S> v;
  long t = 0;
};

/// Decoupled weight decay: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
template <typename S>
void adamw_step(model::EncoderParams<S>& params, AdamState<S>& state, double lr, const PretrainConfig& cfg);

template <typename S>
struct TrainState {
  model::EncoderParams<S> student;
  model::EncoderParams<S> teacher;
  AdamState<S> optimizer;
  ad::Matrix<S> center;  // 1 x K
  long step = 0;
  long total_steps = 0;
  std::uint64_t seed = 0;
};

struct StepLog {
  long step = 0;
  LossValues loss;
  double lambda = 0.0;
  double lr = 0.0;
};

std::string to_jsonl(const StepLog& log);

template <typename S>
TrainState<S> init_state(const model::ModelConfig& mcfg, const PretrainConfig& pcfg, long total_steps);

long total_steps_for(std::size_t n_pairs, const PretrainConfig& cfg);

/// One optimizer step on a batch: mean L_pre over the pairs, AdamW on the student, EMA teacher.
/// Throws NumericError naming the first non-finite component.
template <typename S>
StepLog train_step(TrainState<S>& state, const model::ModelConfig& mcfg, const PretrainConfig& pcfg,
                   const std::vector<const PairSample<S>*>& batch);

template <typename S>
struct PretrainResult {
  TrainState<S> state;
  std::vector<StepLog> history;
};

template <typename S>
PretrainResult<S> pretrain(const std::vector<PairSample<S>>& samples, const model::ModelConfig& mcfg,
                           const PretrainConfig& pcfg, const std::function<void(const StepLog&)>& on_step = {});

/// Checkpoint snapshot (float storage) of a training state.
template <typename S>
model::Checkpoint to_checkpoint(const TrainState<S>& state, const model::ModelConfig& mcfg);

/// Exponential smoothing used when reporting loss curves.
std::vector<double> smooth(const std::vector<double>& xs, double alpha = 0.1);

}  // namespace qfm::train
