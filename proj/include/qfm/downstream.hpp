#pragma once

// Fine-tuning heads on the pretrained teacher backbone and the evaluation metrics for the three
// task shapes: false VT alarm and AF (binary), SBP/DBP (two-target regression).

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qfm/model.hpp"
#include "qfm/preprocess.hpp"

namespace qfm::downstream {

enum class TaskName { vtac, af, bp };
enum class TaskKind { binary_classification, bp_regression };

TaskName parse_task(const std::string& s);
const char* to_string(TaskName t);
const char* to_string(TaskKind k);

struct TaskSpec {
  TaskName name = TaskName::vtac;
  TaskKind kind = TaskKind::binary_classification;
  int outputs = 1;            // 1 logit, or (SBP, DBP)
  double class_weight = 3.54;  // weight of the positive class in the cross entropy
  std::string label_source;

  static TaskSpec make(TaskName name, double class_weight = 3.54);
};

/// Segments with per-segment labels: {0,1} for classification, {SBP, DBP} in mmHg for bp.
struct LabeledDataset {
  TaskName task = TaskName::vtac;
  std::vector<Segment> segments;
  std::vector<std::vector<double>> labels;

  int label_width() const { return task == TaskName::bp ? 2 : 1; }
  void validate() const;  // ContractError
};

/// Container "QFMTASK1".
std::vector<std::uint8_t> encode_dataset(const LabeledDataset& d);
LabeledDataset decode_dataset(const std::vector<std::uint8_t>& bytes);
void write_dataset(const LabeledDataset& d, const std::string& path);
LabeledDataset read_dataset(const std::string& path);

struct SyntheticTaskSpec {
  TaskName task = TaskName::af;
  int subjects = 35;
  double minutes = 5.0;
  std::uint64_t seed = 0;
  int threads = 1;
};

/// Subject-level synthetic labels:
///   vtac: true alarm = fast regular rhythm (150-220 bpm); false alarm = normal rate with motion artifact.
///   af:   irregular RR intervals (CV 0.15-0.30) vs regular rhythm.
///   bp:   SBP/DBP linked to heart rate and the PPG reflected-wave height.
LabeledDataset generate_task_dataset(const SyntheticTaskSpec& spec);

// ---- metrics ----------------------------------------------------------------------------------

struct ClassificationReport {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  double acc = 0.0;
  std::optional<double> tpr, tnr, ppv, f1;
  std::optional<double> auc;  // absent when only one class is present
};

/// Confusion counts at `score >= threshold`; AUC via the rank statistic (ties count one half).
ClassificationReport classify_metrics(const std::vector<int>& labels, const std::vector<double>& scores,
                                      double threshold = 0.5);
/// Mann-Whitney AUC with average ranks for ties.
std::optional<double> rank_auc(const std::vector<int>& labels, const std::vector<double>& scores);

struct RegressionReport {
  double mae = 0.0;
  double me = 0.0;
  double sd = 0.0;  // sample standard deviation (n - 1) of the errors
  std::optional<double> mase_percent;
};

/// Errors are e = y_pred - y_true. MASE% = 100 * MAE(model) / MAE(naive); absent if MAE(naive) == 0.
RegressionReport regress_metrics(const std::vector<double>& y_true, const std::vector<double>& y_pred,
                                 const std::vector<double>& naive_pred);

// ---- splitting --------------------------------------------------------------------------------

/// Subjects are shuffled with `seed` and the first round(train_fraction * n) go to training.
struct SubjectSplit {
  std::vector<std::string> train_subjects;
  std::vector<std::string> test_subjects;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
};

SubjectSplit subject_split(const std::vector<Segment>& segments, double train_fraction, std::uint64_t seed);

// ---- fine-tuning --------------------------------------------------------------------------------

struct FinetuneConfig {
  double lr = 1e-4;
  double weight_decay = 0.005;
  int batch_size = 512;
  int epochs = 500;
  int max_steps = 0;  // > 0 overrides epochs
  double class_weight = 3.54;
  double powerline_hz = 60.0;  // stored, not used by the pipeline
  bool freeze_backbone = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;  // ConfigError
};

struct FineTunedModel {
  model::ModelConfig config;
  TaskSpec task;
  model::EncoderParams<float> backbone;
  ad::Parameter<float> head_w;  // hidden x outputs
  ad::Parameter<float> head_b;  // 1 x outputs
  // Regression targets are standardized with the training mean/scale; naive MASE baseline = train mean.
  std::vector<double> target_mean;
  std::vector<double> target_scale;
  std::uint64_t split_seed = 0;
  double train_fraction = 0.8;
  double final_loss = 0.0;
};

/// Backbone initialized from the checkpoint's teacher parameters; trains on the training split
/// of `data` (subject-disjoint). Throws ContractError when the labels do not match the task.
FineTunedModel finetune(const model::Checkpoint& ckpt, const LabeledDataset& data, const TaskSpec& task,
                        const FinetuneConfig& cfg);

/// Container "QFMFTUN1".
std::vector<std::uint8_t> encode_finetuned(const FineTunedModel& m);
FineTunedModel decode_finetuned(const std::vector<std::uint8_t>& bytes);
void save_finetuned(const std::string& path, const FineTunedModel& m);
FineTunedModel load_finetuned(const std::string& path);

/// Probabilities (classification) or mmHg predictions (bp), one row per segment.
std::vector<std::vector<double>> predict(FineTunedModel& m, const std::vector<Segment>& segments, int threads = 1);

struct Evaluation {
  TaskSpec task;
  std::size_t n = 0;
  std::vector<std::string> subjects;
  std::optional<ClassificationReport> classification;
  std::vector<std::pair<std::string, RegressionReport>> regression;  // ("SBP", ...), ("DBP", ...)
  std::vector<std::vector<double>> predictions;
  std::vector<std::vector<double>> labels;
  std::vector<std::size_t> indices;  // positions in the dataset
};

/// Evaluates on the test split recorded in the model (or every segment when `all` is set).
Evaluation evaluate(FineTunedModel& m, const LabeledDataset& data, bool all = false, int threads = 1);

std::string report_json(const Evaluation& e);
std::string predictions_tsv(const Evaluation& e, const LabeledDataset& data);

}  // namespace qfm::downstream
