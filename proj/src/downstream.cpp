#include "qfm/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

#include "qfm/binary_io.hpp"
#include "qfm/errors.hpp"
#include "qfm/parallel.hpp"
#include "qfm/probe.hpp"

namespace qfm::downstream {

namespace {

constexpr char kTaskMagic[] = "QFMTASK1";
constexpr std::uint32_t kTaskVersion = 1;
constexpr char kFinetuneMagic[] = "QFMFTUN1";
constexpr std::uint32_t kFinetuneVersion = 1;

using Mat = ad::Matrix<float>;

void write_matrix(io::ByteWriter& w, const std::string& name, const Mat& m) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  w.f32_array(std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
}

Mat read_matrix(io::ByteReader& r, const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  const auto at = r.offset();
  const auto got = r.str();
  if (got != name) throw FormatError("expected tensor '" + name + "', found '" + got + "'", at);
  const auto rr = r.u32();
  const auto cc = r.u32();
  if (rr != rows || cc != cols)
    r.fail("tensor '" + name + "' has shape " + std::to_string(rr) + "x" + std::to_string(cc));
  const auto values = r.f32_array(static_cast<std::uint64_t>(rr) * cc);
  return Eigen::Map<const Mat>(values.data(), rr, cc);
}

void write_doubles(io::ByteWriter& w, const std::vector<double>& v) {
  w.u32(static_cast<std::uint32_t>(v.size()));
  for (double x : v) w.f64(x);
}

std::vector<double> read_doubles(io::ByteReader& r) {
  const auto n = r.u32();
  if (n > 1024) r.fail("implausible vector length " + std::to_string(n));
  std::vector<double> v(n);
  for (auto& x : v) x = r.f64();
  return v;
}

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

struct Adam {
  std::vector<Mat> m, v;
  long t = 0;
};

void adamw(std::vector<ad::Parameter<float>*>& params, Adam& st, const FinetuneConfig& cfg) {
  if (st.m.empty()) {
    for (auto* p : params) {
      st.m.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
      st.v.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    }
  }
  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  const auto b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  const auto step = static_cast<float>(cfg.lr / bc1);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  const auto decay = static_cast<float>(1.0 - cfg.lr * cfg.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    st.m[i] = b1 * st.m[i] + (1.0f - b1) * p.grad;
    st.v[i] = b2 * st.v[i] + (1.0f - b2) * p.grad.cwiseAbs2();
    p.value *= decay;
    p.value.array() -= step * st.m[i].array() / ((st.v[i].array() * inv_bc2).sqrt() + 1e-8f);
    p.zero_grad();
  }
}

// Batch loss on head outputs z (B x outputs). Classification: weighted BCE with logits, mean over
// rows. Regression: MSE on standardized targets.
ad::Tensor<float> head_loss(ad::Tape<float>& tape, const ad::Tensor<float>& z, const Mat& y, const TaskSpec& task) {
  if (task.kind == TaskKind::binary_classification) {
    const Mat pos = y * static_cast<float>(task.class_weight);
    const Mat neg = Mat::Ones(y.rows(), y.cols()) - y;
    auto lp = ad::mul(tape.constant(pos), ad::softplus(ad::scale(z, -1.0f)));
    auto ln = ad::mul(tape.constant(neg), ad::softplus(z));
    return ad::scale(ad::sum(lp + ln), 1.0f / static_cast<float>(y.rows()));
  }
  return ad::mse(z, tape.constant(y));
}

Mat batch_targets(const LabeledDataset& data, const std::vector<std::size_t>& idx, const FineTunedModel& m) {
  const int w = data.label_width();
  Mat y(static_cast<Eigen::Index>(idx.size()), w);
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (int c = 0; c < w; ++c) {
      double v = data.labels[idx[r]][static_cast<std::size_t>(c)];
      if (m.task.kind == TaskKind::bp_regression)
        v = (v - m.target_mean[static_cast<std::size_t>(c)]) / m.target_scale[static_cast<std::size_t>(c)];
      y(static_cast<Eigen::Index>(r), c) = static_cast<float>(v);
    }
  return y;
}

Mat head_outputs(FineTunedModel& m, const std::vector<Segment>& segments, int threads) {
  const Eigen::MatrixXd feats = probe::extract_features(m.backbone, m.config, segments, threads);
  Mat z = feats.cast<float>() * m.head_w.value;
  z.rowwise() += m.head_b.value.row(0);
  return z;
}

}  // namespace

TaskName parse_task(const std::string& s) {
  if (s == "vtac") return TaskName::vtac;
  if (s == "af") return TaskName::af;
  if (s == "bp") return TaskName::bp;
  throw ConfigError("unknown task '" + s + "' (expected vtac, af or bp)");
}

const char* to_string(TaskName t) {
  switch (t) {
    case TaskName::vtac: return "vtac";
    case TaskName::af: return "af";
    case TaskName::bp: return "bp";
  }
  return "?";
}

const char* to_string(TaskKind k) {
  return k == TaskKind::binary_classification ? "binary_classification" : "bp_regression";
}

TaskSpec TaskSpec::make(TaskName name, double class_weight) {
  TaskSpec t;
  t.name = name;
  t.class_weight = class_weight;
  switch (name) {
    case TaskName::vtac:
      t.label_source = "true (1) vs false (0) ventricular tachycardia alarm";
      break;
    case TaskName::af:
      t.label_source = "atrial fibrillation (1) vs regular rhythm (0)";
      break;
    case TaskName::bp:
      t.kind = TaskKind::bp_regression;
      t.outputs = 2;
      t.class_weight = 1.0;
      t.label_source = "systolic and diastolic pressure, mmHg";
      break;
  }
  return t;
}

void LabeledDataset::validate() const {
  if (labels.size() != segments.size())
    throw ContractError("dataset: " + std::to_string(segments.size()) + " segments vs " +
                        std::to_string(labels.size()) + " labels");
  const auto w = static_cast<std::size_t>(label_width());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].size() != w)
      throw ContractError("dataset: label " + std::to_string(i) + " has width " + std::to_string(labels[i].size()));
    for (double v : labels[i]) {
      if (!std::isfinite(v)) throw ContractError("dataset: non-finite label at " + std::to_string(i));
      if (task != TaskName::bp && v != 0.0 && v != 1.0)
        throw ContractError("dataset: label " + std::to_string(i) + " is not 0/1");
    }
  }
}

// ---- container -------------------------------------------------------------------------------------

std::vector<std::uint8_t> encode_dataset(const LabeledDataset& d) {
  d.validate();
  io::ByteWriter w;
  w.magic(std::string_view(kTaskMagic, 8));
  w.u32(kTaskVersion);
  w.u8(static_cast<std::uint8_t>(d.task));
  w.u32(static_cast<std::uint32_t>(d.label_width()));
  w.u64(d.segments.size());
  for (std::size_t i = 0; i < d.segments.size(); ++i) {
    write_segment(w, d.segments[i]);
    for (double v : d.labels[i]) w.f64(v);
  }
  return w.data();
}

LabeledDataset decode_dataset(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(std::string_view(kTaskMagic, 8));
  const auto version = r.u32();
  if (version != kTaskVersion) r.fail("unsupported task dataset version " + std::to_string(version));
  LabeledDataset d;
  const auto task = r.u8();
  if (task > 2) r.fail("unknown task id " + std::to_string(task));
  d.task = static_cast<TaskName>(task);
  const auto width = r.u32();
  if (static_cast<int>(width) != d.label_width()) r.fail("label width " + std::to_string(width) + " does not match task");
  const auto n = r.u64();
  // Each segment record is > 144 kB, so a count beyond the payload is corrupt.
  if (n > r.remaining() / 1024) r.fail("segment count " + std::to_string(n) + " exceeds payload");
  d.segments.reserve(n);
  d.labels.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    d.segments.push_back(read_segment(r));
    std::vector<double> l(width);
    for (auto& v : l) v = r.f64();
    d.labels.push_back(std::move(l));
  }
  if (!r.at_end()) r.fail("trailing bytes after task dataset");
  try {
    d.validate();
  } catch (const ContractError& e) {
    throw FormatError(e.what(), r.offset());
  }
  return d;
}

void write_dataset(const LabeledDataset& d, const std::string& path) { io::write_file(path, encode_dataset(d)); }

LabeledDataset read_dataset(const std::string& path) { return decode_dataset(io::read_file(path)); }

// ---- synthetic tasks -------------------------------------------------------------------------------

LabeledDataset generate_task_dataset(const SyntheticTaskSpec& spec) {
  if (spec.subjects <= 0) throw ContractError("generate_task_dataset: subjects must be positive");
  if (!(spec.minutes * 60.0 >= kSegmentSeconds))
    throw ContractError("generate_task_dataset: records shorter than one segment");

  struct Draw {
    SyntheticSpec synth;
    std::vector<double> label;
    double jitter_sd = 0.0;
  };
  // Subject parameters are drawn sequentially so the dataset does not depend on the thread count.
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u(rng); };
  std::vector<Draw> draws(static_cast<std::size_t>(spec.subjects));
  for (int i = 0; i < spec.subjects; ++i) {
    auto& d = draws[static_cast<std::size_t>(i)];
    char id[16];
    std::snprintf(id, sizeof id, "subj%03d", i);
    d.synth.subject_id = id;
    d.synth.duration_s = spec.minutes * 60.0;
    d.synth.seed = rng();
    switch (spec.task) {
      case TaskName::vtac:
        if (u(rng) < 0.22) {
          d.synth.heart_rate_bpm = uni(150.0, 220.0);
          d.synth.noise_kind = NoiseKind::gaussian;
          d.synth.noise_level = uni(0.02, 0.1);
          d.label = {1.0};
        } else {
          d.synth.heart_rate_bpm = uni(60.0, 100.0);
          d.synth.noise_kind = NoiseKind::motion_burst;
          d.synth.noise_level = uni(0.5, 1.0);
          d.label = {0.0};
        }
        break;
      case TaskName::af:
        d.synth.noise_kind = NoiseKind::gaussian;
        d.synth.noise_level = uni(0.0, 0.1);
        if (u(rng) < 0.5) {
          d.synth.heart_rate_bpm = uni(80.0, 130.0);
          d.synth.rr_irregularity = uni(0.15, 0.30);
          d.label = {1.0};
        } else {
          d.synth.heart_rate_bpm = uni(60.0, 100.0);
          d.synth.rr_irregularity = uni(0.0, 0.03);
          d.label = {0.0};
        }
        break;
      case TaskName::bp: {
        const double hr = uni(55.0, 110.0);
        const double dic = uni(0.4, 1.2);
        const double sbp = 100.0 + 40.0 * (1.2 - dic) + 0.4 * (hr - 75.0) + 5.0 * n01(rng);
        const double dbp = 65.0 + 0.45 * (sbp - 120.0) + 0.2 * (hr - 75.0) + 3.0 * n01(rng);
        d.synth.heart_rate_bpm = hr;
        d.synth.dicrotic_ratio = dic;
        d.synth.noise_kind = NoiseKind::gaussian;
        d.synth.noise_level = uni(0.0, 0.05);
        d.label = {sbp, dbp};
        d.jitter_sd = 2.0;
        break;
      }
    }
  }

  std::vector<std::vector<Segment>> per_subject(draws.size());
  parallel_for(draws.size(), spec.threads, [&](std::size_t i) {
    const auto pair = generate_synthetic(draws[i].synth);
    per_subject[i] = segment_pairwise(pair.ppg, pair.ecg);
  });

  LabeledDataset out;
  out.task = spec.task;
  for (std::size_t i = 0; i < draws.size(); ++i) {
    std::mt19937_64 jr(draws[i].synth.seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> jn(0.0, 1.0);
    for (auto& s : per_subject[i]) {
      auto label = draws[i].label;
      if (draws[i].jitter_sd > 0)
        for (auto& v : label) v += draws[i].jitter_sd * jn(jr);
      out.segments.push_back(std::move(s));
      out.labels.push_back(std::move(label));
    }
  }
  return out;
}

// ---- metrics ----------------------------------------------------------------------------------------

std::optional<double> rank_auc(const std::vector<int>& labels, const std::vector<double>& scores) {
  if (labels.size() != scores.size()) throw ContractError("rank_auc: length mismatch");
  const std::size_t n = labels.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double n_pos = 0, n_neg = 0, r_pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == 1) {
      n_pos += 1;
      r_pos += rank[i];
    } else {
      n_neg += 1;
    }
  }
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  return (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg);
}

ClassificationReport classify_metrics(const std::vector<int>& labels, const std::vector<double>& scores,
                                      double threshold) {
  if (labels.size() != scores.size()) throw ContractError("classify_metrics: length mismatch");
  if (labels.empty()) throw ContractError("classify_metrics: no samples");
  ClassificationReport r;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ContractError("classify_metrics: labels must be 0/1");
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1) {
      (pred ? r.tp : r.fn)++;
    } else {
      (pred ? r.fp : r.tn)++;
    }
  }
  auto ratio = [](std::int64_t a, std::int64_t b) -> std::optional<double> {
    if (b == 0) return std::nullopt;
    return static_cast<double>(a) / static_cast<double>(b);
  };
  r.acc = static_cast<double>(r.tp + r.tn) / static_cast<double>(labels.size());
  r.tpr = ratio(r.tp, r.tp + r.fn);
  r.tnr = ratio(r.tn, r.tn + r.fp);
  r.ppv = ratio(r.tp, r.tp + r.fp);
  r.f1 = ratio(2 * r.tp, 2 * r.tp + r.fp + r.fn);
  r.auc = rank_auc(labels, scores);
  return r;
}

RegressionReport regress_metrics(const std::vector<double>& y_true, const std::vector<double>& y_pred,
                                 const std::vector<double>& naive_pred) {
  const std::size_t n = y_true.size();
  if (y_pred.size() != n || naive_pred.size() != n) throw ContractError("regress_metrics: length mismatch");
  if (n == 0) throw ContractError("regress_metrics: no samples");
  RegressionReport r;
  double naive_mae = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = y_pred[i] - y_true[i];
    r.mae += std::abs(e);
    r.me += e;
    naive_mae += std::abs(naive_pred[i] - y_true[i]);
  }
  r.mae /= static_cast<double>(n);
  r.me /= static_cast<double>(n);
  naive_mae /= static_cast<double>(n);
  if (n > 1) {
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = (y_pred[i] - y_true[i]) - r.me;
      ss += d * d;
    }
    r.sd = std::sqrt(ss / static_cast<double>(n - 1));
  }
  if (naive_mae > 0.0) r.mase_percent = 100.0 * r.mae / naive_mae;
  return r;
}

// ---- split -------------------------------------------------------------------------------------------

SubjectSplit subject_split(const std::vector<Segment>& segments, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0))
    throw ContractError("subject_split: train_fraction must be in [0, 1]");
  std::vector<std::string> subjects;
  for (const auto& s : segments) subjects.push_back(s.subject_id);
  std::sort(subjects.begin(), subjects.end());
  subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
  std::mt19937_64 rng(seed);
  std::shuffle(subjects.begin(), subjects.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(subjects.size())));

  SubjectSplit out;
  out.train_subjects.assign(subjects.begin(), subjects.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.test_subjects.assign(subjects.begin() + static_cast<std::ptrdiff_t>(n_train), subjects.end());
  std::sort(out.train_subjects.begin(), out.train_subjects.end());
  std::sort(out.test_subjects.begin(), out.test_subjects.end());
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const bool train =
        std::binary_search(out.train_subjects.begin(), out.train_subjects.end(), segments[i].subject_id);
    (train ? out.train_indices : out.test_indices).push_back(i);
  }
  return out;
}

// ---- fine-tuning ------------------------------------------------------------------------------------

void FinetuneConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("finetune: " + msg);
  };
  need(lr > 0 && std::isfinite(lr), "lr must be positive");
  need(weight_decay >= 0, "weight_decay must be >= 0");
  need(batch_size > 0, "batch_size must be positive");
  need(epochs > 0 || max_steps > 0, "epochs or max_steps must be positive");
  need(class_weight > 0, "class_weight must be positive");
  need(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "betas must be in [0, 1)");
  need(train_fraction > 0 && train_fraction <= 1, "train_fraction must be in (0, 1]");
  need(threads >= 1, "threads must be >= 1");
}

FineTunedModel finetune(const model::Checkpoint& ckpt, const LabeledDataset& data, const TaskSpec& task,
                        const FinetuneConfig& cfg) {
  cfg.validate();
  data.validate();
  if (data.task != task.name)
    throw ContractError(std::string("finetune: dataset is labeled for '") + to_string(data.task) + "', task is '" +
                        to_string(task.name) + "'");
  FineTunedModel m;
  m.config = ckpt.config;
  m.task = task;
  m.backbone = ckpt.teacher;
  m.split_seed = cfg.seed;
  m.train_fraction = cfg.train_fraction;

  const auto split = subject_split(data.segments, cfg.train_fraction, cfg.seed);
  if (split.train_indices.empty()) throw ContractError("finetune: training split is empty");
  const auto& train = split.train_indices;

  const int outs = task.outputs;
  if (task.kind == TaskKind::bp_regression) {
    m.target_mean.assign(static_cast<std::size_t>(outs), 0.0);
    m.target_scale.assign(static_cast<std::size_t>(outs), 0.0);
    for (int c = 0; c < outs; ++c) {
      double mean = 0, ss = 0;
      for (auto i : train) mean += data.labels[i][static_cast<std::size_t>(c)];
      mean /= static_cast<double>(train.size());
      for (auto i : train) ss += std::pow(data.labels[i][static_cast<std::size_t>(c)] - mean, 2);
      const double sd = std::sqrt(ss / static_cast<double>(train.size()));
      m.target_mean[static_cast<std::size_t>(c)] = mean;
      m.target_scale[static_cast<std::size_t>(c)] = sd > 1e-9 ? sd : 1.0;
    }
  }

  std::mt19937_64 rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
  std::normal_distribution<float> init(0.0f, 1.0f / std::sqrt(static_cast<float>(m.config.hidden)));
  m.head_w = ad::Parameter<float>(Mat::NullaryExpr(m.config.hidden, outs, [&] { return init(rng); }));
  m.head_b = ad::Parameter<float>(Mat::Zero(1, outs));

  // A frozen backbone is evaluated once; the head then trains on cached pooled features.
  Mat cached;
  if (cfg.freeze_backbone) {
    std::vector<Segment> train_segments;
    for (auto i : train) train_segments.push_back(data.segments[i]);
    cached = probe::extract_features(m.backbone, m.config, train_segments, cfg.threads).cast<float>();
  }

  std::vector<ad::Parameter<float>*> params{&m.head_w, &m.head_b};
  if (!cfg.freeze_backbone) {
    m.backbone.visit([&](const std::string&, ad::Parameter<float>& p) {
      p.zero_grad();
      params.push_back(&p);
    });
  }
  Adam opt;

  const long per_epoch = (static_cast<long>(train.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const long total = cfg.max_steps > 0 ? cfg.max_steps : per_epoch * cfg.epochs;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  while (step < total) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size() && step < total; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<std::size_t> idx;
      for (auto r : rows) idx.push_back(train[r]);
      const Mat y = batch_targets(data, idx, m);

      ad::Tape<float> tape;
      auto w = tape.parameter(m.head_w);
      auto b = tape.parameter(m.head_b);
      ad::Tensor<float> feats;
      if (cfg.freeze_backbone) {
        Mat x(static_cast<Eigen::Index>(rows.size()), cached.cols());
        for (std::size_t r = 0; r < rows.size(); ++r) x.row(static_cast<Eigen::Index>(r)) = cached.row(static_cast<Eigen::Index>(rows[r]));
        feats = tape.constant(std::move(x));
      } else {
        auto bound = model::bind(tape, m.backbone, true);
        std::vector<ad::Tensor<float>> pooled;
        for (auto i : idx) {
          const Mat seg = data.segments[i].channels;
          pooled.push_back(model::encode(tape, bound, m.config, seg).pooled);
        }
        feats = ad::concat_rows(pooled);
      }
      auto z = ad::add(ad::matmul(feats, w), b);
      auto loss = head_loss(tape, z, y, task);
      m.final_loss = loss.item();
      if (!std::isfinite(m.final_loss)) throw NumericError("finetune: non-finite loss at step " + std::to_string(step));
      tape.backward(loss);
      adamw(params, opt, cfg);
      ++step;
    }
  }
  return m;
}

// ---- fine-tuned container ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_finetuned(const FineTunedModel& m) {
  m.config.validate();
  io::ByteWriter w;
  w.magic(std::string_view(kFinetuneMagic, 8));
  w.u32(kFinetuneVersion);
  model::write_named_values(w, m.config.to_map());
  w.u8(static_cast<std::uint8_t>(m.task.name));
  w.f64(m.task.class_weight);
  w.u64(m.split_seed);
  w.f64(m.train_fraction);
  w.f64(m.final_loss);
  write_doubles(w, m.target_mean);
  write_doubles(w, m.target_scale);
  model::write_params(w, "backbone/", m.backbone);
  write_matrix(w, "head.w", m.head_w.value);
  write_matrix(w, "head.b", m.head_b.value);
  return w.data();
}

FineTunedModel decode_finetuned(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(std::string_view(kFinetuneMagic, 8));
  const auto version = r.u32();
  if (version != kFinetuneVersion) r.fail("unsupported fine-tuned model version " + std::to_string(version));
  FineTunedModel m;
  const auto cfg_at = r.offset();
  try {
    m.config = model::ModelConfig::from_map(model::read_named_values(r));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid model config: ") + e.what(), cfg_at);
  }
  const auto task = r.u8();
  if (task > 2) r.fail("unknown task id " + std::to_string(task));
  const double cw = r.f64();
  m.task = TaskSpec::make(static_cast<TaskName>(task), cw);
  m.task.class_weight = cw;
  m.split_seed = r.u64();
  m.train_fraction = r.f64();
  m.final_loss = r.f64();
  m.target_mean = read_doubles(r);
  m.target_scale = read_doubles(r);
  const auto expect_targets = m.task.kind == TaskKind::bp_regression ? static_cast<std::size_t>(m.task.outputs) : 0u;
  if (m.target_mean.size() != expect_targets || m.target_scale.size() != expect_targets)
    r.fail("target standardization does not match the task");
  model::read_params(r, "backbone/", m.config, m.backbone);
  m.head_w = ad::Parameter<float>(read_matrix(r, "head.w", m.config.hidden, m.task.outputs));
  m.head_b = ad::Parameter<float>(read_matrix(r, "head.b", 1, m.task.outputs));
  if (!r.at_end()) r.fail("trailing bytes after fine-tuned model");
  return m;
}

void save_finetuned(const std::string& path, const FineTunedModel& m) { io::write_file(path, encode_finetuned(m)); }

FineTunedModel load_finetuned(const std::string& path) { return decode_finetuned(io::read_file(path)); }

// ---- inference ----------------------------------------------------------------------------------------

std::vector<std::vector<double>> predict(FineTunedModel& m, const std::vector<Segment>& segments, int threads) {
  const Mat z = head_outputs(m, segments, threads);
  std::vector<std::vector<double>> out(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    auto& row = out[static_cast<std::size_t>(i)];
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      const double v = z(i, c);
      if (m.task.kind == TaskKind::binary_classification)
        row.push_back(sigmoid(v));
      else
        row.push_back(v * m.target_scale[static_cast<std::size_t>(c)] + m.target_mean[static_cast<std::size_t>(c)]);
    }
  }
  return out;
}

Evaluation evaluate(FineTunedModel& m, const LabeledDataset& data, bool all, int threads) {
  data.validate();
  if (data.task != m.task.name)
    throw ContractError(std::string("evaluate: dataset is labeled for '") + to_string(data.task) + "', model for '" +
                        to_string(m.task.name) + "'");
  Evaluation e;
  e.task = m.task;
  if (all) {
    e.indices.resize(data.segments.size());
    std::iota(e.indices.begin(), e.indices.end(), 0);
    for (const auto& s : data.segments) e.subjects.push_back(s.subject_id);
    std::sort(e.subjects.begin(), e.subjects.end());
    e.subjects.erase(std::unique(e.subjects.begin(), e.subjects.end()), e.subjects.end());
  } else {
    auto split = subject_split(data.segments, m.train_fraction, m.split_seed);
    e.indices = std::move(split.test_indices);
    e.subjects = std::move(split.test_subjects);
  }
  if (e.indices.empty()) throw ContractError("evaluate: no segments in the evaluation split");
  e.n = e.indices.size();

  std::vector<Segment> segs;
  for (auto i : e.indices) {
    segs.push_back(data.segments[i]);
    e.labels.push_back(data.labels[i]);
  }
  e.predictions = predict(m, segs, threads);

  if (m.task.kind == TaskKind::binary_classification) {
    std::vector<int> y;
    std::vector<double> s;
    for (std::size_t i = 0; i < e.n; ++i) {
      y.push_back(static_cast<int>(e.labels[i][0]));
      s.push_back(e.predictions[i][0]);
    }
    e.classification = classify_metrics(y, s);
  } else {
    const char* names[] = {"SBP", "DBP"};
    for (std::size_t c = 0; c < 2; ++c) {
      std::vector<double> yt, yp, naive(e.n, m.target_mean[c]);
      for (std::size_t i = 0; i < e.n; ++i) {
        yt.push_back(e.labels[i][c]);
        yp.push_back(e.predictions[i][c]);
      }
      e.regression.emplace_back(names[c], regress_metrics(yt, yp, naive));
    }
  }
  return e;
}

std::string report_json(const Evaluation& e) {
  nlohmann::ordered_json j;
  j["task"] = to_string(e.task.name);
  j["kind"] = to_string(e.task.kind);
  j["n"] = e.n;
  j["subjects"] = e.subjects;
  nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
  if (e.classification) {
    const auto& c = *e.classification;
    metrics["confusion"] = {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}};
    metrics["acc"] = c.acc;
    auto opt = [&](const char* k, const std::optional<double>& v) {
      if (v) metrics[k] = *v;
    };
    opt("tpr", c.tpr);
    opt("tnr", c.tnr);
    opt("ppv", c.ppv);
    opt("f1", c.f1);
    opt("auc", c.auc);
  }
  for (const auto& [name, r] : e.regression) {
    nlohmann::ordered_json t = {{"mae", r.mae}, {"me", r.me}, {"sd", r.sd}};
    if (r.mase_percent) t["mase_percent"] = *r.mase_percent;
    metrics[name] = t;
  }
  j["metrics"] = metrics;
  return j.dump(2) + "\n";
}

std::string predictions_tsv(const Evaluation& e, const LabeledDataset& data) {
  std::ostringstream os;
  os << std::setprecision(9);
  const bool bp = e.task.kind == TaskKind::bp_regression;
  os << "index\tsubject_id\tt_start_s";
  if (bp)
    os << "\tsbp_true\tdbp_true\tsbp_pred\tdbp_pred\n";
  else
    os << "\tlabel\tprobability\n";
  for (std::size_t k = 0; k < e.n; ++k) {
    const auto i = e.indices[k];
    os << i << '\t' << data.segments[i].subject_id << '\t' << data.segments[i].t_start_s;
    for (double v : e.labels[k]) os << '\t' << v;
    for (double v : e.predictions[k]) os << '\t' << v;
    os << '\n';
  }
  return os.str();
}

}  // namespace qfm::downstream
