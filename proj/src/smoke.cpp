#include "qfm/smoke.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>

#include "qfm/errors.hpp"
#include "qfm/parallel.hpp"

namespace qfm::smoke {

namespace {

Eigen::MatrixXd rows(const Eigen::MatrixXd& x, const std::vector<std::size_t>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

std::vector<int> pick(const std::vector<int>& y, const std::vector<std::size_t>& idx) {
  std::vector<int> out;
  for (auto i : idx) out.push_back(y[i]);
  return out;
}

}  // namespace

std::vector<Segment> synthetic_sessions(int subjects, double minutes, double noise_level, std::uint64_t seed,
                                        const std::string& prefix, int threads) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> hr(55.0, 110.0);
  std::vector<SyntheticSpec> specs(static_cast<std::size_t>(subjects));
  for (int s = 0; s < subjects; ++s) {
    auto& sp = specs[static_cast<std::size_t>(s)];
    sp.heart_rate_bpm = hr(rng);
    sp.noise_kind = NoiseKind::mixed;
    sp.noise_level = noise_level;
    sp.duration_s = minutes * 60.0;
    sp.seed = rng();
    char id[32];
    std::snprintf(id, sizeof id, "%s%03d", prefix.c_str(), s);
    sp.subject_id = id;
  }
  std::vector<WaveformRecord> records(2 * specs.size());
  parallel_for(specs.size(), threads, [&](std::size_t i) {
    auto p = generate_synthetic(specs[i]);
    records[2 * i] = std::move(p.ppg);
    records[2 * i + 1] = std::move(p.ecg);
  });
  return preprocess_corpus(records);
}

SmokeData prepare(const SmokeConfig& cfg) {
  if (cfg.probe_train_subjects < 1 || cfg.probe_train_subjects >= cfg.probe_subjects)
    throw ContractError("smoke: need 1 <= probe_train_subjects < probe_subjects");
  SmokeData d;
  d.segments = synthetic_sessions(cfg.subjects, cfg.minutes, cfg.noise_level, cfg.seed * 100 + 1, "pre", cfg.threads);
  const auto assessed = assess_all(d.segments, cfg.sqi, cfg.threads);
  for (const auto& a : assessed) d.label_counts[static_cast<std::size_t>(a.quality.label)]++;
  d.pairs = mine_pairs(assessed);
  std::mt19937_64 rng(cfg.seed);
  std::shuffle(d.pairs.begin(), d.pairs.end(), rng);
  if (d.pairs.size() > static_cast<std::size_t>(cfg.pairs)) d.pairs.resize(static_cast<std::size_t>(cfg.pairs));
  if (d.pairs.empty()) throw ContractError("smoke: no quality-divergent pairs in the synthetic corpus");
  d.samples = train::make_samples<float>(d.segments, d.pairs, cfg.pretrain.amplitude_scale, cfg.threads);

  d.probe_segments =
      synthetic_sessions(cfg.probe_subjects, cfg.minutes, cfg.noise_level, cfg.seed * 100 + 2, "probe", cfg.threads);
  const auto probe_assessed = assess_all(d.probe_segments, cfg.sqi, cfg.threads);
  char cut[32];
  std::snprintf(cut, sizeof cut, "probe%03d", cfg.probe_train_subjects);
  for (std::size_t i = 0; i < probe_assessed.size(); ++i) {
    d.probe_labels.push_back(static_cast<int>(probe_assessed[i].quality.label));
    (d.probe_segments[i].subject_id < cut ? d.probe_train : d.probe_test).push_back(i);
  }
  if (d.probe_train.empty() || d.probe_test.empty()) throw ContractError("smoke: empty probe split");
  return d;
}

double probe_accuracy(const Eigen::MatrixXd& features, const SmokeData& data, const probe::ProbeConfig& cfg) {
  const auto p = probe::fit_probe(rows(features, data.probe_train), pick(data.probe_labels, data.probe_train), cfg);
  return probe::accuracy(p.predict(rows(features, data.probe_test)), pick(data.probe_labels, data.probe_test));
}

SmokeResult run(const SmokeData& data, const SmokeConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  auto pcfg = cfg.pretrain;
  pcfg.max_steps = cfg.steps;
  pcfg.batch_size = cfg.batch_size;
  pcfg.lr = cfg.lr;
  pcfg.seed = cfg.seed;
  pcfg.threads = cfg.threads;

  SmokeResult r;
  r.n_pairs = data.samples.size();
  auto res = train::pretrain(data.samples, cfg.model, pcfg);
  r.history = res.history;
  std::vector<double> pre;
  for (const auto& h : res.history) pre.push_back(h.loss.pre);
  const auto sm = train::smooth(pre);
  r.initial_loss = pre.front();
  r.smoothed_final = sm.back();
  r.loss_ratio = r.smoothed_final / r.initial_loss;

  auto random = model::init_params<float>(cfg.model, cfg.seed + 777);
  r.teacher_acc = probe_accuracy(probe::extract_features(res.state.teacher, cfg.model, data.probe_segments, cfg.threads),
                                 data, cfg.probe);
  r.student_acc = probe_accuracy(probe::extract_features(res.state.student, cfg.model, data.probe_segments, cfg.threads),
                                 data, cfg.probe);
  r.random_acc =
      probe_accuracy(probe::extract_features(random, cfg.model, data.probe_segments, cfg.threads), data, cfg.probe);
  r.chance = probe::majority_rate(pick(data.probe_labels, data.probe_test), cfg.probe.classes);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::vector<AblationPoint> ablate_window(const SmokeConfig& base, const std::vector<int>& windows,
                                         const std::vector<std::uint64_t>& seeds) {
  std::vector<AblationPoint> out;
  for (auto seed : seeds) {
    auto cfg = base;
    cfg.seed = seed;
    const auto data = prepare(cfg);
    for (int w : windows) {
      auto c = cfg;
      c.model.window = w;
      out.push_back({std::to_string(w), seed, run(data, c)});
    }
  }
  return out;
}

std::string loss_label(double lambda_amp, double lambda_pha) {
  std::ostringstream os;
  os << lambda_amp << ":" << lambda_pha;
  return os.str();
}

std::vector<AblationPoint> ablate_loss(const SmokeConfig& base, const std::vector<std::pair<double, double>>& weights,
                                       const std::vector<std::uint64_t>& seeds) {
  std::vector<AblationPoint> out;
  for (auto seed : seeds) {
    auto cfg = base;
    cfg.seed = seed;
    const auto data = prepare(cfg);
    for (const auto& [amp, pha] : weights) {
      auto c = cfg;
      c.pretrain.lambda_amp = amp;
      c.pretrain.lambda_pha = pha;
      out.push_back({loss_label(amp, pha), seed, run(data, c)});
    }
  }
  return out;
}

std::string ablation_table(const std::string& axis, const std::vector<AblationPoint>& points) {
  std::ostringstream os;
  os << std::setprecision(6);
  os << axis << "\tseed\tpairs\tL_pre_initial\tL_pre_smoothed\tratio\tprobe_teacher\tprobe_student\tprobe_random\tchance\n";
  std::vector<std::string> order;
  for (const auto& p : points) {
    const auto& r = p.result;
    os << p.value << '\t' << p.seed << '\t' << r.n_pairs << '\t' << r.initial_loss << '\t' << r.smoothed_final << '\t'
       << r.loss_ratio << '\t' << r.teacher_acc << '\t' << r.student_acc << '\t' << r.random_acc << '\t' << r.chance
       << '\n';
    if (std::find(order.begin(), order.end(), p.value) == order.end()) order.push_back(p.value);
  }
  os << "\n" << axis << "\truns\tmean_probe_teacher\tmean_probe_random\tmean_ratio\n";
  for (const auto& v : order) {
    double acc = 0, rnd = 0, ratio = 0;
    int n = 0;
    for (const auto& p : points)
      if (p.value == v) {
        acc += p.result.teacher_acc;
        rnd += p.result.random_acc;
        ratio += p.result.loss_ratio;
        ++n;
      }
    os << v << '\t' << n << '\t' << acc / n << '\t' << rnd / n << '\t' << ratio / n << '\n';
  }
  return os.str();
}

std::pair<int, int> count_below(const std::vector<AblationPoint>& points, const std::string& a, const std::string& b) {
  std::map<std::uint64_t, double> acc_a, acc_b;
  for (const auto& p : points) {
    if (p.value == a) acc_a[p.seed] = p.result.teacher_acc;
    if (p.value == b) acc_b[p.seed] = p.result.teacher_acc;
  }
  int below = 0, both = 0;
  for (const auto& [seed, x] : acc_a) {
    const auto it = acc_b.find(seed);
    if (it == acc_b.end()) continue;
    ++both;
    below += x < it->second;
  }
  return {below, both};
}

}  // namespace qfm::smoke
