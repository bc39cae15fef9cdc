#include "qfm/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "qfm/errors.hpp"
#include "qfm/parallel.hpp"

namespace qfm::train {

void PretrainConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("pretrain: " + msg);
  };
  need(tau_s > 0.0 && tau_t > 0.0, "temperatures must be > 0");
  need(lambda_amp >= 0.0 && lambda_pha >= 0.0, "loss weights must be >= 0");
  need(lr > 0.0 && min_lr >= 0.0, "learning rate must be > 0");
  need(weight_decay >= 0.0, "weight_decay must be >= 0");
  need(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "Adam betas must be in [0, 1)");
  need(batch_size > 0, "batch_size must be > 0");
  need(epochs > 0 || max_steps > 0, "need epochs > 0 or max_steps > 0");
  need(ema_start <= ema_end && ema_end <= 1.0 && ema_start >= 0.0, "need 0 <= ema_start <= ema_end <= 1");
  need(center_momentum >= 0.0 && center_momentum <= 1.0, "center_momentum must be in [0, 1]");
  need(threads >= 1, "threads must be >= 1");
}

double ema_momentum(long step, long total_steps, double start, double end) {
  if (total_steps < 0 || step < 0 || step > total_steps)
    throw ContractError("ema_momentum: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) +
                        "]");
  if (total_steps == 0) return start;
  const double c = std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps));
  return end - (end - start) * (1.0 + c) / 2.0;
}

double cosine_lr(long step, long total_steps, double lr, double min_lr, int warmup_steps) {
  if (warmup_steps > 0 && step < warmup_steps) return lr * static_cast<double>(step + 1) / warmup_steps;
  const long span = std::max(1L, total_steps - warmup_steps);
  const double frac = std::clamp(static_cast<double>(step - warmup_steps) / static_cast<double>(span), 0.0, 1.0);
  return min_lr + (lr - min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

namespace {

template <typename S>
std::vector<ad::Parameter<S>*> flat(model::EncoderParams<S>& p) {
  std::vector<ad::Parameter<S>*> out;
  p.visit([&](const std::string&, ad::Parameter<S>& x) { out.push_back(&x); });
  return out;
}

}  // namespace

template <typename S>
void ema_update(model::EncoderParams<S>& teacher, model::EncoderParams<S>& student, double lambda) {
  auto t = flat(teacher);
  auto s = flat(student);
  if (t.size() != s.size()) throw ContractError("ema_update: teacher and student have different layouts");
  const S l = static_cast<S>(lambda);
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i]->value.rows() != s[i]->value.rows() || t[i]->value.cols() != s[i]->value.cols())
      throw ContractError("ema_update: shape mismatch at tensor " + std::to_string(i));
    t[i]->value = l * t[i]->value + (S(1) - l) * s[i]->value;
  }
}

template <typename S>
ad::Tensor<S> soft_distribution(const ad::Tensor<S>& logits, S tau) {
  if (!(tau > S(0))) throw ConfigError("temperature must be > 0");
  return ad::softmax(logits, tau);
}

template <typename S>
ad::Tensor<S> distillation_loss(const ad::Tensor<S>& teacher_logits, const ad::Tensor<S>& student_logits, S tau_t,
                                S tau_s) {
  if (teacher_logits.cols() != student_logits.cols())
    throw ContractError("distillation_loss: teacher width " + std::to_string(teacher_logits.cols()) +
                        " != student width " + std::to_string(student_logits.cols()));
  auto p_t = soft_distribution(ad::detach(teacher_logits), tau_t);
  if (!(tau_s > S(0))) throw ConfigError("temperature must be > 0");
  return ad::cross_entropy(p_t, ad::log_softmax(student_logits, tau_s));
}

template <typename S>
PairSample<S> make_sample(const Segment& high, const Segment& low, AmplitudeScale scale) {
  PairSample<S> s;
  s.high = high.channels.template cast<S>();
  s.low = low.channels.template cast<S>();
  const spectral::RowMatrix<double> x = high.channels.template cast<double>();
  const auto target = spectral::spectral_target<double>(x);
  const double f = scale == AmplitudeScale::orthonormal ? 1.0 / std::sqrt(static_cast<double>(x.cols())) : 1.0;
  s.amplitude = (target.amplitude * f).template cast<S>();
  s.phase = target.phase.template cast<S>();
  s.phase_mask = target.phase_mask().template cast<S>();
  return s;
}

template <typename S>
std::vector<PairSample<S>> make_samples(const std::vector<Segment>& segments, const std::vector<QualityPair>& pairs,
                                        AmplitudeScale scale, int threads) {
  std::vector<PairSample<S>> out(pairs.size());
  for (const auto& p : pairs)
    if (p.high >= segments.size() || p.low >= segments.size())
      throw ContractError("pair index out of range for " + std::to_string(segments.size()) + " segments");
  parallel_for(pairs.size(), threads,
               [&](std::size_t i) { out[i] = make_sample<S>(segments[pairs[i].high], segments[pairs[i].low], scale); });
  return out;
}

template <typename S>
PairLoss<S> composite_loss(ad::Tape<S>& tape, const model::BoundParams<S>& student,
                           const model::BoundParams<S>& teacher, const model::ModelConfig& mcfg,
                           const PretrainConfig& pcfg, const PairSample<S>& sample, const ad::Matrix<S>* center) {
  PairLoss<S> out;
  const auto t_out = model::encode(tape, teacher, mcfg, sample.high);
  auto t_logits = t_out.logits;
  if (center && center->size() > 0) t_logits = ad::sub(ad::detach(t_logits), tape.constant(*center));
  out.teacher_logits = t_logits;
  const auto s_out = model::encode(tape, student, mcfg, sample.low);
  out.dis = distillation_loss(t_logits, s_out.logits, static_cast<S>(pcfg.tau_t), static_cast<S>(pcfg.tau_s));

  const auto spectra = model::reconstruct_spectra(student, mcfg, s_out.pooled);
  out.amp = ad::mse(spectra.amplitude, tape.constant_ref(sample.amplitude));
  out.pha = ad::mse(spectra.phase, tape.constant_ref(sample.phase), sample.phase_mask);
  out.total = ad::add(out.dis, ad::add(ad::scale(out.amp, static_cast<S>(pcfg.lambda_amp)),
                                       ad::scale(out.pha, static_cast<S>(pcfg.lambda_pha))));
  return out;
}

template <typename S>
void adamw_step(model::EncoderParams<S>& params, AdamState<S>& state, double lr, const PretrainConfig& cfg) {
  auto p = flat(params);
  auto m = flat(state.m);
  auto v = flat(state.v);
  if (m.size() != p.size() || v.size() != p.size()) throw ContractError("adamw_step: optimizer state layout mismatch");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S step = static_cast<S>(lr / bc1);
  const S inv_bc2 = static_cast<S>(1.0 / bc2);
  const S eps = static_cast<S>(cfg.adam_eps);
  const S decay = static_cast<S>(1.0 - lr * cfg.weight_decay);
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto& g = p[i]->grad;
    m[i]->value = b1 * m[i]->value + (S(1) - b1) * g;
    v[i]->value = b2 * v[i]->value + (S(1) - b2) * g.cwiseAbs2();
    p[i]->value *= decay;
    p[i]->value.array() -= step * m[i]->value.array() / ((v[i]->value.array() * inv_bc2).sqrt() + eps);
  }
}

std::string to_jsonl(const StepLog& log) {
  std::ostringstream os;
  os.precision(17);
  os << "{\"step\":" << log.step << ",\"L_dis\":" << log.loss.dis << ",\"L_amp\":" << log.loss.amp
     << ",\"L_pha\":" << log.loss.pha << ",\"L_pre\":" << log.loss.pre << ",\"lambda\":" << log.lambda
     << ",\"lr\":" << log.lr << "}";
  return os.str();
}

long total_steps_for(std::size_t n_pairs, const PretrainConfig& cfg) {
  if (cfg.max_steps > 0) return cfg.max_steps;
  const auto per_epoch = (static_cast<long>(n_pairs) + cfg.batch_size - 1) / cfg.batch_size;
  return per_epoch * cfg.epochs;
}

template <typename S>
TrainState<S> init_state(const model::ModelConfig& mcfg, const PretrainConfig& pcfg, long total_steps) {
  TrainState<S> st;
  st.student = model::init_params<S>(mcfg, pcfg.seed);
  st.teacher = model::cast_params<S, S>(st.student);
  st.optimizer.m = model::zeros_like(st.student);
  st.optimizer.v = model::zeros_like(st.student);
  st.center = ad::Matrix<S>::Zero(1, mcfg.out_dim);
  st.total_steps = total_steps;
  st.seed = pcfg.seed;
  return st;
}

namespace {

template <typename S>
model::BoundParams<S> bind_with_grads(ad::Tape<S>& tape, model::EncoderParams<S>& params,
                                      std::vector<ad::Matrix<S>>& grads) {
  model::BoundParams<S> out;
  out.blocks.resize(params.blocks.size());
  auto from = flat(params);
  std::size_t i = 0;
  out.visit([&](const std::string&, ad::Tensor<S>& t) {
    t = tape.parameter(from[i]->value, grads[i]);
    ++i;
  });
  return out;
}

}  // namespace

template <typename S>
StepLog train_step(TrainState<S>& state, const model::ModelConfig& mcfg, const PretrainConfig& pcfg,
                   const std::vector<const PairSample<S>*>& batch) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  auto params = flat(state.student);
  for (auto* p : params) p->zero_grad();

  const S inv_b = S(1) / static_cast<S>(batch.size());
  const ad::Matrix<S>* center = pcfg.center_teacher ? &state.center : nullptr;
  std::vector<LossValues> values(batch.size());
  std::vector<ad::Matrix<S>> teacher_logits(batch.size());

  auto run_pair = [&](std::size_t i, const model::BoundParams<S>& student, const model::BoundParams<S>& teacher,
                      ad::Tape<S>& tape) {
    auto loss = composite_loss(tape, student, teacher, mcfg, pcfg, *batch[i], center);
    values[i] = {loss.dis.item(), loss.amp.item(), loss.pha.item(), loss.total.item()};
    teacher_logits[i] = loss.teacher_logits.value();
    tape.backward(ad::scale(loss.total, inv_b));
  };

  const int workers = std::min<int>(pcfg.threads, static_cast<int>(batch.size()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      ad::Tape<S> tape;
      auto student = model::bind(tape, state.student, true);
      auto teacher = model::bind(tape, state.teacher, false);
      run_pair(i, student, teacher, tape);
    }
  } else {
    // Contiguous blocks per worker, each with its own gradient buffers, reduced in worker order.
    std::vector<std::vector<ad::Matrix<S>>> grads(static_cast<std::size_t>(workers),
                                                  std::vector<ad::Matrix<S>>(params.size()));
    const std::size_t block = (batch.size() + workers - 1) / workers;
    parallel_for(static_cast<std::size_t>(workers), workers, [&](std::size_t w) {
      for (std::size_t i = w * block; i < std::min(batch.size(), (w + 1) * block); ++i) {
        ad::Tape<S> tape;
        auto student = bind_with_grads(tape, state.student, grads[w]);
        auto teacher = model::bind(tape, state.teacher, false);
        run_pair(i, student, teacher, tape);
      }
    });
    for (const auto& g : grads)
      for (std::size_t j = 0; j < params.size(); ++j)
        if (g[j].size() > 0) params[j]->grad += g[j];
  }

  StepLog log;
  log.step = state.step;
  for (const auto& v : values) {
    log.loss.dis += v.dis / static_cast<double>(batch.size());
    log.loss.amp += v.amp / static_cast<double>(batch.size());
    log.loss.pha += v.pha / static_cast<double>(batch.size());
    log.loss.pre += v.pre / static_cast<double>(batch.size());
  }
  const auto at = " at step " + std::to_string(state.step);
  if (!std::isfinite(log.loss.dis)) throw NumericError("non-finite L_dis" + at);
  if (!std::isfinite(log.loss.amp)) throw NumericError("non-finite L_amp" + at);
  if (!std::isfinite(log.loss.pha)) throw NumericError("non-finite L_pha" + at);
  if (!std::isfinite(log.loss.pre)) throw NumericError("non-finite L_pre" + at);

  log.lr = cosine_lr(state.step, state.total_steps, pcfg.lr, pcfg.min_lr, pcfg.warmup_steps);
  log.lambda = ema_momentum(std::min(state.step, state.total_steps), state.total_steps, pcfg.ema_start, pcfg.ema_end);
  adamw_step(state.student, state.optimizer, log.lr, pcfg);
  ema_update(state.teacher, state.student, log.lambda);

  if (pcfg.center_teacher) {
    ad::Matrix<S> mean = ad::Matrix<S>::Zero(1, mcfg.out_dim);
    // Logits recorded above are already centered; add the old center back before averaging.
    for (const auto& t : teacher_logits) mean += t + state.center;
    mean *= inv_b;
    const S cm = static_cast<S>(pcfg.center_momentum);
    state.center = cm * state.center + (S(1) - cm) * mean;
  }
  state.step += 1;
  return log;
}

template <typename S>
PretrainResult<S> pretrain(const std::vector<PairSample<S>>& samples, const model::ModelConfig& mcfg,
                           const PretrainConfig& pcfg, const std::function<void(const StepLog&)>& on_step) {
  pcfg.validate();
  mcfg.validate();
  if (samples.empty()) throw ContractError("pretrain: no pairs");
  PretrainResult<S> result;
  const long total = total_steps_for(samples.size(), pcfg);
  result.state = init_state<S>(mcfg, pcfg, total);
  std::mt19937_64 rng(pcfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(samples.size());
  std::size_t cursor = order.size();
  const auto batch_size = static_cast<std::size_t>(pcfg.batch_size);
  while (result.state.step < total) {
    std::vector<const PairSample<S>*> batch;
    while (batch.size() < std::min(batch_size, samples.size())) {
      if (cursor == order.size()) {
        // New epoch: sample without replacement in a seeded order.
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
        if (!batch.empty()) break;
      }
      batch.push_back(&samples[order[cursor++]]);
    }
    auto log = train_step(result.state, mcfg, pcfg, batch);
    if (on_step) on_step(log);
    result.history.push_back(log);
  }
  return result;
}

template <typename S>
model::Checkpoint to_checkpoint(const TrainState<S>& state, const model::ModelConfig& mcfg) {
  model::Checkpoint c;
  c.config = mcfg;
  c.student = model::cast_params<float, S>(state.student);
  c.teacher = model::cast_params<float, S>(state.teacher);
  c.meta["step"] = static_cast<double>(state.step);
  c.meta["total_steps"] = static_cast<double>(state.total_steps);
  c.meta["seed"] = static_cast<double>(state.seed);
  return c;
}

std::vector<double> smooth(const std::vector<double>& xs, double alpha) {
  std::vector<double> out;
  out.reserve(xs.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    acc = i == 0 ? xs[i] : alpha * xs[i] + (1.0 - alpha) * acc;
    out.push_back(acc);
  }
  return out;
}

#define QFM_INSTANTIATE(S)                                                                                     \
  template void ema_update<S>(model::EncoderParams<S>&, model::EncoderParams<S>&, double);                     \
  template ad::Tensor<S> soft_distribution<S>(const ad::Tensor<S>&, S);                                        \
  template ad::Tensor<S> distillation_loss<S>(const ad::Tensor<S>&, const ad::Tensor<S>&, S, S);               \
  template PairSample<S> make_sample<S>(const Segment&, const Segment&, AmplitudeScale);                       \
  template std::vector<PairSample<S>> make_samples<S>(const std::vector<Segment>&,                             \
                                                      const std::vector<QualityPair>&, AmplitudeScale, int);   \
  template PairLoss<S> composite_loss<S>(ad::Tape<S>&, const model::BoundParams<S>&,                           \
                                         const model::BoundParams<S>&, const model::ModelConfig&,              \
                                         const PretrainConfig&, const PairSample<S>&, const ad::Matrix<S>*);   \
  template void adamw_step<S>(model::EncoderParams<S>&, AdamState<S>&, double, const PretrainConfig&);         \
  template TrainState<S> init_state<S>(const model::ModelConfig&, const PretrainConfig&, long);                \
  template StepLog train_step<S>(TrainState<S>&, const model::ModelConfig&, const PretrainConfig&,             \
                                 const std::vector<const PairSample<S>*>&);                                    \
  template PretrainResult<S> pretrain<S>(const std::vector<PairSample<S>>&, const model::ModelConfig&,         \
                                         const PretrainConfig&, const std::function<void(const StepLog&)>&);   \
  template model::Checkpoint to_checkpoint<S>(const TrainState<S>&, const model::ModelConfig&);

QFM_INSTANTIATE(float)
QFM_INSTANTIATE(double)
#undef QFM_INSTANTIATE

}  // namespace qfm::train
