#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "qfm/errors.hpp"
#include "qfm/train.hpp"
#include "qfm/verify.hpp"

using namespace qfm;
using Mat = ad::Matrix<double>;

namespace {

train::PairSample<double> random_sample(const model::ModelConfig& c, std::mt19937_64& rng) {
  train::PairSample<double> s;
  s.high = oracle::random_matrix(c.channels, c.signal_length, rng);
  s.low = oracle::random_matrix(c.channels, c.signal_length, rng);
  const auto t = spectral::spectral_target<double>(s.high);
  s.amplitude = t.amplitude / std::sqrt(static_cast<double>(c.signal_length));
  s.phase = t.phase;
  s.phase_mask = t.phase_mask();
  return s;
}

Mat softmax_rows(const Mat& z, double tau) {
  Mat p = z / tau;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    p.row(r).array() -= p.row(r).maxCoeff();
    p.row(r) = p.row(r).array().exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

}  // namespace

TEST_CASE("EMA schedule follows the cosine formula") {
  CHECK(train::ema_momentum(0, 100) == 0.996);
  CHECK(train::ema_momentum(100, 100) == 1.0);
  CHECK(train::ema_momentum(50, 100) == doctest::Approx(0.998));
  CHECK(train::ema_momentum(25, 100) == doctest::Approx(1.0 - 0.004 * (1 + std::cos(std::numbers::pi / 4)) / 2));
  CHECK_THROWS_AS(train::ema_momentum(101, 100), ContractError);
}

TEST_CASE("learning rate warmup and cosine decay") {
  CHECK(train::cosine_lr(0, 100, 1e-3) == doctest::Approx(1e-3));
  CHECK(train::cosine_lr(50, 100, 1e-3) == doctest::Approx(5e-4));
  CHECK(train::cosine_lr(100, 100, 1e-3, 1e-5) == doctest::Approx(1e-5));
  CHECK(train::cosine_lr(4, 100, 1e-3, 0, 10) == doctest::Approx(5e-4));
  CHECK(train::cosine_lr(10, 110, 1e-3, 0, 10) == doctest::Approx(1e-3));
}

TEST_CASE("EMA update is elementwise") {
  const auto c = verify::gradcheck_model();
  auto t = model::init_params<double>(c, 1);
  auto s = model::init_params<double>(c, 2);
  const Mat t0 = t.proj_w1.value, s0 = s.proj_w1.value;
  train::ema_update(t, s, 0.75);
  CHECK((t.proj_w1.value - (0.75 * t0 + 0.25 * s0)).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(s.proj_w1.value == s0);
  train::ema_update(t, s, 1.0);
  CHECK((t.proj_w1.value - (0.75 * t0 + 0.25 * s0)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("distillation gradient is (P_s - P_t) / tau_s and teacher gets none") {
  std::mt19937_64 rng(3);
  const Mat zt = oracle::random_matrix(3, 10, rng), zs = oracle::random_matrix(3, 10, rng);
  ad::Tape<double> t;
  const auto a = t.leaf(zt), b = t.leaf(zs);
  const auto loss = train::distillation_loss(a, b, 0.04, 0.1);
  t.backward(loss);
  const Mat pt = softmax_rows(zt, 0.04), ps = softmax_rows(zs, 0.1);
  double ce = 0;
  for (Eigen::Index i = 0; i < pt.size(); ++i) ce -= pt.reshaped()(i) * std::log(ps.reshaped()(i));
  CHECK(loss.item() == doctest::Approx(ce).epsilon(1e-12));
  CHECK(((b.grad() - (ps - pt) / 0.1).cwiseAbs().maxCoeff()) < 1e-12);
  CHECK((a.grad().size() == 0 || a.grad().cwiseAbs().maxCoeff() == 0.0));
  CHECK_THROWS_AS(train::distillation_loss(a, t.leaf(Mat::Zero(3, 4)), 0.04, 0.1), ContractError);
}

TEST_CASE("composite loss is L_dis + lambda_amp L_amp + lambda_pha L_pha") {
  const auto c = verify::gradcheck_model();
  std::mt19937_64 rng(4);
  const auto sample = random_sample(c, rng);
  auto s = model::init_params<double>(c, 1);
  auto te = model::init_params<double>(c, 2);
  train::PretrainConfig p;
  p.lambda_amp = 0.3;
  p.lambda_pha = 1.7;
  ad::Tape<double> t;
  const auto loss = train::composite_loss(t, model::bind(t, s, false), model::bind(t, te, false), c, p, sample);
  CHECK(loss.total.item() ==
        doctest::Approx(loss.dis.item() + 0.3 * loss.amp.item() + 1.7 * loss.pha.item()).epsilon(1e-14));
  CHECK(loss.amp.item() > 0.0);
  CHECK(loss.pha.item() > 0.0);
}

TEST_CASE("AdamW step matches the decoupled update") {
  const auto c = verify::gradcheck_model();
  auto p = model::init_params<double>(c, 1);
  train::AdamState<double> st{model::zeros_like(p), model::zeros_like(p), 0};
  train::PretrainConfig cfg;
  std::mt19937_64 rng(5);
  std::vector<Mat> before, grads;
  p.visit([&](const std::string&, ad::Parameter<double>& x) {
    x.grad = oracle::random_matrix(x.value.rows(), x.value.cols(), rng);
    before.push_back(x.value);
    grads.push_back(x.grad);
  });
  const double lr = 1e-2;
  train::adamw_step(p, st, lr, cfg);
  std::size_t i = 0;
  double worst = 0;
  p.visit([&](const std::string&, ad::Parameter<double>& x) {
    // After one step m_hat = g and v_hat = g^2.
    const Mat g = grads[i];
    const Mat upd = g.array() / (g.array().abs() + cfg.adam_eps);
    const Mat expect = before[i] * (1 - lr * cfg.weight_decay) - lr * upd;
    worst = std::max(worst, (x.value - expect).cwiseAbs().maxCoeff());
    ++i;
  });
  CHECK(worst < 1e-12);
  CHECK(st.t == 1);
}

TEST_CASE("orthonormal amplitude scaling") {
  SyntheticSpec s;
  s.duration_s = 300;
  const auto p = generate_synthetic(s);
  const auto segs = segment_pairwise(p.ppg, p.ecg);
  const auto a = train::make_sample<double>(segs[0], segs[1], train::AmplitudeScale::orthonormal);
  const auto b = train::make_sample<double>(segs[0], segs[1], train::AmplitudeScale::none);
  CHECK((a.amplitude * std::sqrt(9000.0) - b.amplitude).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(a.high == segs[0].channels.cast<double>());
  CHECK(a.low == segs[1].channels.cast<double>());
  CHECK(a.amplitude.cols() == 4501);
}

TEST_CASE("step counts, smoothing and log lines") {
  train::PretrainConfig c;
  c.batch_size = 4;
  c.epochs = 3;
  CHECK(train::total_steps_for(10, c) == 9);
  c.max_steps = 5;
  CHECK(train::total_steps_for(10, c) == 5);
  const auto s = train::smooth({10, 0, 0}, 0.5);
  CHECK(s == std::vector<double>{10, 5, 2.5});
  train::StepLog log;
  log.step = 2;
  log.loss = {1, 2, 3, 4};
  const auto line = train::to_jsonl(log);
  CHECK(line.find("\"step\":2") != std::string::npos);
  CHECK(line.find("\"L_pre\":4") != std::string::npos);
}

TEST_CASE("pretraining is deterministic and thread-count independent in value") {
  auto c = verify::gradcheck_model();
  std::mt19937_64 rng(6);
  std::vector<train::PairSample<double>> samples;
  for (int i = 0; i < 6; ++i) samples.push_back(random_sample(c, rng));
  train::PretrainConfig p;
  p.max_steps = 4;
  p.batch_size = 3;
  p.lr = 1e-3;
  const auto a = train::pretrain(samples, c, p), b = train::pretrain(samples, c, p);
  REQUIRE(a.history.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(a.history[i].loss.pre == b.history[i].loss.pre);
  CHECK(a.history.back().lambda > a.history.front().lambda);
  p.threads = 2;
  const auto m = train::pretrain(samples, c, p);
  for (std::size_t i = 0; i < 4; ++i) CHECK(m.history[i].loss.pre == doctest::Approx(a.history[i].loss.pre).epsilon(1e-10));
  // Teacher moved toward the student but not onto it.
  auto diff = (a.state.teacher.proj_w1.value - a.state.student.proj_w1.value).cwiseAbs().maxCoeff();
  CHECK(diff > 0.0);
  const auto ck = train::to_checkpoint(a.state, c);
  CHECK(ck.meta.at("step") == 4);
}

TEST_CASE("invalid pretraining settings are rejected") {
  train::PretrainConfig p;
  p.tau_t = 0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.ema_start = 1.1;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.beta1 = 1.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}
