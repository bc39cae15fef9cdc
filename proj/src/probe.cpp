#include "qfm/probe.hpp"

#include <algorithm>
#include <cmath>

#include "qfm/errors.hpp"
#include "qfm/parallel.hpp"

namespace qfm::probe {

Eigen::MatrixXd LinearProbe::logits(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd z = (x.rowwise() - mean).array().rowwise() / scale.array();
  Eigen::MatrixXd out = z * weights;
  out.rowwise() += bias;
  return out;
}

std::vector<int> LinearProbe::predict(const Eigen::MatrixXd& x) const {
  const Eigen::MatrixXd l = logits(x);
  std::vector<int> out(static_cast<std::size_t>(l.rows()));
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    Eigen::Index arg = 0;
    l.row(i).maxCoeff(&arg);
    out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return out;
}

LinearProbe fit_probe(const Eigen::MatrixXd& x, const std::vector<int>& y, const ProbeConfig& cfg) {
  if (x.rows() != static_cast<Eigen::Index>(y.size()) || y.empty())
    throw ContractError("fit_probe: " + std::to_string(x.rows()) + " feature rows vs " + std::to_string(y.size()) +
                        " labels");
  const Eigen::Index n = x.rows(), d = x.cols(), k = cfg.classes;
  for (int label : y)
    if (label < 0 || label >= k) throw ContractError("fit_probe: label " + std::to_string(label) + " out of range");

  LinearProbe p;
  p.mean = x.colwise().mean();
  p.scale = ((x.rowwise() - p.mean).array().square().colwise().sum() / static_cast<double>(n)).sqrt();
  p.scale = p.scale.unaryExpr([](double s) { return s > 1e-12 ? s : 1.0; });
  const Eigen::MatrixXd z = (x.rowwise() - p.mean).array().rowwise() / p.scale.array();

  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, y[static_cast<std::size_t>(i)]) = 1.0;

  p.weights = Eigen::MatrixXd::Zero(d, k);
  p.bias = Eigen::RowVectorXd::Zero(k);
  Eigen::MatrixXd mw = Eigen::MatrixXd::Zero(d, k), vw = mw;
  Eigen::RowVectorXd mb = Eigen::RowVectorXd::Zero(k), vb = mb;
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int it = 1; it <= cfg.iterations; ++it) {
    Eigen::MatrixXd l = z * p.weights;
    l.rowwise() += p.bias;
    for (Eigen::Index i = 0; i < n; ++i) {
      l.row(i).array() -= l.row(i).maxCoeff();
      l.row(i) = l.row(i).array().exp();
      l.row(i) /= l.row(i).sum();
    }
    const Eigen::MatrixXd diff = (l - onehot) / static_cast<double>(n);
    const Eigen::MatrixXd gw = z.transpose() * diff + 2.0 * cfg.l2 * p.weights;
    const Eigen::RowVectorXd gb = diff.colwise().sum();
    mw = b1 * mw + (1 - b1) * gw;
    vw = b2 * vw + (1 - b2) * gw.cwiseAbs2();
    mb = b1 * mb + (1 - b1) * gb;
    vb = b2 * vb + (1 - b2) * gb.cwiseAbs2();
    const double c1 = 1.0 - std::pow(b1, it), c2 = 1.0 - std::pow(b2, it);
    p.weights.array() -= cfg.lr * (mw.array() / c1) / ((vw.array() / c2).sqrt() + eps);
    p.bias.array() -= cfg.lr * (mb.array() / c1) / ((vb.array() / c2).sqrt() + eps);
  }
  return p;
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size() || truth.empty()) throw ContractError("accuracy: length mismatch or empty");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

double majority_rate(const std::vector<int>& y, int classes) {
  if (y.empty()) return 0.0;
  std::vector<std::size_t> counts(static_cast<std::size_t>(classes), 0);
  for (int v : y) counts.at(static_cast<std::size_t>(v))++;
  return static_cast<double>(*std::max_element(counts.begin(), counts.end())) / static_cast<double>(y.size());
}

Eigen::MatrixXd extract_features(model::EncoderParams<float>& params, const model::ModelConfig& cfg,
                                 const std::vector<Segment>& segments, int threads) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(segments.size()), cfg.hidden);
  parallel_for(segments.size(), threads, [&](std::size_t i) {
    ad::Tape<float> tape;
    auto bound = model::bind(tape, params, false);
    const ad::Matrix<float> x = segments[i].channels;
    const auto enc = model::encode(tape, bound, cfg, x);
    out.row(static_cast<Eigen::Index>(i)) = enc.pooled.value().row(0).cast<double>();
  });
  return out;
}

}  // namespace qfm::probe
