#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "qfm/autodiff.hpp"
#include "qfm/errors.hpp"
#include "qfm/model.hpp"

using namespace qfm;
using Mat = ad::Matrix<double>;

TEST_CASE("forward values of elementwise and reduction ops") {
  ad::Tape<double> t;
  Mat a(2, 3);
  a << 1, -2, 0.5, 3, 0, -1;
  const auto x = t.leaf(a);
  CHECK(ad::sum(x).item() == doctest::Approx(1.5));
  CHECK(ad::mean_rows(x).value()(0, 0) == doctest::Approx(2.0));
  const auto g = ad::gelu(x).value();
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double v = a.reshaped()(i);
    CHECK(g.reshaped()(i) == doctest::Approx(0.5 * v * (1 + std::erf(v / std::numbers::sqrt2))));
  }
  CHECK(ad::softplus(x).value()(0, 1) == doctest::Approx(std::log1p(std::exp(-2.0))));
  CHECK(ad::tanh(x).value()(1, 0) == doctest::Approx(std::tanh(3.0)));
  const auto tr = ad::transpose(x).value();
  CHECK(tr.rows() == 3);
  CHECK(tr(2, 1) == -1);
}

TEST_CASE("softmax and log-softmax with temperature") {
  ad::Tape<double> t;
  Mat a(1, 3);
  a << 1000, 1001, 999;
  const auto p = ad::softmax(t.leaf(a), 0.5).value();
  const double z = std::exp(-2.0) + 1 + std::exp(-4.0);
  CHECK(p(0, 1) == doctest::Approx(1 / z));
  CHECK(p.sum() == doctest::Approx(1.0));
  const auto lp = ad::log_softmax(t.leaf(a), 0.5).value();
  CHECK(lp(0, 0) == doctest::Approx(-2.0 - std::log(z)));
}

TEST_CASE("layer norm matches the row formula") {
  std::mt19937_64 rng(1);
  const Mat a = oracle::random_matrix(4, 7, rng, 3.0);
  const Mat gamma = Eigen::RowVectorXd::LinSpaced(7, 0.5, 2.0);
  const Mat beta = Eigen::RowVectorXd::LinSpaced(7, -1.0, 1.0);
  ad::Tape<double> t;
  const auto y = ad::layer_norm(t.leaf(a), t.leaf(gamma), t.leaf(beta)).value();
  Mat ref = oracle::row_normalize(a);
  for (Eigen::Index r = 0; r < ref.rows(); ++r) ref.row(r) = ref.row(r).cwiseProduct(gamma) + beta;
  CHECK((y - ref).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("broadcast add sums the gradient over rows") {
  ad::Tape<double> t;
  const auto a = t.leaf(Mat::Ones(3, 2));
  const auto b = t.leaf(Mat::Zero(1, 2));
  t.backward(ad::sum(ad::add(a, b)));
  CHECK(b.grad()(0, 0) == 3.0);
  CHECK(a.grad()(2, 1) == 1.0);
}

TEST_CASE("parameter gradients accumulate until zeroed") {
  ad::Parameter<double> p(Mat::Constant(1, 1, 2.0));
  for (int i = 0; i < 2; ++i) {
    ad::Tape<double> t;
    const auto x = t.parameter(p);
    t.backward(ad::sum(ad::mul(x, x)));
  }
  CHECK(p.grad(0, 0) == doctest::Approx(8.0));
  p.zero_grad();
  CHECK(p.grad(0, 0) == 0.0);
}

TEST_CASE("detach and masked_fill block gradients") {
  ad::Tape<double> t;
  const auto x = t.leaf(Mat::Constant(1, 3, 1.5));
  model::BoolMatrix mask(1, 3);
  mask << false, true, false;
  const auto y = ad::add(ad::masked_fill(x, mask, -7.0), ad::detach(x));
  CHECK(y.value()(0, 1) == doctest::Approx(-5.5));
  t.backward(ad::sum(y));
  CHECK(x.grad()(0, 0) == 1.0);
  CHECK(x.grad()(0, 1) == 0.0);
}

TEST_CASE("grad_check agrees with a hand-derived gradient") {
  // f(A, B) = sum((A B) .* (A B)); the check also exercises matmul.
  ad::TapeFunction<double> f = [](ad::Tape<double>&, const std::vector<ad::Tensor<double>>& in) {
    const auto ab = ad::matmul(in[0], in[1]);
    return ad::sum(ad::mul(ab, ab));
  };
  std::mt19937_64 rng(4);
  const Mat a = oracle::random_matrix(3, 4, rng), b = oracle::random_matrix(4, 2, rng);
  CHECK(ad::grad_check<double>(f, {a, b}).max_relative_error < 1e-7);

  ad::Tape<double> t;
  const auto x = t.leaf(a), y = t.leaf(b);
  t.backward(f(t, {x, y}));
  const Mat expect = 2 * (a * b) * b.transpose();
  CHECK((x.grad() - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("banded attention equals dense masked attention for every window") {
  std::mt19937_64 rng(6);
  for (int n : {1, 5, 12}) {
    for (int w : {0, 2, 4, 8, 30}) {
      const Mat q = oracle::random_matrix(n, 3, rng), k = oracle::random_matrix(n, 3, rng),
                v = oracle::random_matrix(n, 3, rng), g = oracle::random_matrix(n, 3, rng);
      ad::Tape<double> t;
      const auto qa = t.leaf(q), ka = t.leaf(k), va = t.leaf(v);
      const auto qb = t.leaf(q), kb = t.leaf(k), vb = t.leaf(v);
      const auto band = ad::windowed_attention(qa, ka, va, w, 0.7);
      const auto dense = model::dense_attention(qb, kb, vb, model::window_mask(n, w), 0.7);
      CHECK((band.value() - dense.value()).cwiseAbs().maxCoeff() < 1e-12);
      const auto gt = t.constant(g);
      t.backward(ad::add(ad::sum(ad::mul(band, gt)), ad::sum(ad::mul(dense, gt))));
      CHECK((qa.grad() - qb.grad()).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((ka.grad() - kb.grad()).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((va.grad() - vb.grad()).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("window mask and logit count") {
  const auto m = model::window_mask(6, 2);
  CHECK(m(2, 1));
  CHECK(m(2, 3));
  CHECK_FALSE(m(2, 4));
  CHECK(m.count() == model::windowed_logit_count(6, 2));
  CHECK(model::windowed_logit_count(6, 2) == 6 + 2 * 5);
  CHECK(model::windowed_logit_count(100, 8) < 100 * 9);
  CHECK(model::windowed_logit_count(5, 0) == 5);
}

TEST_CASE("shape mismatches raise ContractError") {
  ad::Tape<double> t;
  const auto a = t.leaf(Mat::Ones(2, 3)), b = t.leaf(Mat::Ones(3, 3));
  CHECK_THROWS_AS(ad::mul(a, b), ContractError);
  CHECK_THROWS_AS(ad::matmul(a, a), ContractError);
  CHECK_THROWS_AS(ad::windowed_attention(a, a, a, 3, 1.0), ContractError);
}
