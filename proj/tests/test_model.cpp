#include <cmath>
#include <cstring>
#include <numbers>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "qfm/binary_io.hpp"
#include "qfm/errors.hpp"
#include "qfm/model.hpp"
#include "qfm/verify.hpp"

using namespace qfm;
using Mat = ad::Matrix<double>;

namespace {

model::ModelConfig small() {
  auto c = verify::gradcheck_model();
  c.layers = 2;
  c.window = 2;
  c.signal_length = 120;  // 20 tokens
  return c;
}

}  // namespace

TEST_CASE("presets") {
  const auto b = model::ModelConfig::preset("base");
  CHECK(b.layers == 2);
  CHECK(b.hidden == 512);
  CHECK(b.mlp == 256);
  CHECK(b.heads == 4);
  CHECK(b.window == 8);
  CHECK(b.n_tokens() == 150);
  CHECK(model::ModelConfig::preset("large").layers == 21);
  CHECK(model::ModelConfig::preset("huge").mlp == 2048);
  const auto t = model::ModelConfig::tiny();
  CHECK(t.hidden == 64);
  CHECK(t.out_dim == 64);
  CHECK_THROWS_AS(model::ModelConfig::preset("giant"), ConfigError);
  CHECK(model::ModelConfig::from_map(t.to_map()) == t);
}

TEST_CASE("config validation") {
  auto c = model::ModelConfig::tiny();
  c.hidden = 66;  // not divisible by 4 heads
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = model::ModelConfig::tiny();
  c.window = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = model::ModelConfig::tiny();
  c.patch_len = 7;  // 9000 not divisible
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("parameter count is the sum of the tensor shapes") {
  const auto c = model::ModelConfig::base();
  std::int64_t total = 0;
  for (const auto& [name, shape] : model::parameter_shapes(c)) total += std::int64_t{shape.first} * shape.second;
  CHECK(model::param_count(c) == total);
  auto p = model::init_params<float>(c, 1);
  std::int64_t seen = 0;
  p.visit([&](const std::string&, ad::Parameter<float>& x) { seen += x.value.size(); });
  CHECK(seen == total);
}

TEST_CASE("patchify interleaves channels within each token") {
  auto c = small();
  Mat seg(2, c.signal_length);
  for (int ch = 0; ch < 2; ++ch)
    for (int i = 0; i < c.signal_length; ++i) seg(ch, i) = 1000 * ch + i;
  const auto tok = model::patchify(seg, c);
  CHECK(tok.rows() == c.n_tokens());
  CHECK(tok.cols() == 2 * c.patch_len);
  CHECK(tok(3, 0) == 3 * c.patch_len);
  CHECK(tok(3, c.patch_len) == 1000 + 3 * c.patch_len);
  CHECK_THROWS_AS(model::patchify(Mat(2, 10), c), ContractError);
}

TEST_CASE("encoder output shapes and spectral head ranges") {
  const auto c = small();
  auto p = model::init_params<double>(c, 3);
  std::mt19937_64 rng(3);
  ad::Tape<double> t;
  const auto w = model::bind(t, p, false);
  const auto out = model::encode(t, w, c, oracle::random_matrix(2, c.signal_length, rng));
  CHECK(out.features.rows() == c.n_tokens());
  CHECK(out.features.cols() == c.hidden);
  CHECK(out.pooled.cols() == c.hidden);
  CHECK(out.logits.cols() == c.out_dim);
  const auto sp = model::reconstruct_spectra(w, c, out.pooled);
  CHECK(sp.amplitude.rows() == 2);
  CHECK(sp.amplitude.cols() == c.spectral_bins());
  CHECK(sp.amplitude.value().minCoeff() >= 0.0);
  CHECK(sp.phase.value().cwiseAbs().maxCoeff() < std::numbers::pi);
}

TEST_CASE("receptive field grows by w/2 tokens per layer") {
  // Perturbing token j changes token i's features only when |i - j| <= layers * w / 2.
  const auto c = small();
  auto p = model::init_params<double>(c, 5);
  std::mt19937_64 rng(5);
  const Mat base = oracle::random_matrix(2, c.signal_length, rng);
  Mat moved = base;
  const int j = 10;
  moved.block(0, j * c.patch_len, 2, c.patch_len).array() += 1.0;
  auto features = [&](const Mat& x) {
    ad::Tape<double> t;
    const auto w = model::bind(t, p, false);
    return Mat(model::encode(t, w, c, x).features.value());
  };
  const Mat diff = (features(base) - features(moved)).cwiseAbs();
  const int reach = c.layers * c.window / 2;
  for (int i = 0; i < c.n_tokens(); ++i) {
    const double d = diff.row(i).maxCoeff();
    if (std::abs(i - j) <= reach) CHECK(d > 0.0);
    else CHECK(d == 0.0);
  }
}

TEST_CASE("banded and dense encoders agree") {
  const auto c = small();
  auto p = model::init_params<double>(c, 7);
  std::mt19937_64 rng(7);
  const Mat x = oracle::random_matrix(2, c.signal_length, rng);
  ad::Tape<double> t;
  const auto w = model::bind(t, p, false);
  const auto a = model::encode(t, w, c, x, model::AttentionImpl::banded);
  const auto b = model::encode(t, w, c, x, model::AttentionImpl::dense);
  CHECK((a.logits.value() - b.logits.value()).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("non-finite input names the failing stage") {
  const auto c = small();
  auto p = model::init_params<double>(c, 1);
  Mat x = Mat::Zero(2, c.signal_length);
  x(0, 0) = std::nan("");
  ad::Tape<double> t;
  const auto w = model::bind(t, p, false);
  CHECK_THROWS_AS(model::encode(t, w, c, x), NumericError);
}

TEST_CASE("checkpoint container round-trips and rejects damage") {
  model::Checkpoint ck;
  ck.config = small();
  ck.meta = {{"step", 3}, {"seed", 9}};
  ck.student = model::init_params<float>(ck.config, 1);
  ck.teacher = model::init_params<float>(ck.config, 2);
  auto bytes = model::encode_checkpoint(ck);
  CHECK(std::memcmp(bytes.data(), "QFMCKPT1", 8) == 0);
  const auto back = model::decode_checkpoint(bytes);
  CHECK(back.config == ck.config);
  CHECK(back.meta == ck.meta);
  auto a = ck.teacher;
  auto b = back.teacher;
  std::vector<Mat> va, vb;
  a.visit([&](const std::string&, ad::Parameter<float>& x) { va.push_back(x.value.cast<double>()); });
  b.visit([&](const std::string&, ad::Parameter<float>& x) { vb.push_back(x.value.cast<double>()); });
  REQUIRE(va.size() == vb.size());
  for (std::size_t i = 0; i < va.size(); ++i) CHECK(va[i] == vb[i]);
  CHECK(model::encode_checkpoint(back) == bytes);

  bytes.resize(bytes.size() - 5);
  CHECK_THROWS_AS(model::decode_checkpoint(bytes), FormatError);
}

TEST_CASE("parameter casts round-trip through double") {
  auto p = model::init_params<float>(small(), 4);
  auto d = model::cast_params<double>(p);
  auto f = model::cast_params<float>(d);
  bool same = true;
  std::vector<ad::Matrix<float>> a;
  p.visit([&](const std::string&, ad::Parameter<float>& x) { a.push_back(x.value); });
  std::size_t i = 0;
  f.visit([&](const std::string&, ad::Parameter<float>& x) { same = same && x.value == a[i++]; });
  CHECK(same);
}
