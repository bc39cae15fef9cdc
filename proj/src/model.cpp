#include "qfm/model.hpp"

#include <cmath>
#include <numbers>

#include "qfm/binary_io.hpp"
#include "qfm/errors.hpp"

namespace qfm::model {

namespace {

constexpr char kCheckpointMagic[] = "QFMCKPT1";
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename S>
bool finite(const ad::Tensor<S>& t) {
  return t.value().allFinite();
}

}  // namespace

// ---- config --------------------------------------------------------------------------------------

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("model: " + msg);
  };
  need(layers >= 0, "layers must be >= 0");
  need(hidden > 0 && heads > 0, "hidden and heads must be positive");
  need(hidden % heads == 0, "hidden (" + std::to_string(hidden) + ") not divisible by heads (" +
                                std::to_string(heads) + ")");
  need(mlp > 0, "mlp must be positive");
  need(window >= 0 && window % 2 == 0, "window must be even and >= 0, got " + std::to_string(window));
  need(patch_len > 0 && signal_length % patch_len == 0,
       "patch_len " + std::to_string(patch_len) + " does not divide signal length " + std::to_string(signal_length));
  need(out_dim > 0, "out_dim must be positive");
  need(channels > 0, "channels must be positive");
  need(recon_hidden >= 0, "recon_hidden must be >= 0");
}

ModelConfig ModelConfig::base() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 512;
  c.mlp = 256;
  c.heads = 4;
  return c;
}

ModelConfig ModelConfig::large() {
  ModelConfig c;
  c.layers = 21;
  c.hidden = 512;
  c.mlp = 512;
  c.heads = 4;
  return c;
}

ModelConfig ModelConfig::huge() {
  ModelConfig c;
  c.layers = 50;
  c.hidden = 512;
  c.mlp = 2048;
  c.heads = 8;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 64;
  c.mlp = 128;
  c.heads = 4;
  c.out_dim = 64;
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  if (name == "base") return base();
  if (name == "large") return large();
  if (name == "huge") return huge();
  if (name == "tiny") return tiny();
  throw ConfigError("unknown model preset '" + name + "' (expected base|large|huge|tiny)");
}

std::map<std::string, double> ModelConfig::to_map() const {
  return {{"layers", layers},
          {"hidden", hidden},
          {"mlp", mlp},
          {"heads", heads},
          {"window", window},
          {"patch_len", patch_len},
          {"out_dim", out_dim},
          {"channels", channels},
          {"signal_length", signal_length},
          {"recon_hidden", recon_hidden},
          {"positional", positional ? 1.0 : 0.0}};
}

ModelConfig ModelConfig::from_map(const std::map<std::string, double>& m) {
  ModelConfig c;
  auto get = [&](const char* key, int& out) {
    auto it = m.find(key);
    if (it == m.end()) throw ConfigError(std::string("model config missing key '") + key + "'");
    out = static_cast<int>(it->second);
  };
  get("layers", c.layers);
  get("hidden", c.hidden);
  get("mlp", c.mlp);
  get("heads", c.heads);
  get("window", c.window);
  get("patch_len", c.patch_len);
  get("out_dim", c.out_dim);
  get("channels", c.channels);
  get("signal_length", c.signal_length);
  get("recon_hidden", c.recon_hidden);
  int pos = 1;
  get("positional", pos);
  c.positional = pos != 0;
  c.validate();
  return c;
}

// ---- parameters ----------------------------------------------------------------------------------

std::vector<std::pair<std::string, std::pair<int, int>>> parameter_shapes(const ModelConfig& cfg) {
  cfg.validate();
  const int h = cfg.hidden, dh = cfg.d_head(), r = cfg.recon_width();
  const int spectra = 2 * cfg.channels * cfg.spectral_bins();
  Weights<std::pair<int, int>> s;
  s.embed_w = {cfg.token_features(), h};
  s.embed_b = {1, h};
  s.pos = {cfg.n_tokens(), h};
  s.blocks.resize(static_cast<std::size_t>(cfg.layers));
  for (auto& b : s.blocks) {
    b.ln1_gamma = b.ln1_beta = b.ln2_gamma = b.ln2_beta = {1, h};
    b.wq = b.wk = b.wv = b.wo = {h, h};
    b.bq = b.bk = b.bv = b.bo = {1, h};
    b.q_gamma = b.q_beta = b.k_gamma = b.k_beta = {1, dh};
    b.w1 = {h, cfg.mlp};
    b.b1 = {1, cfg.mlp};
    b.w2 = {cfg.mlp, h};
    b.b2 = {1, h};
  }
  s.final_gamma = s.final_beta = {1, h};
  s.proj_w1 = {h, h};
  s.proj_b1 = {1, h};
  s.proj_w2 = {h, cfg.out_dim};
  s.proj_b2 = {1, cfg.out_dim};
  s.recon_w1 = {h, r};
  s.recon_b1 = {1, r};
  s.recon_w2 = {r, spectra};
  s.recon_b2 = {1, spectra};
  std::vector<std::pair<std::string, std::pair<int, int>>> out;
  s.visit([&](const std::string& name, std::pair<int, int>& shape) { out.emplace_back(name, shape); });
  return out;
}

std::int64_t param_count(const ModelConfig& cfg) {
  std::int64_t n = 0;
  for (const auto& [name, shape] : parameter_shapes(cfg))
    n += static_cast<std::int64_t>(shape.first) * shape.second;
  return n;
}

namespace {

bool is_ln_gamma(const std::string& name) { return name.ends_with("gamma"); }
bool is_bias(const std::string& name) {
  return name.ends_with(".beta") || name.ends_with(".b") || name.ends_with(".bq") || name.ends_with(".bk") ||
         name.ends_with(".bv") || name.ends_with(".bo") || name.ends_with(".b1") || name.ends_with(".b2");
}

}  // namespace

template <typename S>
EncoderParams<S> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  const auto shapes = parameter_shapes(cfg);
  EncoderParams<S> p;
  p.blocks.resize(static_cast<std::size_t>(cfg.layers));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::size_t idx = 0;
  p.visit([&](const std::string& name, ad::Parameter<S>& param) {
    const auto [rows, cols] = shapes[idx++].second;
    ad::Matrix<S> v(rows, cols);
    if (is_ln_gamma(name)) {
      v.setOnes();
    } else if (is_bias(name)) {
      v.setZero();
    } else {
      // Linear maps: N(0, 1/fan_in). Positional table: N(0, 0.02^2).
      const double sd = name == "embed.pos" ? 0.02 : 1.0 / std::sqrt(static_cast<double>(rows));
      for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<S>(sd * normal(rng));
    }
    param = ad::Parameter<S>(std::move(v));
  });
  return p;
}

template <typename S>
EncoderParams<S> zeros_like(const EncoderParams<S>& src) {
  EncoderParams<S> out;
  out.blocks.resize(src.blocks.size());
  std::vector<const ad::Parameter<S>*> from;
  const_cast<EncoderParams<S>&>(src).visit(
      [&](const std::string&, ad::Parameter<S>& p) { from.push_back(&p); });
  std::size_t i = 0;
  out.visit([&](const std::string&, ad::Parameter<S>& p) {
    p = ad::Parameter<S>(ad::Matrix<S>::Zero(from[i]->value.rows(), from[i]->value.cols()));
    ++i;
  });
  return out;
}

template <typename To, typename From>
EncoderParams<To> cast_params(const EncoderParams<From>& src) {
  EncoderParams<To> out;
  out.blocks.resize(src.blocks.size());
  std::vector<const ad::Parameter<From>*> from;
  const_cast<EncoderParams<From>&>(src).visit(
      [&](const std::string&, ad::Parameter<From>& p) { from.push_back(&p); });
  std::size_t i = 0;
  out.visit([&](const std::string&, ad::Parameter<To>& p) {
    p = ad::Parameter<To>(from[i]->value.template cast<To>());
    ++i;
  });
  return out;
}

template <typename S>
BoundParams<S> bind(ad::Tape<S>& tape, EncoderParams<S>& params, bool trainable) {
  BoundParams<S> out;
  out.blocks.resize(params.blocks.size());
  std::vector<ad::Parameter<S>*> from;
  params.visit([&](const std::string&, ad::Parameter<S>& p) { from.push_back(&p); });
  std::size_t i = 0;
  out.visit([&](const std::string&, ad::Tensor<S>& t) {
    auto& p = *from[i++];
    t = trainable ? tape.parameter(p) : tape.constant_ref(p.value);
  });
  return out;
}

template <typename S>
bool all_finite(EncoderParams<S>& p) {
  bool ok = true;
  p.visit([&](const std::string&, ad::Parameter<S>& x) { ok = ok && x.value.allFinite(); });
  return ok;
}

// ---- attention -----------------------------------------------------------------------------------

template <typename S>
ad::Matrix<S> patchify(const ad::Matrix<S>& segment, const ModelConfig& cfg) {
  if (segment.rows() != cfg.channels || segment.cols() != cfg.signal_length)
    throw ContractError("patchify: expected (" + std::to_string(cfg.channels) + "x" +
                        std::to_string(cfg.signal_length) + ") segment, got (" + std::to_string(segment.rows()) +
                        "x" + std::to_string(segment.cols()) + ")");
  const int n = cfg.n_tokens(), p = cfg.patch_len;
  ad::Matrix<S> out(n, cfg.token_features());
  for (int t = 0; t < n; ++t)
    for (int c = 0; c < cfg.channels; ++c) out.row(t).segment(c * p, p) = segment.row(c).segment(t * p, p);
  return out;
}

BoolMatrix window_mask(int n, int w) {
  if (w < 0 || w % 2 != 0) throw ContractError("window_mask: window must be even and >= 0");
  BoolMatrix m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m(i, j) = std::abs(i - j) <= w / 2;
  return m;
}

std::int64_t windowed_logit_count(int n, int w) {
  const std::int64_t half = std::min<std::int64_t>(w / 2, n > 0 ? n - 1 : 0);
  // n * (2 * half + 1) minus the slots that fall off both ends.
  return static_cast<std::int64_t>(n) * (2 * half + 1) - half * (half + 1);
}

template <typename S>
ad::Tensor<S> dense_attention(const ad::Tensor<S>& q, const ad::Tensor<S>& k, const ad::Tensor<S>& v,
                              const BoolMatrix& mask, S scale) {
  auto logits = ad::scale(ad::matmul(q, ad::transpose(k)), scale);
  const BoolMatrix blocked = mask.unaryExpr([](bool b) { return !b; });
  auto probs = ad::softmax(ad::masked_fill(logits, blocked, -std::numeric_limits<S>::infinity()));
  return ad::matmul(probs, v);
}

template <typename S>
ad::Tensor<S> pwsa_attention(const ad::Tensor<S>& q, const ad::Tensor<S>& k, const ad::Tensor<S>& v,
                             const ad::Tensor<S>& q_gamma, const ad::Tensor<S>& q_beta,
                             const ad::Tensor<S>& k_gamma, const ad::Tensor<S>& k_beta, int heads, int window,
                             AttentionImpl impl) {
  const auto hidden = q.cols();
  if (heads <= 0 || hidden % heads != 0) throw ContractError("pwsa_attention: hidden not divisible by heads");
  const auto dh = hidden / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  BoolMatrix mask;
  if (impl == AttentionImpl::dense) mask = window_mask(static_cast<int>(q.rows()), window);
  std::vector<ad::Tensor<S>> ctx;
  for (int h = 0; h < heads; ++h) {
    auto qh = ad::layer_norm(ad::slice_cols(q, h * dh, dh), q_gamma, q_beta);
    auto kh = ad::layer_norm(ad::slice_cols(k, h * dh, dh), k_gamma, k_beta);
    auto vh = ad::slice_cols(v, h * dh, dh);
    ctx.push_back(impl == AttentionImpl::banded ? ad::windowed_attention(qh, kh, vh, window, scale)
                                                : dense_attention(qh, kh, vh, mask, scale));
  }
  return heads == 1 ? ctx[0] : ad::concat_cols(ctx);
}

template <typename S>
ad::Tensor<S> pwsa_block(const ad::Tensor<S>& x, const BlockWeights<ad::Tensor<S>>& w, const ModelConfig& cfg,
                         AttentionImpl impl) {
  using ad::add;
  using ad::matmul;
  auto h = ad::layer_norm(x, w.ln1_gamma, w.ln1_beta);
  auto q = add(matmul(h, w.wq), w.bq);
  auto k = add(matmul(h, w.wk), w.bk);
  auto v = add(matmul(h, w.wv), w.bv);
  auto ctx = pwsa_attention(q, k, v, w.q_gamma, w.q_beta, w.k_gamma, w.k_beta, cfg.heads, cfg.window, impl);
  auto x1 = add(x, add(matmul(ctx, w.wo), w.bo));
  auto h2 = ad::layer_norm(x1, w.ln2_gamma, w.ln2_beta);
  auto f = add(matmul(ad::gelu(add(matmul(h2, w.w1), w.b1)), w.w2), w.b2);
  return add(x1, f);
}

template <typename S>
EncoderOutput<S> encode(ad::Tape<S>& tape, const BoundParams<S>& w, const ModelConfig& cfg,
                        const ad::Matrix<S>& segment, AttentionImpl impl) {
  using ad::add;
  using ad::matmul;
  auto tokens = tape.constant(patchify(segment, cfg));
  auto x = add(matmul(tokens, w.embed_w), w.embed_b);
  if (cfg.positional) x = add(x, w.pos);
  if (!finite(x)) throw NumericError("non-finite activation in tokenizer");
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    x = pwsa_block(x, w.blocks[i], cfg, impl);
    if (!finite(x)) throw NumericError("non-finite activation in block " + std::to_string(i));
  }
  EncoderOutput<S> out;
  out.features = ad::layer_norm(x, w.final_gamma, w.final_beta);
  out.pooled = ad::mean_rows(out.features);
  out.logits = add(matmul(ad::gelu(add(matmul(out.pooled, w.proj_w1), w.proj_b1)), w.proj_w2), w.proj_b2);
  if (!finite(out.logits)) throw NumericError("non-finite activation in projection head");
  return out;
}

template <typename S>
SpectraOutput<S> reconstruct_spectra(const BoundParams<S>& w, const ModelConfig& cfg, const ad::Tensor<S>& pooled) {
  using ad::add;
  using ad::matmul;
  auto hid = ad::gelu(add(matmul(pooled, w.recon_w1), w.recon_b1));
  auto raw = add(matmul(hid, w.recon_w2), w.recon_b2);
  const Eigen::Index half = static_cast<Eigen::Index>(cfg.channels) * cfg.spectral_bins();
  SpectraOutput<S> out;
  out.amplitude = ad::reshape(ad::softplus(ad::slice_cols(raw, 0, half)), cfg.channels, cfg.spectral_bins());
  out.phase = ad::reshape(ad::scale(ad::tanh(ad::slice_cols(raw, half, half)), std::numbers::pi_v<S>), cfg.channels,
                          cfg.spectral_bins());
  if (!finite(out.amplitude) || !finite(out.phase)) throw NumericError("non-finite activation in reconstruction head");
  return out;
}

// ---- checkpoint ----------------------------------------------------------------------------------

void write_params(io::ByteWriter& w, const std::string& prefix, const EncoderParams<float>& p) {
  const_cast<EncoderParams<float>&>(p).visit([&](const std::string& name, ad::Parameter<float>& t) {
    w.str(prefix + name);
    w.u32(static_cast<std::uint32_t>(t.value.rows()));
    w.u32(static_cast<std::uint32_t>(t.value.cols()));
    w.f32_array(std::span<const float>(t.value.data(), static_cast<std::size_t>(t.value.size())));
  });
}

void read_params(io::ByteReader& r, const std::string& prefix, const ModelConfig& cfg, EncoderParams<float>& p) {
  const auto shapes = parameter_shapes(cfg);
  p.blocks.resize(static_cast<std::size_t>(cfg.layers));
  std::size_t i = 0;
  p.visit([&](const std::string& name, ad::Parameter<float>& t) {
    const auto at = r.offset();
    const auto got = r.str();
    if (got != prefix + name) throw FormatError("expected tensor '" + prefix + name + "', found '" + got + "'", at);
    const auto rows = r.u32();
    const auto cols = r.u32();
    const auto [er, ec] = shapes[i++].second;
    if (static_cast<int>(rows) != er || static_cast<int>(cols) != ec)
      r.fail("tensor '" + got + "' has shape " + std::to_string(rows) + "x" + std::to_string(cols) +
             ", config implies " + std::to_string(er) + "x" + std::to_string(ec));
    const auto values = r.f32_array(static_cast<std::uint64_t>(rows) * cols);
    t = ad::Parameter<float>(Eigen::Map<const ad::Matrix<float>>(values.data(), rows, cols));
  });
}

void write_named_values(io::ByteWriter& w, const std::map<std::string, double>& m) {
  w.u32(static_cast<std::uint32_t>(m.size()));
  for (const auto& [k, v] : m) {
    w.str(k);
    w.f64(v);
  }
}

std::map<std::string, double> read_named_values(io::ByteReader& r) {
  std::map<std::string, double> m;
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    auto k = r.str();
    m[k] = r.f64();
  }
  return m;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ckpt.config.validate();
  io::ByteWriter w;
  w.magic(std::string_view(kCheckpointMagic, 8));
  w.u32(kCheckpointVersion);
  write_named_values(w, ckpt.config.to_map());
  write_named_values(w, ckpt.meta);
  w.u32(static_cast<std::uint32_t>(parameter_shapes(ckpt.config).size()));
  write_params(w, "student/", ckpt.student);
  write_params(w, "teacher/", ckpt.teacher);
  return w.data();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(std::string_view(kCheckpointMagic, 8));
  const auto version = r.u32();
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  const auto cfg_at = r.offset();
  try {
    c.config = ModelConfig::from_map(read_named_values(r));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid model config: ") + e.what(), cfg_at);
  }
  c.meta = read_named_values(r);
  const auto n = r.u32();
  if (n != parameter_shapes(c.config).size()) r.fail("tensor count " + std::to_string(n) + " does not match config");
  read_params(r, "student/", c.config, c.student);
  read_params(r, "teacher/", c.config, c.teacher);
  if (!r.at_end()) r.fail("trailing bytes after checkpoint");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { io::write_file(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

#define QFM_INSTANTIATE(S)                                                                                     \
  template EncoderParams<S> init_params<S>(const ModelConfig&, std::uint64_t);                                 \
  template EncoderParams<S> zeros_like<S>(const EncoderParams<S>&);                                            \
  template BoundParams<S> bind<S>(ad::Tape<S>&, EncoderParams<S>&, bool);                                      \
  template bool all_finite<S>(EncoderParams<S>&);                                                              \
  template ad::Matrix<S> patchify<S>(const ad::Matrix<S>&, const ModelConfig&);                                \
  template ad::Tensor<S> dense_attention<S>(const ad::Tensor<S>&, const ad::Tensor<S>&, const ad::Tensor<S>&,  \
                                            const BoolMatrix&, S);                                             \
  template ad::Tensor<S> pwsa_attention<S>(const ad::Tensor<S>&, const ad::Tensor<S>&, const ad::Tensor<S>&,   \
                                           const ad::Tensor<S>&, const ad::Tensor<S>&, const ad::Tensor<S>&,   \
                                           const ad::Tensor<S>&, int, int, AttentionImpl);                     \
  template ad::Tensor<S> pwsa_block<S>(const ad::Tensor<S>&, const BlockWeights<ad::Tensor<S>>&,               \
                                       const ModelConfig&, AttentionImpl);                                     \
  template EncoderOutput<S> encode<S>(ad::Tape<S>&, const BoundParams<S>&, const ModelConfig&,                 \
                                      const ad::Matrix<S>&, AttentionImpl);                                    \
  template SpectraOutput<S> reconstruct_spectra<S>(const BoundParams<S>&, const ModelConfig&,                  \
                                                   const ad::Tensor<S>&);

QFM_INSTANTIATE(float)
QFM_INSTANTIATE(double)
#undef QFM_INSTANTIATE

template EncoderParams<float> cast_params<float, double>(const EncoderParams<double>&);
template EncoderParams<double> cast_params<double, float>(const EncoderParams<float>&);
template EncoderParams<float> cast_params<float, float>(const EncoderParams<float>&);
template EncoderParams<double> cast_params<double, double>(const EncoderParams<double>&);

}  // namespace qfm::model
