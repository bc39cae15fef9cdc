#pragma once

// PWSA encoder: patch tokenizer, pre-LN transformer blocks with LN(Q)/LN(K) windowed attention,
// mean-pooled projection head (K logits) and an FFN spectral-reconstruction head.

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "qfm/autodiff.hpp"

namespace qfm::io {
class ByteWriter;
class ByteReader;
}  // namespace qfm::io

namespace qfm::model {

using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int layers = 2;
  int hidden = 512;
  int mlp = 256;
  int heads = 4;
  int window = 8;
  int patch_len = 60;
  int out_dim = 512;         // K
  int channels = 2;
  int signal_length = 9000;  // samples per channel
  int recon_hidden = 0;      // 0 -> mlp
  bool positional = true;

  int d_head() const { return hidden / heads; }
  int n_tokens() const { return signal_length / patch_len; }
  int token_features() const { return channels * patch_len; }
  int spectral_bins() const { return signal_length / 2 + 1; }  // per channel
  int recon_width() const { return recon_hidden > 0 ? recon_hidden : mlp; }
  void validate() const;  // ConfigError

  static ModelConfig base();
  static ModelConfig large();
  static ModelConfig huge();
  /// 2 layers, hidden 64, 4 heads, K 64.
  static ModelConfig tiny();
  static ModelConfig preset(const std::string& name);

  std::map<std::string, double> to_map() const;
  static ModelConfig from_map(const std::map<std::string, double>& m);
  bool operator==(const ModelConfig&) const = default;
};

/// Per-block weights; T is ad::Parameter<S> for storage or ad::Tensor<S> when bound to a tape.
template <typename T>
struct BlockWeights {
  T ln1_gamma, ln1_beta;
  T wq, bq, wk, bk, wv, bv;
  T q_gamma, q_beta, k_gamma, k_beta;  // shared across heads, width d_head
  T wo, bo;
  T ln2_gamma, ln2_beta;
  T w1, b1, w2, b2;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "ln1.gamma", ln1_gamma);
    f(prefix + "ln1.beta", ln1_beta);
    f(prefix + "attn.wq", wq);
    f(prefix + "attn.bq", bq);
    f(prefix + "attn.wk", wk);
    f(prefix + "attn.bk", bk);
    f(prefix + "attn.wv", wv);
    f(prefix + "attn.bv", bv);
    f(prefix + "attn.q_ln.gamma", q_gamma);
    f(prefix + "attn.q_ln.beta", q_beta);
    f(prefix + "attn.k_ln.gamma", k_gamma);
    f(prefix + "attn.k_ln.beta", k_beta);
    f(prefix + "attn.wo", wo);
    f(prefix + "attn.bo", bo);
    f(prefix + "ln2.gamma", ln2_gamma);
    f(prefix + "ln2.beta", ln2_beta);
    f(prefix + "ffn.w1", w1);
    f(prefix + "ffn.b1", b1);
    f(prefix + "ffn.w2", w2);
    f(prefix + "ffn.b2", b2);
  }
};

template <typename T>
struct Weights {
  T embed_w, embed_b, pos;
  std::vector<BlockWeights<T>> blocks;
  T final_gamma, final_beta;
  T proj_w1, proj_b1, proj_w2, proj_b2;
  T recon_w1, recon_b1, recon_w2, recon_b2;

  /// Visits every tensor in a fixed order with a stable dotted name.
  template <typename F>
  void visit(F&& f) {
    f(std::string("embed.w"), embed_w);
    f(std::string("embed.b"), embed_b);
    f(std::string("embed.pos"), pos);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("blocks." + std::to_string(i) + ".", f);
    f(std::string("final_ln.gamma"), final_gamma);
    f(std::string("final_ln.beta"), final_beta);
    f(std::string("proj.w1"), proj_w1);
    f(std::string("proj.b1"), proj_b1);
    f(std::string("proj.w2"), proj_w2);
    f(std::string("proj.b2"), proj_b2);
    f(std::string("recon.w1"), recon_w1);
    f(std::string("recon.b1"), recon_b1);
    f(std::string("recon.w2"), recon_w2);
    f(std::string("recon.b2"), recon_b2);
  }
};

template <typename S>
using EncoderParams = Weights<ad::Parameter<S>>;
template <typename S>
using BoundParams = Weights<ad::Tensor<S>>;

/// Shapes of every parameter tensor, in visit order.
std::vector<std::pair<std::string, std::pair<int, int>>> parameter_shapes(const ModelConfig& cfg);
std::int64_t param_count(const ModelConfig& cfg);

template <typename S>
EncoderParams<S> init_params(const ModelConfig& cfg, std::uint64_t seed);

template <typename S>
EncoderParams<S> zeros_like(const EncoderParams<S>& p);

/// Binds parameters as tape leaves. `trainable` false binds them as constants (no gradient).
template <typename S>
BoundParams<S> bind(ad::Tape<S>& tape, EncoderParams<S>& params, bool trainable = true);

template <typename S>
bool all_finite(EncoderParams<S>& p);

/// Flattens a C x N segment into n_tokens x (C * patch_len) patch rows.
template <typename S>
ad::Matrix<S> patchify(const ad::Matrix<S>& segment, const ModelConfig& cfg);

/// i may attend to j iff |i - j| <= w / 2.
BoolMatrix window_mask(int n, int w);
/// Number of allowed (i, j) pairs in window_mask(n, w).
std::int64_t windowed_logit_count(int n, int w);

/// Dense masked attention: softmax(scale * q k^T with -inf where !mask) v. Reference path.
template <typename S>
ad::Tensor<S> dense_attention(const ad::Tensor<S>& q, const ad::Tensor<S>& k, const ad::Tensor<S>& v,
                              const BoolMatrix& mask, S scale);

enum class AttentionImpl { banded, dense };

/// Multi-head attention core on projected q, k, v (n x hidden): per-head LN on q and k, attention
/// restricted by the window, heads concatenated. Output projection is not included.
template <typename S>
ad::Tensor<S> pwsa_attention(const ad::Tensor<S>& q, const ad::Tensor<S>& k, const ad::Tensor<S>& v,
                             const ad::Tensor<S>& q_gamma, const ad::Tensor<S>& q_beta,
                             const ad::Tensor<S>& k_gamma, const ad::Tensor<S>& k_beta, int heads, int window,
                             AttentionImpl impl = AttentionImpl::banded);

/// One pre-LN block: x + Attn(LN1 x), then + FFN(LN2 .).
template <typename S>
ad::Tensor<S> pwsa_block(const ad::Tensor<S>& x, const BlockWeights<ad::Tensor<S>>& w, const ModelConfig& cfg,
                         AttentionImpl impl = AttentionImpl::banded);

template <typename S>
struct EncoderOutput {
  ad::Tensor<S> features;  // n_tokens x hidden
  ad::Tensor<S> pooled;    // 1 x hidden
  ad::Tensor<S> logits;    // 1 x K
};

template <typename S>
struct SpectraOutput {
  ad::Tensor<S> amplitude;  // channels x bins, >= 0
  ad::Tensor<S> phase;      // channels x bins, in (-pi, pi)
};

/// Full encoder on one C x N segment. Throws NumericError naming the layer on non-finite activations.
template <typename S>
EncoderOutput<S> encode(ad::Tape<S>& tape, const BoundParams<S>& w, const ModelConfig& cfg,
                        const ad::Matrix<S>& segment, AttentionImpl impl = AttentionImpl::banded);

template <typename S>
SpectraOutput<S> reconstruct_spectra(const BoundParams<S>& w, const ModelConfig& cfg, const ad::Tensor<S>& pooled);

// ---- checkpoint -------------------------------------------------------------------------------

struct Checkpoint {
  ModelConfig config;
  std::map<std::string, double> meta;
  EncoderParams<float> student;
  EncoderParams<float> teacher;
};

/// Named tensor block shared by the checkpoint and fine-tuned model containers.
void write_params(io::ByteWriter& w, const std::string& prefix, const EncoderParams<float>& p);
void read_params(io::ByteReader& r, const std::string& prefix, const ModelConfig& cfg, EncoderParams<float>& p);
void write_named_values(io::ByteWriter& w, const std::map<std::string, double>& m);
std::map<std::string, double> read_named_values(io::ByteReader& r);

/// Container "QFMCKPT1": config and meta as named f64 values, then named f32 tensors.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

template <typename To, typename From>
EncoderParams<To> cast_params(const EncoderParams<From>& p);

}  // namespace qfm::model
