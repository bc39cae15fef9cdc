#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// Tensors are rank 2 (rows x cols); vectors are 1 x n rows. Binary ops require equal shapes except
// `add`/`sub`, which also accept a 1 x cols right operand broadcast over the rows.
// A Tape records nodes in creation order, which is a valid topological order, so backward is a
// single reverse sweep. One tape belongs to one thread.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace qfm::ad {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Trainable storage living outside any tape. Gradients accumulate until zeroed.
template <typename Scalar>
struct Parameter {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;

  Parameter() = default;
  explicit Parameter(Matrix<Scalar> v) : value(std::move(v)), grad(Matrix<Scalar>::Zero(value.rows(), value.cols())) {}
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename Scalar>
class Tape;

/// Lightweight handle to a node on a tape.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  const Matrix<Scalar>& value() const;
  const Matrix<Scalar>& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const;
  Scalar item() const;  // value of a 1 x 1 tensor

  Tape<Scalar>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  /// Propagates the node's output gradient into its inputs' gradients.
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf owned by the tape.
  Tensor<Scalar> leaf(Mat value, bool requires_grad = true);
  Tensor<Scalar> constant(Mat value) { return leaf(std::move(value), false); }
  /// Leaf aliasing external parameter storage; backward accumulates into `p.grad`.
  Tensor<Scalar> parameter(Parameter<Scalar>& p);
  /// Same, with the gradient accumulated into a separate buffer (per-worker gradients).
  Tensor<Scalar> parameter(const Mat& value, Mat& grad);
  /// Leaf aliasing an external matrix without gradient. The matrix must outlive the tape.
  Tensor<Scalar> constant_ref(const Mat& value);

  /// Used by op implementations.
  Tensor<Scalar> record(std::string op, Mat value, std::vector<int> inputs, BackwardFn backward);

  /// Reverse sweep from a 1 x 1 root. Interior gradients are recomputed on every call; leaf and
  /// parameter gradients accumulate across calls.
  void backward(const Tensor<Scalar>& root);

  const Mat& value(int id) const;
  /// Gradient of a node; zero-sized if it never received one.
  const Mat& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  /// Accumulates `g` into the gradient of node `id` if it requires grad.
  void accumulate(int id, const Mat& g);
  template <typename Expr>
  void accumulate_expr(int id, const Expr& g) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    Mat& target = n.external_grad ? *n.external_grad : n.grad;
    if (target.size() == 0) target = Mat::Zero(value(id).rows(), value(id).cols());
    target += g;
  }
  const Mat& out_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  const std::string& op(int id) const { return nodes_[static_cast<std::size_t>(id)].op; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::string op;
    Mat value;
    const Mat* external_value = nullptr;
    Mat grad;
    Mat* external_grad = nullptr;
    bool requires_grad = false;
    bool leaf = true;
    std::vector<int> inputs;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// ---- primitives --------------------------------------------------------------------------------

template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> transpose(const Tensor<S>& a);
/// a + b; b may be 1 x cols (broadcast over rows).
template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
/// Elementwise product of equal shapes.
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> scale(const Tensor<S>& a, S factor);
template <typename S> Tensor<S> reshape(const Tensor<S>& a, Eigen::Index rows, Eigen::Index cols);
template <typename S> Tensor<S> slice_cols(const Tensor<S>& a, Eigen::Index start, Eigen::Index count);
template <typename S> Tensor<S> slice_rows(const Tensor<S>& a, Eigen::Index start, Eigen::Index count);
template <typename S> Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts);
template <typename S> Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts);
/// Row-wise softmax of a / temperature.
template <typename S> Tensor<S> softmax(const Tensor<S>& a, S temperature = S(1));
/// Row-wise log-softmax of a / temperature (fused, stable).
template <typename S> Tensor<S> log_softmax(const Tensor<S>& a, S temperature = S(1));
/// Row-wise normalization over columns, then gamma * x_hat + beta (gamma, beta are 1 x cols).
template <typename S> Tensor<S> layer_norm(const Tensor<S>& a, const Tensor<S>& gamma, const Tensor<S>& beta, S eps = S(1e-5));
/// Exact (erf) GELU.
template <typename S> Tensor<S> gelu(const Tensor<S>& a);
template <typename S> Tensor<S> exp(const Tensor<S>& a);
template <typename S> Tensor<S> log(const Tensor<S>& a);
template <typename S> Tensor<S> tanh(const Tensor<S>& a);
template <typename S> Tensor<S> softplus(const Tensor<S>& a);
/// Replaces entries where mask is true with `fill`; no gradient flows through replaced entries.
template <typename S> Tensor<S> masked_fill(const Tensor<S>& a, const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& mask, S fill);
/// 1 x 1 sum of all entries.
template <typename S> Tensor<S> sum(const Tensor<S>& a);
/// 1 x cols mean over rows.
template <typename S> Tensor<S> mean_rows(const Tensor<S>& a);
/// Mean of (a - b)^2 over entries where `weights` is nonzero (all entries if weights is empty).
template <typename S> Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b, const Matrix<S>& weights = Matrix<S>());
/// Soft-label cross entropy: -sum(target .* log_probs), summed over all rows.
template <typename S> Tensor<S> cross_entropy(const Tensor<S>& target, const Tensor<S>& log_probs);
/// Same value, no gradient to the input.
template <typename S> Tensor<S> detach(const Tensor<S>& a);

/// Banded attention: row i attends to rows j with |i - j| <= window / 2.
/// out_i = sum_j softmax_j(scale * q_i . k_j) v_j. Work and memory are O(n * (window + 1) * d).
template <typename S> Tensor<S> windowed_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, int window, S scale);

template <typename S> Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }

// ---- verification --------------------------------------------------------------------------------

template <typename S>
struct GradCheckResult {
  double max_relative_error = 0.0;
  Eigen::Index worst_input = -1;
  Eigen::Index worst_index = -1;
};

/// Builds a scalar function of several matrix inputs on a fresh tape.
template <typename S>
using TapeFunction = std::function<Tensor<S>(Tape<S>&, const std::vector<Tensor<S>>&)>;

/// Central-difference check of reverse-mode gradients. Relative error per entry is
/// |a - b| / max(|a|, |b|, 1e-8); returns the maximum over all inputs and entries.
template <typename S>
GradCheckResult<S> grad_check(const TapeFunction<S>& f, const std::vector<Matrix<S>>& point, S h = S(1e-5));

}  // namespace qfm::ad
