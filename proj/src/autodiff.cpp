#include "qfm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "qfm/errors.hpp"

namespace qfm::ad {

namespace {

template <typename S>
std::string shape_of(const Matrix<S>& m) {
  std::ostringstream os;
  os << "(" << m.rows() << "x" << m.cols() << ")";
  return os.str();
}

template <typename S>
void require_same_tape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.tape() != b.tape() || a.tape() == nullptr)
    throw ContractError(std::string(op) + ": operands live on different tapes");
}

template <typename S>
[[noreturn]] void shape_error(const char* op, const Matrix<S>& a, const Matrix<S>& b) {
  throw ContractError(std::string(op) + ": incompatible shapes " + shape_of(a) + " and " + shape_of(b));
}

}  // namespace

// ---- Tensor / Tape ---------------------------------------------------------------------------------

template <typename S>
const Matrix<S>& Tensor<S>::value() const {
  return tape_->value(id_);
}

template <typename S>
const Matrix<S>& Tensor<S>::grad() const {
  return tape_->grad(id_);
}

template <typename S>
bool Tensor<S>::requires_grad() const {
  return tape_->requires_grad(id_);
}

template <typename S>
S Tensor<S>::item() const {
  const auto& v = value();
  if (v.size() != 1) throw ContractError("item() on a tensor of shape " + shape_of(v));
  return v(0, 0);
}

template <typename S>
Tensor<S> Tape<S>::leaf(Mat value, bool requires_grad) {
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
Tensor<S> Tape<S>::parameter(Parameter<S>& p) {
  if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
  Node n;
  n.op = "parameter";
  n.external_value = &p.value;
  n.external_grad = &p.grad;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
Tensor<S> Tape<S>::parameter(const Mat& value, Mat& grad) {
  if (grad.rows() != value.rows() || grad.cols() != value.cols()) grad.setZero(value.rows(), value.cols());
  Node n;
  n.op = "parameter";
  n.external_value = &value;
  n.external_grad = &grad;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
Tensor<S> Tape<S>::constant_ref(const Mat& value) {
  Node n;
  n.op = "constant";
  n.external_value = &value;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
Tensor<S> Tape<S>::record(std::string op, Mat value, std::vector<int> inputs, BackwardFn backward) {
  Node n;
  n.op = std::move(op);
  n.value = std::move(value);
  n.leaf = false;
  for (int i : inputs) n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(i)].requires_grad;
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
const Matrix<S>& Tape<S>::value(int id) const {
  const auto& n = nodes_[static_cast<std::size_t>(id)];
  return n.external_value ? *n.external_value : n.value;
}

template <typename S>
void Tape<S>::accumulate(int id, const Mat& g) {
  accumulate_expr(id, g);
}

template <typename S>
void Tape<S>::backward(const Tensor<S>& root) {
  if (root.tape() != this) throw ContractError("backward: root belongs to another tape");
  const auto& rv = value(root.id());
  if (rv.size() != 1) throw ContractError("backward: root must be scalar, got shape " + shape_of(rv));
  for (auto& n : nodes_)
    if (!n.leaf) n.grad.resize(0, 0);
  auto& r = nodes_[static_cast<std::size_t>(root.id())];
  if (!r.requires_grad) return;
  if (r.leaf) {
    accumulate(root.id(), Mat::Ones(1, 1));
    return;
  }
  r.grad = Mat::Ones(1, 1);
  for (int id = root.id(); id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.leaf || !n.requires_grad || n.grad.size() == 0) continue;
    n.backward(*this, id);
  }
}

// ---- primitives --------------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_tape(a, b, "matmul");
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) shape_error("matmul", av, bv);
  Matrix<S> out = av * bv;
  const int ia = a.id(), ib = b.id();
  return a.tape()->record("matmul", std::move(out), {ia, ib}, [ia, ib](Tape<S>& t, int self) {
    const auto& g = t.out_grad(self);
    if (t.requires_grad(ia)) t.accumulate_expr(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate_expr(ib, t.value(ia).transpose() * g);
  });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  Matrix<S> out = a.value().transpose();
  const int ia = a.id();
  return a.tape()->record("transpose", std::move(out), {ia},
                          [ia](Tape<S>& t, int self) { t.accumulate_expr(ia, t.out_grad(self).transpose()); });
}

namespace {

template <typename S>
Tensor<S> add_impl(const Tensor<S>& a, const Tensor<S>& b, S sign, const char* name) {
  require_same_tape(a, b, name);
  const auto& av = a.value();
  const auto& bv = b.value();
  const bool same = av.rows() == bv.rows() && av.cols() == bv.cols();
  const bool row_broadcast = bv.rows() == 1 && bv.cols() == av.cols();
  if (!same && !row_broadcast) shape_error(name, av, bv);
  Matrix<S> out = av;
  if (same) {
    out += sign * bv;
  } else {
    out.rowwise() += sign * bv.row(0);
  }
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(name, std::move(out), {ia, ib}, [ia, ib, same, sign](Tape<S>& t, int self) {
    const auto& g = t.out_grad(self);
    t.accumulate_expr(ia, g);
    if (!t.requires_grad(ib)) return;
    if (same) {
      t.accumulate_expr(ib, sign * g);
    } else {
      t.accumulate_expr(ib, sign * g.colwise().sum());
    }
  });
}

}  // namespace

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return add_impl(a, b, S(1), "add");
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return add_impl(a, b, S(-1), "sub");
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_tape(a, b, "mul");
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error("mul", av, bv);
  Matrix<S> out = av.cwiseProduct(bv);
  const int ia = a.id(), ib = b.id();
  return a.tape()->record("mul", std::move(out), {ia, ib}, [ia, ib](Tape<S>& t, int self) {
    const auto& g = t.out_grad(self);
    if (t.requires_grad(ia)) t.accumulate_expr(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate_expr(ib, g.cwiseProduct(t.value(ia)));
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  Matrix<S> out = a.value() * factor;
  const int ia = a.id();
  return a.tape()->record("scale", std::move(out), {ia},
                          [ia, factor](Tape<S>& t, int self) { t.accumulate_expr(ia, factor * t.out_grad(self)); });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Eigen::Index rows, Eigen::Index cols) {
  const auto& av = a.value();
  if (rows * cols != av.size())
    throw ContractError("reshape: cannot view " + shape_of(av) + " as (" + std::to_string(rows) + "x" +
                        std::to_string(cols) + ")");
  Matrix<S> out = Eigen::Map<const Matrix<S>>(av.data(), rows, cols);
  const int ia = a.id();
  const auto r0 = av.rows(), c0 = av.cols();
  return a.tape()->record("reshape", std::move(out), {ia}, [ia, r0, c0](Tape<S>& t, int self) {
    const auto& g = t.out_grad(self);
    t.accumulate_expr(ia, Eigen::Map<const Matrix<S>>(g.data(), r0, c0));
  });
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& a, Eigen::Index start, Eigen::Index count) {
  const auto& av = a.value();
  if (start < 0 || count < 0 || start + count > av.cols())
    throw ContractError("slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                        ") out of bounds for " + shape_of(av));
  Matrix<S> out = av.middleCols(start, count);
  const int ia = a.id();
  return a.tape()->record("slice_cols", std::move(out), {ia}, [ia, start, count](Tape<S>& t, int self) {
    if (!t.requires_grad(ia)) return;
    Matrix<S> g = Matrix<S>::Zero(t.value(ia).rows(), t.value(ia).cols());
    g.middleCols(start, count) = t.out_grad(self);
    t.accumulate_expr(ia, g);
  });
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& a, Eigen::Index start, Eigen::Index count) {
  const auto& av = a.value();
  if (start < 0 || count < 0 || start + count > av.rows())
    throw ContractError("slice_rows: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                        ") out of bounds for " + shape_of(av));
  Matrix<S> out = av.middleRows(start, count);
  const int ia = a.id();
  return a.tape()->record("slice_rows", std::move(out), {ia}, [ia, start, count](Tape<S>& t, int self) {
    if (!t.requires_grad(ia)) return;
    Matrix<S> g = Matrix<S>::Zero(t.value(ia).rows(), t.value(ia).cols());
    g.middleRows(start, count) = t.out_grad(self);
    t.accumulate_expr(ia, g);
  });
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const auto rows = parts[0].rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p, "concat_cols");
    if (p.rows() != rows) shape_error("concat_cols", parts[0].value(), p.value());
    cols += p.cols();
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  Matrix<S> out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts[0].tape()->record("concat_cols", std::move(out), ids, [ids, widths](Tape<S>& t, int self) {
    const auto& g = t.out_grad(self);
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.requires_grad(ids[i])) t.accumulate_expr(ids[i], g.middleCols(off, widths[i]));
      off += widths[i];
    }
  });
}

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const auto cols = parts[0].cols();
  Eigen::Index rows = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> heights;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p, "concat_rows");
    if (p.cols() != cols) shape_error("concat_rows", parts[0].value(), p.value());
    rows += p.rows();
    ids.push_back(p.id());
    heights.push_back(p.rows());
  }
  Matrix<S> out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return parts[0].tape()->record("concat_rows", std::move(out), ids, [ids, heights](Tape<S>& t, int self) {
    const auto& g = t.out_grad(self);
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.requires_grad(ids[i])) t.accumulate_expr(ids[i], g.middleRows(off, heights[i]));
      off += heights[i];
    }
  });
}

namespace {

template <typename S>
Matrix<S> softmax_rows(const Matrix<S>& z) {
  Matrix<S> y(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const S m = z.row(r).maxCoeff();
    y.row(r) = (z.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

}  // namespace

template <typename S>
Tensor<S> softmax(const Tensor<S>& a, S temperature) {
  if (!(temperature > S(0))) throw ConfigError("softmax temperature must be positive");
  Matrix<S> y = softmax_rows<S>(a.value() / temperature);
  const int ia = a.id();
  return a.tape()->record("softmax", std::move(y), {ia}, [ia, temperature](Tape<S>& t, int self) {
    const auto& y = t.value(self);
    const auto& g = t.out_grad(self);
    Matrix<S> dot = (g.cwiseProduct(y)).rowwise().sum();
    Matrix<S> dx = y.cwiseProduct(g - dot.replicate(1, g.cols())) / temperature;
    t.accumulate_expr(ia, dx);
  });
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& a, S temperature) {
  if (!(temperature > S(0))) throw ConfigError("log_softmax temperature must be positive");
  const Matrix<S> z = a.value() / temperature;
  Matrix<S> y(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const S m = z.row(r).maxCoeff();
    const S lse = m + std::log((z.row(r).array() - m).exp().sum());
    y.row(r) = z.row(r).array() - lse;
  }
  const int ia = a.id();
  return a.tape()->record("log_softmax", std::move(y), {ia}, [ia, temperature](Tape<S>& t, int self) {
    const auto& y = t.value(self);
    const auto& g = t.out_grad(self);
    const Matrix<S> p = y.array().exp();
    Matrix<S> gsum = g.rowwise().sum();
    Matrix<S> dx = (g - p.cwiseProduct(gsum.replicate(1, g.cols()))) / temperature;
    t.accumulate_expr(ia, dx);
  });
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& a, const Tensor<S>& gamma, const Tensor<S>& beta, S eps) {
  require_same_tape(a, gamma, "layer_norm");
  require_same_tape(a, beta, "layer_norm");
  const auto& x = a.value();
  const auto n = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != n) shape_error("layer_norm(gamma)", x, gamma.value());
  if (beta.rows() != 1 || beta.cols() != n) shape_error("layer_norm(beta)", x, beta.value());
  Matrix<S> xhat(x.rows(), n);
  Matrix<S> inv_std(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S mu = x.row(r).mean();
    const S var = (x.row(r).array() - mu).square().mean();
    inv_std(r, 0) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r, 0);
  }
  Matrix<S> y = xhat.array().rowwise() * gamma.value().row(0).array();
  y.rowwise() += beta.value().row(0);
  const int ia = a.id(), ig = gamma.id(), ib = beta.id();
  return a.tape()->record(
      "layer_norm", std::move(y), {ia, ig, ib},
      [ia, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<S>& t, int self) {
        const auto& g = t.out_grad(self);
        if (t.requires_grad(ig)) t.accumulate_expr(ig, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(ib)) t.accumulate_expr(ib, g.colwise().sum());
        if (!t.requires_grad(ia)) return;
        const Matrix<S> dxhat = g.array().rowwise() * t.value(ig).row(0).array();
        const S inv_n = S(1) / static_cast<S>(g.cols());
        Matrix<S> dx(g.rows(), g.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const S m1 = dxhat.row(r).sum() * inv_n;
          const S m2 = dxhat.row(r).dot(xhat.row(r)) * inv_n;
          dx.row(r) = inv_std(r, 0) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
        }
        t.accumulate_expr(ia, dx);
      });
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  Matrix<S> y = a.value().unaryExpr([inv_sqrt2](S x) { return S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2)); });
  const int ia = a.id();
  return a.tape()->record("gelu", std::move(y), {ia}, [ia, inv_sqrt2](Tape<S>& t, int self) {
    const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * std::numbers::pi_v<S>);
    const Matrix<S> d = t.value(ia).unaryExpr([&](S x) {
      return S(0.5) * (S(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(S(-0.5) * x * x);
    });
    t.accumulate_expr(ia, t.out_grad(self).cwiseProduct(d));
  });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  Matrix<S> y = a.value().array().exp();
  const int ia = a.id();
  return a.tape()->record("exp", std::move(y), {ia}, [ia](Tape<S>& t, int self) {
    t.accumulate_expr(ia, t.out_grad(self).cwiseProduct(t.value(self)));
  });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  Matrix<S> y = a.value().array().log();
  const int ia = a.id();
  return a.tape()->record("log", std::move(y), {ia}, [ia](Tape<S>& t, int self) {
    t.accumulate_expr(ia, t.out_grad(self).cwiseQuotient(t.value(ia)));
  });
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& a) {
  Matrix<S> y = a.value().array().tanh();
  const int ia = a.id();
  return a.tape()->record("tanh", std::move(y), {ia}, [ia](Tape<S>& t, int self) {
    const auto& y = t.value(self);
    t.accumulate_expr(ia, t.out_grad(self).cwiseProduct((S(1) - y.array().square()).matrix()));
  });
}

template <typename S>
Tensor<S> softplus(const Tensor<S>& a) {
  Matrix<S> y =
      a.value().unaryExpr([](S x) { return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x))); });
  const int ia = a.id();
  return a.tape()->record("softplus", std::move(y), {ia}, [ia](Tape<S>& t, int self) {
    const Matrix<S> sig = t.value(ia).unaryExpr([](S x) { return S(1) / (S(1) + std::exp(-x)); });
    t.accumulate_expr(ia, t.out_grad(self).cwiseProduct(sig));
  });
}

template <typename S>
Tensor<S> masked_fill(const Tensor<S>& a, const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& mask,
                      S fill) {
  const auto& av = a.value();
  if (mask.rows() != av.rows() || mask.cols() != av.cols())
    throw ContractError("masked_fill: mask shape (" + std::to_string(mask.rows()) + "x" +
                        std::to_string(mask.cols()) + ") does not match " + shape_of(av));
  Matrix<S> y = mask.select(Matrix<S>::Constant(av.rows(), av.cols(), fill), av);
  const int ia = a.id();
  return a.tape()->record("masked_fill", std::move(y), {ia}, [ia, mask](Tape<S>& t, int self) {
    const auto& g = t.out_grad(self);
    t.accumulate_expr(ia, mask.select(Matrix<S>::Zero(g.rows(), g.cols()), g));
  });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  Matrix<S> y(1, 1);
  y(0, 0) = a.value().sum();
  const int ia = a.id();
  return a.tape()->record("sum", std::move(y), {ia}, [ia](Tape<S>& t, int self) {
    const auto& v = t.value(ia);
    t.accumulate_expr(ia, Matrix<S>::Constant(v.rows(), v.cols(), t.out_grad(self)(0, 0)));
  });
}

template <typename S>
Tensor<S> mean_rows(const Tensor<S>& a) {
  Matrix<S> y = a.value().colwise().mean();
  const int ia = a.id();
  return a.tape()->record("mean_rows", std::move(y), {ia}, [ia](Tape<S>& t, int self) {
    const auto rows = t.value(ia).rows();
    t.accumulate_expr(ia, (t.out_grad(self) / static_cast<S>(rows)).replicate(rows, 1));
  });
}

template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b, const Matrix<S>& weights) {
  require_same_tape(a, b, "mse");
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error("mse", av, bv);
  Matrix<S> w = weights.size() == 0 ? Matrix<S>::Ones(av.rows(), av.cols()) : weights;
  if (w.rows() != av.rows() || w.cols() != av.cols()) shape_error("mse(weights)", av, w);
  const S count = w.sum();
  Matrix<S> y(1, 1);
  y(0, 0) = count > S(0) ? (w.cwiseProduct((av - bv).cwiseAbs2())).sum() / count : S(0);
  const int ia = a.id(), ib = b.id();
  return a.tape()->record("mse", std::move(y), {ia, ib}, [ia, ib, w = std::move(w), count](Tape<S>& t, int self) {
    if (!(count > S(0))) return;
    const S g = t.out_grad(self)(0, 0);
    const Matrix<S> d = (S(2) * g / count) * w.cwiseProduct(t.value(ia) - t.value(ib));
    if (t.requires_grad(ia)) t.accumulate_expr(ia, d);
    if (t.requires_grad(ib)) t.accumulate_expr(ib, -d);
  });
}

template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& target, const Tensor<S>& log_probs) {
  require_same_tape(target, log_probs, "cross_entropy");
  const auto& tv = target.value();
  const auto& lv = log_probs.value();
  if (tv.rows() != lv.rows() || tv.cols() != lv.cols()) shape_error("cross_entropy", tv, lv);
  Matrix<S> y(1, 1);
  y(0, 0) = -(tv.cwiseProduct(lv)).sum();
  const int it = target.id(), il = log_probs.id();
  return target.tape()->record("cross_entropy", std::move(y), {it, il}, [it, il](Tape<S>& t, int self) {
    const S g = t.out_grad(self)(0, 0);
    if (t.requires_grad(it)) t.accumulate_expr(it, -g * t.value(il));
    if (t.requires_grad(il)) t.accumulate_expr(il, -g * t.value(it));
  });
}

template <typename S>
Tensor<S> detach(const Tensor<S>& a) {
  return a.tape()->record("detach", a.value(), {}, {});
}

template <typename S>
Tensor<S> windowed_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, int window, S scale) {
  require_same_tape(q, k, "windowed_attention");
  require_same_tape(q, v, "windowed_attention");
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  if (window < 0 || window % 2 != 0) throw ContractError("windowed_attention: window must be even and >= 0");
  if (qv.rows() != kv.rows() || qv.cols() != kv.cols()) shape_error("windowed_attention(q,k)", qv, kv);
  if (vv.rows() != qv.rows()) shape_error("windowed_attention(q,v)", qv, vv);
  const Eigen::Index n = qv.rows();
  const Eigen::Index half = std::min<Eigen::Index>(window / 2, n > 0 ? n - 1 : 0);
  const Eigen::Index band = 2 * half + 1;

  // probs(i, o) is the weight of row j = i - half + o; out-of-range slots stay 0.
  Matrix<S> probs = Matrix<S>::Zero(n, band);
  Matrix<S> out = Matrix<S>::Zero(n, vv.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index lo = std::max<Eigen::Index>(0, i - half);
    const Eigen::Index hi = std::min<Eigen::Index>(n - 1, i + half);
    const Eigen::Index cnt = hi - lo + 1;
    auto logits = probs.row(i).segment(lo - (i - half), cnt);
    logits.noalias() = scale * (kv.middleRows(lo, cnt) * qv.row(i).transpose()).transpose();
    const S m = logits.maxCoeff();
    logits = (logits.array() - m).exp();
    logits /= logits.sum();
    out.row(i).noalias() = logits * vv.middleRows(lo, cnt);
  }
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape()->record(
      "windowed_attention", std::move(out), {iq, ik, iv},
      [iq, ik, iv, half, scale, probs = std::move(probs)](Tape<S>& t, int self) {
        const auto& g = t.out_grad(self);
        const auto& qv = t.value(iq);
        const auto& kv = t.value(ik);
        const auto& vv = t.value(iv);
        const Eigen::Index n = qv.rows();
        Matrix<S> dq = Matrix<S>::Zero(qv.rows(), qv.cols());
        Matrix<S> dk = Matrix<S>::Zero(kv.rows(), kv.cols());
        Matrix<S> dv = Matrix<S>::Zero(vv.rows(), vv.cols());
        for (Eigen::Index i = 0; i < n; ++i) {
          const Eigen::Index lo = std::max<Eigen::Index>(0, i - half);
          const Eigen::Index hi = std::min<Eigen::Index>(n - 1, i + half);
          const Eigen::Index cnt = hi - lo + 1;
          const auto p = probs.row(i).segment(lo - (i - half), cnt);
          // dP = g_i . v_j ; dS = P (dP - sum P dP)
          Eigen::Matrix<S, 1, Eigen::Dynamic> dp = (vv.middleRows(lo, cnt) * g.row(i).transpose()).transpose();
          const S inner = p.dot(dp);
          Eigen::Matrix<S, 1, Eigen::Dynamic> ds = p.array() * (dp.array() - inner);
          ds *= scale;
          dv.middleRows(lo, cnt).noalias() += p.transpose() * g.row(i);
          dq.row(i).noalias() += ds * kv.middleRows(lo, cnt);
          dk.middleRows(lo, cnt).noalias() += ds.transpose() * qv.row(i);
        }
        if (t.requires_grad(iq)) t.accumulate_expr(iq, dq);
        if (t.requires_grad(ik)) t.accumulate_expr(ik, dk);
        if (t.requires_grad(iv)) t.accumulate_expr(iv, dv);
      });
}

// ---- grad check --------------------------------------------------------------------------------

template <typename S>
GradCheckResult<S> grad_check(const TapeFunction<S>& f, const std::vector<Matrix<S>>& point, S h) {
  std::vector<Matrix<S>> analytic;
  {
    Tape<S> tape;
    std::vector<Tensor<S>> inputs;
    for (const auto& p : point) inputs.push_back(tape.leaf(p, true));
    const auto out = f(tape, inputs);
    tape.backward(out);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      Matrix<S> g = inputs[i].grad();
      if (g.size() == 0) g = Matrix<S>::Zero(point[i].rows(), point[i].cols());
      analytic.push_back(std::move(g));
    }
  }
  auto evaluate = [&](const std::vector<Matrix<S>>& at) {
    Tape<S> tape;
    std::vector<Tensor<S>> inputs;
    for (const auto& p : at) inputs.push_back(tape.leaf(p, false));
    return f(tape, inputs).item();
  };

  GradCheckResult<S> result;
  auto perturbed = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    for (Eigen::Index e = 0; e < point[i].size(); ++e) {
      const S orig = point[i].data()[e];
      perturbed[i].data()[e] = orig + h;
      const S fp = evaluate(perturbed);
      perturbed[i].data()[e] = orig - h;
      const S fm = evaluate(perturbed);
      perturbed[i].data()[e] = orig;
      const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic[i].data()[e]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > result.max_relative_error || result.worst_input < 0) {
        result.max_relative_error = rel;
        result.worst_input = static_cast<Eigen::Index>(i);
        result.worst_index = e;
      }
    }
  }
  return result;
}

#define QFM_INSTANTIATE(S)                                                                                   \
  template class Tensor<S>;                                                                                  \
  template class Tape<S>;                                                                                    \
  template Tensor<S> matmul<S>(const Tensor<S>&, const Tensor<S>&);                                          \
  template Tensor<S> transpose<S>(const Tensor<S>&);                                                         \
  template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);                                             \
  template Tensor<S> sub<S>(const Tensor<S>&, const Tensor<S>&);                                             \
  template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);                                             \
  template Tensor<S> scale<S>(const Tensor<S>&, S);                                                          \
  template Tensor<S> reshape<S>(const Tensor<S>&, Eigen::Index, Eigen::Index);                               \
  template Tensor<S> slice_cols<S>(const Tensor<S>&, Eigen::Index, Eigen::Index);                            \
  template Tensor<S> slice_rows<S>(const Tensor<S>&, Eigen::Index, Eigen::Index);                            \
  template Tensor<S> concat_cols<S>(const std::vector<Tensor<S>>&);                                          \
  template Tensor<S> concat_rows<S>(const std::vector<Tensor<S>>&);                                          \
  template Tensor<S> softmax<S>(const Tensor<S>&, S);                                                        \
  template Tensor<S> log_softmax<S>(const Tensor<S>&, S);                                                    \
  template Tensor<S> layer_norm<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);                 \
  template Tensor<S> gelu<S>(const Tensor<S>&);                                                              \
  template Tensor<S> exp<S>(const Tensor<S>&);                                                               \
  template Tensor<S> log<S>(const Tensor<S>&);                                                               \
  template Tensor<S> tanh<S>(const Tensor<S>&);                                                              \
  template Tensor<S> softplus<S>(const Tensor<S>&);                                                          \
  template Tensor<S> masked_fill<S>(const Tensor<S>&,                                                        \
                                    const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>&, S); \
  template Tensor<S> sum<S>(const Tensor<S>&);                                                               \
  template Tensor<S> mean_rows<S>(const Tensor<S>&);                                                         \
  template Tensor<S> mse<S>(const Tensor<S>&, const Tensor<S>&, const Matrix<S>&);                           \
  template Tensor<S> cross_entropy<S>(const Tensor<S>&, const Tensor<S>&);                                   \
  template Tensor<S> detach<S>(const Tensor<S>&);                                                            \
  template Tensor<S> windowed_attention<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, S);    \
  template GradCheckResult<S> grad_check<S>(const TapeFunction<S>&, const std::vector<Matrix<S>>&, S);

QFM_INSTANTIATE(float)
QFM_INSTANTIATE(double)
#undef QFM_INSTANTIATE

}  // namespace qfm::ad
