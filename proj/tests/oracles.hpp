#pragma once

// Independent reference implementations used as test oracles. Nothing here calls into the library
// code under test; everything is the direct textbook formula.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Core>

namespace oracle {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// X[k] = sum_n x(n) exp(-j 2 pi k n / N), k = 0..N/2, O(N^2).
inline std::vector<std::complex<double>> naive_dft(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<std::complex<double>> out(n / 2 + 1);
  for (std::size_t k = 0; k < out.size(); ++k) {
    std::complex<double> acc = 0;
    for (std::size_t t = 0; t < n; ++t) {
      // reduce k*t mod N first so the angle stays small and exact
      const double ang = -2.0 * std::numbers::pi * static_cast<double>((k * t) % n) / static_cast<double>(n);
      acc += x[t] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  return out;
}

/// Row-wise softmax(scale * q k^T) v over every pair, one row at a time.
inline Mat full_attention(const Mat& q, const Mat& k, const Mat& v, double scale) {
  Mat out = Mat::Zero(q.rows(), v.cols());
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    std::vector<double> s(static_cast<std::size_t>(k.rows()));
    double m = -INFINITY;
    for (Eigen::Index j = 0; j < k.rows(); ++j) {
      double d = 0;
      for (Eigen::Index c = 0; c < q.cols(); ++c) d += q(i, c) * k(j, c);
      s[static_cast<std::size_t>(j)] = scale * d;
      m = std::max(m, s[static_cast<std::size_t>(j)]);
    }
    double z = 0;
    for (auto& e : s) z += (e = std::exp(e - m));
    for (Eigen::Index j = 0; j < k.rows(); ++j)
      for (Eigen::Index c = 0; c < v.cols(); ++c) out(i, c) += s[static_cast<std::size_t>(j)] / z * v(j, c);
  }
  return out;
}

/// Layer normalization of each row without affine terms.
inline Mat row_normalize(const Mat& x, double eps = 1e-5) {
  Mat out = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mu = 0, var = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) mu += x(i, c);
    mu /= static_cast<double>(x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) var += (x(i, c) - mu) * (x(i, c) - mu);
    var /= static_cast<double>(x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) out(i, c) = (x(i, c) - mu) / std::sqrt(var + eps);
  }
  return out;
}

struct Confusion {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

inline Confusion brute_confusion(const std::vector<int>& y, const std::vector<double>& s, double threshold) {
  Confusion c;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool pos = s[i] >= threshold;
    if (pos && y[i] == 1) ++c.tp;
    if (pos && y[i] == 0) ++c.fp;
    if (!pos && y[i] == 0) ++c.tn;
    if (!pos && y[i] == 1) ++c.fn;
  }
  return c;
}

/// Area under the empirical ROC curve by the trapezoid rule, sweeping thresholds over the distinct
/// scores from high to low.
inline double trapezoid_auc(const std::vector<int>& y, const std::vector<double>& s) {
  std::vector<double> th(s);
  std::sort(th.begin(), th.end(), std::greater<>());
  th.erase(std::unique(th.begin(), th.end()), th.end());
  double p = 0, n = 0;
  for (int v : y) (v == 1 ? p : n) += 1;
  double area = 0, prev_tpr = 0, prev_fpr = 0;
  for (double t : th) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (s[i] >= t) (y[i] == 1 ? tp : fp) += 1;
    const double tpr = tp / p, fpr = fp / n;
    area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2;
    prev_tpr = tpr;
    prev_fpr = fpr;
  }
  return area;
}

struct PairRef {
  std::size_t high, low;
  bool operator<(const PairRef& o) const { return std::tie(high, low) < std::tie(o.high, o.low); }
  bool operator==(const PairRef& o) const = default;
};

/// Every unordered pair (i, j): same subject, |t_i - t_j| < max_gap, labels differ; oriented
/// better label first.
inline std::vector<PairRef> enumerate_pairs(const std::vector<std::string>& subject, const std::vector<double>& t,
                                            const std::vector<int>& label, double max_gap) {
  std::vector<PairRef> out;
  for (std::size_t i = 0; i < t.size(); ++i)
    for (std::size_t j = i + 1; j < t.size(); ++j)
      if (subject[i] == subject[j] && std::abs(t[i] - t[j]) < max_gap && label[i] != label[j])
        out.push_back(label[i] > label[j] ? PairRef{i, j} : PairRef{j, i});
  std::sort(out.begin(), out.end());
  return out;
}

inline Mat random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Mat m(r, c);
  for (auto& x : m.reshaped()) x = n(rng);
  return m;
}

}  // namespace oracle
