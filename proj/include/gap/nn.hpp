#pragma once

// Dense building blocks with explicit backward passes. Activations are
// token-major matrices [tokens, features]; linear weights are stored
// [in, out] so that y = x * W + b.

#include <cmath>
#include <limits>
#include <vector>

#include "gap/common.hpp"

namespace gap::nn {

template <typename T>
Mat<T> linear(const Mat<T>& x, const Mat<T>& w, const Mat<T>& b) {
  Mat<T> y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

template <typename T>
Mat<T> linear(const Mat<T>& x, const Mat<T>& w) {
  return x * w;
}

// Accumulates dW (and db) and returns dX.
template <typename T>
Mat<T> linear_backward(const Mat<T>& x, const Mat<T>& w, const Mat<T>& dy, Mat<T>& dw, Mat<T>* db = nullptr) {
  dw.noalias() += x.transpose() * dy;
  if (db) *db += dy.colwise().sum();
  return dy * w.transpose();
}

template <typename T>
struct NormCache {
  Mat<T> y;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

// Row-wise layer norm without affine parameters.
template <typename T>
Mat<T> layer_norm(const Mat<T>& x, NormCache<T>* cache = nullptr, T eps = T(1e-6)) {
  const auto n = x.cols();
  Mat<T> y(x.rows(), n);
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mean = x.row(r).mean();
    auto centered = (x.row(r).array() - mean).eval();
    const T var = centered.square().sum() / T(n);
    rstd(r) = T(1) / std::sqrt(var + eps);
    y.row(r) = centered * rstd(r);
  }
  if (cache) {
    cache->y = y;
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <typename T>
Mat<T> layer_norm_backward(const NormCache<T>& c, const Mat<T>& dy) {
  const T n = T(dy.cols());
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T mean_dy = dy.row(r).sum() / n;
    const T mean_dyy = dy.row(r).dot(c.y.row(r)) / n;
    dx.row(r) = c.rstd(r) * (dy.row(r).array() - mean_dy - c.y.row(r).array() * mean_dyy);
  }
  return dx;
}

// tanh-approximated GELU.
template <typename T>
Mat<T> gelu(const Mat<T>& x) {
  const T k = T(0.7978845608028654);
  return x.unaryExpr([k](T v) { return T(0.5) * v * (T(1) + std::tanh(k * (v + T(0.044715) * v * v * v))); });
}

template <typename T>
Mat<T> gelu_backward(const Mat<T>& x, const Mat<T>& dy) {
  const T k = T(0.7978845608028654);
  Mat<T> g = x.unaryExpr([k](T v) {
    const T u = k * (v + T(0.044715) * v * v * v);
    const T th = std::tanh(u);
    const T du = k * (T(1) + T(3 * 0.044715) * v * v);
    return T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du;
  });
  return dy.cwiseProduct(g);
}

template <typename T>
Mat<T> silu(const Mat<T>& x) {
  return x.unaryExpr([](T v) { return v / (T(1) + std::exp(-v)); });
}

template <typename T>
Mat<T> silu_backward(const Mat<T>& x, const Mat<T>& dy) {
  Mat<T> g = x.unaryExpr([](T v) {
    const T s = T(1) / (T(1) + std::exp(-v));
    return s * (T(1) + v * (T(1) - s));
  });
  return dy.cwiseProduct(g);
}

// h = y * (1 + scale) + shift, with scale/shift broadcast over rows.
template <typename T>
Mat<T> modulate(const Mat<T>& y, const RowVec<T>& shift, const RowVec<T>& scale) {
  Mat<T> out = y.array().rowwise() * (scale.array() + T(1));
  out.rowwise() += shift;
  return out;
}

template <typename T>
struct AttentionCache {
  std::vector<Mat<T>> probs;  // one [Nq, Nk] matrix per head
};

// Scaled dot-product attention over pre-projected q [Nq, d], k/v [Nk, d].
// When causal, query row r attends keys 0..r (requires Nq == Nk).
template <typename T>
Mat<T> attention(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, int n_heads, bool causal,
                 AttentionCache<T>* cache = nullptr) {
  const int d = static_cast<int>(q.cols());
  const int dh = d / n_heads;
  const T scale = T(1) / std::sqrt(T(dh));
  Mat<T> out(q.rows(), d);
  if (cache) cache->probs.resize(n_heads);
  for (int hd = 0; hd < n_heads; ++hd) {
    Mat<T> s = (q.middleCols(hd * dh, dh) * k.middleCols(hd * dh, dh).transpose()) * scale;
    if (causal) {
      for (Eigen::Index r = 0; r < s.rows(); ++r)
        for (Eigen::Index c = r + 1; c < s.cols(); ++c) s(r, c) = -std::numeric_limits<T>::infinity();
    }
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const T m = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - m).exp();
      s.row(r) /= s.row(r).sum();
    }
    out.middleCols(hd * dh, dh).noalias() = s * v.middleCols(hd * dh, dh);
    if (cache) cache->probs[hd] = std::move(s);
  }
  return out;
}

template <typename T>
void attention_backward(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, int n_heads,
                        const AttentionCache<T>& cache, const Mat<T>& dout, Mat<T>& dq, Mat<T>& dk,
                        Mat<T>& dv) {
  const int d = static_cast<int>(q.cols());
  const int dh = d / n_heads;
  const T scale = T(1) / std::sqrt(T(dh));
  dq.setZero(q.rows(), d);
  dk.setZero(k.rows(), d);
  dv.setZero(v.rows(), d);
  for (int hd = 0; hd < n_heads; ++hd) {
    const Mat<T>& p = cache.probs[hd];
    const Mat<T> dO = dout.middleCols(hd * dh, dh);
    dv.middleCols(hd * dh, dh).noalias() = p.transpose() * dO;
    Mat<T> dp = dO * v.middleCols(hd * dh, dh).transpose();
    Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = (dp.cwiseProduct(p)).rowwise().sum();
    Mat<T> ds = p.cwiseProduct((dp.colwise() - rowdot));
    ds *= scale;
    dq.middleCols(hd * dh, dh).noalias() = ds * k.middleCols(hd * dh, dh);
    dk.middleCols(hd * dh, dh).noalias() = ds.transpose() * q.middleCols(hd * dh, dh);
  }
}

// Variance-scaled init for a [fan_in, fan_out] weight.
template <typename T>
Mat<T> init_weight(int fan_in, int fan_out, Rng& rng, double gain = 1.0) {
  return random_normal<T>(fan_in, fan_out, gain / std::sqrt(static_cast<double>(fan_in)), rng);
}

}  // namespace gap::nn
