#pragma once

// Rectified-flow utilities: straight-line interpolation between Gaussian
// noise and data, the constant velocity target, the per-component weighted
// flow-matching loss and a fixed-step Euler sampler.

#include <array>
#include <random>

#include "gap/embedspace.hpp"

namespace gap {

struct LossWeights {
  double patch = 0.4;
  double cls = 0.3;
  double reg = 0.3;

  void check() const {
    if (patch < 0 || cls < 0 || reg < 0 || (patch == 0 && cls == 0 && reg == 0))
      throw Error(ErrorKind::InvalidArgument, "loss weights must be nonnegative and not all zero");
  }
};

template <typename T>
SpaceConfig space_of_shape(const Embedding<T>& e) {
  SpaceConfig c;
  c.h = e.h;
  c.w = e.w;
  c.d_img = static_cast<int>(e.patches.cols());
  c.n_reg = static_cast<int>(e.registers.rows());
  return c;
}

template <typename T>
struct FlowSample {
  Embedding<T> x0;
  Embedding<T> x1;
  T t{};
  Embedding<T> xt;
};

// xt = t*x1 + (1-t)*x0, one shared t for all three components.
template <typename T>
Embedding<T> interpolate(const Embedding<T>& x0, const Embedding<T>& x1, T t) {
  Embedding<T> xt = x0;
  auto lerp = [t](const Mat<T>& a, const Mat<T>& b) {
    return Mat<T>(b.binaryExpr(a, [t](T v1, T v0) { return t * v1 + (T(1) - t) * v0; }));
  };
  xt.patches = lerp(x0.patches, x1.patches);
  xt.cls = lerp(x0.cls, x1.cls);
  xt.registers = lerp(x0.registers, x1.registers);
  return xt;
}

template <typename T>
FlowSample<T> make_flow_sample(const Embedding<T>& x1, T t, const Embedding<T>& x0) {
  if (!(t >= T(0) && t <= T(1))) throw Error(ErrorKind::RangeError, "t outside [0, 1]");
  return {x0, x1, t, interpolate(x0, x1, t)};
}

// Draws x0 ~ N(0, I) for every component (patches, then cls, then registers).
template <typename T>
FlowSample<T> make_flow_sample(const Embedding<T>& x1, T t, Rng& rng) {
  return make_flow_sample(x1, t, Embedding<T>::normal(space_of_shape(x1), rng));
}

template <typename T>
Embedding<T> velocity_target(const FlowSample<T>& fs) {
  return fs.x1 - fs.x0;
}

struct ComponentLosses {
  double total = 0;
  double patch = 0;
  double cls = 0;
  double reg = 0;
};

namespace detail {
template <typename T>
void require_same_shape(const Embedding<T>& a, const Embedding<T>& b) {
  if (a.h != b.h || a.w != b.w || a.patches.rows() != b.patches.rows() || a.patches.cols() != b.patches.cols() ||
      a.cls.cols() != b.cls.cols() || a.registers.rows() != b.registers.rows() ||
      a.registers.cols() != b.registers.cols())
    throw Error(ErrorKind::ShapeMismatch, "velocity and target shapes differ");
}

template <typename T>
T mean_sq(const Mat<T>& m) {
  return m.size() == 0 ? T(0) : m.squaredNorm() / T(m.size());
}
}  // namespace detail

// Sum over components of lambda_k * mean((pred_k - (x1_k - x0_k))^2). Each
// component is averaged over its own elements before weighting.
template <typename T>
ComponentLosses flow_loss_components(const Embedding<T>& pred, const FlowSample<T>& fs, const LossWeights& w) {
  detail::require_same_shape(pred, fs.x1);
  const Embedding<T> r = pred - velocity_target(fs);
  ComponentLosses l;
  l.patch = static_cast<double>(detail::mean_sq(r.patches));
  l.cls = static_cast<double>(detail::mean_sq(r.cls));
  l.reg = static_cast<double>(detail::mean_sq(r.registers));
  l.total = w.patch * l.patch + w.cls * l.cls + w.reg * l.reg;
  return l;
}

template <typename T>
double flow_loss(const Embedding<T>& pred, const FlowSample<T>& fs, const LossWeights& w) {
  return flow_loss_components(pred, fs, w).total;
}

// d(flow_loss)/d(pred), scaled by `scale` (e.g. 1/batch).
template <typename T>
Embedding<T> flow_loss_grad(const Embedding<T>& pred, const FlowSample<T>& fs, const LossWeights& w, T scale = T(1)) {
  detail::require_same_shape(pred, fs.x1);
  Embedding<T> g = pred - velocity_target(fs);
  auto factor = [&](double lambda, Eigen::Index n) { return n == 0 ? T(0) : scale * T(2 * lambda / n); };
  g.patches *= factor(w.patch, g.patches.size());
  g.cls *= factor(w.cls, g.cls.size());
  g.registers *= factor(w.reg, g.registers.size());
  return g;
}

// Closed-form E||x1 - x0||^2 per component when x0 ~ N(0, I) and the model
// predicts zero: lambda_k * (mean(x1_k^2) + 1), averaged over `targets`.
template <typename Range>
double zero_prediction_loss(const Range& targets, const LossWeights& w) {
  double p = 0, c = 0, r = 0;
  size_t n = 0;
  for (const auto& x1 : targets) {
    p += detail::mean_sq(x1.patches.template cast<double>().eval());
    c += detail::mean_sq(x1.cls.template cast<double>().eval());
    r += detail::mean_sq(x1.registers.template cast<double>().eval());
    ++n;
  }
  const double has_reg = n > 0 && targets.begin()->registers.size() > 0 ? 1.0 : 0.0;
  return w.patch * (p / n + 1.0) + w.cls * (c / n + 1.0) + w.reg * (r / n + has_reg);
}

inline double sample_t(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

// Forward Euler on dx/dt = v(x, t, C) over the uniform grid t_k = k/steps,
// starting from x0 ~ N(0, I). `velocity(x, t)` returns an Embedding<T>.
template <typename T, typename VelocityFn>
Embedding<T> sample(VelocityFn&& velocity, const SpaceConfig& space, int steps, Rng& rng) {
  if (steps < 1) throw Error(ErrorKind::RangeError, "sampler needs at least one step");
  Embedding<T> x = Embedding<T>::normal(space, rng);
  const T dt = T(1) / T(steps);
  for (int k = 0; k < steps; ++k) {
    const T t = T(k) / T(steps);
    const Embedding<T> v = velocity(x, t);
    x.patches += dt * v.patches;
    x.cls += dt * v.cls;
    x.registers += dt * v.registers;
  }
  if (!x.all_finite()) throw Error(ErrorKind::NonFinite, "sampler diverged");
  return x;
}

}  // namespace gap
