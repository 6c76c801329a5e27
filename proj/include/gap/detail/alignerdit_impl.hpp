#pragma once

// Template definitions for AlignerDit (included from alignerdit.hpp).

#include <algorithm>
#include <cmath>

namespace gap {

namespace detail {

template <typename T>
Mat<T> gated(const Mat<T>& y, const RowVec<T>& g) {
  return (y.array().rowwise() * g.array()).matrix();
}

template <typename T>
RowVec<T> colsum_product(const Mat<T>& a, const Mat<T>& b) {
  return a.cwiseProduct(b).colwise().sum();
}

}  // namespace detail

template <typename T>
DitParams<T> DitParams<T>::init(const DitConfig& cfg, uint64_t seed) {
  cfg.check();
  const int d = cfg.d_model;
  const int di = cfg.space.d_img;
  const int dc = cfg.d_cond();
  Rng rng(derive_seed(seed, 0x444954ULL));
  DitParams p;
  auto zeros = [](int r, int c) { return Mat<T>::Zero(r, c).eval(); };
  p.patch_in_w = nn::init_weight<T>(di, d, rng);
  p.patch_in_b = zeros(1, d);
  p.cls_in_w = nn::init_weight<T>(di, d, rng);
  p.cls_in_b = zeros(1, d);
  p.reg_in_w = nn::init_weight<T>(di, d, rng);
  p.reg_in_b = zeros(1, d);
  p.global_pos = random_normal<T>(1 + cfg.space.n_reg, d, 0.5, rng);
  p.t_w1 = nn::init_weight<T>(cfg.d_freq, d, rng);
  p.t_b1 = zeros(1, d);
  p.t_w2 = nn::init_weight<T>(d, d, rng);
  p.t_b2 = zeros(1, d);
  for (int k = 0; k < cfg.n_blocks; ++k) {
    DitBlockParams<T> b;
    b.mod_w = nn::init_weight<T>(d, 9 * d, rng, 0.5);
    b.mod_b = zeros(1, 9 * d);
    b.sa_wq = nn::init_weight<T>(d, d, rng);
    b.sa_wk = nn::init_weight<T>(d, d, rng);
    b.sa_wv = nn::init_weight<T>(d, d, rng);
    b.sa_wo = nn::init_weight<T>(d, d, rng);
    b.sa_bo = zeros(1, d);
    b.ca_wq = nn::init_weight<T>(d, d, rng);
    b.ca_wk = nn::init_weight<T>(dc, d, rng);
    b.ca_wv = nn::init_weight<T>(dc, d, rng);
    b.ca_wo = nn::init_weight<T>(d, d, rng);
    b.ca_bo = zeros(1, d);
    b.ff_w1 = nn::init_weight<T>(d, cfg.ffn_mult * d, rng);
    b.ff_b1 = zeros(1, cfg.ffn_mult * d);
    b.ff_w2 = nn::init_weight<T>(cfg.ffn_mult * d, d, rng);
    b.ff_b2 = zeros(1, d);
    p.blocks.push_back(std::move(b));
  }
  p.final_mod_w = nn::init_weight<T>(d, 2 * d, rng, 0.5);
  p.final_mod_b = zeros(1, 2 * d);
  p.head_patch_w = zeros(d, di);
  p.head_patch_b = zeros(1, di);
  p.head_cls_w = zeros(d, di);
  p.head_cls_b = zeros(1, di);
  p.head_reg_w = zeros(d, di);
  p.head_reg_b = zeros(1, di);
  return p;
}

template <typename T>
AlignerDit<T>::AlignerDit(const DitConfig& cfg, DitParams<T> params)
    : cfg_(cfg),
      params_(std::move(params)),
      rope_((cfg.check(), cfg.head_dim()), std::max(cfg.space.h, cfg.space.w), cfg.rope_base) {
  if (static_cast<int>(params_.blocks.size()) != cfg.n_blocks)
    throw Error(ErrorKind::ShapeMismatch, "parameter block count differs from config");
}

template <typename T>
Mat<T> AlignerDit<T>::timestep_features(T t) const {
  const int half = cfg_.d_freq / 2;
  Mat<T> f(1, cfg_.d_freq);
  const double scaled = static_cast<double>(t) * 1000.0;
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * k / half);
    f(0, k) = static_cast<T>(std::cos(scaled * freq));
    f(0, half + k) = static_cast<T>(std::sin(scaled * freq));
  }
  return f;
}

template <typename T>
Mat<T> AlignerDit<T>::timestep_embed(T t) const {
  const auto& p = params_;
  return nn::linear(nn::silu(nn::linear(timestep_features(t), p.t_w1, p.t_b1)), p.t_w2, p.t_b2);
}

template <typename T>
void AlignerDit<T>::check_inputs(const Embedding<T>& xt, const Mat<T>& cond) const {
  if (auto err = validate(xt, cfg_.space)) throw Error(err->kind, err->message);
  if (cond.cols() != cfg_.d_cond() || cond.rows() < 1)
    throw Error(ErrorKind::ShapeMismatch, "conditioning width differs from d_cond");
  if (!all_finite(cond)) throw Error(ErrorKind::NonFinite, "non-finite conditioning");
}

template <typename T>
Mat<T> AlignerDit<T>::embed_inputs(const Embedding<T>& xt) const {
  if (auto err = validate(xt, cfg_.space); err && err->kind == ErrorKind::ShapeMismatch)
    throw Error(err->kind, err->message);
  const auto& p = params_;
  const int nr = cfg_.space.n_reg;
  Mat<T> x(cfg_.space.num_tokens(), cfg_.d_model);
  x.topRows(1) = nn::linear(xt.cls, p.cls_in_w, p.cls_in_b);
  if (nr > 0) x.middleRows(1, nr) = nn::linear(xt.registers, p.reg_in_w, p.reg_in_b);
  x.topRows(1 + nr) = add_global_pos(Mat<T>(x.topRows(1 + nr)), GlobalPosEmbeddings<T>{p.global_pos});
  x.bottomRows(cfg_.space.num_patches()) = nn::linear(xt.patches, p.patch_in_w, p.patch_in_b);
  return x;
}

template <typename T>
Embedding<T> AlignerDit<T>::forward(const Embedding<T>& xt, T t, const Mat<T>& cond, DitCache<T>* cache) const {
  check_inputs(xt, cond);
  if (!(t >= T(0) && t <= T(1))) throw Error(ErrorKind::RangeError, "timestep outside [0, 1]");
  const auto& p = params_;
  const int d = cfg_.d_model;
  const int nh = cfg_.n_heads;
  const int first_patch = cfg_.space.first_patch_token();

  DitCache<T> local;
  DitCache<T>& c = cache ? *cache : local;
  c.xt = xt;
  c.cond = cond;
  c.t_feat = timestep_features(t);
  c.t_pre1 = nn::linear(c.t_feat, p.t_w1, p.t_b1);
  c.t_act1 = nn::silu(c.t_pre1);
  c.temb = nn::linear(c.t_act1, p.t_w2, p.t_b2);
  c.c = nn::silu(c.temb);

  Mat<T> x = embed_inputs(xt);
  c.blocks.resize(p.blocks.size());
  for (size_t k = 0; k < p.blocks.size(); ++k) {
    const auto& b = p.blocks[k];
    auto& bc = c.blocks[k];
    bc.x_in = x;
    bc.mod = nn::linear(c.c, b.mod_w, b.mod_b);
    auto seg = [&](int i) { return RowVec<T>(bc.mod.segment(i * d, d)); };

    // self-attention over all tokens, rotary on patch rows only
    bc.h1 = nn::modulate(nn::layer_norm(x, &bc.n1), seg(0), seg(1));
    bc.q1 = bc.h1 * b.sa_wq;
    bc.k1 = bc.h1 * b.sa_wk;
    bc.v1 = bc.h1 * b.sa_wv;
    rope_stream(bc.q1, rope_, nh, first_patch, cfg_.space.w);
    rope_stream(bc.k1, rope_, nh, first_patch, cfg_.space.w);
    bc.o1 = nn::attention(bc.q1, bc.k1, bc.v1, nh, false, &bc.a1);
    bc.y1 = nn::linear(bc.o1, b.sa_wo, b.sa_bo);
    bc.x_mid1 = x + detail::gated(bc.y1, seg(2));

    // cross-attention to the conditioning sequence
    bc.h2 = nn::modulate(nn::layer_norm(bc.x_mid1, &bc.n2), seg(3), seg(4));
    bc.q2 = bc.h2 * b.ca_wq;
    bc.k2 = cond * b.ca_wk;
    bc.v2 = cond * b.ca_wv;
    bc.o2 = nn::attention(bc.q2, bc.k2, bc.v2, nh, false, &bc.a2);
    bc.y2 = nn::linear(bc.o2, b.ca_wo, b.ca_bo);
    bc.x_mid2 = bc.x_mid1 + detail::gated(bc.y2, seg(5));

    // feed-forward
    bc.h3 = nn::modulate(nn::layer_norm(bc.x_mid2, &bc.n3), seg(6), seg(7));
    bc.f_pre = nn::linear(bc.h3, b.ff_w1, b.ff_b1);
    bc.f_act = nn::gelu(bc.f_pre);
    bc.y3 = nn::linear(bc.f_act, b.ff_w2, b.ff_b2);
    x = bc.x_mid2 + detail::gated(bc.y3, seg(8));
  }

  c.x_final = x;
  c.final_mod = nn::linear(c.c, p.final_mod_w, p.final_mod_b);
  c.hf = nn::modulate(nn::layer_norm(x, &c.nf), RowVec<T>(c.final_mod.segment(0, d)),
                      RowVec<T>(c.final_mod.segment(d, d)));

  const int nr = cfg_.space.n_reg;
  Embedding<T> out;
  out.h = cfg_.space.h;
  out.w = cfg_.space.w;
  out.cls = nn::linear(Mat<T>(c.hf.topRows(1)), p.head_cls_w, p.head_cls_b);
  out.registers = nn::linear(Mat<T>(c.hf.middleRows(1, nr)), p.head_reg_w, p.head_reg_b);
  out.patches = nn::linear(Mat<T>(c.hf.bottomRows(cfg_.space.num_patches())), p.head_patch_w, p.head_patch_b);
  if (!out.all_finite()) throw Error(ErrorKind::NonFinite, "non-finite velocity prediction");
  return out;
}

template <typename T>
Mat<T> AlignerDit<T>::backward(const DitCache<T>& c, const Embedding<T>& d_out, DitParams<T>& g) const {
  const auto& p = params_;
  const int d = cfg_.d_model;
  const int nh = cfg_.n_heads;
  const int nr = cfg_.space.n_reg;
  const int np = cfg_.space.num_patches();
  const int first_patch = cfg_.space.first_patch_token();

  Mat<T> dcond = Mat<T>::Zero(c.cond.rows(), c.cond.cols());
  Mat<T> dc = Mat<T>::Zero(1, d);

  // output heads
  Mat<T> dhf(c.hf.rows(), d);
  {
    const Mat<T> hf_cls = c.hf.topRows(1);
    const Mat<T> hf_reg = c.hf.middleRows(1, nr);
    const Mat<T> hf_patch = c.hf.bottomRows(np);
    dhf.topRows(1) = nn::linear_backward(hf_cls, p.head_cls_w, d_out.cls, g.head_cls_w, &g.head_cls_b);
    dhf.middleRows(1, nr) =
        nn::linear_backward(hf_reg, p.head_reg_w, d_out.registers, g.head_reg_w, &g.head_reg_b);
    dhf.bottomRows(np) =
        nn::linear_backward(hf_patch, p.head_patch_w, d_out.patches, g.head_patch_w, &g.head_patch_b);
  }
  Mat<T> dx;
  {
    const RowVec<T> scale = c.final_mod.segment(d, d);
    Mat<T> dmod(1, 2 * d);
    dmod.leftCols(d) = dhf.colwise().sum();
    dmod.rightCols(d) = detail::colsum_product(dhf, c.nf.y);
    dx = nn::layer_norm_backward(c.nf, detail::gated(dhf, RowVec<T>(scale.array() + T(1))));
    dc += nn::linear_backward(c.c, p.final_mod_w, dmod, g.final_mod_w, &g.final_mod_b);
  }

  for (size_t k = p.blocks.size(); k-- > 0;) {
    const auto& b = p.blocks[k];
    auto& gb = g.blocks[k];
    const auto& bc = c.blocks[k];
    auto seg = [&](int i) { return RowVec<T>(bc.mod.segment(i * d, d)); };
    Mat<T> dmod(1, 9 * d);

    // feed-forward
    dmod.middleCols(8 * d, d) = detail::colsum_product(dx, bc.y3);
    Mat<T> dy = detail::gated(dx, seg(8));
    Mat<T> d_act = nn::linear_backward(bc.f_act, b.ff_w2, dy, gb.ff_w2, &gb.ff_b2);
    Mat<T> d_pre = nn::gelu_backward(bc.f_pre, d_act);
    Mat<T> dh = nn::linear_backward(bc.h3, b.ff_w1, d_pre, gb.ff_w1, &gb.ff_b1);
    dmod.middleCols(6 * d, d) = dh.colwise().sum();
    dmod.middleCols(7 * d, d) = detail::colsum_product(dh, bc.n3.y);
    dx += nn::layer_norm_backward(bc.n3, detail::gated(dh, RowVec<T>(seg(7).array() + T(1))));

    // cross-attention
    dmod.middleCols(5 * d, d) = detail::colsum_product(dx, bc.y2);
    dy = detail::gated(dx, seg(5));
    Mat<T> d_o = nn::linear_backward(bc.o2, b.ca_wo, dy, gb.ca_wo, &gb.ca_bo);
    Mat<T> dq, dk, dv;
    nn::attention_backward(bc.q2, bc.k2, bc.v2, nh, bc.a2, d_o, dq, dk, dv);
    dh = nn::linear_backward(bc.h2, b.ca_wq, dq, gb.ca_wq);
    dcond += nn::linear_backward(c.cond, b.ca_wk, dk, gb.ca_wk);
    dcond += nn::linear_backward(c.cond, b.ca_wv, dv, gb.ca_wv);
    dmod.middleCols(3 * d, d) = dh.colwise().sum();
    dmod.middleCols(4 * d, d) = detail::colsum_product(dh, bc.n2.y);
    dx += nn::layer_norm_backward(bc.n2, detail::gated(dh, RowVec<T>(seg(4).array() + T(1))));

    // self-attention
    dmod.middleCols(2 * d, d) = detail::colsum_product(dx, bc.y1);
    dy = detail::gated(dx, seg(2));
    d_o = nn::linear_backward(bc.o1, b.sa_wo, dy, gb.sa_wo, &gb.sa_bo);
    nn::attention_backward(bc.q1, bc.k1, bc.v1, nh, bc.a1, d_o, dq, dk, dv);
    rope_stream(dq, rope_, nh, first_patch, cfg_.space.w, true);
    rope_stream(dk, rope_, nh, first_patch, cfg_.space.w, true);
    dh = nn::linear_backward(bc.h1, b.sa_wq, dq, gb.sa_wq);
    dh += nn::linear_backward(bc.h1, b.sa_wk, dk, gb.sa_wk);
    dh += nn::linear_backward(bc.h1, b.sa_wv, dv, gb.sa_wv);
    dmod.middleCols(0, d) = dh.colwise().sum();
    dmod.middleCols(d, d) = detail::colsum_product(dh, bc.n1.y);
    dx += nn::layer_norm_backward(bc.n1, detail::gated(dh, RowVec<T>(seg(1).array() + T(1))));

    dc += nn::linear_backward(c.c, b.mod_w, dmod, gb.mod_w, &gb.mod_b);
  }

  // input projections and global positions
  g.cls_in_w.noalias() += c.xt.cls.transpose() * dx.topRows(1);
  g.cls_in_b += dx.topRows(1);
  if (nr > 0) {
    g.reg_in_w.noalias() += c.xt.registers.transpose() * dx.middleRows(1, nr);
    g.reg_in_b += dx.middleRows(1, nr).colwise().sum();
  }
  g.global_pos += dx.topRows(1 + nr);
  g.patch_in_w.noalias() += c.xt.patches.transpose() * dx.bottomRows(np);
  g.patch_in_b += dx.bottomRows(np).colwise().sum();

  // timestep MLP
  Mat<T> dtemb = nn::silu_backward(c.temb, dc);
  Mat<T> dact1 = nn::linear_backward(c.t_act1, p.t_w2, dtemb, g.t_w2, &g.t_b2);
  Mat<T> dpre1 = nn::silu_backward(c.t_pre1, dact1);
  nn::linear_backward(c.t_feat, p.t_w1, dpre1, g.t_w1, &g.t_b1);
  return dcond;
}

}  // namespace gap
