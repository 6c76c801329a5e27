#pragma once

// Diffusion transformer mapping a noisy (patches, CLS, registers) triple,
// a timestep and a conditioning sequence to per-component velocities.
//
// Token stream: [CLS, registers, patches row-major], one token per grid
// cell. Each block is self-attention -> cross-attention -> feed-forward,
// all pre-norm with timestep-driven shift/scale/gate modulation.

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gap/embedspace.hpp"
#include "gap/hybridpos.hpp"
#include "gap/nn.hpp"

namespace gap {

struct DitConfig {
  int d_model = 128;
  int n_blocks = 4;
  int n_heads = 4;
  int d_freq = 64;   // sinusoidal timestep features
  int ffn_mult = 4;
  double rope_base = 10000.0;
  SpaceConfig space;

  int d_cond() const { return space.d_cond; }
  int head_dim() const { return d_model / n_heads; }
  void check() const;

  nlohmann::json to_json() const;
  static DitConfig from_json(const nlohmann::json& j);
};

template <typename T>
struct DitBlockParams {
  Mat<T> mod_w, mod_b;                      // [d, 9d], shift/scale/gate x3
  Mat<T> sa_wq, sa_wk, sa_wv, sa_wo, sa_bo;  // self-attention
  Mat<T> ca_wq, ca_wk, ca_wv, ca_wo, ca_bo;  // cross-attention, k/v from conditioning
  Mat<T> ff_w1, ff_b1, ff_w2, ff_b2;
};

template <typename T>
struct DitParams {
  Mat<T> patch_in_w, patch_in_b;
  Mat<T> cls_in_w, cls_in_b;
  Mat<T> reg_in_w, reg_in_b;
  Mat<T> global_pos;  // [1 + n_reg, d_model]
  Mat<T> t_w1, t_b1, t_w2, t_b2;
  std::vector<DitBlockParams<T>> blocks;
  Mat<T> final_mod_w, final_mod_b;  // [d, 2d], shift/scale
  Mat<T> head_patch_w, head_patch_b;
  Mat<T> head_cls_w, head_cls_b;
  Mat<T> head_reg_w, head_reg_b;

  static DitParams init(const DitConfig& cfg, uint64_t seed);

  DitParams zeros_like() const {
    DitParams z = *this;
    visit(z, [](const std::string&, Mat<T>& m) { m.setZero(); });
    return z;
  }

  template <typename U>
  DitParams<U> cast() const {
    DitParams<U> out;
    auto src = named(*this);
    // Shapes first, then copy by position.
    out.blocks.resize(blocks.size());
    auto dst = named(out);
    for (size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
    return out;
  }

  // Calls f(name, tensor) for every parameter in a stable order.
  template <typename Self, typename F>
  static void visit(Self& p, F&& f) {
    f("dit.patch_in.w", p.patch_in_w);
    f("dit.patch_in.b", p.patch_in_b);
    f("dit.cls_in.w", p.cls_in_w);
    f("dit.cls_in.b", p.cls_in_b);
    f("dit.reg_in.w", p.reg_in_w);
    f("dit.reg_in.b", p.reg_in_b);
    f("dit.global_pos", p.global_pos);
    f("dit.t_mlp.0.w", p.t_w1);
    f("dit.t_mlp.0.b", p.t_b1);
    f("dit.t_mlp.2.w", p.t_w2);
    f("dit.t_mlp.2.b", p.t_b2);
    for (size_t k = 0; k < p.blocks.size(); ++k) {
      auto& b = p.blocks[k];
      const std::string pre = "dit.block" + std::to_string(k) + ".";
      f(pre + "mod.w", b.mod_w);
      f(pre + "mod.b", b.mod_b);
      f(pre + "selfattn.wq", b.sa_wq);
      f(pre + "selfattn.wk", b.sa_wk);
      f(pre + "selfattn.wv", b.sa_wv);
      f(pre + "selfattn.wo", b.sa_wo);
      f(pre + "selfattn.bo", b.sa_bo);
      f(pre + "crossattn.wq", b.ca_wq);
      f(pre + "crossattn.wk", b.ca_wk);
      f(pre + "crossattn.wv", b.ca_wv);
      f(pre + "crossattn.wo", b.ca_wo);
      f(pre + "crossattn.bo", b.ca_bo);
      f(pre + "ffn.w1", b.ff_w1);
      f(pre + "ffn.b1", b.ff_b1);
      f(pre + "ffn.w2", b.ff_w2);
      f(pre + "ffn.b2", b.ff_b2);
    }
    f("dit.final.mod.w", p.final_mod_w);
    f("dit.final.mod.b", p.final_mod_b);
    f("dit.head.patch.w", p.head_patch_w);
    f("dit.head.patch.b", p.head_patch_b);
    f("dit.head.cls.w", p.head_cls_w);
    f("dit.head.cls.b", p.head_cls_b);
    f("dit.head.reg.w", p.head_reg_w);
    f("dit.head.reg.b", p.head_reg_b);
  }

  template <typename Self>
  static auto named(Self& p) {
    using M = std::conditional_t<std::is_const_v<Self>, const Mat<T>, Mat<T>>;
    std::vector<std::pair<std::string, M*>> out;
    visit(p, [&](const std::string& n, M& m) { out.emplace_back(n, &m); });
    return out;
  }
};

template <typename T>
struct DitBlockCache {
  Mat<T> x_in;
  RowVec<T> mod;  // [9d]
  nn::NormCache<T> n1, n2, n3;
  Mat<T> h1, q1, k1, v1, o1, y1;
  nn::AttentionCache<T> a1;
  Mat<T> x_mid1;
  Mat<T> h2, q2, k2, v2, o2, y2;
  nn::AttentionCache<T> a2;
  Mat<T> x_mid2;
  Mat<T> h3, f_pre, f_act, y3;
};

template <typename T>
struct DitCache {
  Embedding<T> xt;
  Mat<T> cond;
  Mat<T> t_feat, t_pre1, t_act1, temb, c;  // c = silu(temb)
  std::vector<DitBlockCache<T>> blocks;
  Mat<T> x_final;
  nn::NormCache<T> nf;
  RowVec<T> final_mod;
  Mat<T> hf;
};

template <typename T>
class AlignerDit {
 public:
  AlignerDit(const DitConfig& cfg, DitParams<T> params);
  AlignerDit(const DitConfig& cfg, uint64_t seed) : AlignerDit(cfg, DitParams<T>::init(cfg, seed)) {}

  const DitConfig& config() const { return cfg_; }
  DitParams<T>& params() { return params_; }
  const DitParams<T>& params() const { return params_; }
  const RopeTable& rope() const { return rope_; }

  // Sinusoidal features of t*1000 through a 2-layer SiLU MLP, [1, d_model].
  Mat<T> timestep_embed(T t) const;

  // Token stream [1 + n_reg + h*w, d_model].
  Mat<T> embed_inputs(const Embedding<T>& xt) const;

  Embedding<T> forward(const Embedding<T>& xt, T t, const Mat<T>& cond, DitCache<T>* cache = nullptr) const;

  // Accumulates parameter gradients into grads and returns dL/dcond.
  Mat<T> backward(const DitCache<T>& cache, const Embedding<T>& d_out, DitParams<T>& grads) const;

 private:
  void check_inputs(const Embedding<T>& xt, const Mat<T>& cond) const;
  Mat<T> timestep_features(T t) const;

  DitConfig cfg_;
  DitParams<T> params_;
  RopeTable rope_;
};

}  // namespace gap

#include "gap/detail/alignerdit_impl.hpp"
