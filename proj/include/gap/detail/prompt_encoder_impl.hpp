#pragma once

// Template definitions for FrozenPromptEncoder (included from synthworld.hpp).

#include <cmath>

namespace gap {

template <typename T>
FrozenPromptEncoder<T>::FrozenPromptEncoder(const SpaceConfig& cfg, uint64_t seed) : cfg_(cfg), seed_(seed) {
  cfg.check();
  const int d = cfg.d_cond;
  if (d % kHeads != 0)
    throw Error(ErrorKind::InvalidArgument, "d_cond must be divisible by the prompt encoder head count");
  Rng rng(derive_seed(seed, 0x50524F4D50ULL));
  tok_emb_ = random_normal<T>(kVocabSize, d, 1.0, rng);
  const int max_len = kMaxPromptLength + cfg.s;
  pos_enc_.resize(max_len, d);
  for (int p = 0; p < max_len; ++p)
    for (int c = 0; c < d; ++c) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (c / 2)) / d);
      pos_enc_(p, c) = static_cast<T>(c % 2 == 0 ? std::sin(p * rate) : std::cos(p * rate));
    }
  for (int b = 0; b < kBlocks; ++b) {
    Block blk;
    blk.wq = nn::init_weight<T>(d, d, rng);
    blk.wk = nn::init_weight<T>(d, d, rng);
    blk.wv = nn::init_weight<T>(d, d, rng);
    blk.wo = nn::init_weight<T>(d, d, rng);
    blk.bo = random_normal<T>(1, d, 0.02, rng);
    blk.w1 = nn::init_weight<T>(d, 2 * d, rng);
    blk.b1 = random_normal<T>(1, 2 * d, 0.02, rng);
    blk.w2 = nn::init_weight<T>(2 * d, d, rng);
    blk.b2 = random_normal<T>(1, d, 0.02, rng);
    blocks_.push_back(std::move(blk));
  }
  Rng soft_rng(derive_seed(seed, 0x534F4654ULL));
  soft_tokens = random_normal<T>(cfg.s, d, 1.0, soft_rng);
}

template <typename T>
Mat<T> FrozenPromptEncoder<T>::forward(const PromptTokens& p, PromptEncoderCache<T>* cache) const {
  const int len = static_cast<int>(p.ids.size());
  if (len > kMaxPromptLength) throw Error(ErrorKind::InvalidArgument, "prompt longer than 48 tokens");
  if (soft_tokens.rows() != cfg_.s || soft_tokens.cols() != cfg_.d_cond)
    throw Error(ErrorKind::ShapeMismatch, "soft token shape");
  const int n = len + cfg_.s;
  Mat<T> x(n, cfg_.d_cond);
  for (int i = 0; i < len; ++i) {
    const int id = p.ids[i];
    if (id < 0 || id >= kVocabSize) throw Error(ErrorKind::InvalidArgument, "token id outside vocabulary");
    x.row(i) = tok_emb_.row(id);
  }
  x.bottomRows(cfg_.s) = soft_tokens;
  x += pos_enc_.topRows(n);

  if (cache) {
    cache->prompt_len = len;
    cache->blocks.resize(blocks_.size());
  }
  for (size_t b = 0; b < blocks_.size(); ++b) {
    const Block& blk = blocks_[b];
    typename PromptEncoderCache<T>::BlockCache local;
    auto& bc = cache ? cache->blocks[b] : local;
    bc.x_in = x;
    Mat<T> n1 = nn::layer_norm(x, &bc.n1);
    bc.q = n1 * blk.wq;
    bc.k = n1 * blk.wk;
    bc.v = n1 * blk.wv;
    bc.attn_out = nn::attention(bc.q, bc.k, bc.v, kHeads, true, &bc.attn);
    bc.x_mid = x + nn::linear(bc.attn_out, blk.wo, blk.bo);
    Mat<T> n2 = nn::layer_norm(bc.x_mid, &bc.n2);
    bc.f_pre = nn::linear(n2, blk.w1, blk.b1);
    bc.f_act = nn::gelu(bc.f_pre);
    x = bc.x_mid + nn::linear(bc.f_act, blk.w2, blk.b2);
  }
  nn::NormCache<T> local_final;
  Mat<T> soft_rows = x.bottomRows(cfg_.s);
  return nn::layer_norm(soft_rows, cache ? &cache->final_norm : &local_final);
}

template <typename T>
Mat<T> FrozenPromptEncoder<T>::backward(const PromptEncoderCache<T>& cache, const Mat<T>& d_out) const {
  const int n = cache.prompt_len + cfg_.s;
  Mat<T> dx = Mat<T>::Zero(n, cfg_.d_cond);
  dx.bottomRows(cfg_.s) = nn::layer_norm_backward(cache.final_norm, d_out);
  for (size_t b = blocks_.size(); b-- > 0;) {
    const Block& blk = blocks_[b];
    const auto& bc = cache.blocks[b];
    Mat<T> d_mid = dx;
    Mat<T> d_act = dx * blk.w2.transpose();
    Mat<T> d_pre = nn::gelu_backward(bc.f_pre, d_act);
    d_mid += nn::layer_norm_backward(bc.n2, Mat<T>(d_pre * blk.w1.transpose()));
    Mat<T> d_attn = d_mid * blk.wo.transpose();
    Mat<T> dq, dk, dv;
    nn::attention_backward(bc.q, bc.k, bc.v, kHeads, bc.attn, d_attn, dq, dk, dv);
    Mat<T> dn1 = dq * blk.wq.transpose() + dk * blk.wk.transpose() + dv * blk.wv.transpose();
    dx = d_mid + nn::layer_norm_backward(bc.n1, dn1);
  }
  return dx.bottomRows(cfg_.s);
}

template <typename T>
std::vector<Mat<T>> FrozenPromptEncoder<T>::frozen_snapshot() const {
  std::vector<Mat<T>> out{tok_emb_, pos_enc_};
  for (const auto& b : blocks_)
    for (const Mat<T>* m : {&b.wq, &b.wk, &b.wv, &b.wo, &b.bo, &b.w1, &b.b1, &b.w2, &b.b2}) out.push_back(*m);
  return out;
}

template <typename T>
template <typename U>
FrozenPromptEncoder<U> FrozenPromptEncoder<T>::cast() const {
  FrozenPromptEncoder<U> out;
  out.cfg_ = cfg_;
  out.seed_ = seed_;
  out.tok_emb_ = tok_emb_.template cast<U>();
  out.pos_enc_ = pos_enc_.template cast<U>();
  for (const auto& b : blocks_) {
    typename FrozenPromptEncoder<U>::Block c{b.wq.template cast<U>(), b.wk.template cast<U>(),
                                             b.wv.template cast<U>(), b.wo.template cast<U>(),
                                             b.bo.template cast<U>(), b.w1.template cast<U>(),
                                             b.b1.template cast<U>(), b.w2.template cast<U>(),
                                             b.b2.template cast<U>()};
    out.blocks_.push_back(std::move(c));
  }
  out.soft_tokens = soft_tokens.template cast<U>();
  return out;
}

}  // namespace gap
