#pragma once

// Procedural scene world and the frozen teacher encoders that stand in for
// a prompt encoder and a dense image encoder.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gap/embedspace.hpp"
#include "gap/nn.hpp"

namespace gap {

enum class ShapeKind : int { Circle = 0, Square = 1, Triangle = 2 };

inline constexpr int kPaletteSize = 8;
inline constexpr int kVocabSize = 64;
inline constexpr int kMaxPromptLength = 48;
inline constexpr int kMaxObjects = 4;

// Fixed RGB palette, values in [0, 1].
const std::array<std::array<float, 3>, kPaletteSize>& palette();

struct SceneObject {
  int shape = 0;  // ShapeKind
  int color = 0;  // palette index
  int row = 0;    // top-left anchor of the size x size footprint box
  int col = 0;
  int size = 1;   // 1..3

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct Scene {
  std::vector<SceneObject> objects;
  uint64_t seed = 0;

  friend bool operator==(const Scene&, const Scene&) = default;
};

enum class Flavor { Pretrain, Finetune };

const char* to_string(Flavor f);
Flavor parse_flavor(const std::string& s);  // throws InvalidArgument

// Pretrain: 1..4 objects anywhere. Finetune: one object centered on the grid.
Scene gen_scene(uint64_t seed, const SpaceConfig& cfg = {}, Flavor flavor = Flavor::Pretrain);

// Throws InvalidArgument if the scene violates its invariants for cfg.
void check_scene(const Scene& sc, const SpaceConfig& cfg);

struct PromptTokens {
  std::vector<int> ids;
  friend bool operator==(const PromptTokens&, const PromptTokens&) = default;
};

// Vocabulary layout.
namespace vocab {
inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kSep = 2;
inline constexpr int kShapeBase = 4;   // 3 shapes
inline constexpr int kColorBase = 7;   // 8 colors
inline constexpr int kSizeBase = 15;   // sizes 1..3
inline constexpr int kNumberBase = 18; // grid coordinates 0..45
inline constexpr int kMaxCoordinate = kVocabSize - kNumberBase;
}  // namespace vocab

// [BOS, (SEP shape color size row col) per object, EOS].
PromptTokens scene_to_prompt(const Scene& sc);

struct RgbGrid {
  int h = 0;
  int w = 0;
  Mat<float> rgb;  // [h*w, 3]
  auto cell(int i, int j) const { return rgb.row(i * w + j); }
};

// Local footprint test for an object of the given shape and size, in box
// coordinates (di, dj) with 0 <= di, dj < size.
bool covers(ShapeKind shape, int size, int di, int dj);

RgbGrid rasterize(const Scene& sc, const SpaceConfig& cfg);

// Pooled statistics feeding the register tokens:
// mean RGB (3), max RGB (3), occupancy fraction, object count / 4.
Eigen::Matrix<double, 8, 1> pooled_stats(const Scene& sc, const RgbGrid& g);

class FrozenTargetEncoder {
 public:
  FrozenTargetEncoder(const SpaceConfig& cfg, uint64_t seed = kDefaultGlobalSeed);

  TargetEmbedding encode(const Scene& sc) const;
  const SpaceConfig& config() const { return cfg_; }
  uint64_t seed() const { return seed_; }

  // patches[i, j] = rgb(i, j) * patch_w + patch_b + poscode[i, j]
  const Mat<float>& patch_weight() const { return patch_w_; }
  const Mat<float>& patch_bias() const { return patch_b_; }
  const Mat<float>& poscode() const { return poscode_; }

 private:
  SpaceConfig cfg_;
  uint64_t seed_;
  Mat<float> patch_w_;   // [3, d_img]
  Mat<float> patch_b_;   // [1, d_img]
  Mat<float> poscode_;   // [h*w, d_img]
  Eigen::Matrix<double, 8, 1> stat_mean_;
  Eigen::Matrix<double, 8, 1> stat_std_;
  Mat<float> cls_w_;     // [3, d_img] over standardized mean RGB
  Mat<float> cls_b_;
  std::vector<Mat<float>> reg_w_;  // n_reg x [8, d_img]
  std::vector<Mat<float>> reg_b_;
};

inline TargetEmbedding encode_target(const Scene& sc, const FrozenTargetEncoder& enc) {
  return enc.encode(sc);
}

template <typename T>
struct PromptEncoderCache;

// Frozen self-attention stack with trainable soft tokens appended to the
// embedded prompt. Attention is causal, so soft tokens read the whole prompt.
// Only soft_tokens is writable; the backbone weights have no mutating API.
template <typename T>
class FrozenPromptEncoder {
 public:
  static constexpr int kBlocks = 2;
  static constexpr int kHeads = 4;

  FrozenPromptEncoder(const SpaceConfig& cfg, uint64_t seed = kDefaultGlobalSeed);

  Mat<T> soft_tokens;  // [s, d_cond], trainable

  // Hidden states at the soft-token positions, [s, d_cond].
  Mat<T> forward(const PromptTokens& p, PromptEncoderCache<T>* cache = nullptr) const;
  // Gradient with respect to soft_tokens given the gradient of the output.
  Mat<T> backward(const PromptEncoderCache<T>& cache, const Mat<T>& d_out) const;

  const SpaceConfig& config() const { return cfg_; }
  uint64_t seed() const { return seed_; }

  struct Block {
    Mat<T> wq, wk, wv, wo, bo, w1, b1, w2, b2;
  };
  const Mat<T>& token_embedding() const { return tok_emb_; }
  const std::vector<Block>& blocks() const { return blocks_; }

  // Flattened copy of every frozen tensor, for conservation checks.
  std::vector<Mat<T>> frozen_snapshot() const;

  template <typename U>
  FrozenPromptEncoder<U> cast() const;

 private:
  template <typename U>
  friend class FrozenPromptEncoder;
  FrozenPromptEncoder() = default;

  SpaceConfig cfg_;
  uint64_t seed_ = 0;
  Mat<T> tok_emb_;  // [vocab, d_cond]
  Mat<T> pos_enc_;  // [max_len + s, d_cond], fixed sinusoidal
  std::vector<Block> blocks_;
};

template <typename T>
struct PromptEncoderCache {
  int prompt_len = 0;
  struct BlockCache {
    Mat<T> x_in;
    nn::NormCache<T> n1;
    Mat<T> q, k, v;
    nn::AttentionCache<T> attn;
    Mat<T> attn_out;
    Mat<T> x_mid;
    nn::NormCache<T> n2;
    Mat<T> f_pre, f_act;
  };
  std::vector<BlockCache> blocks;
  nn::NormCache<T> final_norm;
};

ConditioningSequence encode_prompt(const PromptTokens& p, const FrozenPromptEncoder<float>& enc);

// ---------------------------------------------------------------------------
// Dataset

struct DatasetRecord {
  PromptTokens prompt;
  TargetEmbedding target;
  uint64_t scene_seed = 0;
};

struct Dataset {
  SpaceConfig cfg;
  Flavor flavor = Flavor::Pretrain;
  uint64_t teacher_seed = kDefaultGlobalSeed;
  std::vector<DatasetRecord> records;
};

// Scene seed of record `index` for a dataset generated from `seed`.
inline uint64_t record_scene_seed(uint64_t seed, uint64_t index) { return derive_seed(seed, index); }

Dataset make_dataset(int n, uint64_t seed, const SpaceConfig& cfg, Flavor flavor,
                     uint64_t teacher_seed = kDefaultGlobalSeed);

namespace datasetfile {
inline constexpr uint32_t kVersion = 1;
}

// GAPD container: magic, u32 version, length-prefixed JSON manifest
// {n, cfg, flavor, teacher_seed}, then per record: u32 token count, u32
// token ids, embedding record, u64 scene seed.
void write_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& path);

void gen_dataset(int n, uint64_t seed, const std::filesystem::path& path, const SpaceConfig& cfg = {},
                 Flavor flavor = Flavor::Pretrain, uint64_t teacher_seed = kDefaultGlobalSeed);

}  // namespace gap

#include "gap/detail/prompt_encoder_impl.hpp"
