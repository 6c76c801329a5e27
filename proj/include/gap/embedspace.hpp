#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gap/common.hpp"

namespace gap {

struct SpaceConfig {
  int h = 8;
  int w = 8;
  int d_img = 64;
  int n_reg = 4;
  int s = 16;
  int d_cond = 128;

  int num_patches() const { return h * w; }
  // Token stream order everywhere: [CLS, registers, patches row-major].
  int num_tokens() const { return 1 + n_reg + h * w; }
  int first_patch_token() const { return 1 + n_reg; }

  // Throws InvalidArgument when a dimension is out of range.
  void check() const;

  nlohmann::json to_json() const;
  static SpaceConfig from_json(const nlohmann::json& j);

  friend bool operator==(const SpaceConfig&, const SpaceConfig&) = default;
};

// The (patch grid, CLS, registers) triple. Also used for noise, noisy
// states and velocities, which share the same layout.
template <typename T>
struct Embedding {
  int h = 0;
  int w = 0;
  Mat<T> patches;    // [h*w, d], cell (i, j) at row i*w + j
  Mat<T> cls;        // [1, d]
  Mat<T> registers;  // [n_reg, d]

  static Embedding zeros(const SpaceConfig& cfg) {
    Embedding e;
    e.h = cfg.h;
    e.w = cfg.w;
    e.patches = Mat<T>::Zero(cfg.num_patches(), cfg.d_img);
    e.cls = Mat<T>::Zero(1, cfg.d_img);
    e.registers = Mat<T>::Zero(cfg.n_reg, cfg.d_img);
    return e;
  }

  static Embedding normal(const SpaceConfig& cfg, Rng& rng) {
    Embedding e;
    e.h = cfg.h;
    e.w = cfg.w;
    e.patches = random_normal<T>(cfg.num_patches(), cfg.d_img, 1.0, rng);
    e.cls = random_normal<T>(1, cfg.d_img, 1.0, rng);
    e.registers = random_normal<T>(cfg.n_reg, cfg.d_img, 1.0, rng);
    return e;
  }

  auto patch(int i, int j) { return patches.row(i * w + j); }
  auto patch(int i, int j) const { return patches.row(i * w + j); }

  template <typename U>
  Embedding<U> cast() const {
    return {h, w, patches.template cast<U>(), cls.template cast<U>(), registers.template cast<U>()};
  }

  bool all_finite() const {
    return gap::all_finite(patches) && gap::all_finite(cls) && gap::all_finite(registers);
  }

  // Bit-exact equality of shapes and values.
  bool identical(const Embedding& o) const {
    return h == o.h && w == o.w && patches.rows() == o.patches.rows() &&
           patches.cols() == o.patches.cols() && cls.cols() == o.cls.cols() &&
           registers.rows() == o.registers.rows() && registers.cols() == o.registers.cols() &&
           patches == o.patches && cls == o.cls && registers == o.registers;
  }

  Embedding& operator+=(const Embedding& o) {
    patches += o.patches;
    cls += o.cls;
    registers += o.registers;
    return *this;
  }
  Embedding& operator*=(T a) {
    patches *= a;
    cls *= a;
    registers *= a;
    return *this;
  }
  friend Embedding operator+(Embedding a, const Embedding& b) { return a += b; }
  friend Embedding operator-(Embedding a, const Embedding& b) {
    a.patches -= b.patches;
    a.cls -= b.cls;
    a.registers -= b.registers;
    return a;
  }
  friend Embedding operator*(T s, Embedding a) { return a *= s; }
};

using TargetEmbedding = Embedding<float>;

struct ConditioningSequence {
  Mat<float> latents;  // [s, d_cond]
};

struct ValidationError {
  ErrorKind kind;
  std::string message;
};

// Returns nullopt when shapes agree with cfg and every value is finite.
template <typename T>
std::optional<ValidationError> validate(const Embedding<T>& e, const SpaceConfig& cfg) {
  auto shape_err = [](std::string what) {
    return ValidationError{ErrorKind::ShapeMismatch, std::move(what)};
  };
  if (e.h != cfg.h || e.w != cfg.w) return shape_err("grid dimensions disagree");
  if (e.patches.rows() != cfg.num_patches() || e.patches.cols() != cfg.d_img)
    return shape_err("patch tensor shape");
  if (e.cls.rows() != 1 || e.cls.cols() != cfg.d_img) return shape_err("cls shape");
  if (e.registers.rows() != cfg.n_reg || e.registers.cols() != cfg.d_img)
    return shape_err("register shape");
  if (!e.all_finite()) return ValidationError{ErrorKind::NonFinite, "non-finite value in embedding"};
  return std::nullopt;
}

std::optional<ValidationError> validate(const ConditioningSequence& c, const SpaceConfig& cfg);

// Throws the validation error, if any.
template <typename T>
void require_valid(const Embedding<T>& e, const SpaceConfig& cfg) {
  if (auto err = validate(e, cfg)) throw Error(err->kind, err->message);
}

// Shape-only space of an embedding (s and d_cond are left at defaults).
SpaceConfig space_of(const TargetEmbedding& e);

namespace embedfile {
inline constexpr uint32_t kVersion = 1;
}

// GAPE container: magic, u32 version, length-prefixed JSON manifest
// {count, h, w, d_img, n_reg}, then per record patches, cls, registers as
// little-endian f32.
void write_embedding_file(const std::filesystem::path& path, const std::vector<TargetEmbedding>& batch);
std::vector<TargetEmbedding> read_embedding_file(const std::filesystem::path& path);

// Record-level helpers shared with the dataset format.
namespace binio {
class Writer;
class Reader;
}  // namespace binio
void write_embedding_record(binio::Writer& w, const TargetEmbedding& e);
TargetEmbedding read_embedding_record(binio::Reader& r, const SpaceConfig& shape);

}  // namespace gap
