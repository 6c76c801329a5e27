#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace gap {

// Token-major dense storage: one row per token, one column per feature.
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Rng = std::mt19937_64;

enum class ErrorKind {
  ShapeMismatch,
  NonFinite,
  IoError,
  FormatError,
  RangeError,
  OddHeadDim,
  EmptyDatabase,
  MissingGroundTruth,
  DegenerateInput,
  EmptyMesh,
  InvalidArgument,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Stateless 64-bit mixer, used to derive independent seeds from (base, index).
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t index) {
  return splitmix64(splitmix64(base) ^ (index * 0xD6E8FEB86659FD93ULL));
}

inline constexpr uint64_t kDefaultGlobalSeed = 0xD1CE;

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.derived().array().isFinite().all();
}

// Fills a matrix with N(0, stddev^2) draws, generated in double so that
// float and double instantiations see identical values.
template <typename Scalar>
Mat<Scalar> random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
  return m;
}

}  // namespace gap
