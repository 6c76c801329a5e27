#pragma once

// Hybrid positional scheme for the aligner token stream: 2D rotary factors on
// patch tokens, identity rotary on global tokens, and a learnable additive
// table for the globals at input projection time.

#include <cmath>
#include <utility>

#include "gap/common.hpp"

namespace gap {

// Precomputed cos/sin for 2D rotary embeddings. For a head vector of size
// head_dim, the first half carries the row axis and the second half the
// column axis; inside each half, coordinates (2m, 2m+1) form rotation pair m
// with frequency base^(-2m / (head_dim/2)).
class RopeTable {
 public:
  RopeTable(int head_dim, int max_pos, double base = 10000.0);

  int head_dim() const { return head_dim_; }
  int max_pos() const { return max_pos_; }
  double base() const { return base_; }
  int pairs_per_axis() const { return head_dim_ / 4; }

  double frequency(int m) const { return freq_(m); }

  // Rotates x in place for grid position (i, j). inverse = true applies the
  // transpose rotation, which is the backward map.
  template <typename Derived>
  void rotate(Eigen::MatrixBase<Derived> const& x_const, int i, int j, bool inverse = false) const {
    auto& x = const_cast<Eigen::MatrixBase<Derived>&>(x_const);
    using T = typename Derived::Scalar;
    const int half = head_dim_ / 2;
    const double sign = inverse ? -1.0 : 1.0;
    for (int axis = 0; axis < 2; ++axis) {
      const int pos = axis == 0 ? i : j;
      const int offset = axis * half;
      for (int m = 0; m < pairs_per_axis(); ++m) {
        const T c = static_cast<T>(cos_(pos, m));
        const T s = static_cast<T>(sign * sin_(pos, m));
        const T a = x(offset + 2 * m);
        const T b = x(offset + 2 * m + 1);
        x(offset + 2 * m) = a * c - b * s;
        x(offset + 2 * m + 1) = a * s + b * c;
      }
    }
  }

 private:
  int head_dim_;
  int max_pos_;
  double base_;
  Eigen::VectorXd freq_;
  Eigen::MatrixXd cos_;  // [max_pos, head_dim/4]
  Eigen::MatrixXd sin_;
};

// Returns x rotated for grid position (i, j). Throws OddHeadDim when the head
// size is not divisible by 4 and RangeError when the position is outside the
// table.
template <typename T>
RowVec<T> rope2d_apply(const RowVec<T>& x, std::pair<int, int> pos, const RopeTable& table) {
  if (x.size() != table.head_dim())
    throw Error(ErrorKind::ShapeMismatch, "head vector size differs from rope table");
  if (pos.first < 0 || pos.second < 0 || pos.first >= table.max_pos() || pos.second >= table.max_pos())
    throw Error(ErrorKind::RangeError, "grid position outside rope table");
  RowVec<T> out = x;
  table.rotate(out, pos.first, pos.second);
  return out;
}

// Global tokens have no grid coordinates; their rotary factor is the identity.
template <typename T>
RowVec<T> identity_rotary(const RowVec<T>& x) {
  return x;
}

// Applies per-head 2D rotary factors to the patch rows of a token stream
// [CLS, registers, patches row-major]; global rows are left untouched.
template <typename T>
void rope_stream(Mat<T>& x, const RopeTable& table, int n_heads, int first_patch, int grid_w,
                 bool inverse = false) {
  const int dh = table.head_dim();
  for (Eigen::Index r = first_patch; r < x.rows(); ++r) {
    const int cell = static_cast<int>(r) - first_patch;
    const int i = cell / grid_w;
    const int j = cell % grid_w;
    for (int hd = 0; hd < n_heads; ++hd) table.rotate(x.row(r).segment(hd * dh, dh), i, j, inverse);
  }
}

template <typename T>
struct GlobalPosEmbeddings {
  Mat<T> table;  // [1 + n_reg, d_model]
};

// Elementwise sum of the global token rows with their learnable positions.
template <typename T>
Mat<T> add_global_pos(const Mat<T>& tokens, const GlobalPosEmbeddings<T>& g) {
  if (tokens.rows() != g.table.rows() || tokens.cols() != g.table.cols())
    throw Error(ErrorKind::ShapeMismatch, "global token rows do not match position table");
  return tokens + g.table;
}

}  // namespace gap
