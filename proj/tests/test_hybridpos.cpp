#include <doctest.h>

#include <cmath>
#include <limits>

#include "gap/hybridpos.hpp"
#include "helpers.hpp"

using namespace gap;
using gap::test::raises;

namespace {

RowVec<double> random_row(int n, Rng& rng) { return random_normal<double>(1, n, 1.0, rng); }

}  // namespace

TEST_CASE("rope table construction") {
  CHECK(raises(ErrorKind::OddHeadDim, [] { RopeTable(6, 8); }));
  CHECK(raises(ErrorKind::OddHeadDim, [] { RopeTable(2, 8); }));
  const RopeTable t(16, 8);
  CHECK(t.pairs_per_axis() == 4);
  // theta_m = base^(-2m / (head_dim / 2))
  for (int m = 0; m < 4; ++m) CHECK(t.frequency(m) == doctest::Approx(std::pow(10000.0, -2.0 * m / 8.0)));
}

TEST_CASE("rope2d_apply") {
  const RopeTable t(16, 12);
  Rng rng(1);

  SUBCASE("origin is the identity") {
    const auto x = random_row(16, rng);
    CHECK(rope2d_apply(x, {0, 0}, t) == x);
  }

  SUBCASE("isometry") {
    for (int trial = 0; trial < 200; ++trial) {
      const auto x = random_row(16, rng);
      const int i = gap::test::uniform_int(rng, 0, 11);
      const int j = gap::test::uniform_int(rng, 0, 11);
      CHECK(rope2d_apply(x, {i, j}, t).norm() == doctest::Approx(x.norm()).epsilon(1e-6));
    }
  }

  SUBCASE("axis split: rows rotate the first half, columns the second") {
    const auto x = random_row(16, rng);
    const auto r = rope2d_apply(x, {3, 0}, t);
    CHECK(r.tail(8) == x.tail(8));
    CHECK(r.head(8) != x.head(8));
    const auto c = rope2d_apply(x, {0, 5}, t);
    CHECK(c.head(8) == x.head(8));
    // Pair m of the column half turns by theta_m * j.
    const double ang = t.frequency(1) * 5;
    CHECK(c(8 + 2) == doctest::Approx(x(8 + 2) * std::cos(ang) - x(8 + 3) * std::sin(ang)));
    CHECK(c(8 + 3) == doctest::Approx(x(8 + 2) * std::sin(ang) + x(8 + 3) * std::cos(ang)));
  }

  SUBCASE("logits depend only on the offset") {
    for (int trial = 0; trial < 20; ++trial) {
      const auto q = random_row(16, rng);
      const auto k = random_row(16, rng);
      const int i1 = gap::test::uniform_int(rng, 0, 5), j1 = gap::test::uniform_int(rng, 0, 5);
      const int i2 = gap::test::uniform_int(rng, 0, 5), j2 = gap::test::uniform_int(rng, 0, 5);
      const double base = rope2d_apply(q, {i1, j1}, t).dot(rope2d_apply(k, {i2, j2}, t));
      for (int di = 0; di <= 6; ++di)
        for (int dj = 0; dj <= 6; ++dj) {
          const double moved = rope2d_apply(q, {i1 + di, j1 + dj}, t).dot(rope2d_apply(k, {i2 + di, j2 + dj}, t));
          CHECK(std::abs(moved - base) < 1e-5);
        }
    }
  }

  SUBCASE("inverse rotation undoes the forward one") {
    RowVec<double> x = random_row(16, rng);
    const RowVec<double> orig = x;
    t.rotate(x, 4, 7);
    t.rotate(x, 4, 7, true);
    CHECK((x - orig).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("errors") {
    CHECK(raises(ErrorKind::RangeError, [&] { rope2d_apply(random_row(16, rng), {12, 0}, t); }));
    CHECK(raises(ErrorKind::RangeError, [&] { rope2d_apply(random_row(16, rng), {0, -1}, t); }));
    CHECK(raises(ErrorKind::ShapeMismatch, [&] { rope2d_apply(random_row(12, rng), {0, 0}, t); }));
  }
}

TEST_CASE("identity rotary") {
  Rng rng(2);
  const auto x = random_row(8, rng);
  CHECK(identity_rotary(x) == x);
  CHECK(identity_rotary(x) == rope2d_apply(x, {0, 0}, RopeTable(8, 2)));
  RowVec<double> n = x;
  n(3) = std::numeric_limits<double>::quiet_NaN();
  CHECK(std::isnan(identity_rotary(n)(3)));
}

TEST_CASE("rope_stream leaves global rows alone") {
  const RopeTable t(8, 4);
  Rng rng(3);
  // 2 globals + 2x3 grid, 2 heads of size 8.
  Mat<double> x = random_normal<double>(2 + 6, 16, 1.0, rng);
  const Mat<double> orig = x;
  rope_stream(x, t, 2, 2, 3);
  CHECK(x.topRows(2) == orig.topRows(2));
  for (int cell = 0; cell < 6; ++cell) {
    const int i = cell / 3, j = cell % 3;
    for (int h = 0; h < 2; ++h) {
      const RowVec<double> head = orig.row(2 + cell).segment(h * 8, 8);
      CHECK((x.row(2 + cell).segment(h * 8, 8) - rope2d_apply(head, {i, j}, t)).cwiseAbs().maxCoeff() == 0.0);
    }
  }
  rope_stream(x, t, 2, 2, 3, true);
  CHECK((x - orig).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("add_global_pos") {
  Rng rng(4);
  GlobalPosEmbeddings<double> g{random_normal<double>(5, 8, 1.0, rng)};
  const Mat<double> zeros = Mat<double>::Zero(5, 8);
  CHECK(add_global_pos(zeros, g) == g.table);
  const Mat<double> tokens = random_normal<double>(5, 8, 1.0, rng);
  CHECK(add_global_pos(tokens, GlobalPosEmbeddings<double>{zeros}) == tokens);
  CHECK(raises(ErrorKind::ShapeMismatch, [&] { add_global_pos(Mat<double>(Mat<double>::Zero(4, 8)), g); }));

  SUBCASE("gradient wrt the table equals gradient wrt the summed tokens") {
    // L(z) = sum(sin(z) * w), z = tokens + table; dL/dz = cos(z) * w.
    const Mat<double> w = random_normal<double>(5, 8, 1.0, rng);
    auto loss = [&](const Mat<double>& tok, const GlobalPosEmbeddings<double>& gp) {
      return add_global_pos(tok, gp).array().sin().cwiseProduct(w.array()).sum();
    };
    const double h = 1e-6;
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 8; ++c) {
        auto gp = g, gm = g;
        gp.table(r, c) += h;
        gm.table(r, c) -= h;
        const double d_table = (loss(tokens, gp) - loss(tokens, gm)) / (2 * h);
        Mat<double> tp = tokens, tm = tokens;
        tp(r, c) += h;
        tm(r, c) -= h;
        const double d_tokens = (loss(tp, g) - loss(tm, g)) / (2 * h);
        CHECK(d_table == doctest::Approx(d_tokens).epsilon(1e-6));
        CHECK(d_table == doctest::Approx(std::cos(tokens(r, c) + g.table(r, c)) * w(r, c)).epsilon(1e-6));
      }
  }
}
