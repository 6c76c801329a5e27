#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "gap/evalmetrics.hpp"
#include "helpers.hpp"

using namespace gap;
using gap::test::raises;

namespace {

Eigen::MatrixXd rows(std::initializer_list<std::initializer_list<double>> r) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& row : r) {
    Eigen::Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

Eigen::MatrixXd gaussian(int n, int d, Rng& rng, double shift0 = 0) {
  Eigen::MatrixXd m = random_normal<double>(n, d, 1.0, rng);
  m.col(0).array() += shift0;
  return m;
}

// Brute-force unbiased MMD^2 with the cubic polynomial kernel.
double kd_oracle(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const double d = static_cast<double>(a.cols());
  auto k = [d](const Eigen::VectorXd& x, const Eigen::VectorXd& y) { return std::pow(x.dot(y) / d + 1.0, 3); };
  const auto m = a.rows(), n = b.rows();
  double saa = 0, sbb = 0, sab = 0;
  long cab = 0;
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j)
      if (i != j) saa += k(a.row(i), a.row(j));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) sbb += k(b.row(i), b.row(j));
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      if (m == n && i == j) continue;
      sab += k(a.row(i), b.row(j));
      ++cab;
    }
  return 100.0 * (saa / (m * (m - 1.0)) + sbb / (n * (n - 1.0)) - 2.0 * sab / cab);
}

}  // namespace

TEST_CASE("cosine metric") {
  const TokenBatch a{rows({{1, 0}}), rows({{1, 1}})};
  const TokenBatch b{rows({{0, 1}}), rows({{1, 1}})};
  CHECK(cosine_metric(a, b) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(std::abs(cosine_metric(a, a) - 1.0) < 1e-9);
  const TokenBatch neg{-a[0], -a[1]};
  CHECK(std::abs(cosine_metric(neg, a) + 1.0) < 1e-9);
  Rng rng(1);
  const TokenBatch x{random_normal<double>(5, 7, 1.0, rng)};
  const TokenBatch scaled{3.7 * x[0]};
  CHECK(std::abs(cosine_metric(scaled, x) - 1.0) < 1e-9);
  // Zero vectors are guarded by epsilon.
  const TokenBatch z{Eigen::MatrixXd::Zero(2, 2)};
  CHECK(cosine_metric(z, z) == 0.0);
  CHECK(raises(ErrorKind::ShapeMismatch, [&] { cosine_metric(a, TokenBatch{rows({{1, 0, 0}})}); }));
  CHECK(raises(ErrorKind::ShapeMismatch, [&] { cosine_metric(a, TokenBatch{b[0]}); }));
}

TEST_CASE("mse metric") {
  Rng rng(2);
  const TokenBatch x{random_normal<double>(4, 3, 1.0, rng), random_normal<double>(4, 3, 1.0, rng)};
  TokenBatch p1 = x, p2 = x;
  for (auto& m : p1) m.array() += 1.0;
  for (auto& m : p2) m.array() += 2.0;
  CHECK(mse_metric(x, x) == 0.0);
  CHECK(std::abs(mse_metric(p1, x) - 1.0) < 1e-9);
  CHECK(std::abs(mse_metric(p2, x) - 4.0) < 1e-9);
  // Hand fixture: (1-0)^2 + (2-0)^2 + 0 + 0 over 4 elements.
  CHECK(std::abs(mse_metric(TokenBatch{rows({{1, 2}, {3, 4}})}, TokenBatch{rows({{0, 0}, {3, 4}})}) - 1.25) < 1e-9);
}

TEST_CASE("norm ratio") {
  Rng rng(3);
  const TokenBatch x{random_normal<double>(6, 4, 1.0, rng)};
  CHECK(std::abs(norm_ratio(x, x) - 1.0) < 1e-7);
  CHECK(std::abs(norm_ratio(TokenBatch{2.0 * x[0]}, x) - 2.0) < 1e-7);
  CHECK(norm_ratio(TokenBatch{Eigen::MatrixXd::Zero(6, 4)}, x) == 0.0);
  // (|(3,4)| / |(1,0)| + |(0,0)| / |(0,2)|) / 2 = (5 + 0) / 2
  CHECK(std::abs(norm_ratio(TokenBatch{rows({{3, 4}, {0, 0}})}, TokenBatch{rows({{1, 0}, {0, 2}})}) - 2.5) < 1e-7);
}

TEST_CASE("alignment report") {
  SpaceConfig s;
  s.h = 2;
  s.w = 2;
  s.d_img = 3;
  s.n_reg = 2;
  Rng rng(4);
  std::vector<TargetEmbedding> gt{TargetEmbedding::normal(s, rng), TargetEmbedding::normal(s, rng)};
  const auto r = alignment_report(gt, gt);
  CHECK(r.count == 2);
  for (const auto& c : {r.patch, r.cls, r.reg}) {
    CHECK(std::abs(c.cosine - 1.0) < 1e-6);
    CHECK(c.mse == 0.0);
    CHECK(std::abs(c.norm_ratio - 1.0) < 1e-6);
  }
  auto gen = gt;
  for (auto& e : gen) e.cls.array() += 1.0f;
  const auto r2 = alignment_report(gen, gt);
  CHECK(std::abs(r2.cls.mse - 1.0) < 1e-6);
  CHECK(r2.patch.mse == 0.0);
  CHECK(raises(ErrorKind::ShapeMismatch, [&] { alignment_report({gt[0]}, gt); }));
}

TEST_CASE("retrieval") {
  Rng rng(5);
  SUBCASE("self retrieval") {
    const Eigen::MatrixXd db = random_normal<double>(30, 8, 1.0, rng);
    std::vector<int> ids(30);
    std::iota(ids.begin(), ids.end(), 0);
    const auto r = retrieval(db, db, ids);
    CHECK(r.at(1) == 100.0);
    CHECK(r.at(5) == 100.0);
    CHECK(r.queries == 30);
  }
  SUBCASE("orthogonal queries") {
    const Eigen::MatrixXd db = Eigen::MatrixXd::Identity(12, 12);
    Eigen::MatrixXd q = 2.5 * Eigen::MatrixXd::Identity(12, 12);
    std::vector<int> ids(12);
    std::iota(ids.begin(), ids.end(), 0);
    std::reverse(ids.begin(), ids.end());
    const Eigen::MatrixXd qr = q.colwise().reverse();
    CHECK(retrieval(qr, db, ids, {1}).at(1) == 100.0);
  }
  SUBCASE("ties go to the lower index") {
    const Eigen::MatrixXd db = rows({{1, 0}, {1, 0}, {0, 1}});
    const Eigen::MatrixXd q = rows({{1, 0}, {1, 0}});
    const auto r = retrieval(q, db, {0, 1}, {1, 2});
    CHECK(r.at(1) == 50.0);
    CHECK(r.at(2) == 100.0);
  }
  SUBCASE("random queries recall at chance") {
    const Eigen::MatrixXd db = random_normal<double>(100, 16, 1.0, rng);
    const int trials = 10000;
    const Eigen::MatrixXd q = random_normal<double>(trials, 16, 1.0, rng);
    std::vector<int> ids(trials);
    for (auto& id : ids) id = gap::test::uniform_int(rng, 0, 99);
    const auto r = retrieval(q, db, ids);
    // Binomial(10^4, 0.01): sd of the percentage is about 0.1.
    CHECK(std::abs(r.at(1) - 1.0) < 0.4);
    CHECK(std::abs(r.at(10) - 10.0) < 1.2);
    CHECK(r.at(1) <= r.at(5));
    CHECK(r.at(5) <= r.at(10));
  }
  SUBCASE("errors") {
    const Eigen::MatrixXd db = random_normal<double>(3, 4, 1.0, rng);
    CHECK(raises(ErrorKind::EmptyDatabase, [&] { retrieval(db, Eigen::MatrixXd(0, 4), {0, 1, 2}, {1}); }));
    CHECK(raises(ErrorKind::MissingGroundTruth, [&] { retrieval(db, db, {0, 1}, {1}); }));
    CHECK(raises(ErrorKind::MissingGroundTruth, [&] { retrieval(db, db, {0, 1, 3}, {1}); }));
    CHECK(raises(ErrorKind::RangeError, [&] { retrieval(db, db, {0, 1, 2}, {1, 5}); }));
  }
  SUBCASE("embedding modes") {
    SpaceConfig s;
    s.h = 2;
    s.w = 3;
    s.d_img = 4;
    std::vector<TargetEmbedding> batch;
    for (int i = 0; i < 12; ++i) batch.push_back(TargetEmbedding::normal(s, rng));
    const auto pooled = retrieval_vectors(batch, RetrievalMode::PooledPatch);
    CHECK((pooled.row(3) - batch[3].patches.cast<double>().colwise().mean()).norm() < 1e-12);
    CHECK(retrieval_vectors(batch, RetrievalMode::Cls).row(7) == batch[7].cls.cast<double>());
    std::vector<int> ids(12);
    std::iota(ids.begin(), ids.end(), 0);
    for (auto mode : {RetrievalMode::Cls, RetrievalMode::PooledPatch}) {
      const auto r = retrieval(batch, batch, ids, mode);
      CHECK(r.mode == mode);
      CHECK(r.at(1) == 100.0);
    }
    CHECK(raises(ErrorKind::EmptyDatabase, [&] { retrieval(batch, {}, ids, RetrievalMode::Cls); }));
    CHECK(parse_retrieval_mode("pooled_patch") == RetrievalMode::PooledPatch);
  }
}

TEST_CASE("frechet distance") {
  Rng rng(6);
  SUBCASE("identical sets") {
    const Eigen::MatrixXd a = gaussian(500, 6, rng);
    CHECK(std::abs(frechet_distance(a, a)) < 1e-6);
    const Eigen::MatrixXd one = rows({{0}, {2}});
    CHECK(frechet_distance(one, one) == 0.0);
  }
  SUBCASE("one-dimensional closed form") {
    // FD = (mu_a - mu_b)^2 + (sigma_a - sigma_b)^2 in 1-D.
    const Eigen::MatrixXd a = rows({{0}, {2}, {4}});
    const Eigen::MatrixXd b = rows({{1}, {1}, {2}, {4}});
    auto stats = [](const Eigen::MatrixXd& x) {
      const double mu = x.mean();
      const double var = (x.array() - mu).square().sum() / (x.rows() - 1);
      return std::pair{mu, std::sqrt(var)};
    };
    const auto [ma, sa] = stats(a);
    const auto [mb, sb] = stats(b);
    CHECK(frechet_distance(a, b) == doctest::Approx((ma - mb) * (ma - mb) + (sa - sb) * (sa - sb)).epsilon(1e-10));
  }
  SUBCASE("non-commuting covariances") {
    // Diagonal vs. rotated covariances; oracle uses the product form with a
    // general (non-symmetric) eigen solver.
    Eigen::MatrixXd a = gaussian(400, 3, rng);
    a.col(0) *= 3.0;
    Eigen::MatrixXd b = gaussian(400, 3, rng);
    b.col(1) *= 2.0;
    const Eigen::Matrix3d rot = Eigen::AngleAxisd(0.7, Eigen::Vector3d(1, 2, 3).normalized()).toRotationMatrix();
    b = b * rot.transpose();
    auto cov = [](const Eigen::MatrixXd& x) {
      const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
      return Eigen::MatrixXd(c.transpose() * c / (x.rows() - 1.0));
    };
    const Eigen::MatrixXd ca = cov(a), cb = cov(b);
    Eigen::EigenSolver<Eigen::MatrixXd> es(ca * cb);
    double tr = 0;
    for (int k = 0; k < 3; ++k) tr += std::sqrt(std::max(0.0, es.eigenvalues()(k).real()));
    const double oracle =
        (a.colwise().mean() - b.colwise().mean()).squaredNorm() + ca.trace() + cb.trace() - 2 * tr;
    CHECK(frechet_distance(a, b) == doctest::Approx(oracle).epsilon(1e-9));
    CHECK(std::abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-9);
  }
  SUBCASE("unit mean shift") {
    const Eigen::MatrixXd a = gaussian(100000, 4, rng);
    const Eigen::MatrixXd b = gaussian(100000, 4, rng, 1.0);
    CHECK(std::abs(frechet_distance(a, b) - 1.0) < 0.05);
  }
  SUBCASE("degenerate input") {
    CHECK(raises(ErrorKind::DegenerateInput, [] { frechet_distance(rows({{1, 2}}), rows({{1, 2}, {3, 4}})); }));
  }
}

TEST_CASE("kernel distance") {
  Rng rng(7);
  const Eigen::MatrixXd a = gaussian(40, 5, rng);
  CHECK(std::abs(kernel_distance(a, a)) < 1e-9);

  const Eigen::MatrixXd near = rows({{0, 0}, {0.1, 0}, {0, 0.1}, {0.1, 0.1}});
  const Eigen::MatrixXd far = rows({{5, 5}, {5.1, 5}, {5, 5.1}, {5.1, 5.1}});
  CHECK(kernel_distance(near, far) > 0);
  CHECK(kernel_distance(near, far) == doctest::Approx(kd_oracle(near, far)).epsilon(1e-10));

  const Eigen::MatrixXd b = gaussian(40, 5, rng, 0.5);
  CHECK(kernel_distance(a, b) == doctest::Approx(kd_oracle(a, b)).epsilon(1e-10));
  CHECK(std::abs(kernel_distance(a, b) - kernel_distance(b, a)) < 1e-9);
  const Eigen::MatrixXd c = gaussian(25, 5, rng, 0.5);
  CHECK(kernel_distance(a, c) == doctest::Approx(kd_oracle(a, c)).epsilon(1e-10));
  CHECK(std::abs(kernel_distance(a, c) - kernel_distance(c, a)) < 1e-9);

  CHECK(kernel_distance(2.0 * a, 2.0 * b) != doctest::Approx(kernel_distance(a, b)));
  CHECK(raises(ErrorKind::DegenerateInput, [&] { kernel_distance(a.topRows(1), b); }));
}
