#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "gap/viewsel3d.hpp"
#include "helpers.hpp"

using namespace gap;
using gap::test::raises;

namespace {

void add_quad(TriMesh& m, const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  const int base = static_cast<int>(m.vertices.size());
  m.vertices.insert(m.vertices.end(), {a, b, c, d});
  m.triangles.push_back({base, base + 1, base + 2});
  m.triangles.push_back({base, base + 2, base + 3});
}

void add_box(TriMesh& m, const Vec3& lo, const Vec3& hi) {
  const double x0 = lo.x(), y0 = lo.y(), z0 = lo.z(), x1 = hi.x(), y1 = hi.y(), z1 = hi.z();
  add_quad(m, {x0, y0, z0}, {x1, y0, z0}, {x1, y1, z0}, {x0, y1, z0});
  add_quad(m, {x0, y0, z1}, {x1, y0, z1}, {x1, y1, z1}, {x0, y1, z1});
  add_quad(m, {x0, y0, z0}, {x1, y0, z0}, {x1, y0, z1}, {x0, y0, z1});
  add_quad(m, {x0, y1, z0}, {x1, y1, z0}, {x1, y1, z1}, {x0, y1, z1});
  add_quad(m, {x0, y0, z0}, {x0, y1, z0}, {x0, y1, z1}, {x0, y0, z1});
  add_quad(m, {x1, y0, z0}, {x1, y1, z0}, {x1, y1, z1}, {x1, y0, z1});
}

// Cube at the origin inside a U of thin walls: behind it on -x and along
// both y sides, open toward +x.
TriMesh walled_cube() {
  TriMesh m;
  add_box(m, {-0.4, -0.4, -0.4}, {0.4, 0.4, 0.4});
  const double a = 0.6;
  add_quad(m, {-a, -a, -a}, {-a, a, -a}, {-a, a, 1.2}, {-a, -a, 1.2});
  add_quad(m, {-a, a, -a}, {0.45, a, -a}, {0.45, a, 1.2}, {-a, a, 1.2});
  add_quad(m, {-a, -a, -a}, {0.45, -a, -a}, {0.45, -a, 1.2}, {-a, -a, 1.2});
  return m;
}

// Independent visibility: plane intersection plus edge-sign inside test,
// triangles in the outer loop.
int visible_oracle(const TriMesh& m, const PointSet& pts, const Vec3& cam, double eps_vis) {
  std::vector<char> blocked(pts.size(), 0);
  for (const auto& tri : m.triangles) {
    const Vec3 a = m.vertices[tri[0]], b = m.vertices[tri[1]], c = m.vertices[tri[2]];
    const Vec3 n = (b - a).cross(c - a);
    for (size_t i = 0; i < pts.size(); ++i) {
      if (blocked[i]) continue;
      const Vec3 d = (pts[i] - cam).normalized();
      const double dist = (pts[i] - cam).norm();
      const double denom = n.dot(d);
      if (std::abs(denom) < 1e-12) continue;
      const double t = n.dot(a - cam) / denom;
      if (t <= 1e-7 || t >= dist - eps_vis) continue;
      const Vec3 x = cam + t * d;
      const double s0 = n.dot((b - a).cross(x - a));
      const double s1 = n.dot((c - b).cross(x - b));
      const double s2 = n.dot((a - c).cross(x - c));
      if (s0 >= 0 && s1 >= 0 && s2 >= 0) blocked[i] = 1;
    }
  }
  return static_cast<int>(std::count(blocked.begin(), blocked.end(), 0));
}

}  // namespace

TEST_CASE("camera placement") {
  CameraPose p;
  p.pitch_deg = 0;
  CHECK((camera_position(p) - Vec3(2, 0, 0)).norm() < 1e-12);
  p.yaw_deg = 90;
  CHECK((camera_position(p) - Vec3(0, 2, 0)).norm() < 1e-9);
  CameraPose q;
  CHECK(q.pitch_deg == 30);
  CHECK(q.radius == 2.0);
  CHECK(q.fov_deg == 40);
  CHECK((camera_position(q) - Vec3(std::sqrt(3.0), 0, 1)).norm() < 1e-9);
  q.radius = 0;
  CHECK(raises(ErrorKind::InvalidArgument, [&] { camera_position(q); }));
  q.radius = 1;
  q.fov_deg = 180;
  CHECK(raises(ErrorKind::InvalidArgument, [&] { q.check(); }));
}

TEST_CASE("ray triangle") {
  const Vec3 a(0, -1, -1), b(0, 1, -1), c(0, 0, 1);
  const Vec3 centroid = (a + b + c) / 3.0;
  const Vec3 origin(3, centroid.y(), centroid.z());
  const auto hit = ray_triangle(origin, Vec3(-1, 0, 0), a, b, c);
  REQUIRE(hit.has_value());
  CHECK(*hit == doctest::Approx(3.0));
  // Scaling the direction scales the parameter.
  CHECK(*ray_triangle(origin, Vec3(-2, 0, 0), a, b, c) == doctest::Approx(1.5));
  CHECK_FALSE(ray_triangle(origin, Vec3(0, 1, 0), a, b, c).has_value());
  CHECK_FALSE(ray_triangle(origin, Vec3(1, 0, 0), a, b, c).has_value());
  CHECK_FALSE(ray_triangle(Vec3(3, 5, 5), Vec3(-1, 0, 0), a, b, c).has_value());
  // Oblique ray checked against the analytic plane intersection.
  const Vec3 o(2, 0.3, -0.2);
  const Vec3 target(0, 0.1, 0.0);
  const Vec3 dir = (target - o).normalized();
  CHECK(*ray_triangle(o, dir, a, b, c) == doctest::Approx((target - o).norm()));
}

TEST_CASE("surface sampling") {
  TriMesh one;
  one.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 2, 0}};
  one.triangles = {{0, 1, 2}};
  const PointSet pts = sample_surface(one, 2000, 3);
  CHECK(pts.size() == 2000);
  for (const auto& p : pts) {
    CHECK(p.z() == 0.0);
    CHECK(p.x() >= -1e-12);
    CHECK(p.y() >= -1e-12);
    CHECK(p.x() + p.y() / 2.0 <= 1.0 + 1e-12);
  }
  CHECK(sample_surface(one, 50, 4) == sample_surface(one, 50, 4));
  CHECK_FALSE(sample_surface(one, 50, 4) == sample_surface(one, 50, 5));

  SUBCASE("area weighting 9:1") {
    TriMesh two;
    two.vertices = {{0, 0, 0}, {3, 0, 0}, {0, 3, 0}, {10, 0, 0}, {11, 0, 0}, {10, 1, 0}};
    two.triangles = {{0, 1, 2}, {3, 4, 5}};
    CHECK(two.area(0) == doctest::Approx(9 * two.area(1)));
    const PointSet p = sample_surface(two, 100000, 7);
    const auto big = std::count_if(p.begin(), p.end(), [](const Vec3& v) { return v.x() < 5; });
    const double ratio = static_cast<double>(big) / static_cast<double>(p.size() - big);
    CHECK(std::abs(ratio - 9.0) / 9.0 < 0.02);
  }

  SUBCASE("uniform inside the triangle") {
    // The mean of a uniform sample is the centroid.
    const PointSet p = sample_surface(one, 100000, 8);
    Vec3 mean = Vec3::Zero();
    for (const auto& v : p) mean += v;
    mean /= static_cast<double>(p.size());
    CHECK((mean - Vec3(1.0 / 3, 2.0 / 3, 0)).norm() < 0.01);
  }

  CHECK(raises(ErrorKind::EmptyMesh, [] { sample_surface(TriMesh{}, 10, 1); }));
}

TEST_CASE("mesh loading and cleaning") {
  gap::test::TempDir dir("obj");
  {
    std::ofstream os(dir / "m.obj");
    os << "# quad with a degenerate face\n"
          "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
          "vn 0 0 1\n"
          "f 1/1/1 2/2/1 3/3/1\n"
          "f -4 -2 -1\n"
          "f 1 1 2\n";
  }
  const TriMesh m = load_obj(dir / "m.obj");
  CHECK(m.vertices.size() == 4);
  REQUIRE(m.triangles.size() == 2);
  CHECK(m.triangles[1] == std::array<int, 3>{0, 2, 3});
  {
    std::ofstream os(dir / "quad.obj");
    os << "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
  }
  CHECK(raises(ErrorKind::FormatError, [&] { load_obj(dir / "quad.obj"); }));
  {
    std::ofstream os(dir / "bad.obj");
    os << "v 0 0 0\nv 1 0 0\nv 1 1 0\nf 1 2 9\n";
  }
  CHECK(raises(ErrorKind::FormatError, [&] { load_obj(dir / "bad.obj"); }));
  {
    std::ofstream os(dir / "flat.obj");
    os << "v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n";
  }
  CHECK(raises(ErrorKind::EmptyMesh, [&] { load_obj(dir / "flat.obj"); }));
  CHECK(raises(ErrorKind::IoError, [&] { load_obj(dir / "missing.obj"); }));

  const TriMesh n = normalize_unit_sphere(walled_cube());
  double r = 0;
  Vec3 lo = n.vertices[0], hi = n.vertices[0];
  for (const auto& v : n.vertices) {
    r = std::max(r, v.norm());
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  CHECK(r == doctest::Approx(1.0));
  CHECK((lo + hi).norm() < 1e-12);
}

TEST_CASE("visibility") {
  SUBCASE("a triangle sees its own samples") {
    TriMesh t;
    t.vertices = {{0, -0.5, -0.5}, {0, 0.5, -0.5}, {0, 0, 0.5}};
    t.triangles = {{0, 1, 2}};
    const PointSet pts = sample_surface(t, 500, 1);
    CameraPose cam;
    CHECK(count_visible(t, pts, cam) == 500);
  }
  SUBCASE("a wall hides everything behind it") {
    TriMesh wall;
    add_quad(wall, {0, -3, -3}, {0, 3, -3}, {0, 3, 3}, {0, -3, 3});
    PointSet grid;
    for (int i = 0; i < 10; ++i)
      for (int j = 0; j < 10; ++j) grid.emplace_back(-0.5, -0.45 + 0.1 * i, -0.513 + 0.1 * j);  // off the quad diagonal
    CameraPose cam;
    cam.pitch_deg = 0;
    CHECK(count_visible(wall, grid, cam) == 0);
    CHECK(visible_oracle(wall, grid, camera_position(cam), 1e-4 * cam.radius) == 0);
    cam.yaw_deg = 180;
    CHECK(count_visible(wall, grid, cam) == 100);
  }
  SUBCASE("matches the independent oracle") {
    const TriMesh m = normalize_unit_sphere(walled_cube());
    REQUIRE(m.triangles.size() <= 50);
    const PointSet pts = sample_surface(m, 1500, 2);
    for (int yaw : {0, 45, 90, 180, 270}) {
      for (double pitch : {30.0, -10.0}) {
        CameraPose cam;
        cam.yaw_deg = yaw;
        cam.pitch_deg = pitch;
        CHECK(count_visible(m, pts, cam) == visible_oracle(m, pts, camera_position(cam), 1e-4 * cam.radius));
      }
    }
  }
}

TEST_CASE("view selection") {
  SUBCASE("walls on three sides") {
    const TriMesh raw = walled_cube();
    const ViewSelection s = select_view(raw, 5);
    const TriMesh m = normalize_unit_sphere(raw);
    const PointSet pts = sample_surface(m, kViewSamplePoints, 5);
    for (size_t k = 0; k < 4; ++k) {
      CameraPose cam;
      cam.yaw_deg = kCandidateYaws[k];
      CHECK(s.counts[k] == visible_oracle(m, pts, camera_position(cam), 1e-4 * cam.radius));
    }
    CHECK(s.yaw == 0);
    for (size_t k = 1; k < 4; ++k) CHECK(s.counts[k] < s.counts[0]);
  }
  SUBCASE("exact ties go to yaw 0") {
    // A flat horizontal square is fully visible from every candidate.
    TriMesh flat;
    add_quad(flat, {-1, -1, 0}, {1, -1, 0}, {1, 1, 0}, {-1, 1, 0});
    const ViewSelection s = select_view(flat, 3);
    CHECK(s.counts == std::array<int, 4>{5000, 5000, 5000, 5000});
    CHECK(s.yaw == 0);
  }
  SUBCASE("single triangle facing +x") {
    TriMesh t;
    t.vertices = {{0, -1, -1}, {0, 1, -1}, {0, 0, 1}};
    t.triangles = {{0, 1, 2}};
    CHECK(select_view(t, 1).yaw == 0);
  }
  SUBCASE("invariant under vertex reordering") {
    const TriMesh m = normalize_unit_sphere(walled_cube());
    const PointSet pts = sample_surface(m, 2000, 9);
    std::vector<int> perm(m.vertices.size());
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(4);
    std::shuffle(perm.begin(), perm.end(), rng);
    TriMesh p;
    p.vertices.resize(m.vertices.size());
    for (size_t i = 0; i < perm.size(); ++i) p.vertices[perm[i]] = m.vertices[i];
    for (const auto& t : m.triangles) p.triangles.push_back({perm[t[0]], perm[t[1]], perm[t[2]]});
    const auto a = select_view_with_points(m, pts);
    const auto b = select_view_with_points(p, pts);
    CHECK(a.counts == b.counts);
    CHECK(a.yaw == b.yaw);
  }
  CHECK(raises(ErrorKind::EmptyMesh, [] { select_view(TriMesh{}, 1); }));
}

TEST_CASE("farthest point sampling") {
  PointSet line;
  for (int i = 0; i < 10; ++i) line.emplace_back(i, 0, 0);
  auto two = fps(line, 2);
  std::sort(two.begin(), two.end());
  CHECK(two == std::vector<int>{0, 9});
  CHECK(fps(line, 1) == std::vector<int>{0});  // both ends tie; lowest index

  auto all = fps(line, 10);
  std::sort(all.begin(), all.end());
  std::vector<int> expect(10);
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(all == expect);

  SUBCASE("first pick is farthest from the centroid") {
    PointSet p{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {5, 5, 5}};
    CHECK(fps(p, 1) == std::vector<int>{3});
  }

  SUBCASE("min pairwise distance never grows with k") {
    Rng rng(6);
    PointSet cloud;
    for (int i = 0; i < 300; ++i)
      cloud.emplace_back(gap::test::uniform_real(rng, -1, 1), gap::test::uniform_real(rng, -1, 1),
                         gap::test::uniform_real(rng, -1, 1));
    const auto order = fps(cloud, 60);
    std::set<int> distinct(order.begin(), order.end());
    CHECK(distinct.size() == 60);
    double prev = std::numeric_limits<double>::infinity();
    for (int k = 2; k <= 60; ++k) {
      double mind = std::numeric_limits<double>::infinity();
      for (int a = 0; a < k; ++a)
        for (int b = a + 1; b < k; ++b) mind = std::min(mind, (cloud[order[a]] - cloud[order[b]]).norm());
      CHECK(mind <= prev + 1e-12);
      prev = mind;
    }
  }

  SUBCASE("greedy brute force agrees") {
    Rng rng(7);
    PointSet cloud;
    for (int i = 0; i < 40; ++i)
      cloud.emplace_back(gap::test::uniform_real(rng, 0, 1), gap::test::uniform_real(rng, 0, 1), 0);
    const auto got = fps(cloud, 12);
    std::vector<int> ref{got.front()};
    while (ref.size() < 12) {
      int best = -1;
      double best_d = -1;
      for (int i = 0; i < 40; ++i) {
        double d = std::numeric_limits<double>::infinity();
        for (int j : ref) d = std::min(d, (cloud[i] - cloud[j]).norm());
        if (d > best_d) {
          best_d = d;
          best = i;
        }
      }
      ref.push_back(best);
    }
    CHECK(got == ref);
  }

  CHECK(raises(ErrorKind::RangeError, [&] { fps(line, 0); }));
  CHECK(raises(ErrorKind::RangeError, [&] { fps(line, 11); }));
}
