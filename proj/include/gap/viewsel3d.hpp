#pragma once

// Minimum-occlusion view selection by brute-force ray casting, the orbit
// camera used for evaluation renders, and farthest point sampling.

#include <array>
#include <filesystem>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "gap/common.hpp"

namespace gap {

using Vec3 = Eigen::Vector3d;
using PointSet = std::vector<Vec3>;

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;

  Vec3 corner(int tri, int k) const { return vertices[triangles[tri][k]]; }
  double area(int tri) const;
};

// Drops zero-area triangles and checks indices; throws EmptyMesh if nothing remains.
TriMesh clean_mesh(TriMesh mesh);

// ASCII OBJ subset: `v x y z` and triangular `f a b c` lines (a/b/c forms and
// negative indices accepted). Other statements are ignored.
TriMesh load_obj(const std::filesystem::path& path);

// Centers the bounding box at the origin and scales the bounding sphere
// (around that center) to radius 1.
TriMesh normalize_unit_sphere(TriMesh mesh);

struct CameraPose {
  double yaw_deg = 0;
  double pitch_deg = 30;
  double radius = 2.0;
  double fov_deg = 40;

  void check() const;
};

// Spherical placement looking at the origin.
Vec3 camera_position(const CameraPose& pose);

inline constexpr double kRayEps = 1e-7;

// Moller-Trumbore; smallest positive hit distance along dir (in units of |dir|).
std::optional<double> ray_triangle(const Vec3& origin, const Vec3& dir, const Vec3& v0, const Vec3& v1,
                                   const Vec3& v2);

// Area-weighted triangle choice, uniform barycentric point inside it.
PointSet sample_surface(const TriMesh& mesh, int n, uint64_t seed);

// A point is visible when no triangle is hit closer than
// |point - camera| - 1e-4 * radius along the camera-to-point ray.
int count_visible(const TriMesh& mesh, const PointSet& points, const CameraPose& camera);

struct ViewSelection {
  int yaw = 0;                    // degrees
  std::array<int, 4> counts{};    // per candidate yaw 0, 90, 180, 270
};

inline constexpr std::array<int, 4> kCandidateYaws{0, 90, 180, 270};
inline constexpr int kViewSamplePoints = 5000;

// Evaluates the four yaw candidates at pitch 30 deg, radius 2 on pre-sampled
// points of an already-normalized mesh. Ties go to the lowest yaw.
ViewSelection select_view_with_points(const TriMesh& normalized_mesh, const PointSet& points);

// Normalizes, samples 5000 surface points and selects the best yaw.
ViewSelection select_view(const TriMesh& mesh, uint64_t seed);

// Farthest point sampling. Starts at the point farthest from the centroid,
// then repeatedly adds the point maximizing the distance to the selected set.
// Ties go to the lowest index. Returns indices in selection order.
std::vector<int> fps(const PointSet& points, int k);

}  // namespace gap
