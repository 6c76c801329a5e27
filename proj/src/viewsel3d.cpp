#include "gap/viewsel3d.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

namespace gap {

namespace {
double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
constexpr double kMinArea = 1e-12;
}  // namespace

double TriMesh::area(int tri) const {
  return 0.5 * (corner(tri, 1) - corner(tri, 0)).cross(corner(tri, 2) - corner(tri, 0)).norm();
}

TriMesh clean_mesh(TriMesh mesh) {
  const int nv = static_cast<int>(mesh.vertices.size());
  std::vector<std::array<int, 3>> kept;
  for (const auto& t : mesh.triangles) {
    for (int idx : t)
      if (idx < 0 || idx >= nv) throw Error(ErrorKind::FormatError, "triangle index out of range");
    const Vec3 e1 = mesh.vertices[t[1]] - mesh.vertices[t[0]];
    const Vec3 e2 = mesh.vertices[t[2]] - mesh.vertices[t[0]];
    if (0.5 * e1.cross(e2).norm() > kMinArea) kept.push_back(t);
  }
  mesh.triangles = std::move(kept);
  if (mesh.triangles.empty()) throw Error(ErrorKind::EmptyMesh, "mesh has no non-degenerate triangles");
  return mesh;
}

TriMesh load_obj(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  TriMesh mesh;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag)) continue;
    if (tag == "v") {
      Vec3 v;
      if (!(ss >> v.x() >> v.y() >> v.z()))
        throw Error(ErrorKind::FormatError, "bad vertex at line " + std::to_string(lineno));
      mesh.vertices.push_back(v);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ss >> tok) {
        const auto slash = tok.find('/');
        int i = 0;
        try {
          i = std::stoi(tok.substr(0, slash));
        } catch (const std::exception&) {
          throw Error(ErrorKind::FormatError, "bad face index at line " + std::to_string(lineno));
        }
        if (i == 0) throw Error(ErrorKind::FormatError, "zero face index at line " + std::to_string(lineno));
        idx.push_back(i > 0 ? i - 1 : static_cast<int>(mesh.vertices.size()) + i);
      }
      if (idx.size() != 3)
        throw Error(ErrorKind::FormatError, "non-triangular face at line " + std::to_string(lineno));
      mesh.triangles.push_back({idx[0], idx[1], idx[2]});
    }
  }
  return clean_mesh(std::move(mesh));
}

TriMesh normalize_unit_sphere(TriMesh mesh) {
  if (mesh.vertices.empty()) throw Error(ErrorKind::EmptyMesh, "mesh has no vertices");
  Vec3 lo = mesh.vertices.front(), hi = mesh.vertices.front();
  for (const auto& v : mesh.vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  const Vec3 center = 0.5 * (lo + hi);
  double r = 0;
  for (const auto& v : mesh.vertices) r = std::max(r, (v - center).norm());
  if (r <= 0) throw Error(ErrorKind::EmptyMesh, "mesh has zero extent");
  for (auto& v : mesh.vertices) v = (v - center) / r;
  return mesh;
}

void CameraPose::check() const {
  if (!(radius > 0)) throw Error(ErrorKind::InvalidArgument, "camera radius must be positive");
  if (!(fov_deg > 0 && fov_deg < 180)) throw Error(ErrorKind::InvalidArgument, "fov must lie in (0, 180)");
}

Vec3 camera_position(const CameraPose& pose) {
  pose.check();
  const double yaw = deg2rad(pose.yaw_deg);
  const double pitch = deg2rad(pose.pitch_deg);
  return {pose.radius * std::cos(pitch) * std::cos(yaw), pose.radius * std::cos(pitch) * std::sin(yaw),
          pose.radius * std::sin(pitch)};
}

std::optional<double> ray_triangle(const Vec3& origin, const Vec3& dir, const Vec3& v0, const Vec3& v1,
                                   const Vec3& v2) {
  const Vec3 e1 = v1 - v0;
  const Vec3 e2 = v2 - v0;
  const Vec3 p = dir.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < kRayEps) return std::nullopt;
  const double inv = 1.0 / det;
  const Vec3 s = origin - v0;
  const double u = s.dot(p) * inv;
  if (u < 0.0 || u > 1.0) return std::nullopt;
  const Vec3 q = s.cross(e1);
  const double v = dir.dot(q) * inv;
  if (v < 0.0 || u + v > 1.0) return std::nullopt;
  const double t = e2.dot(q) * inv;
  if (t < kRayEps) return std::nullopt;
  return t;
}

PointSet sample_surface(const TriMesh& mesh, int n, uint64_t seed) {
  if (mesh.triangles.empty()) throw Error(ErrorKind::EmptyMesh, "cannot sample an empty mesh");
  if (n < 0) throw Error(ErrorKind::InvalidArgument, "negative sample count");
  std::vector<double> areas(mesh.triangles.size());
  for (size_t i = 0; i < areas.size(); ++i) areas[i] = mesh.area(static_cast<int>(i));
  std::discrete_distribution<int> pick(areas.begin(), areas.end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Rng rng(splitmix64(seed));
  PointSet out;
  out.reserve(n);
  for (int k = 0; k < n; ++k) {
    const int tri = pick(rng);
    const double r1 = unit(rng);
    const double r2 = unit(rng);
    const double u = 1.0 - std::sqrt(r1);
    const double v = std::sqrt(r1) * r2;
    out.push_back(u * mesh.corner(tri, 0) + (1.0 - u - v) * mesh.corner(tri, 1) + v * mesh.corner(tri, 2));
  }
  return out;
}

int count_visible(const TriMesh& mesh, const PointSet& points, const CameraPose& camera) {
  if (mesh.triangles.empty()) throw Error(ErrorKind::EmptyMesh, "cannot ray cast an empty mesh");
  const Vec3 cam = camera_position(camera);
  const double eps_vis = 1e-4 * camera.radius;
  int visible = 0;
  for (const auto& p : points) {
    const Vec3 delta = p - cam;
    const double dist = delta.norm();
    if (dist == 0.0) {
      ++visible;
      continue;
    }
    const Vec3 dir = delta / dist;
    bool occluded = false;
    for (int t = 0; t < static_cast<int>(mesh.triangles.size()) && !occluded; ++t) {
      const auto hit = ray_triangle(cam, dir, mesh.corner(t, 0), mesh.corner(t, 1), mesh.corner(t, 2));
      occluded = hit && *hit < dist - eps_vis;
    }
    if (!occluded) ++visible;
  }
  return visible;
}

ViewSelection select_view_with_points(const TriMesh& normalized_mesh, const PointSet& points) {
  if (points.empty()) throw Error(ErrorKind::InvalidArgument, "no sample points");
  ViewSelection sel;
  int best = -1;
  for (size_t k = 0; k < kCandidateYaws.size(); ++k) {
    CameraPose pose;
    pose.yaw_deg = kCandidateYaws[k];
    sel.counts[k] = count_visible(normalized_mesh, points, pose);
    if (sel.counts[k] > best) {
      best = sel.counts[k];
      sel.yaw = kCandidateYaws[k];
    }
  }
  return sel;
}

ViewSelection select_view(const TriMesh& mesh, uint64_t seed) {
  const TriMesh norm = normalize_unit_sphere(clean_mesh(mesh));
  return select_view_with_points(norm, sample_surface(norm, kViewSamplePoints, seed));
}

std::vector<int> fps(const PointSet& points, int k) {
  const int n = static_cast<int>(points.size());
  if (k < 1 || k > n) throw Error(ErrorKind::RangeError, "fps needs 1 <= k <= number of points");
  Vec3 centroid = Vec3::Zero();
  for (const auto& p : points) centroid += p;
  centroid /= n;

  auto argmax = [n](const std::vector<double>& v) {
    int best = 0;
    for (int i = 1; i < n; ++i)
      if (v[i] > v[best]) best = i;
    return best;
  };
  std::vector<double> dist(n);
  for (int i = 0; i < n; ++i) dist[i] = (points[i] - centroid).squaredNorm();

  std::vector<int> chosen{argmax(dist)};
  std::vector<double> mind(n, std::numeric_limits<double>::infinity());
  while (static_cast<int>(chosen.size()) < k) {
    const Vec3& last = points[chosen.back()];
    for (int i = 0; i < n; ++i) mind[i] = std::min(mind[i], (points[i] - last).squaredNorm());
    mind[chosen.back()] = -1.0;  // stays below any distance, so never re-selected
    chosen.push_back(argmax(mind));
  }
  return chosen;
}

}  // namespace gap
