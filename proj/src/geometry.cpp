#include "presem/geometry.hpp"

#include <algorithm>
#include <limits>
#include <string>

namespace presem {

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw std::domain_error("intrinsics: focal lengths must be positive");
  if (width <= 0 || height <= 0) throw std::domain_error("intrinsics: image size must be positive");
  if (!(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height))
    throw std::domain_error("intrinsics: principal point outside the image");
  if (!(depth_scale > 0.0)) throw std::domain_error("intrinsics: depth_scale must be positive");
}

Pose Pose::from_matrix(const Eigen::Matrix4d& m) {
  Pose p;
  p.rotation = m.topLeftCorner<3, 3>();
  p.translation = m.topRightCorner<3, 1>();
  return p;
}

Eigen::Matrix4d Pose::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

void Pose::validate(double tol) const {
  if (!rotation.allFinite() || !translation.allFinite()) throw std::domain_error("pose: non-finite entries");
  const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (ortho > tol) throw std::domain_error("pose: rotation is not orthonormal (error " + std::to_string(ortho) + ")");
  if (std::abs(rotation.determinant() - 1.0) > tol) throw std::domain_error("pose: rotation determinant is not +1");
}

Pose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& world_up) {
  const Eigen::Vector3d forward = (target - eye).normalized();
  Eigen::Vector3d right = forward.cross(-world_up);
  if (right.norm() < 1e-9) right = forward.unitOrthogonal();
  right.normalize();
  const Eigen::Vector3d down = forward.cross(right);
  Pose p;
  p.rotation.col(0) = right;
  p.rotation.col(1) = down;
  p.rotation.col(2) = forward;
  p.translation = eye;
  return p;
}

void Ray::validate() const {
  if (std::abs(direction.norm() - 1.0) > 1e-9) throw std::domain_error("ray: direction is not unit length");
  if (!(near >= 0.0 && near < far)) throw std::domain_error("ray: require 0 <= near < far");
}

Ray pixel_to_ray(const CameraIntrinsics& intr, const Pose& pose, double px, double py, double near, double far) {
  if (!(px >= 0.0 && px < intr.width && py >= 0.0 && py < intr.height))
    throw std::domain_error("pixel_to_ray: pixel (" + std::to_string(px) + ", " + std::to_string(py) +
                            ") outside the image");
  const Eigen::Vector3d d_cam((px - intr.cx) / intr.fx, (py - intr.cy) / intr.fy, 1.0);
  Ray r;
  r.origin = pose.translation;
  r.direction = (pose.rotation * d_cam).normalized();
  r.near = near;
  r.far = far;
  return r;
}

Eigen::Vector3d project(const CameraIntrinsics& intr, const Pose& pose, const Eigen::Vector3d& p_world) {
  const Eigen::Vector3d p = pose.to_camera(p_world);
  return {intr.fx * p.x() / p.z() + intr.cx, intr.fy * p.y() / p.z() + intr.cy, p.z()};
}

std::optional<Ray> clip_to_box(const Ray& ray, const Aabb& box, double min_near) {
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double d = ray.direction[a];
    if (std::abs(d) < 1e-15) {
      if (ray.origin[a] < box.min[a] || ray.origin[a] > box.max[a]) return std::nullopt;
      continue;
    }
    double ta = (box.min[a] - ray.origin[a]) / d;
    double tb = (box.max[a] - ray.origin[a]) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  Ray out = ray;
  out.near = std::max({t0, ray.near, min_near});
  out.far = std::min(t1, ray.far);
  if (!(out.near < out.far)) return std::nullopt;
  return out;
}

std::vector<double> stratified_samples(const Ray& ray, int n, std::mt19937_64& rng, bool jitter) {
  if (n < 1) throw std::domain_error("stratified_samples: need at least one sample");
  const double width = (ray.far - ray.near) / n;
  std::vector<double> z(static_cast<std::size_t>(n));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    const double offset = jitter ? u(rng) : 0.5;
    z[static_cast<std::size_t>(i)] = ray.near + (i + offset) * width;
  }
  return z;
}

std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  // splitmix64 over a combined key
  std::uint64_t x = seed ^ (stream * 0x9E3779B97F4A7C15ULL) ^ (index * 0xD1B54A32D192ED03ULL);
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace presem
