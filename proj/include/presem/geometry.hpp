#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace presem {

template <typename Scalar>
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;

template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Mat3X = Eigen::Matrix<Scalar, 3, Eigen::Dynamic>;

inline constexpr double kPi = 3.14159265358979323846;

/// Pinhole intrinsics. Pixel (i, j) has its center at continuous coordinate (i, j).
struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;
  double depth_scale = 1000.0;  // integer depth units per meter

  void validate() const;
};

/// Rigid camera-to-world transform.
struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose from_matrix(const Eigen::Matrix4d& m);
  Eigen::Matrix4d matrix() const;
  void validate(double tol = 1e-6) const;

  Eigen::Vector3d to_world(const Eigen::Vector3d& p_cam) const { return rotation * p_cam + translation; }
  Eigen::Vector3d to_camera(const Eigen::Vector3d& p_world) const {
    return rotation.transpose() * (p_world - translation);
  }
};

/// Camera-to-world pose looking from `eye` toward `target`; camera +z is the viewing
/// direction and +y points down in the image.
Pose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
             const Eigen::Vector3d& world_up = Eigen::Vector3d::UnitY());

struct Aabb {
  Eigen::Vector3d min = Eigen::Vector3d::Zero();
  Eigen::Vector3d max = Eigen::Vector3d::Ones();

  Eigen::Vector3d extent() const { return max - min; }
  Eigen::Vector3d center() const { return 0.5 * (min + max); }
  bool contains(const Eigen::Vector3d& p, double slack = 0.0) const {
    return (p.array() >= min.array() - slack).all() && (p.array() <= max.array() + slack).all();
  }
  Aabb expanded(double margin) const {
    return {min.array() - margin, max.array() + margin};
  }
};

struct Ray {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d direction = Eigen::Vector3d::UnitZ();
  double near = 0.0;
  double far = 1.0;

  Eigen::Vector3d at(double t) const { return origin + t * direction; }
  void validate() const;
};

/// Ray through pixel (px, py) in world coordinates.
Ray pixel_to_ray(const CameraIntrinsics& intr, const Pose& pose, double px, double py,
                 double near = 0.0, double far = 10.0);

/// Projects a world point; returns (px, py, z_camera).
Eigen::Vector3d project(const CameraIntrinsics& intr, const Pose& pose, const Eigen::Vector3d& p_world);

/// Restricts [near, far] to the box; nullopt when the ray misses it.
std::optional<Ray> clip_to_box(const Ray& ray, const Aabb& box, double min_near = 0.0);

/// Size of the encoding produced by positional_encode.
constexpr int encoding_size(int octaves, bool include_raw = true) {
  return (include_raw ? 3 : 0) + 6 * octaves;
}

/// Frequency encoding [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x)],
/// each sin/cos applied coordinate-wise. Writes into `out` (length encoding_size).
template <typename Derived, typename OutDerived>
void positional_encode_into(const Eigen::MatrixBase<Derived>& x, int octaves, bool include_raw,
                            Eigen::MatrixBase<OutDerived> const& out_) {
  auto& out = const_cast<Eigen::MatrixBase<OutDerived>&>(out_);
  using Scalar = typename Derived::Scalar;
  int k = 0;
  if (include_raw) {
    for (int d = 0; d < 3; ++d) out(k++) = x(d);
  }
  Scalar freq = static_cast<Scalar>(kPi);
  for (int l = 0; l < octaves; ++l) {
    for (int d = 0; d < 3; ++d) {
      const Scalar a = freq * x(d);
      out(k++) = std::sin(a);
      out(k++) = std::cos(a);
    }
    freq *= Scalar(2);
  }
}

template <typename Scalar>
struct EncodedPoint {
  Vec3<Scalar> raw;
  VecX<Scalar> encoding;
};

template <typename Scalar>
EncodedPoint<Scalar> positional_encode(const Vec3<Scalar>& x, int octaves, bool include_raw = true) {
  if (octaves < 0) throw std::domain_error("positional_encode: negative octave count");
  EncodedPoint<Scalar> e{x, VecX<Scalar>(encoding_size(octaves, include_raw))};
  positional_encode_into(x, octaves, include_raw, e.encoding);
  return e;
}

/// Column-wise encoding of a 3xN block.
template <typename Scalar>
MatX<Scalar> positional_encode_batch(const Mat3X<Scalar>& xs, int octaves, bool include_raw = true) {
  MatX<Scalar> out(encoding_size(octaves, include_raw), xs.cols());
  for (Eigen::Index c = 0; c < xs.cols(); ++c) positional_encode_into(xs.col(c), octaves, include_raw, out.col(c));
  return out;
}

/// n depths, one per equal-width bin of [near, far]. With jitter off the bin midpoints are
/// returned and the generator is untouched.
std::vector<double> stratified_samples(const Ray& ray, int n, std::mt19937_64& rng, bool jitter = true);

/// Deterministic child seed; used to give every ray its own stream independent of
/// processing order.
std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

}  // namespace presem
