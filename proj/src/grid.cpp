#include "presem/grid.hpp"

namespace presem {

LevelSpec make_level_spec(const Aabb& bounds, double voxel_size) {
  LevelSpec s;
  s.voxel_size = voxel_size;
  const Eigen::Vector3d ext = bounds.extent();
  for (int a = 0; a < 3; ++a) {
    // relative slack keeps exact multiples (2.4 / 0.24) from gaining a node to rounding
    const double cells = std::ceil(ext[a] / voxel_size * (1.0 - 1e-12));
    s.dims[static_cast<std::size_t>(a)] = static_cast<int>(cells) + 1;
    if (voxel_size >= ext[a]) s.collapsed = true;
  }
  return s;
}

}  // namespace presem
