#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "mmsurv/common.hpp"

namespace mmsurv {

/// Dense voxel grid, row-major with W the fastest axis.
struct Volume3D {
  std::array<int64_t, 3> dims{0, 0, 0};  // depth, height, width
  std::vector<float> voxels;

  static Volume3D zeros(std::array<int64_t, 3> dims) {
    Volume3D v;
    v.dims = dims;
    v.voxels.assign(static_cast<size_t>(dims[0] * dims[1] * dims[2]), 0.0f);
    return v;
  }
  int64_t numel() const { return dims[0] * dims[1] * dims[2]; }
  float& at(int64_t d, int64_t h, int64_t w) {
    return voxels[static_cast<size_t>((d * dims[1] + h) * dims[2] + w)];
  }
  float at(int64_t d, int64_t h, int64_t w) const {
    return voxels[static_cast<size_t>((d * dims[1] + h) * dims[2] + w)];
  }
};

/// On-disk format: a JSON descriptor (dims, dtype, layout, blob filename)
/// next to a raw little-endian float32 blob. `path` names the descriptor.
Volume3D load_volume(const std::filesystem::path& path);

/// Writes `path` (descriptor) and the sibling blob, replacing the
/// descriptor extension with ".raw". Round-trips bit-exactly.
void save_volume(const Volume3D& vol, const std::filesystem::path& path);

}  // namespace mmsurv
