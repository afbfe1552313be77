#include "mmsurv/volume.hpp"

#include <bit>
#include <fstream>

#include <json.hpp>

namespace mmsurv {

static_assert(std::endian::native == std::endian::little,
              "volume blobs are little-endian; big-endian hosts are unsupported");

Volume3D load_volume(const std::filesystem::path& path) {
  std::ifstream jf(path);
  if (!jf) throw DataError("volume descriptor not found: " + path.string());
  nlohmann::json j;
  try {
    jf >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("volume descriptor " + path.string() + " is not valid JSON: " + e.what());
  }
  if (j.value("dtype", "") != "f32le")
    throw DataError("volume " + path.string() + ": unsupported dtype '" +
                    j.value("dtype", "<missing>") + "' (expected f32le)");
  const auto dims_j = j.at("dims");
  if (!dims_j.is_array() || dims_j.size() != 3)
    throw DataError("volume " + path.string() + ": dims must be [D,H,W]");
  Volume3D v;
  for (int i = 0; i < 3; ++i) {
    v.dims[static_cast<size_t>(i)] = dims_j[static_cast<size_t>(i)].get<int64_t>();
    if (v.dims[static_cast<size_t>(i)] < 1)
      throw DataError("volume " + path.string() + ": dims must be positive");
  }
  const std::string blob_name = j.value("data", "");
  if (blob_name.empty()) throw DataError("volume " + path.string() + ": missing data entry");
  const auto blob_path = path.parent_path() / blob_name;

  std::ifstream bf(blob_path, std::ios::binary | std::ios::ate);
  if (!bf) throw DataError("volume blob not found: " + blob_path.string());
  const auto size = static_cast<int64_t>(bf.tellg());
  const int64_t expected = v.numel() * static_cast<int64_t>(sizeof(float));
  if (size != expected)
    throw DataError("volume " + path.string() + ": blob size " + std::to_string(size) +
                    " does not match dims (expected " + std::to_string(expected) + " bytes)");
  bf.seekg(0);
  v.voxels.resize(static_cast<size_t>(v.numel()));
  bf.read(reinterpret_cast<char*>(v.voxels.data()), expected);
  if (!bf) throw DataError("volume " + path.string() + ": short read on blob");
  return v;
}

void save_volume(const Volume3D& vol, const std::filesystem::path& path) {
  if (vol.numel() <= 0 || static_cast<int64_t>(vol.voxels.size()) != vol.numel())
    throw DataError("save_volume: inconsistent volume");
  auto blob_path = path;
  blob_path.replace_extension(".raw");

  nlohmann::ordered_json j;
  j["dims"] = {vol.dims[0], vol.dims[1], vol.dims[2]};
  j["dtype"] = "f32le";
  j["layout"] = "row-major, W fastest";
  j["data"] = blob_path.filename().string();

  std::ofstream jf(path);
  if (!jf) throw DataError("save_volume: cannot write " + path.string());
  jf << j.dump(2) << "\n";
  jf.close();

  std::ofstream bf(blob_path, std::ios::binary);
  if (!bf) throw DataError("save_volume: cannot write " + blob_path.string());
  bf.write(reinterpret_cast<const char*>(vol.voxels.data()),
           vol.numel() * static_cast<int64_t>(sizeof(float)));
  if (!bf) throw DataError("save_volume: short write on " + blob_path.string());
}

}  // namespace mmsurv
