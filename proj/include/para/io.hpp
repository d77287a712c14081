#pragma once

#include <string>

#include "para/mesh.hpp"
#include "para/pointcloud.hpp"

namespace para {

// PLY point clouds, ASCII or binary little-endian; only the vertex x/y/z
// properties are read, extra properties are skipped.
PointCloud load_ply(const std::string& path);
void save_ply(const PointCloud& c, const std::string& path, bool binary = false);

// Raw cloud: 8-byte magic "PARAPC01", u32 version, i64 count, f32 xyz triples.
PointCloud load_raw(const std::string& path);
void save_raw(const PointCloud& c, const std::string& path);

// Dispatch by extension: .ply, .pc (raw), .obj (mesh surface is NOT sampled
// here; callers sample interiors themselves via mesh.hpp).
bool is_mesh_path(const std::string& path);
PointCloud load_cloud(const std::string& path);

}  // namespace para
