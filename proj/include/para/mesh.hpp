#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "para/pointcloud.hpp"
#include "para/rng.hpp"

namespace para {

struct TriMesh {
    std::vector<Vec3> verts;
    std::vector<std::array<int32_t, 3>> tris;
};

// Parity test along +x with deterministic perturbation on degenerate hits.
bool point_in_mesh(const TriMesh& mesh, const Vec3& p);

// n points uniform in the interior of a watertight mesh via rejection
// sampling in the bounding box. Errors out when the acceptance rate of a
// probe round drops below 1e-4 (likely a non-watertight mesh).
PointCloud sample_mesh_interior(const TriMesh& mesh, int64_t n, Rng& rng);

// Area-weighted uniform sampling of the mesh surface.
PointCloud sample_mesh_surface(const TriMesh& mesh, int64_t n, Rng& rng);

TriMesh load_obj(const std::string& path);

}  // namespace para
