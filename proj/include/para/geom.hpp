#pragma once

#include <optional>
#include <vector>

#include "para/pointcloud.hpp"

namespace para {

// Translation plus yaw about the world up (y) axis. The angle is stored
// unwrapped and applied modulo 2*pi.
struct RigidPose {
    Vec3 t{0, 0, 0};
    double r = 0;
};

// Plane with a unit normal orthogonal to the up axis.
struct SymmetryPlane {
    Vec3 point{0, 0, 0};
    Vec3 normal{1, 0, 0};
};

// rows: points of A; cols: parts (or points); entry (i,j) = distance from
// A_i to item j.
struct DistanceMatrix {
    int64_t rows = 0, cols = 0;
    std::vector<double> d;

    double& at(int64_t i, int64_t j) { return d[static_cast<size_t>(i * cols + j)]; }
    double at(int64_t i, int64_t j) const { return d[static_cast<size_t>(i * cols + j)]; }
};

struct YawObb {
    Vec3 center{0, 0, 0};
    double yaw = 0;  // in [0, pi/2)
    Vec3 extents{0, 0, 0};
};

// Symmetric mean non-squared Chamfer distance:
// (1/|A|) sum_a min_b ||a-b|| + (1/|B|) sum_b min_a ||a-b||.
double chamfer(const PointCloud& a, const PointCloud& b);

// Entry (i,j) = distance from A_i to the closest point of parts[j].
DistanceMatrix pairwise_distances(const PointCloud& a, const std::vector<PointCloud>& parts);

// Rotate by pose.r about +y (counterclockwise viewed from +y), then
// translate by pose.t.
PointCloud apply_pose(const PointCloud& p, const RigidPose& pose);
Vec3 apply_pose(const Vec3& p, const RigidPose& pose);
PointCloud apply_pose_inverse(const PointCloud& p, const RigidPose& pose);

PointCloud reflect_points(const PointCloud& p, const SymmetryPlane& plane);
Vec3 reflect_point(const Vec3& p, const SymmetryPlane& plane);

struct SymmetryConfig {
    int candidates = 16;
    // overlap tolerance as a fraction of the target bbox diagonal; the
    // sparse preset loosens this for sparse clouds
    double tol_frac = 0.02;
    double overlap_frac = 0.9;

    static SymmetryConfig sparse() { return SymmetryConfig{16, 0.05, 0.85}; }
};

// Scan a fan of candidate planes through the centroid with normals in the
// xz plane; return the best plane if its overlap fraction clears the
// threshold. Ties keep the first candidate.
std::optional<SymmetryPlane> detect_symmetry_plane(const PointCloud& t,
                                                   const SymmetryConfig& cfg = {});
std::optional<SymmetryPlane> detect_symmetry_plane(const PointCloud& t, double overlap_tol,
                                                   double overlap_frac, int candidates = 16);

// Labels of the epsilon-graph connected components (edge iff distance
// < tau_cc); label ids ordered by smallest contained point index.
std::vector<int> connected_components(const PointCloud& p, double tau_cc);

// Minimum-area bounding rectangle of the xz projection (rotating calipers
// over the 2D hull) combined with the y extent.
YawObb yaw_obb(const PointCloud& p);

}  // namespace para
