#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace para {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) {
    return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}
inline Vec3 operator-(const Vec3& a, const Vec3& b) {
    return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) {
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline double dist(const Vec3& a, const Vec3& b) { return norm(a - b); }

// Ordered list of 3D points in normalized dataset units.
struct PointCloud {
    std::vector<Vec3> pts;

    PointCloud() = default;
    explicit PointCloud(std::vector<Vec3> p) : pts(std::move(p)) {}

    int64_t size() const { return static_cast<int64_t>(pts.size()); }
    bool empty() const { return pts.empty(); }

    const double* raw() const { return pts.empty() ? nullptr : pts[0].data(); }

    Vec3 centroid() const {
        if (pts.empty()) throw std::invalid_argument("centroid of empty cloud");
        Vec3 c{0, 0, 0};
        for (const auto& p : pts) c = c + p;
        return (1.0 / static_cast<double>(pts.size())) * c;
    }

    void bbox(Vec3& lo, Vec3& hi) const {
        if (pts.empty()) throw std::invalid_argument("bbox of empty cloud");
        lo = hi = pts[0];
        for (const auto& p : pts)
            for (int d = 0; d < 3; ++d) {
                lo[d] = std::min(lo[d], p[d]);
                hi[d] = std::max(hi[d], p[d]);
            }
    }

    double bbox_diagonal() const {
        Vec3 lo, hi;
        bbox(lo, hi);
        return dist(lo, hi);
    }
};

}  // namespace para
