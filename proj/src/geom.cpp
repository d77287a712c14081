#include "para/geom.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <stdexcept>

#include "para/nn.hpp"

namespace para {

double chamfer(const PointCloud& a, const PointCloud& b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("chamfer: empty point cloud");
    auto half = [](const PointCloud& x, const PointCloud& y) {
        double acc = 0;
        if (x.size() * y.size() > 16384 && y.size() > 64) {
            NnGrid grid(y.raw(), y.size());
            for (const auto& p : x.pts) {
                double d2;
                grid.nearest(p.data(), &d2);
                acc += std::sqrt(d2);
            }
        } else {
            for (const auto& p : x.pts) {
                double best = std::numeric_limits<double>::infinity();
                for (const auto& q : y.pts) best = std::min(best, dot(p - q, p - q));
                acc += std::sqrt(best);
            }
        }
        return acc / static_cast<double>(x.size());
    };
    return half(a, b) + half(b, a);
}

DistanceMatrix pairwise_distances(const PointCloud& a, const std::vector<PointCloud>& parts) {
    if (a.empty() || parts.empty())
        throw std::invalid_argument("pairwise_distances: empty input");
    DistanceMatrix m;
    m.rows = a.size();
    m.cols = static_cast<int64_t>(parts.size());
    m.d.assign(static_cast<size_t>(m.rows * m.cols), 0.0);
    for (int64_t j = 0; j < m.cols; ++j) {
        const PointCloud& part = parts[static_cast<size_t>(j)];
        if (part.empty()) throw std::invalid_argument("pairwise_distances: empty part");
        NnGrid grid(part.raw(), part.size());
        for (int64_t i = 0; i < m.rows; ++i) {
            double d2;
            grid.nearest(a.pts[static_cast<size_t>(i)].data(), &d2);
            m.at(i, j) = std::sqrt(d2);
        }
    }
    return m;
}

Vec3 apply_pose(const Vec3& p, const RigidPose& pose) {
    double c = std::cos(pose.r), s = std::sin(pose.r);
    return {c * p[0] + s * p[2] + pose.t[0], p[1] + pose.t[1],
            -s * p[0] + c * p[2] + pose.t[2]};
}

PointCloud apply_pose(const PointCloud& p, const RigidPose& pose) {
    PointCloud out;
    out.pts.reserve(p.pts.size());
    for (const auto& q : p.pts) out.pts.push_back(apply_pose(q, pose));
    return out;
}

PointCloud apply_pose_inverse(const PointCloud& p, const RigidPose& pose) {
    RigidPose untranslate{{-pose.t[0], -pose.t[1], -pose.t[2]}, 0};
    RigidPose unrotate{{0, 0, 0}, -pose.r};
    return apply_pose(apply_pose(p, untranslate), unrotate);
}

Vec3 reflect_point(const Vec3& p, const SymmetryPlane& plane) {
    Vec3 d = p - plane.point;
    double proj = dot(d, plane.normal);
    return p - (2.0 * proj) * plane.normal;
}

PointCloud reflect_points(const PointCloud& p, const SymmetryPlane& plane) {
    PointCloud out;
    out.pts.reserve(p.pts.size());
    for (const auto& q : p.pts) out.pts.push_back(reflect_point(q, plane));
    return out;
}

std::optional<SymmetryPlane> detect_symmetry_plane(const PointCloud& t, double overlap_tol,
                                                   double overlap_frac, int candidates) {
    if (t.empty()) throw std::invalid_argument("detect_symmetry_plane: empty cloud");
    Vec3 c = t.centroid();
    NnGrid grid(t.raw(), t.size());
    double best_frac = -1.0;
    SymmetryPlane best;
    for (int i = 0; i < candidates; ++i) {
        double theta = M_PI * static_cast<double>(i) / static_cast<double>(candidates);
        SymmetryPlane plane{c, {std::cos(theta), 0.0, std::sin(theta)}};
        int64_t hits = 0;
        for (const auto& p : t.pts) {
            Vec3 r = reflect_point(p, plane);
            double d2;
            grid.nearest(r.data(), &d2);
            if (std::sqrt(d2) <= overlap_tol) ++hits;
        }
        double frac = static_cast<double>(hits) / static_cast<double>(t.size());
        if (frac > best_frac) {
            best_frac = frac;
            best = plane;
        }
    }
    if (best_frac >= overlap_frac) return best;
    return std::nullopt;
}

std::optional<SymmetryPlane> detect_symmetry_plane(const PointCloud& t,
                                                   const SymmetryConfig& cfg) {
    double tol = cfg.tol_frac * t.bbox_diagonal();
    return detect_symmetry_plane(t, tol, cfg.overlap_frac, cfg.candidates);
}

std::vector<int> connected_components(const PointCloud& p, double tau_cc) {
    if (tau_cc <= 0) throw std::invalid_argument("connected_components: tau_cc must be > 0");
    int64_t n = p.size();
    std::vector<int> label(static_cast<size_t>(n), -1);
    if (n == 0) return label;

    // bucket points into cells of edge tau_cc; neighbors live in the 27
    // adjacent cells
    Vec3 lo, hi;
    p.bbox(lo, hi);
    auto cell_of = [&](const Vec3& q, int64_t* c) {
        for (int d = 0; d < 3; ++d)
            c[d] = static_cast<int64_t>(std::floor((q[d] - lo[d]) / tau_cc));
    };
    int64_t dims[3];
    {
        int64_t chi[3];
        cell_of(hi, chi);
        for (int d = 0; d < 3; ++d) dims[d] = chi[d] + 1;
    }
    std::unordered_map<int64_t, std::vector<int32_t>> cells;
    auto key = [&](const int64_t* c) { return (c[0] * dims[1] + c[1]) * dims[2] + c[2]; };
    for (int64_t i = 0; i < n; ++i) {
        int64_t c[3];
        cell_of(p.pts[static_cast<size_t>(i)], c);
        cells[key(c)].push_back(static_cast<int32_t>(i));
    }

    double tau2 = tau_cc * tau_cc;
    int next = 0;
    std::queue<int64_t> q;
    for (int64_t s = 0; s < n; ++s) {
        if (label[static_cast<size_t>(s)] >= 0) continue;
        int lab = next++;
        label[static_cast<size_t>(s)] = lab;
        q.push(s);
        while (!q.empty()) {
            int64_t i = q.front();
            q.pop();
            const Vec3& pi = p.pts[static_cast<size_t>(i)];
            int64_t c[3];
            cell_of(pi, c);
            for (int64_t dx = -1; dx <= 1; ++dx)
                for (int64_t dy = -1; dy <= 1; ++dy)
                    for (int64_t dz = -1; dz <= 1; ++dz) {
                        int64_t nc[3] = {c[0] + dx, c[1] + dy, c[2] + dz};
                        auto it = cells.find(key(nc));
                        if (it == cells.end()) continue;
                        for (int32_t j : it->second) {
                            if (label[static_cast<size_t>(j)] >= 0) continue;
                            Vec3 d = pi - p.pts[static_cast<size_t>(j)];
                            if (dot(d, d) < tau2) {
                                label[static_cast<size_t>(j)] = lab;
                                q.push(j);
                            }
                        }
                    }
        }
    }
    return label;
}

namespace {

struct P2 {
    double u, v;
};

// Andrew monotone chain; returns hull in counterclockwise order.
std::vector<P2> convex_hull(std::vector<P2> pts) {
    std::sort(pts.begin(), pts.end(), [](const P2& a, const P2& b) {
        return a.u < b.u || (a.u == b.u && a.v < b.v);
    });
    pts.erase(std::unique(pts.begin(), pts.end(),
                          [](const P2& a, const P2& b) { return a.u == b.u && a.v == b.v; }),
              pts.end());
    auto cross = [](const P2& o, const P2& a, const P2& b) {
        return (a.u - o.u) * (b.v - o.v) - (a.v - o.v) * (b.u - o.u);
    };
    int64_t n = static_cast<int64_t>(pts.size());
    if (n <= 2) return pts;
    std::vector<P2> h(static_cast<size_t>(2 * n));
    int64_t k = 0;
    for (int64_t i = 0; i < n; ++i) {
        while (k >= 2 && cross(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
        h[k++] = pts[i];
    }
    int64_t lower = k + 1;
    for (int64_t i = n - 2; i >= 0; --i) {
        while (k >= lower && cross(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
        h[k++] = pts[i];
    }
    h.resize(static_cast<size_t>(k - 1));
    return h;
}

double norm_yaw(double phi) {
    double y = std::fmod(phi, M_PI / 2);
    if (y < 0) y += M_PI / 2;
    if (y >= M_PI / 2 - 1e-15) y = 0;
    return y;
}

}  // namespace

YawObb yaw_obb(const PointCloud& p) {
    if (p.empty()) throw std::invalid_argument("yaw_obb: empty cloud");
    double ylo = p.pts[0][1], yhi = p.pts[0][1];
    std::vector<P2> proj;
    proj.reserve(p.pts.size());
    for (const auto& q : p.pts) {
        ylo = std::min(ylo, q[1]);
        yhi = std::max(yhi, q[1]);
        proj.push_back({q[0], q[2]});
    }
    std::vector<P2> hull = convex_hull(proj);

    YawObb box;
    auto extent_at = [&](double phi, double& wu, double& wv, double& cu, double& cv) {
        double c = std::cos(phi), s = std::sin(phi);
        double ulo = 1e300, uhi = -1e300, vlo = 1e300, vhi = -1e300;
        for (const auto& q : hull) {
            double u = c * q.u + s * q.v;
            double v = -s * q.u + c * q.v;
            ulo = std::min(ulo, u);
            uhi = std::max(uhi, u);
            vlo = std::min(vlo, v);
            vhi = std::max(vhi, v);
        }
        wu = uhi - ulo;
        wv = vhi - vlo;
        double mu = 0.5 * (ulo + uhi), mv = 0.5 * (vlo + vhi);
        cu = c * mu - s * mv;
        cv = s * mu + c * mv;
    };

    if (hull.size() == 1) {
        box.center = {hull[0].u, 0.5 * (ylo + yhi), hull[0].v};
        box.yaw = 0;
        box.extents = {0, yhi - ylo, 0};
        return box;
    }

    double best_area = std::numeric_limits<double>::infinity();
    double best_yaw = 0;
    size_t m = hull.size();
    size_t nedges = (m == 2) ? 1 : m;
    for (size_t i = 0; i < nedges; ++i) {
        const P2& a = hull[i];
        const P2& b = hull[(i + 1) % m];
        double phi = norm_yaw(std::atan2(b.v - a.v, b.u - a.u));
        double wu, wv, cu, cv;
        extent_at(phi, wu, wv, cu, cv);
        double area = wu * wv;
        double tol = 1e-12 * (1.0 + area);
        if (area < best_area - tol) {
            best_area = area;
            best_yaw = phi;
        } else if (area <= best_area + tol && phi < best_yaw) {
            best_yaw = phi;
        }
    }
    double wu, wv, cu, cv;
    extent_at(best_yaw, wu, wv, cu, cv);
    box.yaw = best_yaw;
    box.center = {cu, 0.5 * (ylo + yhi), cv};
    box.extents = {wu, yhi - ylo, wv};
    return box;
}

}  // namespace para
