#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <unordered_map>
#include <vector>

namespace para {

// Exact nearest neighbor over a fixed 3D point set via a uniform grid with
// expanding ring search. Results are identical to a brute-force scan,
// including the tie-break: among equidistant points the lowest index wins.
class NnGrid {
  public:
    NnGrid() = default;

    // points: n x 3 row-major
    NnGrid(const double* pts, int64_t n) : pts_(pts), n_(n) {
        for (int d = 0; d < 3; ++d) {
            lo_[d] = std::numeric_limits<double>::infinity();
            hi_[d] = -std::numeric_limits<double>::infinity();
        }
        for (int64_t i = 0; i < n; ++i)
            for (int d = 0; d < 3; ++d) {
                lo_[d] = std::min(lo_[d], pts[3 * i + d]);
                hi_[d] = std::max(hi_[d], pts[3 * i + d]);
            }
        double ext = 0.0;
        for (int d = 0; d < 3; ++d) ext = std::max(ext, hi_[d] - lo_[d]);
        int64_t k = std::max<int64_t>(1, static_cast<int64_t>(std::cbrt(static_cast<double>(n))));
        h_ = std::max(ext / static_cast<double>(k), 1e-12);
        for (int d = 0; d < 3; ++d)
            dims_[d] = static_cast<int64_t>(std::floor((hi_[d] - lo_[d]) / h_)) + 1;
        cells_.reserve(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i)
            cells_[key(coord_of(&pts[3 * i]))].push_back(static_cast<int32_t>(i));
    }

    int64_t size() const { return n_; }

    // Index of the nearest point to q, with squared distance in d2_out.
    int64_t nearest(const double* q, double* d2_out = nullptr) const {
        int64_t best = -1;
        double best_d2 = std::numeric_limits<double>::infinity();
        if (n_ <= 64) {
            scan_range(q, 0, n_, best, best_d2);
        } else {
            int64_t c[3];
            raw_coord_of(q, c);
            int64_t max_ring = 0;
            for (int d = 0; d < 3; ++d)
                max_ring = std::max({max_ring, c[d] + 1, dims_[d] - c[d]});
            for (int64_t s = 0; s <= max_ring; ++s) {
                if (best >= 0 && s > 0) {
                    double ring_lb = static_cast<double>(s - 1) * h_;
                    if (ring_lb * ring_lb > best_d2) break;
                }
                scan_ring(q, c, s, best, best_d2);
            }
        }
        if (d2_out) *d2_out = best_d2;
        return best;
    }

  private:
    struct Coord {
        int64_t x, y, z;
    };

    Coord coord_of(const double* p) const {
        Coord c;
        c.x = clampc(static_cast<int64_t>(std::floor((p[0] - lo_[0]) / h_)), dims_[0]);
        c.y = clampc(static_cast<int64_t>(std::floor((p[1] - lo_[1]) / h_)), dims_[1]);
        c.z = clampc(static_cast<int64_t>(std::floor((p[2] - lo_[2]) / h_)), dims_[2]);
        return c;
    }

    void raw_coord_of(const double* p, int64_t* c) const {
        for (int d = 0; d < 3; ++d)
            c[d] = static_cast<int64_t>(std::floor((p[d] - lo_[d]) / h_));
    }

    static int64_t clampc(int64_t v, int64_t n) { return std::clamp<int64_t>(v, 0, n - 1); }

    int64_t key(Coord c) const { return (c.x * dims_[1] + c.y) * dims_[2] + c.z; }

    void scan_cell(const double* q, Coord c, int64_t& best, double& best_d2) const {
        auto it = cells_.find(key(c));
        if (it == cells_.end()) return;
        for (int32_t i : it->second) {
            const double* p = &pts_[3 * i];
            double dx = q[0] - p[0], dy = q[1] - p[1], dz = q[2] - p[2];
            double d2 = dx * dx + dy * dy + dz * dz;
            if (d2 < best_d2 || (d2 == best_d2 && i < best)) {
                best_d2 = d2;
                best = i;
            }
        }
    }

    void scan_range(const double* q, int64_t b, int64_t e, int64_t& best, double& best_d2) const {
        for (int64_t i = b; i < e; ++i) {
            const double* p = &pts_[3 * i];
            double dx = q[0] - p[0], dy = q[1] - p[1], dz = q[2] - p[2];
            double d2 = dx * dx + dy * dy + dz * dz;
            if (d2 < best_d2) {
                best_d2 = d2;
                best = i;
            }
        }
    }

    void scan_ring(const double* q, const int64_t* c, int64_t s, int64_t& best,
                   double& best_d2) const {
        int64_t x0 = std::max<int64_t>(c[0] - s, 0), x1 = std::min(c[0] + s, dims_[0] - 1);
        int64_t y0 = std::max<int64_t>(c[1] - s, 0), y1 = std::min(c[1] + s, dims_[1] - 1);
        int64_t z0 = std::max<int64_t>(c[2] - s, 0), z1 = std::min(c[2] + s, dims_[2] - 1);
        for (int64_t x = x0; x <= x1; ++x)
            for (int64_t y = y0; y <= y1; ++y)
                for (int64_t z = z0; z <= z1; ++z) {
                    int64_t cheb = std::max({std::llabs(x - c[0]), std::llabs(y - c[1]),
                                             std::llabs(z - c[2])});
                    if (cheb != s) continue;
                    scan_cell(q, Coord{x, y, z}, best, best_d2);
                }
    }

    const double* pts_ = nullptr;
    int64_t n_ = 0;
    double lo_[3] = {0, 0, 0}, hi_[3] = {0, 0, 0};
    double h_ = 1.0;
    int64_t dims_[3] = {1, 1, 1};
    std::unordered_map<int64_t, std::vector<int32_t>> cells_;
};

}  // namespace para
