#include "para/mesh.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace para {

namespace {

enum class Hit { Miss, Cross, Degenerate };

// Does the +x ray from p cross the triangle? Degenerate when the (y,z)
// projection of p falls on a projected edge.
Hit ray_x_crossing(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& p) {
    double u0 = a[1] - p[1], v0 = a[2] - p[2];
    double u1 = b[1] - p[1], v1 = b[2] - p[2];
    double u2 = c[1] - p[1], v2 = c[2] - p[2];
    double d0 = u1 * v2 - u2 * v1;  // signed areas around the origin
    double d1 = u2 * v0 - u0 * v2;
    double d2 = u0 * v1 - u1 * v0;
    double denom = d0 + d1 + d2;
    if (denom == 0) return Hit::Miss;  // triangle edge-on to the ray
    double scale = std::abs(denom);
    double eps = 1e-12 * scale;
    if (std::abs(d0) < eps || std::abs(d1) < eps || std::abs(d2) < eps) return Hit::Degenerate;
    bool inside = (d0 > 0 && d1 > 0 && d2 > 0) || (d0 < 0 && d1 < 0 && d2 < 0);
    if (!inside) return Hit::Miss;
    double w0 = d0 / denom, w1 = d1 / denom, w2 = d2 / denom;
    double x = w0 * a[0] + w1 * b[0] + w2 * c[0];
    if (std::abs(x - p[0]) < 1e-12) return Hit::Degenerate;  // point on the surface
    return x > p[0] ? Hit::Cross : Hit::Miss;
}

}  // namespace

bool point_in_mesh(const TriMesh& mesh, const Vec3& p) {
    Vec3 q = p;
    for (int attempt = 0; attempt < 16; ++attempt) {
        int64_t crossings = 0;
        bool degenerate = false;
        for (const auto& t : mesh.tris) {
            Hit h = ray_x_crossing(mesh.verts[t[0]], mesh.verts[t[1]], mesh.verts[t[2]], q);
            if (h == Hit::Degenerate) {
                degenerate = true;
                break;
            }
            if (h == Hit::Cross) ++crossings;
        }
        if (!degenerate) return (crossings % 2) == 1;
        // deterministic perturbation, grows per attempt
        double eps = 1e-9 * static_cast<double>(attempt + 1);
        q = {p[0], p[1] + eps, p[2] + eps * 0.7};
    }
    throw std::runtime_error("point_in_mesh: persistent degenerate ray hits");
}

PointCloud sample_mesh_interior(const TriMesh& mesh, int64_t n, Rng& rng) {
    if (n < 1) throw std::invalid_argument("sample_mesh_interior: n must be >= 1");
    if (mesh.verts.empty() || mesh.tris.empty())
        throw std::invalid_argument("sample_mesh_interior: empty mesh");
    Vec3 lo = mesh.verts[0], hi = mesh.verts[0];
    for (const auto& v : mesh.verts)
        for (int d = 0; d < 3; ++d) {
            lo[d] = std::min(lo[d], v[d]);
            hi[d] = std::max(hi[d], v[d]);
        }
    PointCloud out;
    out.pts.reserve(static_cast<size_t>(n));
    const int64_t probe = 20000;
    int64_t tried = 0, accepted = 0;
    while (out.size() < n) {
        Vec3 p = {rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]),
                  rng.uniform(lo[2], hi[2])};
        ++tried;
        if (point_in_mesh(mesh, p)) {
            out.pts.push_back(p);
            ++accepted;
        }
        if (tried == probe && static_cast<double>(accepted) / static_cast<double>(tried) < 1e-4)
            throw std::runtime_error(
                "sample_mesh_interior: acceptance rate below 1e-4; mesh likely not watertight");
    }
    return out;
}

PointCloud sample_mesh_surface(const TriMesh& mesh, int64_t n, Rng& rng) {
    if (n < 1) throw std::invalid_argument("sample_mesh_surface: n must be >= 1");
    std::vector<double> cum;
    cum.reserve(mesh.tris.size());
    double total = 0;
    for (const auto& t : mesh.tris) {
        Vec3 e1 = mesh.verts[t[1]] - mesh.verts[t[0]];
        Vec3 e2 = mesh.verts[t[2]] - mesh.verts[t[0]];
        Vec3 cr = {e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2],
                   e1[0] * e2[1] - e1[1] * e2[0]};
        total += 0.5 * norm(cr);
        cum.push_back(total);
    }
    if (total <= 0) throw std::invalid_argument("sample_mesh_surface: zero-area mesh");
    PointCloud out;
    out.pts.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        double r = rng.uniform() * total;
        size_t k = static_cast<size_t>(
            std::lower_bound(cum.begin(), cum.end(), r) - cum.begin());
        if (k >= mesh.tris.size()) k = mesh.tris.size() - 1;
        const auto& t = mesh.tris[k];
        double s = rng.uniform(), u = rng.uniform();
        if (s + u > 1) {
            s = 1 - s;
            u = 1 - u;
        }
        Vec3 p = mesh.verts[t[0]] + s * (mesh.verts[t[1]] - mesh.verts[t[0]]) +
                 u * (mesh.verts[t[2]] - mesh.verts[t[0]]);
        out.pts.push_back(p);
    }
    return out;
}

TriMesh load_obj(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_obj: cannot open " + path);
    TriMesh mesh;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        std::string tok;
        ss >> tok;
        if (tok == "v") {
            Vec3 v;
            ss >> v[0] >> v[1] >> v[2];
            mesh.verts.push_back(v);
        } else if (tok == "f") {
            std::vector<int32_t> idx;
            std::string f;
            while (ss >> f) {
                size_t slash = f.find('/');
                if (slash != std::string::npos) f = f.substr(0, slash);
                int32_t i = static_cast<int32_t>(std::stol(f));
                idx.push_back(i > 0 ? i - 1 : static_cast<int32_t>(mesh.verts.size()) + i);
            }
            for (size_t k = 2; k < idx.size(); ++k)
                mesh.tris.push_back({idx[0], idx[k - 1], idx[k]});
        }
    }
    return mesh;
}

}  // namespace para
