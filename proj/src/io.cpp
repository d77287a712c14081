#include "para/io.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace para {

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& why) {
    throw std::runtime_error(path + ": " + why);
}

struct PlyProperty {
    std::string type;
    std::string name;
};

int64_t type_size(const std::string& t, const std::string& path) {
    if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
    if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
    if (t == "int" || t == "uint" || t == "int32" || t == "uint32" || t == "float" ||
        t == "float32")
        return 4;
    if (t == "double" || t == "float64") return 8;
    fail(path, "unsupported ply property type '" + t + "'");
}

double read_scalar(const char* p, const std::string& t) {
    if (t == "float" || t == "float32") {
        float v;
        std::memcpy(&v, p, 4);
        return static_cast<double>(v);
    }
    double v;
    std::memcpy(&v, p, 8);
    return v;
}

}  // namespace

PointCloud load_ply(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(path, "cannot open");
    std::string line;
    if (!std::getline(in, line)) fail(path, "empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "ply") fail(path, "not a ply file");

    bool binary = false;
    int64_t nverts = -1;
    std::vector<PlyProperty> props;
    bool in_vertex = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        if (tok == "comment") continue;
        if (tok == "format") {
            std::string fmt;
            ls >> fmt;
            if (fmt == "ascii")
                binary = false;
            else if (fmt == "binary_little_endian")
                binary = true;
            else
                fail(path, "unsupported ply format '" + fmt + "'");
        } else if (tok == "element") {
            std::string name;
            int64_t count;
            ls >> name >> count;
            in_vertex = (name == "vertex");
            if (in_vertex) nverts = count;
            else if (count != 0 && nverts >= 0)
                break;  // only leading vertex elements are supported
        } else if (tok == "property" && in_vertex) {
            PlyProperty p;
            ls >> p.type >> p.name;
            if (p.type == "list") fail(path, "list properties not supported on vertices");
            props.push_back(p);
        } else if (tok == "end_header") {
            break;
        }
    }
    if (nverts < 0) fail(path, "no vertex element");
    int ix = -1, iy = -1, iz = -1;
    for (size_t i = 0; i < props.size(); ++i) {
        if (props[i].name == "x") ix = static_cast<int>(i);
        if (props[i].name == "y") iy = static_cast<int>(i);
        if (props[i].name == "z") iz = static_cast<int>(i);
    }
    if (ix < 0 || iy < 0 || iz < 0) fail(path, "vertex element lacks x/y/z");

    PointCloud c;
    c.pts.reserve(static_cast<size_t>(nverts));
    if (!binary) {
        for (int64_t v = 0; v < nverts; ++v) {
            if (!std::getline(in, line)) fail(path, "truncated vertex data");
            std::istringstream ls(line);
            std::vector<double> vals(props.size());
            for (auto& x : vals)
                if (!(ls >> x)) fail(path, "bad vertex line");
            c.pts.push_back({vals[static_cast<size_t>(ix)], vals[static_cast<size_t>(iy)],
                             vals[static_cast<size_t>(iz)]});
        }
    } else {
        std::vector<int64_t> offs(props.size());
        int64_t stride = 0;
        for (size_t i = 0; i < props.size(); ++i) {
            offs[i] = stride;
            stride += type_size(props[i].type, path);
        }
        std::vector<char> row(static_cast<size_t>(stride));
        for (int64_t v = 0; v < nverts; ++v) {
            if (!in.read(row.data(), stride)) fail(path, "truncated vertex data");
            c.pts.push_back({read_scalar(&row[static_cast<size_t>(offs[static_cast<size_t>(ix)])],
                                         props[static_cast<size_t>(ix)].type),
                             read_scalar(&row[static_cast<size_t>(offs[static_cast<size_t>(iy)])],
                                         props[static_cast<size_t>(iy)].type),
                             read_scalar(&row[static_cast<size_t>(offs[static_cast<size_t>(iz)])],
                                         props[static_cast<size_t>(iz)].type)});
        }
    }
    return c;
}

void save_ply(const PointCloud& c, const std::string& path, bool binary) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(path, "cannot open for writing");
    out << "ply\nformat " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n"
        << "element vertex " << c.size() << "\n"
        << "property double x\nproperty double y\nproperty double z\nend_header\n";
    if (binary) {
        for (const auto& p : c.pts)
            out.write(reinterpret_cast<const char*>(p.data()), 3 * sizeof(double));
    } else {
        char buf[96];
        for (const auto& p : c.pts) {
            std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g\n", p[0], p[1], p[2]);
            out << buf;
        }
    }
    if (!out) fail(path, "write failed");
}

namespace {
constexpr char kRawMagic[8] = {'P', 'A', 'R', 'A', 'P', 'C', '0', '1'};
}

PointCloud load_raw(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(path, "cannot open");
    char magic[8];
    uint32_t version = 0;
    int64_t n = 0;
    if (!in.read(magic, 8) || std::memcmp(magic, kRawMagic, 8) != 0)
        fail(path, "bad raw cloud magic");
    if (!in.read(reinterpret_cast<char*>(&version), 4) || version != 1)
        fail(path, "unsupported raw cloud version");
    if (!in.read(reinterpret_cast<char*>(&n), 8) || n < 0) fail(path, "bad point count");
    PointCloud c;
    c.pts.resize(static_cast<size_t>(n));
    std::vector<float> buf(static_cast<size_t>(3 * n));
    if (n && !in.read(reinterpret_cast<char*>(buf.data()),
                      static_cast<std::streamsize>(buf.size() * sizeof(float))))
        fail(path, "truncated point data");
    for (int64_t i = 0; i < n; ++i)
        for (int d = 0; d < 3; ++d)
            c.pts[static_cast<size_t>(i)][static_cast<size_t>(d)] =
                static_cast<double>(buf[static_cast<size_t>(3 * i + d)]);
    return c;
}

void save_raw(const PointCloud& c, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(path, "cannot open for writing");
    uint32_t version = 1;
    int64_t n = c.size();
    out.write(kRawMagic, 8);
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&n), 8);
    std::vector<float> buf;
    buf.reserve(static_cast<size_t>(3 * n));
    for (const auto& p : c.pts)
        for (int d = 0; d < 3; ++d) buf.push_back(static_cast<float>(p[d]));
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!out) fail(path, "write failed");
}

namespace {
std::string lower_ext(const std::string& path) {
    size_t dot = path.find_last_of('.');
    if (dot == std::string::npos) return "";
    std::string e = path.substr(dot + 1);
    std::transform(e.begin(), e.end(), e.begin(),
                   [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    return e;
}
}  // namespace

bool is_mesh_path(const std::string& path) { return lower_ext(path) == "obj"; }

PointCloud load_cloud(const std::string& path) {
    std::string e = lower_ext(path);
    if (e == "ply") return load_ply(path);
    if (e == "pc" || e == "raw" || e == "bin") return load_raw(path);
    fail(path, "unknown point cloud extension '" + e + "'");
}

}  // namespace para
