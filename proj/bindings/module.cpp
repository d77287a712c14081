#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "para/harness.hpp"

namespace py = pybind11;
using namespace para;

namespace {

PointCloud to_cloud(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2 || a.shape(1) != 3)
        throw py::value_error("expected an (N, 3) float array");
    PointCloud c;
    c.pts.resize(static_cast<size_t>(a.shape(0)));
    std::memcpy(c.pts.empty() ? nullptr : c.pts[0].data(), a.data(),
                static_cast<size_t>(a.size()) * sizeof(double));
    return c;
}

py::array_t<double> from_cloud(const PointCloud& c) {
    py::array_t<double> a({c.size(), static_cast<int64_t>(3)});
    std::memcpy(a.mutable_data(), c.raw(), static_cast<size_t>(3 * c.size()) * sizeof(double));
    return a;
}

PartLibrary to_library(const std::vector<std::pair<std::string, py::array_t<double>>>& parts,
                       int64_t points) {
    PartLibrary lib;
    for (const auto& [id, arr] : parts)
        lib.parts.push_back(canonicalize_part(to_cloud(arr), id, "python", points));
    return lib;
}

py::dict assembly_dict(const Assembly& a) {
    py::dict d;
    d["target_id"] = a.target_id;
    d["k"] = a.k;
    d["recon"] = a.recon;
    d["seed"] = a.seed;
    d["config_hash"] = a.config_hash;
    py::list parts;
    for (const auto& rp : a.parts) {
        py::dict p;
        p["part_id"] = rp.part_id;
        p["t"] = py::make_tuple(rp.pose.t[0], rp.pose.t[1], rp.pose.t[2]);
        p["r"] = rp.pose.r;
        p["fit"] = rp.fit;
        p["segment"] = rp.segment;
        parts.append(p);
    }
    d["parts"] = parts;
    return d;
}

}  // namespace

PYBIND11_MODULE(_para, m) {
    m.doc() = "part retrieval and assembly for 3D shape reconstruction";

    py::class_<VaeParams>(m, "Vae")
        .def_property_readonly("latent", [](const VaeParams& p) { return p.config().latent; })
        .def_property_readonly("points", [](const VaeParams& p) { return p.config().points; })
        .def("checksum", &VaeParams::checksum)
        .def("save", [](const VaeParams& p, const std::string& path) { save_vae(p, path); })
        .def("encode",
             [](const VaeParams& p, const py::array_t<double>& cloud) {
                 return encode_mu(p, to_cloud(cloud));
             })
        .def("decode", [](const VaeParams& p, const std::vector<double>& code) {
            return from_cloud(decode(p, code));
        });

    m.def("load_vae", &load_vae, py::arg("path"));
    m.def(
        "train_vae",
        [](const std::vector<std::pair<std::string, py::array_t<double>>>& parts, int64_t points,
           int64_t latent, int64_t epochs, int64_t batch, double beta, double lr, double lr_min,
           uint64_t seed) {
            VaeTrainConfig cfg;
            cfg.arch.points = points;
            cfg.arch.latent = latent;
            cfg.epochs = epochs;
            cfg.batch = batch;
            cfg.beta = beta;
            cfg.lr = lr;
            cfg.lr_min = lr_min;
            cfg.seed = seed;
            return train_vae(to_library(parts, points), cfg);
        },
        py::arg("parts"), py::arg("points") = 512, py::arg("latent") = 64,
        py::arg("epochs") = 500, py::arg("batch") = 32, py::arg("beta") = 1e-3,
        py::arg("lr") = 1e-3, py::arg("lr_min") = -1.0, py::arg("seed") = 0);

    m.def(
        "chamfer",
        [](const py::array_t<double>& a, const py::array_t<double>& b) {
            return chamfer(to_cloud(a), to_cloud(b));
        },
        py::arg("a"), py::arg("b"));
    m.def(
        "resample",
        [](const py::array_t<double>& a, int64_t n) {
            return from_cloud(resample_cloud(to_cloud(a), n));
        },
        py::arg("cloud"), py::arg("n"));
    m.def(
        "canonicalize",
        [](const py::array_t<double>& a, int64_t points) {
            PartEntry e = canonicalize_part(to_cloud(a), "part", "python", points);
            return py::make_tuple(from_cloud(e.canonical),
                                  py::make_tuple(e.canonical_pose.t[0], e.canonical_pose.t[1],
                                                 e.canonical_pose.t[2], e.canonical_pose.r));
        },
        py::arg("cloud"), py::arg("points") = 512);
    m.def(
        "detect_symmetry_plane",
        [](const py::array_t<double>& a) -> py::object {
            auto pl = detect_symmetry_plane(to_cloud(a), SymmetryConfig::sparse());
            if (!pl) return py::none();
            return py::make_tuple(py::make_tuple(pl->point[0], pl->point[1], pl->point[2]),
                                  py::make_tuple(pl->normal[0], pl->normal[1], pl->normal[2]));
        },
        py::arg("cloud"));

    m.def(
        "assemble",
        [](const py::array_t<double>& target,
           const std::vector<std::pair<std::string, py::array_t<double>>>& parts,
           const VaeParams& vae, std::vector<int64_t> k_set, double alpha, int64_t n1, int64_t n2,
           int64_t n3, uint64_t seed, bool use_phase2, bool use_phase3, bool use_symmetry) {
            ScheduleConfig sched;
            sched.n1 = n1;
            sched.n2 = n2;
            sched.n3 = n3;
            sched.use_phase2 = use_phase2;
            sched.use_phase3 = use_phase3;
            sched.use_symmetry = use_symmetry;
            RetrievalConfig rcfg;
            rcfg.k_set = std::move(k_set);
            rcfg.alpha = alpha;
            PartLibrary lib = to_library(parts, vae.config().points);
            Assembly a = assemble("target", to_cloud(target), lib, sched, rcfg, vae, seed);
            return assembly_dict(a);
        },
        py::arg("target"), py::arg("parts"), py::arg("vae"),
        py::arg("k_set") = std::vector<int64_t>{2, 4, 6, 8, 10}, py::arg("alpha") = 1.5e-4,
        py::arg("n1") = 200, py::arg("n2") = 4, py::arg("n3") = 2, py::arg("seed") = 0,
        py::arg("use_phase2") = true, py::arg("use_phase3") = true,
        py::arg("use_symmetry") = true);

    m.def(
        "gen_library",
        [](int64_t n_parts, uint64_t seed, int64_t part_points) {
            SyntheticSpec spec;
            spec.part_points = part_points;
            PartLibrary lib = gen_library(spec, n_parts, seed);
            std::vector<std::pair<std::string, py::array_t<double>>> out;
            for (const auto& e : lib.parts) out.emplace_back(e.id, from_cloud(e.canonical));
            return out;
        },
        py::arg("n_parts"), py::arg("seed") = 0, py::arg("part_points") = 512);
    m.def(
        "gen_targets",
        [](const std::vector<std::pair<std::string, py::array_t<double>>>& parts,
           int64_t n_targets, uint64_t seed, int64_t target_points, double symmetry_prob) {
            SyntheticSpec spec;
            spec.target_points = target_points;
            spec.symmetry_prob = symmetry_prob;
            if (parts.empty()) throw py::value_error("empty part list");
            spec.part_points = static_cast<int64_t>(parts[0].second.shape(0));
            auto targets = gen_targets(spec, to_library(parts, spec.part_points), n_targets,
                                       seed);
            py::list out;
            for (const auto& t : targets)
                out.append(py::make_tuple(t.id, from_cloud(t.cloud), assembly_dict(t.truth)));
            return out;
        },
        py::arg("parts"), py::arg("n_targets"), py::arg("seed") = 0,
        py::arg("target_points") = 2048, py::arg("symmetry_prob") = 0.3);

    m.def(
        "load_cloud", [](const std::string& path) { return from_cloud(load_cloud(path)); },
        py::arg("path"));
    m.def(
        "save_cloud",
        [](const py::array_t<double>& a, const std::string& path, bool binary) {
            save_ply(to_cloud(a), path, binary);
        },
        py::arg("cloud"), py::arg("path"), py::arg("binary") = true);
}
