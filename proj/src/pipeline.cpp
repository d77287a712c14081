#include "para/pipeline.hpp"

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"
#include "para/mesh.hpp"
#include "para/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace para {

namespace {

std::string stem_of(const std::string& path) { return fs::path(path).stem().string(); }

std::string hex16(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void parallel_for(int64_t n, int64_t width, const std::function<void(int64_t)>& fn) {
    if (width <= 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int64_t> next{0};
    auto worker = [&] {
        for (int64_t i; (i = next.fetch_add(1)) < n;) fn(i);
    };
    std::vector<std::thread> pool;
    for (int64_t w = 0; w < std::min(width, n); ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
}

PointCloud centered(const PointCloud& c) {
    Vec3 ctr = c.centroid();
    PointCloud out = c;
    for (auto& p : out.pts) p = p - ctr;
    return out;
}

json pose_json(const RigidPose& p) {
    return json{{"t", {p.t[0], p.t[1], p.t[2]}}, {"r", p.r}};
}

RigidPose pose_from_json(const json& j) {
    RigidPose p;
    for (int d = 0; d < 3; ++d) p.t[static_cast<size_t>(d)] = j.at("t").at(d).get<double>();
    p.r = j.at("r").get<double>();
    return p;
}

json assembly_json(const Assembly& a) {
    json parts = json::array();
    for (const auto& rp : a.parts) {
        json p{{"id", rp.part_id},
               {"pose", pose_json(rp.pose)},
               {"fit", rp.fit},
               {"segment", rp.segment}};
        parts.push_back(std::move(p));
    }
    return json{{"schema_version", 1},
                {"target_id", a.target_id},
                {"k", a.k},
                {"parts", std::move(parts)},
                {"recon", a.recon},
                {"scd", a.scd},
                {"vcd", a.vcd},
                {"seed", a.seed},
                {"config_hash", a.config_hash}};
}

Assembly assembly_from_json(const json& j) {
    if (j.at("schema_version").get<int>() != 1)
        throw std::runtime_error("assembly manifest: unsupported schema version");
    Assembly a;
    a.target_id = j.at("target_id").get<std::string>();
    a.k = j.at("k").get<int64_t>();
    a.recon = j.at("recon").get<double>();
    a.scd = j.at("scd").get<double>();
    a.vcd = j.at("vcd").get<double>();
    a.seed = j.at("seed").get<uint64_t>();
    a.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& pj : j.at("parts")) {
        RetrievedPart rp;
        rp.part_id = pj.at("id").get<std::string>();
        rp.pose = pose_from_json(pj.at("pose"));
        rp.fit = pj.at("fit").get<double>();
        rp.segment = pj.at("segment").get<std::vector<int64_t>>();
        a.parts.push_back(std::move(rp));
    }
    return a;
}

}  // namespace

Dataset ingest(const std::vector<std::string>& target_paths,
               const std::vector<std::string>& part_paths, const IngestConfig& cfg) {
    Dataset ds;
    for (const auto& path : target_paths) {
        std::string id = stem_of(path);
        PointCloud c;
        if (is_mesh_path(path)) {
            TriMesh mesh = load_obj(path);
            Rng rng = Rng::derive(cfg.seed, "target:" + id);
            c = sample_mesh_interior(mesh, cfg.target_points, rng);
        } else {
            c = load_cloud(path);
        }
        if (c.empty()) throw std::runtime_error(path + ": empty target cloud");
        ds.targets.emplace_back(id, centered(c));
    }

    double max_diag = 0;
    for (const auto& [id, c] : ds.targets) max_diag = std::max(max_diag, c.bbox_diagonal());
    ds.scale = max_diag > 0 ? 1.0 / max_diag : 1.0;
    for (auto& [id, c] : ds.targets)
        for (auto& p : c.pts) p = ds.scale * p;

    for (const auto& path : part_paths) {
        std::string id = stem_of(path);
        PointCloud c;
        if (is_mesh_path(path)) {
            TriMesh mesh = load_obj(path);
            Rng rng = Rng::derive(cfg.seed, "part:" + id);
            c = sample_mesh_interior(mesh, 4 * cfg.part_points, rng);
        } else {
            c = load_cloud(path);
        }
        if (c.empty()) throw std::runtime_error(path + ": empty part cloud");
        for (auto& p : c.pts) p = ds.scale * p;
        ds.library.parts.push_back(canonicalize_part(c, id, path, cfg.part_points));
    }
    return ds;
}

DistanceMatrix target_distance_matrix(const std::vector<PointCloud>& targets) {
    int64_t n = static_cast<int64_t>(targets.size());
    DistanceMatrix m;
    m.rows = m.cols = n;
    m.d.assign(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < n; ++j) {
            double d = chamfer(targets[static_cast<size_t>(i)], targets[static_cast<size_t>(j)]);
            m.at(i, j) = d;
            m.at(j, i) = d;
        }
    return m;
}

uint64_t run_config_checksum(const RunConfig& cfg) {
    // parallelism is excluded: it must not change numerics
    return config_checksum(cfg.sched, cfg.retrieval);
}

CollectionResult run_collection(const Dataset& ds, const RunConfig& cfg,
                                const VaeParams& params) {
    cfg.sched.validate();
    if (cfg.retrieval.k_set.empty()) throw std::invalid_argument("run_collection: empty k set");
    int64_t nt = static_cast<int64_t>(ds.targets.size());
    CollectionResult out;
    out.results.resize(static_cast<size_t>(nt));
    for (int64_t i = 0; i < nt; ++i)
        out.results[static_cast<size_t>(i)].target_id = ds.targets[static_cast<size_t>(i)].first;
    if (nt == 0) return out;

    std::vector<PointCloud> clouds;
    for (const auto& [id, c] : ds.targets) clouds.push_back(c);
    DistanceMatrix m = target_distance_matrix(clouds);

    const ScheduleConfig& sc = cfg.sched;
    std::string hash = hex16(run_config_checksum(cfg));

    for (int64_t k : cfg.retrieval.k_set) {
        struct Slot {
            DecompositionState st;
            double best_loss = std::numeric_limits<double>::infinity();
            std::vector<LatentPart> best_parts;
            std::vector<bool> best_merged;
            bool failed = false;
            std::string error;
        };
        std::vector<Slot> slots(static_cast<size_t>(nt));
        auto track = [](Slot& s, double loss) {
            if (loss < s.best_loss) {
                s.best_loss = loss;
                s.best_parts = s.st.parts;
                s.best_merged = s.st.merged;
            }
        };
        auto guard = [&](int64_t i, const std::function<void(Slot&)>& body) {
            Slot& s = slots[static_cast<size_t>(i)];
            if (s.failed || out.results[static_cast<size_t>(i)].failed) return;
            try {
                body(s);
            } catch (const std::exception& e) {
                s.failed = true;
                s.error = e.what();
            }
        };

        parallel_for(nt, cfg.parallelism, [&](int64_t i) {
            guard(i, [&](Slot& s) {
                const auto& [id, target] = ds.targets[static_cast<size_t>(i)];
                VaeEval ev(params);
                uint64_t seed =
                    Rng::derive(cfg.seed, "target:" + id + ":k:" + std::to_string(k)).next_u64();
                s.st = init_state(id, target, k, seed, sc, ev);
            });
        });

        for (int64_t i3 = 0; i3 < sc.n3; ++i3) {
            parallel_for(nt, cfg.parallelism, [&](int64_t i) {
                guard(i, [&](Slot& s) {
                    const PointCloud& target = ds.targets[static_cast<size_t>(i)].second;
                    VaeEval ev(params);
                    for (int64_t i2 = 0; i2 < sc.n2; ++i2) {
                        phase1_run(s.st, target, params, sc, sc.n1, sc.lr);
                        track(s, s.st.loss_history.back());
                        if (sc.use_phase2) phase2_shift(s.st, target, sc, ev);
                    }
                });
            });

            if (!sc.use_phase3) continue;
            std::vector<int64_t> healthy;
            for (int64_t i = 0; i < nt; ++i)
                if (!slots[static_cast<size_t>(i)].failed &&
                    !out.results[static_cast<size_t>(i)].failed)
                    healthy.push_back(i);
            if (healthy.size() < 2) continue;

            std::vector<DecompositionState> sts;
            std::vector<PointCloud> tgs;
            std::vector<double> errs;
            for (int64_t i : healthy) {
                sts.push_back(slots[static_cast<size_t>(i)].st);
                tgs.push_back(ds.targets[static_cast<size_t>(i)].second);
                errs.push_back(
                    phase1_loss(sts.back(), tgs.back(), params, sc).first);
            }
            DistanceMatrix sub;
            sub.rows = sub.cols = static_cast<int64_t>(healthy.size());
            sub.d.resize(healthy.size() * healthy.size());
            for (size_t a = 0; a < healthy.size(); ++a)
                for (size_t b = 0; b < healthy.size(); ++b)
                    sub.at(static_cast<int64_t>(a), static_cast<int64_t>(b)) =
                        m.at(healthy[a], healthy[b]);
            uint64_t bseed = Rng::derive(cfg.seed, "phase3:k:" + std::to_string(k) + ":round:" +
                                                       std::to_string(i3))
                                 .next_u64();
            phase3_borrow(sts, tgs, errs, sub, sc, params, bseed);
            for (size_t a = 0; a < healthy.size(); ++a) {
                Slot& s = slots[static_cast<size_t>(healthy[a])];
                s.st = std::move(sts[a]);
                track(s, errs[a]);
            }
        }

        parallel_for(nt, cfg.parallelism, [&](int64_t i) {
            guard(i, [&](Slot& s) {
                const PointCloud& target = ds.targets[static_cast<size_t>(i)].second;
                VaeEval ev(params);
                phase1_run(s.st, target, params, sc, sc.n1, sc.lr);
                track(s, s.st.loss_history.back());
                if (s.st.loss_history.back() > s.best_loss) {
                    s.st.parts = s.best_parts;
                    s.st.merged = s.best_merged;
                    refresh_cache(s.st, ev);
                    s.st.loss_history.push_back(s.best_loss);
                }
                KCandidate c;
                c.k = k;
                c.assembly = retrieve_assembly(s.st, target, ds.library, cfg.retrieval);
                c.penalty = c.assembly.recon +
                            cfg.retrieval.alpha * static_cast<double>(c.assembly.parts.size());
                c.state = std::move(s.st);
                out.results[static_cast<size_t>(i)].candidates.push_back(std::move(c));
            });
        });

        for (int64_t i = 0; i < nt; ++i) {
            Slot& s = slots[static_cast<size_t>(i)];
            TargetResult& r = out.results[static_cast<size_t>(i)];
            if (s.failed && !r.failed) {
                r.failed = true;
                r.error = s.error;
            }
        }
    }

    for (auto& r : out.results) {
        if (r.failed || r.candidates.empty()) {
            r.failed = true;
            if (r.error.empty()) r.error = "no candidates";
            continue;
        }
        KCandidate best = select_k(r.candidates, cfg.retrieval.alpha);
        r.assembly = best.assembly;
        r.assembly.seed = cfg.seed;
        r.assembly.config_hash = hash;
    }
    return out;
}

TrainingBank make_bank(const Dataset& ds, const CollectionResult& res) {
    TrainingBank bank;
    for (size_t i = 0; i < res.results.size(); ++i) {
        const TargetResult& r = res.results[i];
        if (r.failed) continue;
        BankEntry e;
        e.target_id = r.target_id;
        e.target = ds.targets[i].second;
        e.assembly = r.assembly;
        for (const auto& c : r.candidates)
            if (c.k == r.assembly.k) e.state = c.state;
        bank.push_back(std::move(e));
    }
    return bank;
}

InferResult amortized_infer(const std::string& target_id, const PointCloud& target,
                            const TrainingBank& bank, const PartLibrary& library,
                            const RunConfig& cfg, const VaeParams& params) {
    InferResult res;
    if (bank.empty()) {
        res.from_scratch = true;
        res.phase1_iterations = (cfg.sched.n2 * cfg.sched.n3 + 1) * cfg.sched.n1;
        res.assembly = assemble(target_id, target, library, cfg.sched, cfg.retrieval, params,
                                Rng::derive(cfg.seed, "infer:" + target_id).next_u64());
        return res;
    }
    size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < bank.size(); ++i) {
        double d = chamfer(target, bank[i].target);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    res.neighbor_id = bank[best].target_id;

    VaeEval ev(params);
    DecompositionState st = bank[best].state;
    st.target_id = target_id;
    refresh_cache(st, ev);
    res.phase1_iterations = std::max<int64_t>(1, cfg.sched.n1 / 3);
    phase1_run(st, target, params, cfg.sched, res.phase1_iterations, cfg.sched.lr);

    res.assembly = retrieve_assembly(st, target, library, cfg.retrieval);
    res.assembly.target_id = target_id;
    res.assembly.seed = cfg.seed;
    res.assembly.config_hash = hex16(run_config_checksum(cfg));
    return res;
}

std::string assembly_manifest(const Assembly& a) { return assembly_json(a).dump(2) + "\n"; }

std::string dataset_manifest(const Dataset& ds) {
    json targets = json::array();
    for (const auto& [id, c] : ds.targets)
        targets.push_back(json{{"id", id}, {"file", "targets/" + id + ".ply"}});
    json parts = json::array();
    for (const auto& e : ds.library.parts)
        parts.push_back(json{{"id", e.id},
                             {"file", "parts/" + e.id + ".ply"},
                             {"pose", pose_json(e.canonical_pose)},
                             {"source", e.source}});
    return json{{"schema_version", 1},
                {"scale", ds.scale},
                {"source_tag", ds.source_tag},
                {"targets", std::move(targets)},
                {"parts", std::move(parts)}}
               .dump(2) +
           "\n";
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out << text;
    if (!out) throw std::runtime_error(path + ": write failed");
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void save_dataset(const Dataset& ds, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "targets");
    fs::create_directories(fs::path(dir) / "parts");
    for (const auto& [id, c] : ds.targets)
        save_ply(c, (fs::path(dir) / "targets" / (id + ".ply")).string(), true);
    for (const auto& e : ds.library.parts)
        save_ply(e.canonical, (fs::path(dir) / "parts" / (e.id + ".ply")).string(), true);
    write_text((fs::path(dir) / "index.json").string(), dataset_manifest(ds));
}

Dataset load_dataset(const std::string& dir) {
    json idx = json::parse(read_text((fs::path(dir) / "index.json").string()));
    if (idx.at("schema_version").get<int>() != 1)
        throw std::runtime_error(dir + ": unsupported dataset schema version");
    Dataset ds;
    ds.scale = idx.at("scale").get<double>();
    ds.source_tag = idx.at("source_tag").get<std::string>();
    for (const auto& t : idx.at("targets"))
        ds.targets.emplace_back(t.at("id").get<std::string>(),
                                load_ply((fs::path(dir) / t.at("file").get<std::string>())
                                             .string()));
    for (const auto& p : idx.at("parts")) {
        PartEntry e;
        e.id = p.at("id").get<std::string>();
        e.source = p.at("source").get<std::string>();
        e.canonical = load_ply((fs::path(dir) / p.at("file").get<std::string>()).string());
        e.canonical_pose = pose_from_json(p.at("pose"));
        ds.library.parts.push_back(std::move(e));
    }
    return ds;
}

void save_bank(const TrainingBank& bank, const std::string& dir) {
    fs::create_directories(dir);
    json idx = json::array();
    for (const auto& e : bank) {
        save_ply(e.target, (fs::path(dir) / (e.target_id + ".target.ply")).string(), true);
        save_state(e.state, (fs::path(dir) / (e.target_id + ".state.bin")).string());
        write_text((fs::path(dir) / (e.target_id + ".assembly.json")).string(),
                   assembly_manifest(e.assembly));
        idx.push_back(e.target_id);
    }
    write_text((fs::path(dir) / "bank.json").string(),
               json{{"schema_version", 1}, {"entries", std::move(idx)}}.dump(2) + "\n");
}

TrainingBank load_bank(const std::string& dir) {
    json idx = json::parse(read_text((fs::path(dir) / "bank.json").string()));
    if (idx.at("schema_version").get<int>() != 1)
        throw std::runtime_error(dir + ": unsupported bank schema version");
    TrainingBank bank;
    for (const auto& idj : idx.at("entries")) {
        std::string id = idj.get<std::string>();
        BankEntry e;
        e.target_id = id;
        e.target = load_ply((fs::path(dir) / (id + ".target.ply")).string());
        e.state = load_state((fs::path(dir) / (id + ".state.bin")).string());
        e.assembly = assembly_from_json(
            json::parse(read_text((fs::path(dir) / (id + ".assembly.json")).string())));
        bank.push_back(std::move(e));
    }
    return bank;
}

}  // namespace para
