#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "para/harness.hpp"

namespace fs = std::filesystem;
using namespace para;

namespace {

// expand directories into their cloud/mesh files, sorted for determinism
std::vector<std::string> expand_inputs(const std::vector<std::string>& paths) {
    std::vector<std::string> out;
    for (const auto& p : paths) {
        if (fs::is_directory(p)) {
            std::vector<std::string> inner;
            for (const auto& e : fs::directory_iterator(p)) {
                std::string ext = e.path().extension().string();
                for (auto& c : ext) c = static_cast<char>(std::tolower(c));
                if (ext == ".ply" || ext == ".pc" || ext == ".raw" || ext == ".bin" ||
                    ext == ".obj")
                    inner.push_back(e.path().string());
            }
            std::sort(inner.begin(), inner.end());
            out.insert(out.end(), inner.begin(), inner.end());
        } else {
            out.push_back(p);
        }
    }
    return out;
}

void add_run_flags(CLI::App* cmd, RunConfig& cfg, std::vector<int64_t>& k_set, bool& no_p2,
                   bool& no_p3, bool& no_sym) {
    cmd->add_option("--k-set", k_set, "candidate part counts");
    cmd->add_option("--alpha", cfg.retrieval.alpha, "part count penalty weight");
    cmd->add_option("--n1", cfg.sched.n1, "phase-I steps per round");
    cmd->add_option("--n2", cfg.sched.n2, "shift rounds per borrow round");
    cmd->add_option("--n3", cfg.sched.n3, "borrow rounds");
    cmd->add_option("--lr", cfg.sched.lr, "phase-I learning rate");
    cmd->add_option("--q", cfg.retrieval.q, "retrieval candidates per segment (-1: all)");
    cmd->add_option("--fit-restarts", cfg.retrieval.fit.restarts, "pose fit yaw starts");
    cmd->add_option("--fit-steps", cfg.retrieval.fit.steps, "pose fit refinement steps");
    cmd->add_option("--fit-lr", cfg.retrieval.fit.lr, "pose fit learning rate");
    cmd->add_option("--seed", cfg.seed, "master seed");
    cmd->add_option("--parallelism", cfg.parallelism, "worker threads");
    cmd->add_flag("--no-phase2", no_p2, "disable the shift phase");
    cmd->add_flag("--no-phase3", no_p3, "disable cross-target borrowing");
    cmd->add_flag("--no-symmetry", no_sym, "disable symmetry detection");
}

void apply_toggles(RunConfig& cfg, const std::vector<int64_t>& k_set, bool no_p2, bool no_p3,
                   bool no_sym) {
    if (!k_set.empty()) cfg.retrieval.k_set = k_set;
    cfg.sched.use_phase2 = !no_p2;
    cfg.sched.use_phase3 = !no_p3;
    cfg.sched.use_symmetry = !no_sym;
}

// segment-colored ascii ply (fixed palette, gray for unassigned points)
void save_colored_segments(const PointCloud& target, const Assembly& a,
                           const std::string& path) {
    static const int palette[10][3] = {{230, 60, 60},   {60, 140, 230}, {60, 200, 90},
                                       {240, 180, 40},  {170, 80, 220}, {80, 220, 220},
                                       {240, 120, 190}, {150, 110, 60}, {120, 220, 40},
                                       {100, 100, 240}};
    std::vector<int> seg_of(static_cast<size_t>(target.size()), -1);
    for (size_t s = 0; s < a.parts.size(); ++s)
        for (int64_t pi : a.parts[s].segment) seg_of[static_cast<size_t>(pi)] = static_cast<int>(s);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out << "ply\nformat ascii 1.0\nelement vertex " << target.size()
        << "\nproperty double x\nproperty double y\nproperty double z\n"
           "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
    char buf[128];
    for (size_t i = 0; i < target.pts.size(); ++i) {
        const auto& p = target.pts[i];
        int r = 128, g = 128, b = 128;
        if (seg_of[i] >= 0) {
            const int* c = palette[seg_of[i] % 10];
            r = c[0], g = c[1], b = c[2];
        }
        std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g %d %d %d\n", p[0], p[1], p[2], r, g,
                      b);
        out << buf;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"part retrieval and assembly for 3D shape reconstruction"};
    app.require_subcommand(1);

    // ingest
    auto* c_ingest = app.add_subcommand("ingest", "build a normalized dataset bundle");
    std::vector<std::string> target_in, part_in;
    std::string out_dir;
    IngestConfig icfg;
    c_ingest->add_option("--targets", target_in, "target cloud/mesh files or directories")
        ->required();
    c_ingest->add_option("--parts", part_in, "part cloud/mesh files or directories")->required();
    c_ingest->add_option("--out", out_dir, "output bundle directory")->required();
    c_ingest->add_option("--target-points", icfg.target_points, "interior samples per mesh target");
    c_ingest->add_option("--part-points", icfg.part_points, "points per canonical part");
    c_ingest->add_option("--seed", icfg.seed, "sampling seed");

    // train-vae
    auto* c_train = app.add_subcommand("train-vae", "train the part autoencoder");
    std::string dataset_dir, vae_path;
    VaeTrainConfig tcfg;
    c_train->add_option("--dataset", dataset_dir, "dataset bundle directory")->required();
    c_train->add_option("--out", vae_path, "output weights file")->required();
    c_train->add_option("--epochs", tcfg.epochs, "training epochs");
    c_train->add_option("--batch", tcfg.batch, "batch size");
    c_train->add_option("--beta", tcfg.beta, "KL weight");
    c_train->add_option("--lr", tcfg.lr, "learning rate");
    c_train->add_option("--lr-min", tcfg.lr_min, "cosine decay floor (-1: constant)");
    c_train->add_option("--latent", tcfg.arch.latent, "latent dimensions");
    c_train->add_option("--seed", tcfg.seed, "training seed");

    // optimize
    auto* c_opt = app.add_subcommand("optimize", "collection-mode decomposition and retrieval");
    RunConfig ocfg;
    std::vector<int64_t> o_kset;
    bool o_np2 = false, o_np3 = false, o_nsym = false;
    c_opt->add_option("--dataset", dataset_dir, "dataset bundle directory")->required();
    c_opt->add_option("--vae", vae_path, "trained weights file")->required();
    c_opt->add_option("--out", out_dir, "output directory")->required();
    add_run_flags(c_opt, ocfg, o_kset, o_np2, o_np3, o_nsym);

    // infer
    auto* c_infer = app.add_subcommand("infer", "amortized inference for a new target");
    RunConfig fcfg;
    std::vector<int64_t> f_kset;
    bool f_np2 = false, f_np3 = false, f_nsym = false;
    std::string bank_dir, target_path, infer_out, infer_id = "query";
    c_infer->add_option("--dataset", dataset_dir, "dataset bundle directory")->required();
    c_infer->add_option("--bank", bank_dir, "training bank directory")->required();
    c_infer->add_option("--vae", vae_path, "trained weights file")->required();
    c_infer->add_option("--target", target_path, "query cloud file")->required();
    c_infer->add_option("--out", infer_out, "output manifest path")->required();
    c_infer->add_option("--id", infer_id, "query target id");
    add_run_flags(c_infer, fcfg, f_kset, f_np2, f_np3, f_nsym);

    // eval
    auto* c_eval = app.add_subcommand("eval", "phase ablation and output-format report");
    RunConfig ecfg;
    std::vector<int64_t> e_kset;
    bool e_np2 = false, e_np3 = false, e_nsym = false;
    int64_t syn_targets = 0, syn_parts = 20;
    SyntheticSpec espec;
    uint64_t gen_seed = 0;
    c_eval->add_option("--dataset", dataset_dir, "dataset bundle directory");
    c_eval->add_option("--vae", vae_path, "trained weights file")->required();
    c_eval->add_option("--out", out_dir, "report output directory")->required();
    c_eval->add_option("--synthetic", syn_targets,
                       "generate a synthetic suite with this many targets instead of --dataset");
    c_eval->add_option("--library-size", syn_parts, "synthetic library size");
    c_eval->add_option("--part-points", espec.part_points, "synthetic points per part");
    c_eval->add_option("--target-points", espec.target_points, "synthetic points per target");
    c_eval->add_option("--symmetry-prob", espec.symmetry_prob, "synthetic symmetric fraction");
    c_eval->add_option("--gen-seed", gen_seed, "synthetic generation seed");
    add_run_flags(c_eval, ecfg, e_kset, e_np2, e_np3, e_nsym);

    // export
    auto* c_exp = app.add_subcommand("export", "colored per-segment clouds and manifests");
    c_exp->add_option("--bank", bank_dir, "training bank directory")->required();
    c_exp->add_option("--out", out_dir, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*c_ingest) {
            Dataset ds = ingest(expand_inputs(target_in), expand_inputs(part_in), icfg);
            save_dataset(ds, out_dir);
            std::printf("ingested %zu targets, %lld parts (scale %.6g) -> %s\n",
                        ds.targets.size(), static_cast<long long>(ds.library.size()), ds.scale,
                        out_dir.c_str());
        } else if (*c_train) {
            Dataset ds = load_dataset(dataset_dir);
            if (ds.library.size() == 0) throw std::runtime_error("dataset has no parts");
            tcfg.arch.points = ds.library.parts[0].canonical.size();
            std::vector<double> curve;
            VaeParams params = train_vae(ds.library, tcfg, &curve);
            save_vae(params, vae_path);
            std::printf("trained %lld epochs, final loss %.6g -> %s\n",
                        static_cast<long long>(tcfg.epochs), curve.empty() ? 0.0 : curve.back(),
                        vae_path.c_str());
        } else if (*c_opt) {
            apply_toggles(ocfg, o_kset, o_np2, o_np3, o_nsym);
            Dataset ds = load_dataset(dataset_dir);
            VaeParams params = load_vae(vae_path);
            CollectionResult res = run_collection(ds, ocfg, params);
            fs::create_directories(fs::path(out_dir) / "manifests");
            int64_t ok = 0;
            for (const auto& tr : res.results) {
                if (tr.failed) {
                    std::fprintf(stderr, "warning: %s failed: %s\n", tr.target_id.c_str(),
                                 tr.error.c_str());
                    continue;
                }
                write_text((fs::path(out_dir) / "manifests" / (tr.target_id + ".json")).string(),
                           assembly_manifest(tr.assembly));
                ++ok;
            }
            save_bank(make_bank(ds, res), (fs::path(out_dir) / "bank").string());
            std::printf("optimized %lld/%zu targets -> %s\n", static_cast<long long>(ok),
                        res.results.size(), out_dir.c_str());
        } else if (*c_infer) {
            apply_toggles(fcfg, f_kset, f_np2, f_np3, f_nsym);
            Dataset ds = load_dataset(dataset_dir);
            VaeParams params = load_vae(vae_path);
            TrainingBank bank = load_bank(bank_dir);
            PointCloud query = load_cloud(target_path);
            // normalize like ingest: center, then the dataset's shared scale
            Vec3 c = query.centroid();
            for (auto& p : query.pts) p = ds.scale * (p - c);
            InferResult r = amortized_infer(infer_id, query, bank, ds.library, fcfg, params);
            write_text(infer_out, assembly_manifest(r.assembly));
            std::printf("%s: %s (neighbor %s, %lld phase-I steps) -> %s\n", infer_id.c_str(),
                        r.from_scratch ? "from scratch" : "warm start", r.neighbor_id.c_str(),
                        static_cast<long long>(r.phase1_iterations), infer_out.c_str());
        } else if (*c_eval) {
            apply_toggles(ecfg, e_kset, e_np2, e_np3, e_nsym);
            VaeParams params = load_vae(vae_path);
            Dataset ds;
            std::vector<SyntheticTarget> truth;
            const std::vector<SyntheticTarget>* truth_ptr = nullptr;
            if (syn_targets > 0) {
                ds.library = gen_library(espec, syn_parts, gen_seed);
                truth = gen_targets(espec, ds.library, syn_targets, gen_seed);
                for (const auto& t : truth) ds.targets.emplace_back(t.id, t.cloud);
                ds.source_tag = "synthetic";
                truth_ptr = &truth;
            } else if (!dataset_dir.empty()) {
                ds = load_dataset(dataset_dir);
            } else {
                throw std::runtime_error("eval needs --dataset or --synthetic");
            }
            EvalReport rep = ablation_run(ds, ecfg, params, truth_ptr);
            fs::create_directories(out_dir);
            write_text((fs::path(out_dir) / "report.json").string(), rep.to_json());
            write_text((fs::path(out_dir) / "report.txt").string(), rep.table());
            std::fputs(rep.table().c_str(), stdout);
        } else if (*c_exp) {
            TrainingBank bank = load_bank(bank_dir);
            fs::create_directories(out_dir);
            for (const auto& e : bank) {
                save_colored_segments(e.target, e.assembly,
                                      (fs::path(out_dir) / (e.target_id + "_segments.ply"))
                                          .string());
                write_text((fs::path(out_dir) / (e.target_id + "_assembly.json")).string(),
                           assembly_manifest(e.assembly));
            }
            std::printf("exported %zu targets -> %s\n", bank.size(), out_dir.c_str());
        }
    } catch (const std::exception& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 1;
    }
    return 0;
}
