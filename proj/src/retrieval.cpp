#include "para/retrieval.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include "para/graph.hpp"
#include "para/optim.hpp"
#include "para/rng.hpp"

namespace para {

namespace {

Tensor cloud_tensor(const PointCloud& c) {
    Tensor t = Tensor::zeros({c.size(), 3});
    std::memcpy(t.data.data(), c.raw(), static_cast<size_t>(c.size()) * 3 * sizeof(double));
    return t;
}

PointCloud subcloud(const PointCloud& target, const std::vector<int64_t>& idx) {
    PointCloud c;
    c.pts.reserve(idx.size());
    for (int64_t i : idx) c.pts.push_back(target.pts[static_cast<size_t>(i)]);
    return c;
}

uint64_t fnv_mix(uint64_t h, uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xff;
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t fnv_mix(uint64_t h, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    return fnv_mix(h, bits);
}

}  // namespace

std::vector<std::vector<int64_t>> final_segment(const PointCloud& target,
                                                const std::vector<PointCloud>& decoded) {
    return nn_segment(target, pairwise_distances(target, decoded));
}

std::pair<RigidPose, double> fit_part_to_segment(const PointCloud& part, const PointCloud& seg,
                                                 int restarts, int64_t steps, double lr) {
    if (part.empty() || seg.empty())
        throw std::invalid_argument("fit_part_to_segment: empty cloud");
    if (restarts < 1) throw std::invalid_argument("fit_part_to_segment: restarts must be >= 1");

    Graph g;
    int pts = g.input("pts", {part.size(), 3});
    int t_in = g.input("t", {3}, true);
    int r_in = g.input("r", {1}, true);
    int posed = g.rigid_transform(pts, t_in, r_in);
    int seg_in = g.input("seg", {seg.size(), 3});
    int loss = g.chamfer(posed, seg_in);
    g.set_input(pts, cloud_tensor(part));
    g.set_input(seg_in, cloud_tensor(seg));

    Vec3 pc = part.centroid();
    Vec3 sc = seg.centroid();

    RigidPose best_pose;
    double best_fit = std::numeric_limits<double>::infinity();
    for (int s = 0; s < restarts; ++s) {
        double yaw = 2.0 * M_PI * static_cast<double>(s) / static_cast<double>(restarts);
        Vec3 pc_rot = apply_pose(pc, RigidPose{{0, 0, 0}, yaw});
        Tensor t = Tensor::from({3}, {sc[0] - pc_rot[0], sc[1] - pc_rot[1], sc[2] - pc_rot[2]});
        Tensor r = Tensor::from({1}, {yaw});
        if (lr > 0) {
            std::vector<Tensor*> vars{&t, &r};
            AdamState adam = AdamState::init(vars);
            for (int64_t step = 0; step < steps; ++step) {
                g.set_input(t_in, t);
                g.set_input(r_in, r);
                g.forward();
                g.backward(loss);
                std::vector<const Tensor*> grads{&g.grad(t_in), &g.grad(r_in)};
                adam_update(vars, grads, adam, lr);
            }
        }
        RigidPose pose{{t.data[0], t.data[1], t.data[2]}, r.data[0]};
        double fit = chamfer(apply_pose(part, pose), seg);
        if (fit < best_fit) {
            best_fit = fit;
            best_pose = pose;
        }
    }
    return {best_pose, best_fit};
}

RetrievedPart retrieve_for_segment(const PointCloud& target, const std::vector<int64_t>& seg,
                                   const PartLibrary& library, int64_t q,
                                   const FitConfig& fit) {
    if (library.size() == 0) throw std::invalid_argument("retrieve_for_segment: empty library");
    if (seg.empty()) throw std::invalid_argument("retrieve_for_segment: empty segment");
    if (q < 1 || q > library.size())
        throw std::invalid_argument("retrieve_for_segment: q out of [1, |library|]");

    PointCloud segcloud = subcloud(target, seg);

    // rank the library by chamfer between canonical forms
    std::vector<int64_t> order(static_cast<size_t>(library.size()));
    std::iota(order.begin(), order.end(), 0);
    if (q < library.size()) {
        PointCloud canon;
        try {
            canon = canonicalize_part(segcloud, "", "",
                                      library.parts[0].canonical.size())
                        .canonical;
        } catch (const std::exception&) {
            // degenerate segment: fall back to a centered copy
            canon = segcloud;
            Vec3 c = segcloud.centroid();
            for (auto& p : canon.pts) p = p - c;
        }
        std::vector<double> d(static_cast<size_t>(library.size()));
        for (int64_t j = 0; j < library.size(); ++j)
            d[static_cast<size_t>(j)] =
                chamfer(canon, library.parts[static_cast<size_t>(j)].canonical);
        std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            if (d[static_cast<size_t>(a)] != d[static_cast<size_t>(b)])
                return d[static_cast<size_t>(a)] < d[static_cast<size_t>(b)];
            return a < b;
        });
        order.resize(static_cast<size_t>(q));
    }

    RetrievedPart best;
    double best_fit = std::numeric_limits<double>::infinity();
    int64_t best_idx = -1;
    for (int64_t j : order) {
        const PartEntry& part = library.parts[static_cast<size_t>(j)];
        auto [pose, f] = fit_part_to_segment(part.canonical, segcloud, fit.restarts, fit.steps,
                                             fit.lr);
        if (f < best_fit || (f == best_fit && j < best_idx)) {
            best_fit = f;
            best_idx = j;
            best.part_id = part.id;
            best.pose = pose;
            best.fit = f;
        }
    }
    best.segment = seg;
    return best;
}

Assembly retrieve_assembly(const DecompositionState& state, const PointCloud& target,
                           const PartLibrary& library, const RetrievalConfig& cfg) {
    if (state.decoded.size() != static_cast<size_t>(state.k))
        throw std::logic_error("retrieve_assembly: stale decoded cache");
    std::vector<PointCloud> decoded;
    for (int64_t i = 0; i < state.k; ++i) {
        decoded.push_back(state.decoded[static_cast<size_t>(i)]);
        if (state.mirror_active(i)) decoded.push_back(state.mirrored[static_cast<size_t>(i)]);
    }
    auto segs = final_segment(target, decoded);

    int64_t q = cfg.q < 0 ? library.size() : cfg.q;
    Assembly a;
    a.target_id = state.target_id;
    a.k = state.k;
    a.seed = state.seed;
    PointCloud pooled;
    for (const auto& seg : segs) {
        if (seg.empty()) continue;
        RetrievedPart rp = retrieve_for_segment(target, seg, library, q, cfg.fit);
        for (const auto& e : library.parts)
            if (e.id == rp.part_id) {
                PointCloud posed = apply_pose(e.canonical, rp.pose);
                pooled.pts.insert(pooled.pts.end(), posed.pts.begin(), posed.pts.end());
                break;
            }
        a.parts.push_back(std::move(rp));
    }
    a.recon = pooled.empty() ? std::numeric_limits<double>::infinity()
                             : chamfer(pooled, target);
    return a;
}

KCandidate select_k(const std::vector<KCandidate>& candidates, double alpha) {
    if (candidates.empty()) throw std::invalid_argument("select_k: no candidates");
    size_t best = 0;
    double best_pen = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < candidates.size(); ++i) {
        double pen = candidates[i].assembly.recon +
                     alpha * static_cast<double>(candidates[i].assembly.parts.size());
        bool better = pen < best_pen ||
                      (pen == best_pen && candidates[i].k < candidates[best].k);
        if (better) {
            best_pen = pen;
            best = i;
        }
    }
    KCandidate out = candidates[best];
    out.penalty = best_pen;
    return out;
}

uint64_t config_checksum(const ScheduleConfig& s, const RetrievalConfig& r) {
    uint64_t h = 1469598103934665603ull;
    h = fnv_mix(h, static_cast<uint64_t>(s.n1));
    h = fnv_mix(h, static_cast<uint64_t>(s.n2));
    h = fnv_mix(h, static_cast<uint64_t>(s.n3));
    h = fnv_mix(h, s.lr);
    h = fnv_mix(h, s.tau_overlap);
    h = fnv_mix(h, s.p_filter);
    h = fnv_mix(h, s.tau_cc);
    h = fnv_mix(h, s.swap_frac);
    h = fnv_mix(h, s.borrow_worst);
    h = fnv_mix(h, s.borrow_accept);
    h = fnv_mix(h, static_cast<uint64_t>(s.borrow_m));
    h = fnv_mix(h, static_cast<uint64_t>(s.filter_global));
    h = fnv_mix(h, static_cast<uint64_t>(s.use_phase2));
    h = fnv_mix(h, static_cast<uint64_t>(s.use_phase3));
    h = fnv_mix(h, static_cast<uint64_t>(s.use_symmetry));
    h = fnv_mix(h, static_cast<uint64_t>(s.symmetry.candidates));
    h = fnv_mix(h, s.symmetry.tol_frac);
    h = fnv_mix(h, s.symmetry.overlap_frac);
    for (int64_t k : r.k_set) h = fnv_mix(h, static_cast<uint64_t>(k));
    h = fnv_mix(h, r.alpha);
    h = fnv_mix(h, static_cast<uint64_t>(r.q));
    h = fnv_mix(h, static_cast<uint64_t>(r.fit.restarts));
    h = fnv_mix(h, static_cast<uint64_t>(r.fit.steps));
    h = fnv_mix(h, r.fit.lr);
    return h;
}

Assembly assemble(const std::string& target_id, const PointCloud& target,
                  const PartLibrary& library, const ScheduleConfig& sched,
                  const RetrievalConfig& rcfg, const VaeParams& params, uint64_t seed,
                  std::vector<KCandidate>* all_out) {
    if (rcfg.k_set.empty()) throw std::invalid_argument("assemble: empty k set");
    std::vector<KCandidate> cands;
    for (int64_t k : rcfg.k_set) {
        KCandidate c;
        c.k = k;
        uint64_t kseed = Rng::derive(seed, "k:" + std::to_string(k)).next_u64();
        c.state = run_schedule(target_id, target, k, sched, params, kseed);
        c.assembly = retrieve_assembly(c.state, target, library, rcfg);
        c.penalty = c.assembly.recon +
                    rcfg.alpha * static_cast<double>(c.assembly.parts.size());
        cands.push_back(std::move(c));
    }
    KCandidate best = select_k(cands, rcfg.alpha);
    if (all_out) *all_out = std::move(cands);
    Assembly a = best.assembly;
    a.seed = seed;
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(config_checksum(sched, rcfg)));
    a.config_hash = hex;
    return a;
}

}  // namespace para
