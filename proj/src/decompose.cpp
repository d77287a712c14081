#include "para/decompose.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include "para/nn.hpp"
#include "para/optim.hpp"

namespace para {

void ScheduleConfig::validate() const {
    if (n1 < 1 || n2 < 1 || n3 < 1)
        throw std::invalid_argument("ScheduleConfig: counts must be >= 1");
    auto frac = [](double v) { return v > 0 && v < 1; };
    if (!frac(p_filter) || !frac(swap_frac) || !frac(borrow_worst) || !frac(borrow_accept))
        throw std::invalid_argument("ScheduleConfig: fractions must be in (0,1)");
    if (tau_overlap <= 0 || tau_cc <= 0)
        throw std::invalid_argument("ScheduleConfig: thresholds must be > 0");
    if (borrow_m < 1) throw std::invalid_argument("ScheduleConfig: borrow_m must be >= 1");
}

PointCloud DecompositionState::pooled() const {
    PointCloud out;
    for (int64_t i = 0; i < k; ++i) {
        const auto& d = decoded[static_cast<size_t>(i)];
        out.pts.insert(out.pts.end(), d.pts.begin(), d.pts.end());
        if (mirror_active(i)) {
            const auto& m = mirrored[static_cast<size_t>(i)];
            out.pts.insert(out.pts.end(), m.pts.begin(), m.pts.end());
        }
    }
    return out;
}

double overlap_penalty(const PointCloud& a, const PointCloud& b, double tau) {
    if (a.empty() || b.empty()) throw std::invalid_argument("overlap_penalty: empty cloud");
    if (tau <= 0) throw std::invalid_argument("overlap_penalty: tau must be > 0");
    double acc = 0;
    for (const auto& p : a.pts)
        for (const auto& q : b.pts) {
            double d = dist(p, q);
            if (d < tau) acc += tau - d;
        }
    return acc / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

void refresh_cache(DecompositionState& state, VaeEval& ev) {
    state.decoded.assign(static_cast<size_t>(state.k), PointCloud{});
    state.mirrored.assign(static_cast<size_t>(state.k), PointCloud{});
    for (int64_t i = 0; i < state.k; ++i) {
        const LatentPart& p = state.parts[static_cast<size_t>(i)];
        state.decoded[static_cast<size_t>(i)] =
            apply_pose(ev.decode(p.e), RigidPose{p.t, p.r});
        if (state.mirror_active(i))
            state.mirrored[static_cast<size_t>(i)] =
                reflect_points(state.decoded[static_cast<size_t>(i)], *state.plane);
    }
}

DecompositionState init_state(std::string target_id, const PointCloud& target, int64_t k,
                              uint64_t seed, const ScheduleConfig& cfg, VaeEval& ev) {
    if (k < 1) throw std::invalid_argument("init_state: k must be >= 1");
    if (target.empty()) throw std::invalid_argument("init_state: empty target");
    DecompositionState st;
    st.target_id = std::move(target_id);
    st.k = k;
    st.seed = seed;
    Rng rng(seed);
    Vec3 lo, hi;
    target.bbox(lo, hi);
    int64_t latent = ev.params().config().latent;
    for (int64_t i = 0; i < k; ++i) {
        LatentPart p;
        p.e.resize(static_cast<size_t>(latent));
        for (auto& v : p.e) v = rng.normal();
        for (int d = 0; d < 3; ++d) p.t[d] = rng.uniform(lo[d], hi[d]);
        p.r = rng.uniform(0.0, 2.0 * M_PI);
        st.parts.push_back(std::move(p));
    }
    st.merged.assign(static_cast<size_t>(k), false);
    if (cfg.use_symmetry) st.plane = detect_symmetry_plane(target, cfg.symmetry);
    refresh_cache(st, ev);
    return st;
}

namespace {

struct Phase1Graph {
    Graph g;
    int target_in = -1;
    std::vector<int> e_in, t_in, r_in;
    std::vector<int> posed, mirror;  // node ids; mirror -1 when inactive
    int loss = -1, recon = -1;
};

Phase1Graph build_phase1(const DecompositionState& st, int64_t n_target,
                         const VaeParams& params, const ScheduleConfig& cfg) {
    Phase1Graph pg;
    Graph& g = pg.g;
    g.set_training(false);
    std::map<std::string, int> cache;
    int64_t latent = params.config().latent;
    for (int64_t i = 0; i < st.k; ++i) {
        std::string tag = std::to_string(i);
        int e = g.input("e" + tag, {1, latent}, true);
        int t = g.input("t" + tag, {3}, true);
        int r = g.input("r" + tag, {1}, true);
        pg.e_in.push_back(e);
        pg.t_in.push_back(t);
        pg.r_in.push_back(r);
        int dec = params.append_decoder(g, e, cache);
        int flat = g.reshape(dec, {params.config().points, 3});
        int posed = g.rigid_transform(flat, t, r);
        pg.posed.push_back(posed);
        if (st.mirror_active(i)) {
            pg.mirror.push_back(
                g.reflect(posed, st.plane->point.data(), st.plane->normal.data()));
        } else {
            pg.mirror.push_back(-1);
        }
    }
    std::vector<int> clouds;
    // cloud list index -> owning part, for the mirror-pair exclusion
    std::vector<int64_t> owner;
    for (int64_t i = 0; i < st.k; ++i) {
        clouds.push_back(pg.posed[static_cast<size_t>(i)]);
        owner.push_back(i);
    }
    for (int64_t i = 0; i < st.k; ++i)
        if (pg.mirror[static_cast<size_t>(i)] >= 0) {
            clouds.push_back(pg.mirror[static_cast<size_t>(i)]);
            owner.push_back(i);
        }
    pg.target_in = g.input("target", {n_target, 3});
    int pooledn = clouds.size() == 1 ? clouds[0] : g.concat(clouds);
    pg.recon = g.chamfer(pooledn, pg.target_in);
    std::vector<int> pair_terms;
    for (size_t a = 0; a < clouds.size(); ++a)
        for (size_t b = a + 1; b < clouds.size(); ++b) {
            if (owner[a] == owner[b]) continue;  // free part vs its own mirror
            pair_terms.push_back(g.overlap_penalty(clouds[a], clouds[b], cfg.tau_overlap));
        }
    if (pair_terms.empty()) {
        pg.loss = pg.recon;
    } else {
        int acc = pair_terms[0];
        for (size_t i = 1; i < pair_terms.size(); ++i) acc = g.add(acc, pair_terms[i]);
        pg.loss = g.add(pg.recon, g.scale(acc, 1.0 / static_cast<double>(pair_terms.size())));
    }
    return pg;
}

Tensor cloud_tensor(const PointCloud& c) {
    Tensor t = Tensor::zeros({c.size(), 3});
    std::memcpy(t.data.data(), c.raw(), static_cast<size_t>(c.size()) * 3 * sizeof(double));
    return t;
}

void set_part_inputs(Phase1Graph& pg, const DecompositionState& st) {
    for (int64_t i = 0; i < st.k; ++i) {
        const LatentPart& p = st.parts[static_cast<size_t>(i)];
        pg.g.set_input(pg.e_in[static_cast<size_t>(i)],
                       Tensor::from({1, static_cast<int64_t>(p.e.size())}, p.e));
        pg.g.set_input(pg.t_in[static_cast<size_t>(i)],
                       Tensor::from({3}, {p.t[0], p.t[1], p.t[2]}));
        pg.g.set_input(pg.r_in[static_cast<size_t>(i)], Tensor::from({1}, {p.r}));
    }
}

PointCloud node_cloud(const Graph& g, int id) {
    const Tensor& v = g.value(id);
    PointCloud c;
    c.pts.resize(static_cast<size_t>(v.shape[0]));
    std::memcpy(c.pts[0].data(), v.data.data(), v.data.size() * sizeof(double));
    return c;
}

void check_finite_loss(const Phase1Graph& pg, const DecompositionState& st) {
    if (std::isfinite(pg.g.value(pg.loss).data[0])) return;
    for (int64_t i = 0; i < st.k; ++i)
        if (!pg.g.value(pg.posed[static_cast<size_t>(i)]).all_finite())
            throw GraphError("phase1: non-finite decoded cloud for part " + std::to_string(i));
    throw GraphError("phase1: non-finite loss");
}

}  // namespace

std::pair<double, std::vector<PointCloud>> phase1_loss(const DecompositionState& state,
                                                       const PointCloud& target,
                                                       const VaeParams& params,
                                                       const ScheduleConfig& cfg) {
    Phase1Graph pg = build_phase1(state, target.size(), params, cfg);
    set_part_inputs(pg, state);
    pg.g.set_input(pg.target_in, cloud_tensor(target));
    pg.g.forward();
    check_finite_loss(pg, state);
    std::vector<PointCloud> clouds;
    for (int64_t i = 0; i < state.k; ++i)
        clouds.push_back(node_cloud(pg.g, pg.posed[static_cast<size_t>(i)]));
    for (int64_t i = 0; i < state.k; ++i)
        if (pg.mirror[static_cast<size_t>(i)] >= 0)
            clouds.push_back(node_cloud(pg.g, pg.mirror[static_cast<size_t>(i)]));
    return {pg.g.value(pg.loss).data[0], std::move(clouds)};
}

void phase1_run(DecompositionState& state, const PointCloud& target, const VaeParams& params,
                const ScheduleConfig& cfg, int64_t steps, double lr) {
    if (steps < 1) throw std::invalid_argument("phase1_run: steps must be >= 1");
    Phase1Graph pg = build_phase1(state, target.size(), params, cfg);
    pg.g.set_input(pg.target_in, cloud_tensor(target));

    int64_t latent = params.config().latent;
    // optimization variables as flat tensors: e_i, t_i, r_i per part
    std::vector<Tensor> vars;
    for (const auto& p : state.parts) {
        vars.push_back(Tensor::from({1, latent}, p.e));
        vars.push_back(Tensor::from({3}, {p.t[0], p.t[1], p.t[2]}));
        vars.push_back(Tensor::from({1}, {p.r}));
    }
    std::vector<Tensor*> vptrs;
    for (auto& v : vars) vptrs.push_back(&v);
    AdamState adam = AdamState::init(vptrs);

    auto push_inputs = [&]() {
        for (int64_t i = 0; i < state.k; ++i) {
            pg.g.set_input(pg.e_in[static_cast<size_t>(i)], vars[static_cast<size_t>(3 * i)]);
            pg.g.set_input(pg.t_in[static_cast<size_t>(i)],
                           vars[static_cast<size_t>(3 * i + 1)]);
            pg.g.set_input(pg.r_in[static_cast<size_t>(i)],
                           vars[static_cast<size_t>(3 * i + 2)]);
        }
    };

    for (int64_t s = 0; s < steps; ++s) {
        push_inputs();
        pg.g.forward();
        check_finite_loss(pg, state);
        state.loss_history.push_back(pg.g.value(pg.loss).data[0]);
        if (lr == 0.0) continue;
        pg.g.backward(pg.loss);
        std::vector<const Tensor*> grads;
        for (int64_t i = 0; i < state.k; ++i) {
            grads.push_back(&pg.g.grad(pg.e_in[static_cast<size_t>(i)]));
            grads.push_back(&pg.g.grad(pg.t_in[static_cast<size_t>(i)]));
            grads.push_back(&pg.g.grad(pg.r_in[static_cast<size_t>(i)]));
        }
        adam_update(vptrs, grads, adam, lr);
    }

    for (int64_t i = 0; i < state.k; ++i) {
        LatentPart& p = state.parts[static_cast<size_t>(i)];
        p.e = vars[static_cast<size_t>(3 * i)].data;
        const auto& t = vars[static_cast<size_t>(3 * i + 1)].data;
        p.t = {t[0], t[1], t[2]};
        p.r = vars[static_cast<size_t>(3 * i + 2)].data[0];
    }
    // sync the cache and log the post-update loss
    push_inputs();
    pg.g.forward();
    check_finite_loss(pg, state);
    state.loss_history.push_back(pg.g.value(pg.loss).data[0]);
    state.decoded.assign(static_cast<size_t>(state.k), PointCloud{});
    state.mirrored.assign(static_cast<size_t>(state.k), PointCloud{});
    for (int64_t i = 0; i < state.k; ++i) {
        state.decoded[static_cast<size_t>(i)] = node_cloud(pg.g, pg.posed[static_cast<size_t>(i)]);
        if (pg.mirror[static_cast<size_t>(i)] >= 0)
            state.mirrored[static_cast<size_t>(i)] =
                node_cloud(pg.g, pg.mirror[static_cast<size_t>(i)]);
    }
}

std::vector<Tensor> phase1_gradients(const DecompositionState& state, const PointCloud& target,
                                     const VaeParams& params, const ScheduleConfig& cfg) {
    Phase1Graph pg = build_phase1(state, target.size(), params, cfg);
    set_part_inputs(pg, state);
    pg.g.set_input(pg.target_in, cloud_tensor(target));
    pg.g.forward();
    check_finite_loss(pg, state);
    pg.g.backward(pg.loss);
    std::vector<Tensor> grads;
    for (int64_t i = 0; i < state.k; ++i) {
        grads.push_back(pg.g.grad(pg.e_in[static_cast<size_t>(i)]));
        grads.push_back(pg.g.grad(pg.t_in[static_cast<size_t>(i)]));
        grads.push_back(pg.g.grad(pg.r_in[static_cast<size_t>(i)]));
    }
    return grads;
}

DistanceMatrix part_distances(const DecompositionState& state, const PointCloud& target) {
    std::vector<PointCloud> unions;
    for (int64_t i = 0; i < state.k; ++i) {
        PointCloud u = state.decoded[static_cast<size_t>(i)];
        if (state.mirror_active(i)) {
            const auto& m = state.mirrored[static_cast<size_t>(i)];
            u.pts.insert(u.pts.end(), m.pts.begin(), m.pts.end());
        }
        unions.push_back(std::move(u));
    }
    return pairwise_distances(target, unions);
}

int64_t swap_least_covered(std::vector<PointCloud>& clouds, const PointCloud& target,
                           const DistanceMatrix& q, double swap_frac) {
    int64_t n = q.rows, k = q.cols;
    std::vector<double> rowmin(static_cast<size_t>(n));
    double current = 0;
    for (int64_t i = 0; i < n; ++i) {
        double m = q.at(i, 0);
        for (int64_t j = 1; j < k; ++j) m = std::min(m, q.at(i, j));
        rowmin[static_cast<size_t>(i)] = m;
        current += m;
    }
    current /= static_cast<double>(n);

    int64_t nswap = static_cast<int64_t>(
        std::ceil(swap_frac * static_cast<double>(n)));
    nswap = std::min(nswap, n);
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        if (rowmin[static_cast<size_t>(a)] != rowmin[static_cast<size_t>(b)])
            return rowmin[static_cast<size_t>(a)] > rowmin[static_cast<size_t>(b)];
        return a < b;
    });
    std::vector<bool> in_tminus(static_cast<size_t>(n), false);
    for (int64_t i = 0; i < nswap; ++i) in_tminus[static_cast<size_t>(order[i])] = true;

    int64_t best_j = -1;
    double best_val = current;
    for (int64_t j = 0; j < k; ++j) {
        if (k == 1) break;  // removing the only part leaves nothing to cover with
        double acc = 0;
        for (int64_t i = 0; i < n; ++i) {
            if (in_tminus[static_cast<size_t>(i)]) continue;  // covered by the new part
            double m = std::numeric_limits<double>::infinity();
            for (int64_t c = 0; c < k; ++c)
                if (c != j) m = std::min(m, q.at(i, c));
            acc += m;
        }
        acc /= static_cast<double>(n);
        if (acc < best_val) {
            best_val = acc;
            best_j = j;
        }
    }
    if (best_j < 0) return -1;
    PointCloud tminus;
    for (int64_t i = 0; i < nswap; ++i)
        tminus.pts.push_back(target.pts[static_cast<size_t>(order[i])]);
    clouds[static_cast<size_t>(best_j)] = std::move(tminus);
    return best_j;
}

std::vector<std::vector<int64_t>> nn_segment(const PointCloud& target, const DistanceMatrix& q) {
    if (target.size() != q.rows) throw std::invalid_argument("nn_segment: size mismatch");
    std::vector<std::vector<int64_t>> segs(static_cast<size_t>(q.cols));
    for (int64_t i = 0; i < q.rows; ++i) {
        int64_t best = 0;
        for (int64_t j = 1; j < q.cols; ++j)
            if (q.at(i, j) < q.at(i, best)) best = j;
        segs[static_cast<size_t>(best)].push_back(i);
    }
    return segs;
}

std::vector<std::vector<int64_t>> filter_covered(const std::vector<std::vector<int64_t>>& segs,
                                                 const DistanceMatrix& q, double p,
                                                 bool global) {
    if (p <= 0 || p >= 1) throw std::invalid_argument("filter_covered: p must be in (0,1)");
    std::vector<std::vector<int64_t>> out(segs.size());

    if (global) {
        std::vector<double> all;
        for (size_t j = 0; j < segs.size(); ++j)
            for (int64_t i : segs[j]) all.push_back(q.at(i, static_cast<int64_t>(j)));
        if (all.empty()) return out;
        std::sort(all.begin(), all.end());
        double cutoff = all[static_cast<size_t>(
            std::min<int64_t>(static_cast<int64_t>(p * static_cast<double>(all.size())),
                              static_cast<int64_t>(all.size()) - 1))];
        for (size_t j = 0; j < segs.size(); ++j) {
            int64_t far_idx = -1;
            double far_d = -1;
            for (int64_t i : segs[j]) {
                double d = q.at(i, static_cast<int64_t>(j));
                if (d >= cutoff) out[j].push_back(i);
                if (d > far_d) {
                    far_d = d;
                    far_idx = i;
                }
            }
            if (out[j].empty() && far_idx >= 0) out[j].push_back(far_idx);
        }
        return out;
    }

    for (size_t j = 0; j < segs.size(); ++j) {
        const auto& s = segs[j];
        if (s.empty()) continue;
        int64_t keep = std::max<int64_t>(
            1, static_cast<int64_t>(std::ceil((1.0 - p) * static_cast<double>(s.size()))));
        std::vector<int64_t> order = s;
        std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            double da = q.at(a, static_cast<int64_t>(j)), db = q.at(b, static_cast<int64_t>(j));
            if (da != db) return da < db;
            return a < b;  // equal distances: lowest index dropped first
        });
        out[j].assign(order.end() - keep, order.end());
        std::sort(out[j].begin(), out[j].end());
    }
    return out;
}

std::vector<int64_t> farthest_component(const PointCloud& target,
                                        const std::vector<int64_t>& seg,
                                        const std::vector<int64_t>& others, double tau_cc) {
    if (seg.empty()) throw std::invalid_argument("farthest_component: empty segment");
    PointCloud segpts;
    for (int64_t i : seg) segpts.pts.push_back(target.pts[static_cast<size_t>(i)]);
    std::vector<int> label = connected_components(segpts, tau_cc);
    int ncomp = *std::max_element(label.begin(), label.end()) + 1;
    if (ncomp == 1) return seg;

    int best = -1;
    if (others.empty()) {
        // no distance criterion: largest component, ties to the first label
        std::vector<int64_t> count(static_cast<size_t>(ncomp), 0);
        for (int l : label) ++count[static_cast<size_t>(l)];
        int64_t bestc = -1;
        for (int c = 0; c < ncomp; ++c)
            if (count[static_cast<size_t>(c)] > bestc) {
                bestc = count[static_cast<size_t>(c)];
                best = c;
            }
    } else {
        std::vector<Vec3> centroid(static_cast<size_t>(ncomp), Vec3{0, 0, 0});
        std::vector<int64_t> count(static_cast<size_t>(ncomp), 0);
        for (size_t i = 0; i < seg.size(); ++i) {
            int l = label[i];
            centroid[static_cast<size_t>(l)] = centroid[static_cast<size_t>(l)] + segpts.pts[i];
            ++count[static_cast<size_t>(l)];
        }
        double bestd = -1;
        for (int c = 0; c < ncomp; ++c) {
            Vec3 ctr = (1.0 / static_cast<double>(count[static_cast<size_t>(c)])) *
                       centroid[static_cast<size_t>(c)];
            double acc = 0;
            for (int64_t o : others) acc += dist(ctr, target.pts[static_cast<size_t>(o)]);
            acc /= static_cast<double>(others.size());
            if (acc > bestd) {
                bestd = acc;
                best = c;
            }
        }
    }
    std::vector<int64_t> out;
    for (size_t i = 0; i < seg.size(); ++i)
        if (label[i] == best) out.push_back(seg[i]);
    return out;
}

LatentPart reencode(const PointCloud& component, VaeEval& ev) {
    if (component.empty()) throw std::invalid_argument("reencode: empty component");
    PartEntry entry = canonicalize_part(component, "", "", ev.params().config().points);
    LatentPart p;
    p.e = ev.encode_mu(entry.canonical);
    p.t = entry.canonical_pose.t;
    p.r = entry.canonical_pose.r;
    return p;
}

void merge_symmetric(DecompositionState& state, VaeEval& ev, double tau_cc) {
    if (!state.plane) throw std::logic_error("merge_symmetric: no symmetry plane");
    bool changed = false;
    for (int64_t i = 0; i < state.k; ++i) {
        if (!state.mirror_active(i)) continue;
        const PointCloud& d = state.decoded[static_cast<size_t>(i)];
        const PointCloud& m = state.mirrored[static_cast<size_t>(i)];
        double best = std::numeric_limits<double>::infinity();
        NnGrid grid(m.raw(), m.size());
        for (const auto& p : d.pts) {
            double d2;
            grid.nearest(p.data(), &d2);
            best = std::min(best, std::sqrt(d2));
            if (best < tau_cc) break;
        }
        if (best >= tau_cc) continue;
        PointCloud u = d;
        u.pts.insert(u.pts.end(), m.pts.begin(), m.pts.end());
        state.parts[static_cast<size_t>(i)] = reencode(u, ev);
        state.merged[static_cast<size_t>(i)] = true;
        changed = true;
    }
    if (changed) refresh_cache(state, ev);
}

void phase2_shift(DecompositionState& state, const PointCloud& target,
                  const ScheduleConfig& cfg, VaeEval& ev) {
    if (state.decoded.size() != static_cast<size_t>(state.k))
        throw std::logic_error("phase2_shift: stale decoded cache");
    if (state.plane && cfg.use_symmetry) merge_symmetric(state, ev, cfg.tau_cc);

    // work on part union clouds (free cloud + active mirror)
    std::vector<PointCloud> clouds;
    for (int64_t i = 0; i < state.k; ++i) {
        PointCloud u = state.decoded[static_cast<size_t>(i)];
        if (state.mirror_active(i)) {
            const auto& m = state.mirrored[static_cast<size_t>(i)];
            u.pts.insert(u.pts.end(), m.pts.begin(), m.pts.end());
        }
        clouds.push_back(std::move(u));
    }
    DistanceMatrix q = pairwise_distances(target, clouds);
    int64_t swapped = swap_least_covered(clouds, target, q, cfg.swap_frac);
    if (swapped >= 0) q = pairwise_distances(target, clouds);

    auto segs = nn_segment(target, q);
    segs = filter_covered(segs, q, cfg.p_filter, cfg.filter_global);

    for (int64_t i = 0; i < state.k; ++i) {
        const auto& s = segs[static_cast<size_t>(i)];
        if (s.empty()) continue;  // part covers nothing: leave it untouched
        std::vector<int64_t> others;
        for (int64_t j = 0; j < state.k; ++j)
            if (j != i)
                others.insert(others.end(), segs[static_cast<size_t>(j)].begin(),
                              segs[static_cast<size_t>(j)].end());
        std::vector<int64_t> comp = farthest_component(target, s, others, cfg.tau_cc);
        PointCloud cpts;
        for (int64_t idx : comp) cpts.pts.push_back(target.pts[static_cast<size_t>(idx)]);
        try {
            state.parts[static_cast<size_t>(i)] = reencode(cpts, ev);
        } catch (const std::exception&) {
            // degenerate component (e.g. a single point): keep the old part
        }
    }
    refresh_cache(state, ev);
}

void phase3_borrow(std::vector<DecompositionState>& states,
                   const std::vector<PointCloud>& targets, std::vector<double>& errors,
                   const DistanceMatrix& target_dist, const ScheduleConfig& cfg,
                   const VaeParams& params, uint64_t master_seed) {
    int64_t n = static_cast<int64_t>(states.size());
    if (targets.size() != states.size() || errors.size() != states.size())
        throw std::invalid_argument("phase3_borrow: size mismatch");
    if (n < 2) return;
    VaeEval ev(params);

    std::vector<int64_t> by_err(static_cast<size_t>(n));
    std::iota(by_err.begin(), by_err.end(), 0);
    std::sort(by_err.begin(), by_err.end(), [&](int64_t a, int64_t b) {
        if (errors[static_cast<size_t>(a)] != errors[static_cast<size_t>(b)])
            return errors[static_cast<size_t>(a)] > errors[static_cast<size_t>(b)];
        return a < b;
    });
    int64_t nworst = std::min<int64_t>(
        n, static_cast<int64_t>(std::ceil(cfg.borrow_worst * static_cast<double>(n))));
    std::vector<bool> worst(static_cast<size_t>(n), false);
    for (int64_t i = 0; i < nworst; ++i) worst[static_cast<size_t>(by_err[i])] = true;

    std::vector<double> sorted_err(errors);
    std::sort(sorted_err.begin(), sorted_err.end());
    int64_t qi = std::max<int64_t>(
        0, static_cast<int64_t>(std::ceil(cfg.borrow_accept * static_cast<double>(n))) - 1);
    double accept_thr = sorted_err[static_cast<size_t>(qi)];

    for (int64_t wi = 0; wi < nworst; ++wi) {
        int64_t t = by_err[wi];
        // donors: nearest targets outside the worst set
        std::vector<int64_t> donors;
        for (int64_t d = 0; d < n; ++d)
            if (d != t && !worst[static_cast<size_t>(d)]) donors.push_back(d);
        std::sort(donors.begin(), donors.end(), [&](int64_t a, int64_t b) {
            double da = target_dist.at(t, a), db = target_dist.at(t, b);
            if (da != db) return da < db;
            return a < b;
        });
        if (static_cast<int64_t>(donors.size()) > cfg.borrow_m)
            donors.resize(static_cast<size_t>(cfg.borrow_m));

        bool adopted = false;
        for (int64_t d : donors) {
            if (states[static_cast<size_t>(d)].k != states[static_cast<size_t>(t)].k) continue;
            DecompositionState cand = states[static_cast<size_t>(t)];
            cand.parts = states[static_cast<size_t>(d)].parts;
            if (cand.plane)
                cand.merged = states[static_cast<size_t>(d)].merged;
            else
                cand.merged.assign(cand.merged.size(), false);
            refresh_cache(cand, ev);
            double err =
                phase1_loss(cand, targets[static_cast<size_t>(t)], params, cfg).first;
            if (err <= accept_thr) {
                cand.loss_history.push_back(err);
                states[static_cast<size_t>(t)] = std::move(cand);
                errors[static_cast<size_t>(t)] = err;
                adopted = true;
                break;
            }
        }
        if (!adopted) {
            const DecompositionState& old = states[static_cast<size_t>(t)];
            Rng stream = Rng::derive(master_seed, "borrow:" + old.target_id + ":" +
                                                      std::to_string(old.loss_history.size()));
            DecompositionState fresh =
                init_state(old.target_id, targets[static_cast<size_t>(t)], old.k,
                           stream.next_u64(), cfg, ev);
            fresh.loss_history = old.loss_history;
            double err =
                phase1_loss(fresh, targets[static_cast<size_t>(t)], params, cfg).first;
            fresh.loss_history.push_back(err);
            states[static_cast<size_t>(t)] = std::move(fresh);
            errors[static_cast<size_t>(t)] = err;
        }
    }
}

DecompositionState run_schedule(std::string target_id, const PointCloud& target, int64_t k,
                                const ScheduleConfig& cfg, const VaeParams& params,
                                uint64_t seed) {
    cfg.validate();
    VaeEval ev(params);
    DecompositionState st = init_state(std::move(target_id), target, k, seed, cfg, ev);

    double best_loss = std::numeric_limits<double>::infinity();
    std::vector<LatentPart> best_parts;
    std::vector<bool> best_merged;
    auto track = [&]() {
        double l = st.loss_history.back();
        if (l < best_loss) {
            best_loss = l;
            best_parts = st.parts;
            best_merged = st.merged;
        }
    };

    for (int64_t i3 = 0; i3 < cfg.n3; ++i3) {
        for (int64_t i2 = 0; i2 < cfg.n2; ++i2) {
            phase1_run(st, target, params, cfg, cfg.n1, cfg.lr);
            track();
            if (cfg.use_phase2) phase2_shift(st, target, cfg, ev);
        }
        // phase III requires a collection; the pipeline runs it
    }
    phase1_run(st, target, params, cfg, cfg.n1, cfg.lr);
    track();

    if (st.loss_history.back() > best_loss) {
        st.parts = best_parts;
        st.merged = best_merged;
        refresh_cache(st, ev);
        st.loss_history.push_back(best_loss);
    }
    return st;
}

namespace {

constexpr char kStateMagic[8] = {'P', 'A', 'R', 'A', 'D', 'E', 'C', '1'};

void put_u32(FILE* f, uint32_t v) { std::fwrite(&v, 4, 1, f); }
void put_i64(FILE* f, int64_t v) { std::fwrite(&v, 8, 1, f); }
void put_f64(FILE* f, double v) { std::fwrite(&v, 8, 1, f); }
void put_str(FILE* f, const std::string& s) {
    put_u32(f, static_cast<uint32_t>(s.size()));
    std::fwrite(s.data(), 1, s.size(), f);
}
uint32_t get_u32(FILE* f) {
    uint32_t v = 0;
    if (std::fread(&v, 4, 1, f) != 1) throw std::runtime_error("state file: truncated");
    return v;
}
int64_t get_i64(FILE* f) {
    int64_t v = 0;
    if (std::fread(&v, 8, 1, f) != 1) throw std::runtime_error("state file: truncated");
    return v;
}
double get_f64(FILE* f) {
    double v = 0;
    if (std::fread(&v, 8, 1, f) != 1) throw std::runtime_error("state file: truncated");
    return v;
}
std::string get_str(FILE* f) {
    uint32_t len = get_u32(f);
    std::string s(len, '\0');
    if (len && std::fread(s.data(), 1, len, f) != len)
        throw std::runtime_error("state file: truncated");
    return s;
}

}  // namespace

void save_state(const DecompositionState& state, const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("save_state: cannot open " + path);
    std::fwrite(kStateMagic, 1, 8, f);
    put_u32(f, 1);
    put_str(f, state.target_id);
    put_i64(f, state.k);
    put_i64(f, static_cast<int64_t>(state.seed));
    put_u32(f, state.plane ? 1 : 0);
    if (state.plane) {
        for (int d = 0; d < 3; ++d) put_f64(f, state.plane->point[d]);
        for (int d = 0; d < 3; ++d) put_f64(f, state.plane->normal[d]);
    }
    for (int64_t i = 0; i < state.k; ++i)
        put_u32(f, state.merged[static_cast<size_t>(i)] ? 1 : 0);
    for (const auto& p : state.parts) {
        put_i64(f, static_cast<int64_t>(p.e.size()));
        std::fwrite(p.e.data(), 8, p.e.size(), f);
        for (int d = 0; d < 3; ++d) put_f64(f, p.t[d]);
        put_f64(f, p.r);
    }
    put_i64(f, static_cast<int64_t>(state.loss_history.size()));
    std::fwrite(state.loss_history.data(), 8, state.loss_history.size(), f);
    if (std::fclose(f) != 0) throw std::runtime_error("save_state: write failed for " + path);
}

DecompositionState load_state(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw std::runtime_error("load_state: cannot open " + path);
    struct Closer {
        FILE* f;
        ~Closer() { std::fclose(f); }
    } closer{f};
    char magic[8];
    if (std::fread(magic, 1, 8, f) != 8 || std::memcmp(magic, kStateMagic, 8) != 0)
        throw std::runtime_error("load_state: bad magic in " + path);
    if (get_u32(f) != 1) throw std::runtime_error("load_state: unsupported version");
    DecompositionState st;
    st.target_id = get_str(f);
    st.k = get_i64(f);
    st.seed = static_cast<uint64_t>(get_i64(f));
    if (get_u32(f)) {
        SymmetryPlane plane;
        for (int d = 0; d < 3; ++d) plane.point[d] = get_f64(f);
        for (int d = 0; d < 3; ++d) plane.normal[d] = get_f64(f);
        st.plane = plane;
    }
    st.merged.resize(static_cast<size_t>(st.k));
    for (int64_t i = 0; i < st.k; ++i) st.merged[static_cast<size_t>(i)] = get_u32(f) != 0;
    for (int64_t i = 0; i < st.k; ++i) {
        LatentPart p;
        p.e.resize(static_cast<size_t>(get_i64(f)));
        if (std::fread(p.e.data(), 8, p.e.size(), f) != p.e.size())
            throw std::runtime_error("state file: truncated");
        for (int d = 0; d < 3; ++d) p.t[d] = get_f64(f);
        p.r = get_f64(f);
        st.parts.push_back(std::move(p));
    }
    st.loss_history.resize(static_cast<size_t>(get_i64(f)));
    if (st.loss_history.size() &&
        std::fread(st.loss_history.data(), 8, st.loss_history.size(), f) !=
            st.loss_history.size())
        throw std::runtime_error("state file: truncated");
    return st;
}

}  // namespace para
