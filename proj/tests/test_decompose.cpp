#include <algorithm>
#include <cstdio>
#include <numeric>
#include <set>

#include "doctest.h"
#include "para/decompose.hpp"
#include "para/geom.hpp"
#include "para/vae.hpp"

using namespace para;

namespace {

PointCloud box_cloud(Rng& rng, int64_t n, Vec3 half_extents) {
    PointCloud c;
    c.pts.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        c.pts.push_back({rng.uniform(-half_extents[0], half_extents[0]),
                         rng.uniform(-half_extents[1], half_extents[1]),
                         rng.uniform(-half_extents[2], half_extents[2])});
    return c;
}

VaeConfig small_arch() {
    VaeConfig cfg;
    cfg.points = 64;
    return cfg;
}

VaeParams random_frozen(const VaeConfig& cfg, uint64_t seed) {
    VaeParams p(cfg);
    Rng rng(seed);
    p.init_random(rng);
    p.freeze();
    return p;
}

PartLibrary box_library(int64_t count, int64_t points, uint64_t seed) {
    PartLibrary lib;
    Rng rng(seed);
    for (int64_t i = 0; i < count; ++i) {
        Vec3 he = {rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5)};
        PointCloud raw = box_cloud(rng, 4 * points, he);
        lib.parts.push_back(canonicalize_part(raw, "part" + std::to_string(i), "synthetic",
                                              points));
    }
    return lib;
}

// One trained model shared by the fixture-heavy cases; training it once
// keeps the suite fast.
struct TrainedVae {
    PartLibrary lib;
    VaeParams params{VaeConfig{}};
    double round_trip = 0;  // worst library round-trip chamfer
};

const TrainedVae& trained() {
    static TrainedVae tv = [] {
        TrainedVae t;
        t.lib = box_library(6, 64, 21);
        VaeTrainConfig cfg;
        cfg.arch = small_arch();
        cfg.epochs = 600;
        cfg.batch = 6;
        cfg.lr = 2e-3;
        cfg.lr_min = 1e-5;
        cfg.beta = 1e-6;
        cfg.seed = 22;
        t.params = train_vae(t.lib, cfg);
        for (const auto& p : t.lib.parts) {
            PointCloud rt = decode(t.params, encode_mu(t.params, p.canonical));
            t.round_trip = std::max(t.round_trip, chamfer(rt, p.canonical));
        }
        return t;
    }();
    return tv;
}

LatentPart lib_part(const TrainedVae& tv, size_t idx, Vec3 t, double r) {
    LatentPart p;
    p.e = encode_mu(tv.params, tv.lib.parts[idx].canonical);
    p.t = t;
    p.r = r;
    return p;
}

DecompositionState make_state(std::vector<LatentPart> parts, VaeEval& ev,
                              std::optional<SymmetryPlane> plane = {}) {
    DecompositionState st;
    st.target_id = "t";
    st.k = static_cast<int64_t>(parts.size());
    st.parts = std::move(parts);
    st.plane = plane;
    st.merged.assign(st.parts.size(), false);
    refresh_cache(st, ev);
    return st;
}

LatentPart random_part(Rng& rng, int64_t latent, Vec3 lo, Vec3 hi) {
    LatentPart p;
    p.e.resize(static_cast<size_t>(latent));
    for (auto& v : p.e) v = rng.normal();
    for (int d = 0; d < 3; ++d) p.t[d] = rng.uniform(lo[d], hi[d]);
    p.r = rng.uniform(0.0, 2.0 * M_PI);
    return p;
}

bool parts_equal(const std::vector<LatentPart>& a, const std::vector<LatentPart>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i].e != b[i].e || a[i].t != b[i].t || a[i].r != b[i].r) return false;
    return true;
}

}  // namespace

TEST_CASE("overlap_penalty hand sums") {
    PointCloud da(std::vector<Vec3>{{0, 0, 0}});
    PointCloud db(std::vector<Vec3>{{0.05, 0, 0}});
    CHECK(overlap_penalty(da, db, 0.1) == doctest::Approx(0.05).epsilon(1e-12));

    PointCloud far(std::vector<Vec3>{{3, 0, 0}, {0, 4, 0}});
    CHECK(overlap_penalty(da, far, 0.1) == 0.0);

    PointCloud da2(std::vector<Vec3>{{0, 0, 0}, {1, 0, 0}});
    PointCloud db2(std::vector<Vec3>{{0, 0, 0}});
    CHECK(overlap_penalty(da2, db2, 0.1) == doctest::Approx(0.05).epsilon(1e-12));

    CHECK_THROWS_AS(overlap_penalty(da, PointCloud{}, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(overlap_penalty(da, db, 0.0), std::invalid_argument);
}

TEST_CASE("init_state is seeded, in-bbox, symmetry-aware") {
    VaeParams params = random_frozen(small_arch(), 31);
    VaeEval ev(params);
    Rng rng(32);
    // symmetric target: a cloud unioned with its x=0 mirror
    PointCloud half = box_cloud(rng, 120, {0.3, 0.2, 0.4});
    for (auto& p : half.pts) p[0] += 0.5;
    PointCloud target = half;
    SymmetryPlane plane{{0, 0, 0}, {1, 0, 0}};
    for (const auto& p : half.pts) target.pts.push_back(reflect_point(p, plane));

    ScheduleConfig cfg;
    DecompositionState a = init_state("t", target, 3, 7, cfg, ev);
    DecompositionState b = init_state("t", target, 3, 7, cfg, ev);
    CHECK(parts_equal(a.parts, b.parts));
    CHECK(a.k == 3);
    CHECK(a.decoded.size() == 3);

    Vec3 lo, hi;
    target.bbox(lo, hi);
    for (const auto& p : a.parts)
        for (int d = 0; d < 3; ++d) {
            CHECK(p.t[d] >= lo[d]);
            CHECK(p.t[d] <= hi[d]);
        }

    CHECK(a.plane.has_value());
    CHECK(std::abs(a.plane->point[0]) < 0.05);
    CHECK(std::abs(std::abs(a.plane->normal[0]) - 1.0) < 0.05);
    for (int64_t i = 0; i < a.k; ++i) CHECK(a.mirrored[static_cast<size_t>(i)].size() > 0);

    cfg.use_symmetry = false;
    DecompositionState c = init_state("t", target, 2, 7, cfg, ev);
    CHECK(!c.plane.has_value());

    CHECK_THROWS_AS(init_state("t", target, 0, 7, cfg, ev), std::invalid_argument);
}

TEST_CASE("phase1_loss matches free-function recompute") {
    VaeParams params = random_frozen(small_arch(), 41);
    VaeEval ev(params);
    Rng rng(42);
    ScheduleConfig cfg;
    cfg.tau_overlap = 0.25;

    // k=1, target equal to the decoded part: pure chamfer, ~0
    DecompositionState one =
        make_state({random_part(rng, 64, {-1, -1, -1}, {1, 1, 1})}, ev);
    auto [l1, c1] = phase1_loss(one, one.decoded[0], params, cfg);
    CHECK(c1.size() == 1);
    CHECK(l1 == doctest::Approx(0.0).epsilon(1e-12));

    // k=2 without symmetry: chamfer(pooled, T) + overlap of the one pair
    PointCloud target = box_cloud(rng, 90, {0.6, 0.3, 0.5});
    DecompositionState two = make_state({random_part(rng, 64, {-1, -1, -1}, {1, 1, 1}),
                                         random_part(rng, 64, {-1, -1, -1}, {1, 1, 1})},
                                        ev);
    auto [l2, c2] = phase1_loss(two, target, params, cfg);
    REQUIRE(c2.size() == 2);
    PointCloud pooled = c2[0];
    pooled.pts.insert(pooled.pts.end(), c2[1].pts.begin(), c2[1].pts.end());
    double expect = chamfer(pooled, target) + overlap_penalty(c2[0], c2[1], cfg.tau_overlap);
    CHECK(l2 == doctest::Approx(expect).epsilon(1e-10));
    CHECK(overlap_penalty(c2[0], c2[1], cfg.tau_overlap) > 0);

    // symmetric k=2: four clouds, own free/mirror pairs excluded
    SymmetryPlane plane{{0, 0, 0}, {1, 0, 0}};
    DecompositionState sym = make_state({two.parts[0], two.parts[1]}, ev, plane);
    auto [l3, c3] = phase1_loss(sym, target, params, cfg);
    REQUIRE(c3.size() == 4);  // free 0, free 1, mirror 0, mirror 1
    PointCloud pooled3;
    for (const auto& c : c3) pooled3.pts.insert(pooled3.pts.end(), c.pts.begin(), c.pts.end());
    int owner[4] = {0, 1, 0, 1};
    double ovl = 0;
    int npairs = 0;
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j) {
            if (owner[i] == owner[j]) continue;
            ovl += overlap_penalty(c3[static_cast<size_t>(i)], c3[static_cast<size_t>(j)],
                                   cfg.tau_overlap);
            ++npairs;
        }
    CHECK(npairs == 4);
    CHECK(l3 == doctest::Approx(chamfer(pooled3, target) + ovl / npairs).epsilon(1e-10));

    // non-finite latent names the offending part
    DecompositionState bad = two;
    bad.parts[1].e[3] = std::nan("");
    try {
        phase1_loss(bad, target, params, cfg);
        FAIL("expected GraphError");
    } catch (const GraphError& e) {
        CHECK(std::string(e.what()).find("part 1") != std::string::npos);
    }
}

TEST_CASE("phase1 gradients match finite differences") {
    VaeConfig arch = small_arch();
    VaeParams params = random_frozen(arch, 51);
    VaeEval ev(params);
    Rng rng(52);
    ScheduleConfig cfg;
    cfg.tau_overlap = 0.3;

    PointCloud target = box_cloud(rng, 50, {0.5, 0.3, 0.4});
    SymmetryPlane plane{{0.02, 0, 0}, {1, 0, 0}};
    DecompositionState st = make_state({random_part(rng, 64, {-0.4, -0.4, -0.4}, {0.4, 0.4, 0.4}),
                                        random_part(rng, 64, {-0.4, -0.4, -0.4}, {0.4, 0.4, 0.4})},
                                       ev, plane);

    const int64_t per = 64 + 3 + 1;
    auto unpack = [&](const Tensor& x) {
        DecompositionState s = st;
        for (int64_t i = 0; i < st.k; ++i) {
            const double* v = &x.data[static_cast<size_t>(i * per)];
            s.parts[static_cast<size_t>(i)].e.assign(v, v + 64);
            s.parts[static_cast<size_t>(i)].t = {v[64], v[65], v[66]};
            s.parts[static_cast<size_t>(i)].r = v[67];
        }
        return s;
    };
    Tensor x0 = Tensor::zeros({st.k * per});
    for (int64_t i = 0; i < st.k; ++i) {
        double* v = &x0.data[static_cast<size_t>(i * per)];
        std::copy(st.parts[static_cast<size_t>(i)].e.begin(),
                  st.parts[static_cast<size_t>(i)].e.end(), v);
        for (int d = 0; d < 3; ++d) v[64 + d] = st.parts[static_cast<size_t>(i)].t[d];
        v[67] = st.parts[static_cast<size_t>(i)].r;
    }

    std::vector<Tensor> an = phase1_gradients(st, target, params, cfg);
    REQUIRE(an.size() == static_cast<size_t>(3 * st.k));
    Tensor analytic = Tensor::zeros({st.k * per});
    for (int64_t i = 0; i < st.k; ++i) {
        double* v = &analytic.data[static_cast<size_t>(i * per)];
        const auto& ge = an[static_cast<size_t>(3 * i)].data;
        std::copy(ge.begin(), ge.end(), v);
        for (int d = 0; d < 3; ++d) v[64 + d] = an[static_cast<size_t>(3 * i + 1)].data[d];
        v[67] = an[static_cast<size_t>(3 * i + 2)].data[0];
    }

    Tensor fd = finite_diff_gradient(
        [&](const Tensor& x) { return phase1_loss(unpack(x), target, params, cfg).first; }, x0,
        1e-5);

    double num = 0, den = 0;
    for (size_t i = 0; i < fd.data.size(); ++i) {
        num += (fd.data[i] - analytic.data[i]) * (fd.data[i] - analytic.data[i]);
        den += fd.data[i] * fd.data[i];
    }
    REQUIRE(den > 0);
    CHECK(std::sqrt(num / den) <= 1e-4);
}

TEST_CASE("phase1_run reduces reconstruction loss and is deterministic") {
    const TrainedVae& tv = trained();
    VaeEval ev(tv.params);
    ScheduleConfig cfg;
    Rng rng(61);

    LatentPart truth = lib_part(tv, 0, {0.3, -0.1, 0.2}, 0.4);
    DecompositionState ideal = make_state({truth}, ev);
    PointCloud target = ideal.decoded[0];

    LatentPart start = truth;
    for (auto& v : start.e) v += 0.3 * rng.normal();
    start.t = start.t + Vec3{0.08, -0.05, 0.06};
    start.r += 0.25;
    DecompositionState st = make_state({start}, ev);
    DecompositionState st2 = st;

    double init_loss = phase1_loss(st, target, tv.params, cfg).first;
    phase1_run(st, target, tv.params, cfg, 60, 0.01);
    CHECK(st.loss_history.size() == 61);
    CHECK(st.loss_history.back() < init_loss);
    CHECK(st.loss_history.back() < 0.5 * init_loss);
    // cache kept in sync with the optimized parts
    PointCloud redecoded = apply_pose(ev.decode(st.parts[0].e), RigidPose{st.parts[0].t,
                                                                          st.parts[0].r});
    CHECK(chamfer(redecoded, st.decoded[0]) < 1e-12);

    // determinism
    phase1_run(st2, target, tv.params, cfg, 60, 0.01);
    CHECK(parts_equal(st.parts, st2.parts));
    CHECK(st.loss_history == st2.loss_history);

    // lr = 0: history grows, parts untouched
    DecompositionState frozen = make_state({start}, ev);
    phase1_run(frozen, target, tv.params, cfg, 5, 0.0);
    CHECK(parts_equal(frozen.parts, std::vector<LatentPart>{start}));
    CHECK(frozen.loss_history.size() == 6);
    CHECK(frozen.loss_history.front() == frozen.loss_history.back());

    CHECK_THROWS_AS(phase1_run(frozen, target, tv.params, cfg, 0, 0.01),
                    std::invalid_argument);
}

TEST_CASE("swap_least_covered replaces the useless part") {
    Rng rng(71);
    // target: cluster A near origin, cluster B near x=5
    PointCloud target;
    for (int i = 0; i < 10; ++i)
        target.pts.push_back({rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), 0});
    for (int i = 0; i < 10; ++i)
        target.pts.push_back({5 + rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), 0});

    // part 0 covers A exactly; part 1 covers nothing
    std::vector<PointCloud> clouds(2);
    clouds[0].pts.assign(target.pts.begin(), target.pts.begin() + 10);
    clouds[1].pts.push_back({50, 0, 0});

    DistanceMatrix q = pairwise_distances(target, clouds);
    int64_t swapped = swap_least_covered(clouds, target, q, 0.5);
    CHECK(swapped == 1);
    // the replacement is exactly the worst-covered half: cluster B
    REQUIRE(clouds[1].size() == 10);
    std::set<std::array<double, 3>> want(target.pts.begin() + 10, target.pts.end());
    std::set<std::array<double, 3>> got(clouds[1].pts.begin(), clouds[1].pts.end());
    CHECK(want == got);

    // everything already covered: no swap
    std::vector<PointCloud> covered(2);
    covered[0].pts.assign(target.pts.begin(), target.pts.begin() + 10);
    covered[1].pts.assign(target.pts.begin() + 10, target.pts.end());
    DistanceMatrix q2 = pairwise_distances(target, covered);
    std::vector<PointCloud> before = covered;
    CHECK(swap_least_covered(covered, target, q2, 0.3) == -1);
    CHECK(covered[0].pts == before[0].pts);
    CHECK(covered[1].pts == before[1].pts);
}

TEST_CASE("swap_least_covered never worsens coverage") {
    Rng rng(72);
    for (int trial = 0; trial < 8; ++trial) {
        PointCloud target = box_cloud(rng, 60, {1.0, 0.5, 1.0});
        std::vector<PointCloud> clouds;
        for (int j = 0; j < 3; ++j) {
            PointCloud c = box_cloud(rng, 15, {0.3, 0.3, 0.3});
            Vec3 off = {rng.uniform(-2, 2), rng.uniform(-1, 1), rng.uniform(-2, 2)};
            for (auto& p : c.pts) p = p + off;
            clouds.push_back(std::move(c));
        }
        auto mean_rowmin = [&](const std::vector<PointCloud>& cs) {
            DistanceMatrix q = pairwise_distances(target, cs);
            double acc = 0;
            for (int64_t i = 0; i < q.rows; ++i) {
                double m = q.at(i, 0);
                for (int64_t j = 1; j < q.cols; ++j) m = std::min(m, q.at(i, j));
                acc += m;
            }
            return acc / static_cast<double>(q.rows);
        };
        double pre = mean_rowmin(clouds);
        DistanceMatrix q = pairwise_distances(target, clouds);
        swap_least_covered(clouds, target, q, 0.15);
        CHECK(mean_rowmin(clouds) <= pre + 1e-12);
    }
}

TEST_CASE("nn_segment equals brute force and partitions the target") {
    Rng rng(81);
    PointCloud target = box_cloud(rng, 100, {1.0, 0.6, 1.0});
    std::vector<PointCloud> clouds;
    for (int j = 0; j < 3; ++j) {
        PointCloud c = box_cloud(rng, 20, {0.4, 0.4, 0.4});
        Vec3 off = {rng.uniform(-1, 1), 0, rng.uniform(-1, 1)};
        for (auto& p : c.pts) p = p + off;
        clouds.push_back(std::move(c));
    }
    DistanceMatrix q = pairwise_distances(target, clouds);
    auto segs = nn_segment(target, q);
    REQUIRE(segs.size() == 3);

    std::vector<int64_t> assigned(100, -1);
    for (size_t j = 0; j < segs.size(); ++j)
        for (int64_t i : segs[j]) {
            CHECK(assigned[static_cast<size_t>(i)] == -1);  // disjoint
            assigned[static_cast<size_t>(i)] = static_cast<int64_t>(j);
        }
    for (int64_t i = 0; i < 100; ++i) {
        REQUIRE(assigned[static_cast<size_t>(i)] >= 0);  // cover
        int64_t best = 0;
        for (int64_t j = 1; j < 3; ++j)
            if (q.at(i, j) < q.at(i, best)) best = j;
        CHECK(assigned[static_cast<size_t>(i)] == best);
    }

    // one part: everything in S_1
    DistanceMatrix q1 = pairwise_distances(target, {clouds[0]});
    auto s1 = nn_segment(target, q1);
    REQUIRE(s1.size() == 1);
    CHECK(s1[0].size() == 100);
}

TEST_CASE("filter_covered keeps the farthest 1-p fraction") {
    // one segment of 10 points with known distances 0..9
    DistanceMatrix q;
    q.rows = 10;
    q.cols = 1;
    q.d.resize(10);
    for (int i = 0; i < 10; ++i) q.d[static_cast<size_t>(i)] = static_cast<double>(i);
    std::vector<std::vector<int64_t>> segs{{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}};

    auto out = filter_covered(segs, q, 0.3);
    CHECK(out[0] == std::vector<int64_t>{3, 4, 5, 6, 7, 8, 9});

    // all distances equal: lowest indices dropped
    std::fill(q.d.begin(), q.d.end(), 1.0);
    auto tie = filter_covered(segs, q, 0.3);
    CHECK(tie[0] == std::vector<int64_t>{3, 4, 5, 6, 7, 8, 9});

    // p -> 0: unchanged
    auto nop = filter_covered(segs, q, 1e-9);
    CHECK(nop[0] == segs[0]);

    // size law and the never-empty rule
    Rng rng(91);
    for (int trial = 0; trial < 6; ++trial) {
        int64_t n = rng.uniform_int(1, 25);
        DistanceMatrix qq;
        qq.rows = n;
        qq.cols = 1;
        for (int64_t i = 0; i < n; ++i) qq.d.push_back(rng.uniform());
        std::vector<std::vector<int64_t>> s{std::vector<int64_t>(static_cast<size_t>(n))};
        std::iota(s[0].begin(), s[0].end(), 0);
        double p = rng.uniform(0.05, 0.95);
        auto o = filter_covered(s, qq, p);
        int64_t expect = std::max<int64_t>(
            1, static_cast<int64_t>(std::ceil((1.0 - p) * static_cast<double>(n))));
        CHECK(static_cast<int64_t>(o[0].size()) == expect);
    }

    CHECK_THROWS_AS(filter_covered(segs, q, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(filter_covered(segs, q, 1.0), std::invalid_argument);
}

TEST_CASE("farthest_component picks the remote blob") {
    // target: blob X at x=0 (idx 0..4), blob Y at x=10 (idx 5..9),
    // other segment Z at x=1 (idx 10..14)
    PointCloud target;
    for (int i = 0; i < 5; ++i) target.pts.push_back({0.01 * i, 0, 0});
    for (int i = 0; i < 5; ++i) target.pts.push_back({10 + 0.01 * i, 0, 0});
    for (int i = 0; i < 5; ++i) target.pts.push_back({1 + 0.01 * i, 0, 0});
    std::vector<int64_t> seg{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::vector<int64_t> others{10, 11, 12, 13, 14};

    auto far = farthest_component(target, seg, others, 0.1);
    CHECK(far == std::vector<int64_t>{5, 6, 7, 8, 9});

    // connected segment passes through
    std::vector<int64_t> conn{0, 1, 2, 3, 4};
    CHECK(farthest_component(target, conn, others, 0.1) == conn);

    // no others: the largest component wins
    std::vector<int64_t> lop{0, 1, 2, 3, 4, 5, 6};  // X has 5 points, Y-part 2
    CHECK(farthest_component(target, lop, {}, 0.1) == std::vector<int64_t>{0, 1, 2, 3, 4});

    // output is connected under the epsilon graph
    PointCloud fc;
    for (int64_t i : far) fc.pts.push_back(target.pts[static_cast<size_t>(i)]);
    auto labels = connected_components(fc, 0.1);
    CHECK(*std::max_element(labels.begin(), labels.end()) == 0);

    CHECK_THROWS_AS(farthest_component(target, {}, others, 0.1), std::invalid_argument);
}

TEST_CASE("reencode recovers pose and latent of a known part") {
    const TrainedVae& tv = trained();
    VaeEval ev(tv.params);
    const PointCloud& canon = tv.lib.parts[0].canonical;

    Vec3 t{0.4, 0.1, -0.2};
    PointCloud component = apply_pose(canon, RigidPose{t, 0.0});
    LatentPart lp = reencode(component, ev);

    CHECK(dist(lp.t, t) < 1e-6);
    double rmod = std::abs(std::remainder(lp.r, M_PI / 2));
    CHECK(rmod < 1e-6);
    LatentCode direct = encode_mu(tv.params, canon);
    REQUIRE(lp.e.size() == direct.size());
    for (size_t i = 0; i < lp.e.size(); ++i)
        CHECK(lp.e[i] == doctest::Approx(direct[i]).epsilon(1e-9));

    // decode(e') posed by (t', r') lands near the component
    PointCloud rt = apply_pose(ev.decode(lp.e), RigidPose{lp.t, lp.r});
    CHECK(chamfer(rt, component) <= 3 * tv.round_trip + 0.02);

    // idempotence on an already-normalized component
    LatentPart id = reencode(canon, ev);
    CHECK(norm(id.t) < 1e-6);
    CHECK(std::abs(std::remainder(id.r, M_PI / 2)) < 1e-6);

    PointCloud degenerate(std::vector<Vec3>{{0, 0, 0}, {0, 0, 0}});
    CHECK_THROWS(reencode(degenerate, ev));
    CHECK_THROWS_AS(reencode(PointCloud{}, ev), std::invalid_argument);
}

TEST_CASE("merge_symmetric merges touching pairs only") {
    const TrainedVae& tv = trained();
    VaeEval ev(tv.params);
    SymmetryPlane plane{{0, 0, 0}, {1, 0, 0}};

    // decoded cloud straddles the plane: pair merges into one part
    DecompositionState touching = make_state({lib_part(tv, 1, {0.05, 0, 0}, 0.0)}, ev, plane);
    merge_symmetric(touching, ev, 0.2);
    CHECK(touching.merged[0]);
    CHECK(touching.k == 1);
    CHECK(!touching.mirror_active(0));
    CHECK(touching.mirrored[0].empty());
    // merged decoded cloud is symmetric about the plane, up to round-trip error
    PointCloud refl = reflect_points(touching.decoded[0], plane);
    CHECK(chamfer(touching.decoded[0], refl) <= 5 * tv.round_trip + 0.05);

    // well-separated pair stays duplicated
    DecompositionState apart = make_state({lib_part(tv, 1, {5.0, 0, 0}, 0.0)}, ev, plane);
    std::vector<LatentPart> before = apart.parts;
    merge_symmetric(apart, ev, 0.2);
    CHECK(!apart.merged[0]);
    CHECK(parts_equal(apart.parts, before));

    DecompositionState noplane = make_state({lib_part(tv, 1, {0, 0, 0}, 0.0)}, ev);
    CHECK_THROWS_AS(merge_symmetric(noplane, ev, 0.2), std::logic_error);
}

TEST_CASE("phase2_shift keeps a converged state put") {
    const TrainedVae& tv = trained();
    VaeEval ev(tv.params);
    ScheduleConfig cfg;
    cfg.use_symmetry = false;
    cfg.tau_cc = 0.3;

    DecompositionState st = make_state({lib_part(tv, 0, {-1.2, 0, 0}, 0.0),
                                        lib_part(tv, 2, {1.2, 0, 0}, 0.0)},
                                       ev);
    PointCloud target = st.pooled();
    std::vector<PointCloud> before = st.decoded;

    phase2_shift(st, target, cfg, ev);
    CHECK(st.k == 2);
    CHECK(st.parts.size() == 2);
    for (int i = 0; i < 2; ++i)
        CHECK(chamfer(st.decoded[static_cast<size_t>(i)], before[static_cast<size_t>(i)]) <=
              5 * tv.round_trip + 0.05);

    DecompositionState stale = st;
    stale.decoded.clear();
    CHECK_THROWS_AS(phase2_shift(stale, target, cfg, ev), std::logic_error);
}

TEST_CASE("phase3_borrow adopts duplicates and re-randomizes the rest") {
    const TrainedVae& tv = trained();
    VaeEval ev(tv.params);
    ScheduleConfig cfg;
    cfg.use_symmetry = false;
    Rng rng(101);

    // 10 single-part targets; target 9 duplicates target 0
    std::vector<PointCloud> targets;
    std::vector<DecompositionState> states;
    for (int i = 0; i < 10; ++i) {
        size_t lib_idx = static_cast<size_t>(i % 4);
        Vec3 t = {0.5 * i, 0, 0.3 * (i % 3)};
        LatentPart truth = lib_part(tv, lib_idx, t, 0.0);
        DecompositionState ideal = make_state({truth}, ev);
        targets.push_back(i == 9 ? targets[0] : ideal.decoded[0]);
        // 0..3 solved, 4..9 garbage
        if (i <= 3) {
            states.push_back(make_state({truth}, ev));
        } else {
            states.push_back(make_state(
                {random_part(rng, 64, {8, 8, 8}, {9, 9, 9})}, ev));
        }
        states.back().target_id = "t" + std::to_string(i);
    }
    // target 9 must reconstruct target 0's shape with target 0's parts
    states[9] = make_state({states[9].parts[0]}, ev);
    states[9].target_id = "t9";

    std::vector<double> errors;
    for (int i = 0; i < 10; ++i)
        errors.push_back(phase1_loss(states[i], targets[static_cast<size_t>(i)], tv.params,
                                     cfg).first);
    REQUIRE(*std::min_element(errors.begin(), errors.begin() + 4) ==
            *std::min_element(errors.begin(), errors.end()));

    DistanceMatrix m;
    m.rows = m.cols = 10;
    m.d.resize(100);
    for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 10; ++j)
            m.at(i, j) = chamfer(targets[static_cast<size_t>(i)], targets[static_cast<size_t>(j)]);

    std::vector<DecompositionState> snap = states;
    std::vector<double> err_snap = errors;
    double accept = *std::min_element(errors.begin(), errors.end());
    phase3_borrow(states, targets, errors, m, cfg, tv.params, 777);

    // exactly the worst 6 were touched
    int changed = 0;
    for (int i = 0; i < 10; ++i)
        if (!parts_equal(states[static_cast<size_t>(i)].parts,
                         snap[static_cast<size_t>(i)].parts))
            ++changed;
    CHECK(changed == 6);
    for (int i = 0; i < 4; ++i)
        CHECK(parts_equal(states[static_cast<size_t>(i)].parts,
                          snap[static_cast<size_t>(i)].parts));

    // the duplicate adopted the solved state
    CHECK(parts_equal(states[9].parts, states[0].parts));
    CHECK(errors[9] <= accept + 1e-12);

    // every updated error is consistent with its state
    for (int i = 0; i < 10; ++i)
        CHECK(errors[static_cast<size_t>(i)] ==
              doctest::Approx(phase1_loss(states[static_cast<size_t>(i)],
                                          targets[static_cast<size_t>(i)], tv.params, cfg)
                                  .first)
                  .epsilon(1e-10));

    // determinism
    std::vector<DecompositionState> states2 = snap;
    std::vector<double> errors2 = err_snap;
    phase3_borrow(states2, targets, errors2, m, cfg, tv.params, 777);
    CHECK(errors2 == errors);
    for (int i = 0; i < 10; ++i)
        CHECK(parts_equal(states2[static_cast<size_t>(i)].parts,
                          states[static_cast<size_t>(i)].parts));
}

TEST_CASE("run_schedule returns the best logged state deterministically") {
    const TrainedVae& tv = trained();
    VaeEval ev(tv.params);
    ScheduleConfig cfg;
    cfg.n1 = 20;
    cfg.n2 = 2;
    cfg.n3 = 1;
    cfg.lr = 0.02;
    cfg.use_symmetry = false;
    cfg.tau_cc = 0.3;

    DecompositionState ideal = make_state({lib_part(tv, 3, {0.2, 0.1, -0.3}, 0.5)}, ev);
    PointCloud target = ideal.decoded[0];

    DecompositionState st = run_schedule("t", target, 1, cfg, tv.params, 5);
    REQUIRE(!st.loss_history.empty());
    double last = st.loss_history.back();
    for (double l : st.loss_history) CHECK(last <= l + 1e-12);
    CHECK(last < st.loss_history.front());

    DecompositionState st2 = run_schedule("t", target, 1, cfg, tv.params, 5);
    CHECK(parts_equal(st.parts, st2.parts));
    CHECK(st.loss_history == st2.loss_history);

    // disabling phase II reduces the schedule to chained phase-I runs
    ScheduleConfig p1 = cfg;
    p1.use_phase2 = false;
    DecompositionState sched = run_schedule("t", target, 1, p1, tv.params, 5);
    DecompositionState manual = init_state("t", target, 1, 5, p1, ev);
    for (int64_t i = 0; i < p1.n3 * p1.n2 + 1; ++i)
        phase1_run(manual, target, tv.params, p1, p1.n1, p1.lr);
    size_t nlog = manual.loss_history.size();
    REQUIRE(sched.loss_history.size() >= nlog);
    for (size_t i = 0; i < nlog; ++i)
        CHECK(sched.loss_history[i] == manual.loss_history[i]);

    ScheduleConfig bad = cfg;
    bad.n1 = 0;
    CHECK_THROWS_AS(run_schedule("t", target, 1, bad, tv.params, 5), std::invalid_argument);
}

TEST_CASE("pooled cloud is reflection-invariant under symmetry") {
    VaeParams params = random_frozen(small_arch(), 111);
    VaeEval ev(params);
    Rng rng(112);
    SymmetryPlane plane{{0.1, 0, 0.2}, {std::sqrt(0.5), 0, std::sqrt(0.5)}};
    DecompositionState st = make_state({random_part(rng, 64, {-1, -1, -1}, {1, 1, 1}),
                                        random_part(rng, 64, {-1, -1, -1}, {1, 1, 1})},
                                       ev, plane);
    PointCloud pooled = st.pooled();
    PointCloud refl = reflect_points(pooled, plane);
    CHECK(chamfer(pooled, refl) < 1e-9);
}

TEST_CASE("decomposition checkpoints round-trip") {
    VaeParams params = random_frozen(small_arch(), 121);
    VaeEval ev(params);
    Rng rng(122);
    SymmetryPlane plane{{0.3, 0, -0.1}, {0, 0, 1}};
    DecompositionState st = make_state({random_part(rng, 64, {-1, -1, -1}, {1, 1, 1}),
                                        random_part(rng, 64, {-1, -1, -1}, {1, 1, 1}),
                                        random_part(rng, 64, {-1, -1, -1}, {1, 1, 1})},
                                       ev, plane);
    st.target_id = "chair_042";
    st.seed = 991;
    st.merged[1] = true;
    st.loss_history = {0.5, 0.25, 0.125};

    std::string path = "decomp_state_test.bin";
    save_state(st, path);
    DecompositionState back = load_state(path);
    CHECK(back.target_id == st.target_id);
    CHECK(back.k == st.k);
    CHECK(back.seed == st.seed);
    CHECK(parts_equal(back.parts, st.parts));
    CHECK(back.merged == st.merged);
    CHECK(back.loss_history == st.loss_history);
    REQUIRE(back.plane.has_value());
    CHECK(back.plane->point == st.plane->point);
    CHECK(back.plane->normal == st.plane->normal);
    // caches are rebuilt on load
    refresh_cache(back, ev);
    for (int i = 0; i < 3; ++i)
        CHECK(chamfer(back.decoded[static_cast<size_t>(i)],
                      st.decoded[static_cast<size_t>(i)]) < 1e-12);

    FILE* f = std::fopen(path.c_str(), "wb");
    std::fwrite("NOTASTATE", 1, 9, f);
    std::fclose(f);
    CHECK_THROWS(load_state(path));
    std::remove(path.c_str());
}
