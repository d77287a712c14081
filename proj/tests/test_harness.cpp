#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "para/harness.hpp"

using namespace para;

namespace {

SyntheticSpec small_spec() {
    SyntheticSpec spec;
    spec.part_points = 64;
    spec.target_points = 256;
    return spec;
}

bool same_cloud(const PointCloud& a, const PointCloud& b) {
    return a.pts == b.pts;
}

// min distance between any two points of different clouds
double min_gap(const PointCloud& a, const PointCloud& b) {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& p : a.pts)
        for (const auto& q : b.pts) m = std::min(m, dist(p, q));
    return m;
}

PointCloud box_cloud(Rng& rng, int64_t n, Vec3 half_extents) {
    PointCloud c;
    for (int64_t i = 0; i < n; ++i)
        c.pts.push_back({rng.uniform(-half_extents[0], half_extents[0]),
                         rng.uniform(-half_extents[1], half_extents[1]),
                         rng.uniform(-half_extents[2], half_extents[2])});
    return c;
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

struct Trained {
    PartLibrary lib;
    VaeParams params{VaeConfig{}};
};

const Trained& trained() {
    static Trained t = [] {
        Trained tr;
        tr.lib = box_library(6, 64, 21);
        VaeTrainConfig cfg;
        cfg.arch.points = 64;
        cfg.epochs = 600;
        cfg.batch = 6;
        cfg.lr = 2e-3;
        cfg.lr_min = 1e-5;
        cfg.beta = 1e-6;
        cfg.seed = 22;
        tr.params = train_vae(tr.lib, cfg);
        return tr;
    }();
    return t;
}

}  // namespace

TEST_CASE("gen_library is deterministic, canonical and pairwise distinct") {
    SyntheticSpec spec = small_spec();
    PartLibrary lib = gen_library(spec, 12, 7);
    REQUIRE(lib.size() == 12);
    std::vector<std::string> sources;
    for (const auto& e : lib.parts) {
        CHECK(e.canonical.size() == 64);
        CHECK(!e.id.empty());
        CHECK(norm(e.canonical.centroid()) < 0.05 * e.canonical.bbox_diagonal());
        sources.push_back(e.source);
    }
    // the family mix cycles through all four families
    for (const char* f : {"box", "cylinder", "bracket", "taper"})
        CHECK(std::count(sources.begin(), sources.end(), f) == 3);

    double dmin = std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < lib.size(); ++i)
        for (int64_t j = i + 1; j < lib.size(); ++j)
            dmin = std::min(dmin, chamfer(lib.parts[static_cast<size_t>(i)].canonical,
                                          lib.parts[static_cast<size_t>(j)].canonical));
    CHECK(dmin > 1e-4);

    PartLibrary again = gen_library(spec, 12, 7);
    for (int64_t i = 0; i < 12; ++i)
        CHECK(same_cloud(lib.parts[static_cast<size_t>(i)].canonical,
                         again.parts[static_cast<size_t>(i)].canonical));
    PartLibrary other = gen_library(spec, 12, 8);
    CHECK(!same_cloud(lib.parts[0].canonical, other.parts[0].canonical));

    CHECK_THROWS(gen_library(spec, 0, 7));
    SyntheticSpec bad = spec;
    bad.dim_lo = -1;
    CHECK_THROWS(gen_library(bad, 2, 7));
}

TEST_CASE("gen_targets plants non-overlapping library parts with consistent ground truth") {
    SyntheticSpec spec = small_spec();
    spec.symmetry_prob = 0;
    PartLibrary lib = gen_library(spec, 8, 7);
    auto targets = gen_targets(spec, lib, 6, 5);
    REQUIRE(targets.size() == 6);

    for (const auto& t : targets) {
        CHECK(!t.symmetric);
        CHECK(t.truth.k >= 2);
        CHECK(t.truth.k <= 4);
        CHECK(static_cast<int64_t>(t.truth.parts.size()) == t.truth.k);

        std::vector<PointCloud> posed;
        for (const auto& rp : t.truth.parts) {
            const PartEntry* pe = nullptr;
            for (const auto& e : lib.parts)
                if (e.id == rp.part_id) pe = &e;
            REQUIRE(pe != nullptr);  // every ground-truth id exists
            posed.push_back(apply_pose(pe->canonical, rp.pose));
        }
        for (size_t i = 0; i < posed.size(); ++i)
            for (size_t j = i + 1; j < posed.size(); ++j)
                CHECK(min_gap(posed[i], posed[j]) > 0.01);  // non-overlap by construction

        // the target is a resampling of the exact union of the posed parts
        double d = chamfer(t.cloud, assembly_cloud(t.truth, lib));
        CHECK(d == doctest::Approx(t.truth.recon).epsilon(1e-12));
        CHECK(d < 0.1);
        CHECK(norm(t.cloud.centroid()) < 1e-9);

        std::vector<char> seen(static_cast<size_t>(t.cloud.size()), 0);
        for (const auto& rp : t.truth.parts)
            for (int64_t pi : rp.segment) {
                CHECK(!seen[static_cast<size_t>(pi)]);
                seen[static_cast<size_t>(pi)] = 1;
            }
        CHECK(std::count(seen.begin(), seen.end(), 1) == t.cloud.size());
    }

    auto again = gen_targets(spec, lib, 6, 5);
    for (size_t i = 0; i < targets.size(); ++i) CHECK(same_cloud(targets[i].cloud, again[i].cloud));
    CHECK_THROWS(gen_targets(spec, PartLibrary{}, 1, 5));
}

TEST_CASE("symmetric targets are reflection-invariant with mirror-paired ground truth") {
    SyntheticSpec spec = small_spec();
    spec.symmetry_prob = 1;
    spec.target_points = 512;
    PartLibrary lib = gen_library(spec, 8, 7);
    auto targets = gen_targets(spec, lib, 5, 11);

    SymmetryPlane x0;  // normal (1,0,0) through the origin
    int plane_found = 0;
    for (const auto& t : targets) {
        CHECK(t.symmetric);
        CHECK(t.truth.k % 2 == 0);
        CHECK(chamfer(t.cloud, reflect_points(t.cloud, x0)) < 0.1);

        int64_t half = t.truth.k / 2;
        for (int64_t j = 0; j < half; ++j) {
            const auto& a = t.truth.parts[static_cast<size_t>(j)];
            const auto& b = t.truth.parts[static_cast<size_t>(j + half)];
            CHECK(a.part_id == b.part_id);
            CHECK(b.pose.t[0] == doctest::Approx(-a.pose.t[0]).epsilon(1e-12));
            CHECK(b.pose.t[1] == doctest::Approx(a.pose.t[1]).epsilon(1e-12));
            CHECK(b.pose.r == doctest::Approx(-a.pose.r).epsilon(1e-12));
            // mirrored parts never come from the chiral bracket family
            for (const auto& e : lib.parts)
                if (e.id == a.part_id) CHECK(e.source != "bracket");
        }

        auto plane = detect_symmetry_plane(t.cloud, SymmetryConfig::sparse());
        if (plane && std::abs(plane->normal[0]) > std::cos(5.0 * M_PI / 180.0)) ++plane_found;
    }
    CHECK(plane_found >= 4);
}

TEST_CASE("crust_surface keeps the outer shell of a solid") {
    Rng rng(31);
    double R = 0.5;
    PointCloud ball;
    while (ball.size() < 4000) {
        Vec3 p = {rng.uniform(-R, R), rng.uniform(-R, R), rng.uniform(-R, R)};
        if (norm(p) <= R) ball.pts.push_back(p);
    }
    PointCloud crust = crust_surface(ball, 12);
    REQUIRE(!crust.empty());
    CHECK(crust.size() < ball.size());

    double mean_r_ball = 0, mean_r_crust = 0, min_r_crust = R;
    for (const auto& p : ball.pts) mean_r_ball += norm(p);
    for (const auto& p : crust.pts) {
        mean_r_crust += norm(p);
        min_r_crust = std::min(min_r_crust, norm(p));
    }
    mean_r_ball /= static_cast<double>(ball.size());
    mean_r_crust /= static_cast<double>(crust.size());
    CHECK(mean_r_crust > mean_r_ball);
    CHECK(min_r_crust > 0.4 * R);  // interior removed

    // nearly all boundary points survive (diagonal-normal voxels may have
    // all six axis neighbors occupied, so a small loss is expected)
    int64_t near = 0, kept = 0;
    for (const auto& p : ball.pts) {
        if (norm(p) < 0.96 * R) continue;
        ++near;
        for (const auto& q : crust.pts)
            if (p == q) {
                ++kept;
                break;
            }
    }
    CHECK(near > 100);
    CHECK(kept >= (near * 9) / 10);

    // a thin slab has no interior voxels at all
    PointCloud slab;
    for (int64_t i = 0; i < 500; ++i)
        slab.pts.push_back({rng.uniform(-1, 1), rng.uniform(-0.01, 0.01), rng.uniform(-1, 1)});
    CHECK(crust_surface(slab, 12).size() == slab.size());

    CHECK_THROWS(crust_surface(PointCloud{}, 12));
    CHECK_THROWS(crust_surface(ball, 0));
}

TEST_CASE("metrics recompute the x100 chamfer formulas and ignore part order") {
    SyntheticSpec spec = small_spec();
    PartLibrary lib = gen_library(spec, 4, 7);

    Assembly a;
    a.target_id = "t";
    a.k = 2;
    a.parts.resize(2);
    a.parts[0].part_id = lib.parts[0].id;
    a.parts[0].pose = {{-0.8, 0.1, 0}, 0.7};
    a.parts[1].part_id = lib.parts[3].id;
    a.parts[1].pose = {{0.8, 0, -0.1}, 2.1};

    PointCloud volume = assembly_cloud(a, lib);
    PointCloud surface = crust_surface(volume);
    auto [scd, vcd] = metrics(a, lib, surface, volume);
    CHECK(scd == 0);  // assembly identical to the target construction
    CHECK(vcd == 0);

    // against an independent sampling of similar geometry the formula must
    // match a by-hand recompute
    PartLibrary lib2 = gen_library(spec, 4, 99);
    Assembly b = a;
    b.parts[0].part_id = lib2.parts[0].id;
    b.parts[1].part_id = lib2.parts[3].id;
    PointCloud pooled = assembly_cloud(b, lib2);
    auto [scd2, vcd2] = metrics(b, lib2, surface, volume);
    CHECK(vcd2 == doctest::Approx(100.0 * chamfer(pooled, volume)).epsilon(1e-12));
    CHECK(scd2 == doctest::Approx(100.0 * chamfer(crust_surface(pooled), surface)).epsilon(1e-12));
    CHECK(vcd2 > 0);

    // global translation applied to both sides changes nothing
    Assembly moved = a;
    Vec3 d = {0.3, -0.2, 0.5};
    for (auto& rp : moved.parts) rp.pose.t = rp.pose.t + d;
    PointCloud mv = volume, ms = surface;
    for (auto& p : mv.pts) p = p + d;
    for (auto& p : ms.pts) p = p + d;
    auto [scd3, vcd3] = metrics(moved, lib, ms, mv);
    CHECK(vcd3 == doctest::Approx(vcd).epsilon(1e-9));
    CHECK(scd3 == doctest::Approx(scd).epsilon(1e-9));

    Assembly swapped = a;
    std::swap(swapped.parts[0], swapped.parts[1]);
    auto [scd4, vcd4] = metrics(swapped, lib, surface, volume);
    CHECK(scd4 == scd);
    CHECK(vcd4 == vcd);

    Assembly unknown = a;
    unknown.parts[0].part_id = "nope";
    CHECK_THROWS(metrics(unknown, lib, surface, volume));
}

TEST_CASE("bf_baseline improves monotonically and is reproducible") {
    SyntheticSpec spec = small_spec();
    PartLibrary lib = gen_library(spec, 5, 7);
    PointCloud target = apply_pose(lib.parts[1].canonical, {{-0.7, 0, 0}, 0.4});
    PointCloud u = apply_pose(lib.parts[3].canonical, {{0.7, 0.05, 0}, 1.3});
    target.pts.insert(target.pts.end(), u.pts.begin(), u.pts.end());

    FitConfig fit;
    fit.steps = 25;
    fit.lr = 0.02;
    std::vector<double> curve;
    Assembly best = bf_baseline("t", target, lib, 2, 40, 17, fit, &curve);
    REQUIRE(curve.size() == 40);
    for (size_t i = 1; i < curve.size(); ++i) CHECK(curve[i] <= curve[i - 1]);
    CHECK(best.recon == curve.back());
    CHECK(best.parts.size() == 2);
    CHECK(best.parts[0].part_id != best.parts[1].part_id);
    CHECK(best.recon < 0.5);

    std::vector<char> seen(static_cast<size_t>(target.size()), 0);
    for (const auto& rp : best.parts)
        for (int64_t pi : rp.segment) seen[static_cast<size_t>(pi)] = 1;
    CHECK(std::count(seen.begin(), seen.end(), 1) == target.size());

    std::vector<double> curve2;
    Assembly again = bf_baseline("t", target, lib, 2, 40, 17, fit, &curve2);
    CHECK(curve == curve2);  // bit-for-bit
    REQUIRE(again.parts.size() == 2);
    for (size_t i = 0; i < 2; ++i) {
        CHECK(again.parts[i].part_id == best.parts[i].part_id);
        CHECK(again.parts[i].pose.t == best.parts[i].pose.t);
        CHECK(again.parts[i].pose.r == best.parts[i].pose.r);
    }

    // small-instance exhaustion: single ground-truth part, enough draws to
    // hit it, so the fit becomes near-exact
    PointCloud t1 = apply_pose(lib.parts[1].canonical, {{0.3, -0.1, 0.2}, 0.9});
    Assembly full = bf_baseline("t1", t1, lib, 1, 10, 9, fit);
    CHECK(full.parts.size() == 1);
    CHECK(full.parts[0].part_id == lib.parts[1].id);
    CHECK(full.recon < 0.05);

    Assembly one = bf_baseline("t", target, lib, 1, 1, 3, fit);
    CHECK(one.parts.size() == 1);
    CHECK_THROWS(bf_baseline("t", target, lib, 6, 1, 3, fit));
    CHECK_THROWS(bf_baseline("t", target, lib, 2, 0, 3, fit));
}

TEST_CASE("segment_purity matches a hand computation") {
    SyntheticSpec spec = small_spec();
    PartLibrary lib = gen_library(spec, 4, 7);
    PointCloud a = apply_pose(lib.parts[0].canonical, {{-1, 0, 0}, 0});
    PointCloud b = apply_pose(lib.parts[2].canonical, {{1, 0, 0}, 0});
    PointCloud target = a;
    target.pts.insert(target.pts.end(), b.pts.begin(), b.pts.end());

    Assembly truth;
    truth.k = 2;
    truth.parts.resize(2);
    truth.parts[0].part_id = lib.parts[0].id;
    truth.parts[0].pose = {{-1, 0, 0}, 0};
    truth.parts[1].part_id = lib.parts[2].id;
    truth.parts[1].pose = {{1, 0, 0}, 0};
    for (int64_t i = 0; i < a.size(); ++i) truth.parts[0].segment.push_back(i);
    for (int64_t i = a.size(); i < target.size(); ++i) truth.parts[1].segment.push_back(i);

    CHECK(segment_purity(truth, truth, target, lib) == 1.0);

    Assembly wrong = truth;
    std::swap(wrong.parts[0].part_id, wrong.parts[1].part_id);
    CHECK(segment_purity(wrong, truth, target, lib) == 0.0);

    // move 16 of part 1's points into part 0's segment: purity of that
    // segment becomes |own| / (|own| + 16)
    Assembly mixed = truth;
    for (int i = 0; i < 16; ++i) {
        mixed.parts[0].segment.push_back(mixed.parts[1].segment.back());
        mixed.parts[1].segment.pop_back();
    }
    double n0 = static_cast<double>(a.size());
    double expect = 0.5 * (n0 / (n0 + 16.0) + 1.0);
    CHECK(segment_purity(mixed, truth, target, lib) == doctest::Approx(expect).epsilon(1e-12));

    Assembly empty_seg = truth;
    empty_seg.parts[1].segment.clear();
    CHECK(segment_purity(empty_seg, truth, target, lib) == 1.0);  // mean over non-empty
}

TEST_CASE("ablation_run emits four phase rows, three formats and shared-seed stability") {
    const Trained& tv = trained();
    Dataset ds;
    ds.library = tv.lib;
    ds.source_tag = "synthetic";
    std::vector<SyntheticTarget> truth;
    for (int64_t i = 0; i < 3; ++i) {
        size_t pa = static_cast<size_t>(i % 3), pb = static_cast<size_t>(3 + i % 3);
        RigidPose qa{{-0.9, 0, 0.1 * static_cast<double>(i)}, 0.2 * static_cast<double>(i)};
        RigidPose qb{{0.9, 0.05 * static_cast<double>(i), 0}, 0.0};
        PointCloud t = apply_pose(tv.lib.parts[pa].canonical, qa);
        PointCloud u = apply_pose(tv.lib.parts[pb].canonical, qb);
        t.pts.insert(t.pts.end(), u.pts.begin(), u.pts.end());

        SyntheticTarget st;
        st.id = "target" + std::to_string(i);
        st.truth.target_id = st.id;
        st.truth.k = 2;
        st.truth.parts.resize(2);
        st.truth.parts[0].part_id = tv.lib.parts[pa].id;
        st.truth.parts[0].pose = qa;
        st.truth.parts[1].part_id = tv.lib.parts[pb].id;
        st.truth.parts[1].pose = qb;
        st.cloud = t;
        truth.push_back(st);
        ds.targets.emplace_back(st.id, std::move(t));
    }

    RunConfig cfg;
    cfg.sched.n1 = 15;
    cfg.sched.n2 = 2;
    cfg.sched.n3 = 1;
    cfg.sched.lr = 0.02;
    cfg.sched.tau_cc = 0.3;
    cfg.sched.use_symmetry = false;
    cfg.retrieval.k_set = {2};
    cfg.retrieval.fit.steps = 40;
    cfg.retrieval.fit.lr = 0.02;
    cfg.seed = 77;

    EvalReport rep = ablation_run(ds, cfg, tv.params, &truth);
    REQUIRE(rep.phases.size() == 4);
    CHECK(rep.phases[0].name == "{I}");
    CHECK(rep.phases[1].name == "{I+III}");
    CHECK(rep.phases[2].name == "{I+II}");
    CHECK(rep.phases[3].name == "{I+II+III}");
    for (const auto& row : rep.phases) {
        REQUIRE(row.scd.size() == 3);
        REQUIRE(row.vcd.size() == 3);
        for (double v : row.vcd) CHECK(v >= 0);  // no failed targets
        CHECK(row.mean_vcd >= 0);
    }
    CHECK(rep.phase1_iterations == 15 * (2 * 1 + 1));

    REQUIRE(rep.formats.size() == 3);
    CHECK(rep.formats[2].name == "segment retrieval");
    CHECK(rep.formats[2].vcd == rep.phases[3].vcd);
    CHECK(rep.formats[2].scd == rep.phases[3].scd);
    for (const auto& row : rep.formats) CHECK(row.vcd.size() == 3);

    REQUIRE(rep.purity.size() == 3);
    for (double p : rep.purity) {
        CHECK(p >= 0);
        CHECK(p <= 1);
    }

    CHECK(!rep.table().empty());
    CHECK(rep.to_json().find("\"schema_version\": 1") != std::string::npos);
    CHECK(rep.config_hash.size() == 16);

    // the phase toggles share one seed: the {I} row reproduces exactly
    EvalReport rep2 = ablation_run(ds, cfg, tv.params, nullptr);
    CHECK(rep2.phases[0].scd == rep.phases[0].scd);
    CHECK(rep2.phases[0].vcd == rep.phases[0].vcd);
    CHECK(rep2.purity.empty());
}
