#pragma once

#include <string>
#include <utility>
#include <vector>

#include "para/pipeline.hpp"

namespace para {

enum class PartFamily { box, cylinder, bracket, taper };

// Parametric synthetic suite: part families with dimension ranges, parts
// per target, and the chance of a mirrored (bilaterally symmetric) target.
struct SyntheticSpec {
    std::vector<PartFamily> families{PartFamily::box, PartFamily::cylinder,
                                     PartFamily::bracket, PartFamily::taper};
    double dim_lo = 0.1;
    double dim_hi = 0.4;
    int64_t parts_lo = 2;
    int64_t parts_hi = 4;
    double symmetry_prob = 0.3;
    int64_t part_points = 512;
    int64_t target_points = 2048;

    void validate() const;
};

struct SyntheticTarget {
    std::string id;
    PointCloud cloud;  // volumetric samples, centered
    Assembly truth;    // planted part ids, poses, and segments
    bool symmetric = false;
};

// Deterministic parametric library; every entry canonical, pairwise distinct.
PartLibrary gen_library(const SyntheticSpec& spec, int64_t n_parts, uint64_t seed);

// Targets built as unions of 2-4 non-overlapping posed library parts,
// optionally mirrored across a plane through the origin.
std::vector<SyntheticTarget> gen_targets(const SyntheticSpec& spec, const PartLibrary& library,
                                         int64_t n_targets, uint64_t seed);

// Crust approximation of a volume cloud's surface: points whose voxel has
// at least one unoccupied 6-neighbor.
PointCloud crust_surface(const PointCloud& volume, int64_t grid = 24);

// Union of the assembly's posed library parts.
PointCloud assembly_cloud(const Assembly& a, const PartLibrary& library);

// (SCD, VCD), both x100: chamfer between surface samplings and between
// volumetric samplings respectively.
std::pair<double, double> metrics(const Assembly& a, const PartLibrary& library,
                                  const PointCloud& surface, const PointCloud& volume);

// Brute-force baseline: draw k distinct parts uniformly, pose-fit each
// against the whole target, keep the best pooled chamfer. curve (if given)
// receives the best-so-far chamfer after every iteration.
Assembly bf_baseline(const std::string& target_id, const PointCloud& target,
                     const PartLibrary& library, int64_t k, int64_t budget, uint64_t seed,
                     const FitConfig& fit = {}, std::vector<double>* curve = nullptr);

// Mean over non-empty predicted segments of the fraction of points whose
// nearest ground-truth part matches the segment's retrieved part.
double segment_purity(const Assembly& a, const Assembly& truth, const PointCloud& target,
                      const PartLibrary& library);

struct EvalRow {
    std::string name;
    std::vector<double> scd;  // per target, -1 for a failed target
    std::vector<double> vcd;
    double mean_scd = 0;  // over non-failed targets
    double mean_vcd = 0;
};

struct EvalReport {
    std::vector<EvalRow> phases;   // {I}, {I+III}, {I+II}, {I+II+III}
    std::vector<EvalRow> formats;  // direct recon, direct retrieval, segment retrieval
    std::vector<double> purity;    // per target, full method; empty without ground truth
    std::string config_hash;
    int64_t phase1_iterations = 0;  // per-target budget of the full method

    std::string table() const;
    std::string to_json() const;
};

// Phase ablation (all four toggles share cfg.seed) plus the three output
// formats of the full method. truth (if given) must parallel ds.targets.
EvalReport ablation_run(const Dataset& ds, const RunConfig& cfg, const VaeParams& params,
                        const std::vector<SyntheticTarget>* truth = nullptr);

}  // namespace para
