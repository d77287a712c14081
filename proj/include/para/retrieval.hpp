#pragma once

#include <string>
#include <vector>

#include "para/decompose.hpp"
#include "para/geom.hpp"
#include "para/vae.hpp"

namespace para {

// One discrete library part placed in the target frame.
struct RetrievedPart {
    std::string part_id;
    RigidPose pose;
    double fit = 0;                 // chamfer to its segment at this pose
    std::vector<int64_t> segment;   // target point indices it explains
};

struct Assembly {
    std::string target_id;
    int64_t k = 0;  // free part count of the decomposition it came from
    std::vector<RetrievedPart> parts;
    double recon = 0;     // pooled chamfer of the assembly to the target
    double scd = -1;      // filled by the evaluation harness
    double vcd = -1;
    uint64_t seed = 0;
    std::string config_hash;
};

struct KCandidate {
    int64_t k = 0;
    DecompositionState state;
    Assembly assembly;
    double penalty = 0;  // recon + alpha * part count (post-merge)
};

struct FitConfig {
    int restarts = 8;
    int64_t steps = 100;
    double lr = 0.01;
};

struct RetrievalConfig {
    std::vector<int64_t> k_set{2, 4, 6, 8, 10};
    double alpha = 1.5e-4;
    int64_t q = -1;  // candidate parts per segment; -1 = whole library
    FitConfig fit;
};

// Segment the target by its nearest decoded part (shared nn_segment rule).
std::vector<std::vector<int64_t>> final_segment(const PointCloud& target,
                                                const std::vector<PointCloud>& decoded);

// Multi-start rigid fit of a part cloud onto a segment: `restarts` evenly
// spaced yaws, translation from centroid alignment, Adam refinement on the
// chamfer distance. Returns the best pose and its chamfer.
std::pair<RigidPose, double> fit_part_to_segment(const PointCloud& part, const PointCloud& seg,
                                                 int restarts = 8, int64_t steps = 100,
                                                 double lr = 0.01);

// Fit the q most promising library parts (by chamfer between canonical
// forms; q = |library| is a full linear scan) and keep the best.
RetrievedPart retrieve_for_segment(const PointCloud& target, const std::vector<int64_t>& seg,
                                   const PartLibrary& library, int64_t q,
                                   const FitConfig& fit = {});

// Discrete retrieval for every non-empty segment of an optimized state.
Assembly retrieve_assembly(const DecompositionState& state, const PointCloud& target,
                           const PartLibrary& library, const RetrievalConfig& cfg);

KCandidate select_k(const std::vector<KCandidate>& candidates, double alpha);

uint64_t config_checksum(const ScheduleConfig& sched, const RetrievalConfig& rcfg);

// Full single-target pipeline: run_schedule per k, retrieval per k, then
// penalty-based k selection. all_out (if non-null) receives every candidate.
Assembly assemble(const std::string& target_id, const PointCloud& target,
                  const PartLibrary& library, const ScheduleConfig& sched,
                  const RetrievalConfig& rcfg, const VaeParams& params, uint64_t seed,
                  std::vector<KCandidate>* all_out = nullptr);

}  // namespace para
