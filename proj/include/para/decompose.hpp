#pragma once

#include <optional>
#include <string>
#include <vector>

#include "para/geom.hpp"
#include "para/vae.hpp"

namespace para {

// One free part of a decomposition: latent code plus rigid pose.
struct LatentPart {
    LatentCode e;
    Vec3 t{0, 0, 0};
    double r = 0;
};

struct ScheduleConfig {
    int64_t n1 = 200;  // phase-I steps per round
    int64_t n2 = 4;    // shift rounds per borrow round
    int64_t n3 = 2;    // borrow rounds
    double lr = 0.008;
    double tau_overlap = 0.1;
    double p_filter = 0.3;
    double tau_cc = 0.05;
    double swap_frac = 0.15;
    double borrow_worst = 0.6;
    double borrow_accept = 0.1;
    int64_t borrow_m = 5;
    bool filter_global = false;  // per-segment filtering by default
    bool use_phase2 = true;
    bool use_phase3 = true;
    bool use_symmetry = true;
    SymmetryConfig symmetry{};

    // cheaper preset for interactive runs
    static ScheduleConfig desk() {
        ScheduleConfig c;
        c.n1 = 60;
        c.n2 = 3;
        c.n3 = 2;
        return c;
    }

    void validate() const;
};

struct DecompositionState {
    std::string target_id;
    int64_t k = 0;
    std::vector<LatentPart> parts;
    std::optional<SymmetryPlane> plane;
    std::vector<bool> merged;  // self-symmetric, not duplicated

    // caches, consistent with parts at every phase boundary
    std::vector<PointCloud> decoded;   // posed free parts
    std::vector<PointCloud> mirrored;  // posed mirrors; empty when inactive

    std::vector<double> loss_history;
    uint64_t seed = 0;

    bool mirror_active(int64_t i) const {
        return plane.has_value() && !merged[static_cast<size_t>(i)];
    }
    PointCloud pooled() const;
};

double overlap_penalty(const PointCloud& a, const PointCloud& b, double tau);

DecompositionState init_state(std::string target_id, const PointCloud& target, int64_t k,
                              uint64_t seed, const ScheduleConfig& cfg, VaeEval& ev);

// Recompute the decoded/mirrored caches from (e, t, r).
void refresh_cache(DecompositionState& state, VaeEval& ev);

// Returns (L_recon + L_overlap, posed clouds incl. mirrors).
std::pair<double, std::vector<PointCloud>> phase1_loss(const DecompositionState& state,
                                                       const PointCloud& target,
                                                       const VaeParams& params,
                                                       const ScheduleConfig& cfg);

void phase1_run(DecompositionState& state, const PointCloud& target, const VaeParams& params,
                const ScheduleConfig& cfg, int64_t steps, double lr);

// Analytic gradients of phase1_loss: per part [de (1 x latent), dt (3), dr (1)].
std::vector<Tensor> phase1_gradients(const DecompositionState& state, const PointCloud& target,
                                     const VaeParams& params, const ScheduleConfig& cfg);

// Pairwise distances from target points to each part's decoded cloud
// (union with its active mirror).
DistanceMatrix part_distances(const DecompositionState& state, const PointCloud& target);

// Replaces the part whose removal best improves coverage with the worst
// covered swap_frac of target points; clouds is updated in place.
// Returns the swapped index, or -1 when no swap improves coverage.
int64_t swap_least_covered(std::vector<PointCloud>& clouds, const PointCloud& target,
                           const DistanceMatrix& q, double swap_frac);

// Assign each target point to its argmin part (ties to the lowest index).
std::vector<std::vector<int64_t>> nn_segment(const PointCloud& target, const DistanceMatrix& q);

std::vector<std::vector<int64_t>> filter_covered(const std::vector<std::vector<int64_t>>& segs,
                                                 const DistanceMatrix& q, double p,
                                                 bool global = false);

// Indices of the epsilon-graph component of seg farthest from the pooled
// other segments (largest component when there are no others).
std::vector<int64_t> farthest_component(const PointCloud& target,
                                        const std::vector<int64_t>& seg,
                                        const std::vector<int64_t>& others, double tau_cc);

LatentPart reencode(const PointCloud& component, VaeEval& ev);

void merge_symmetric(DecompositionState& state, VaeEval& ev, double tau_cc);

void phase2_shift(DecompositionState& state, const PointCloud& target,
                  const ScheduleConfig& cfg, VaeEval& ev);

// Borrowing barrier across a collection: worst-fraction targets try the
// states of their m nearest better-reconstructed neighbors.
void phase3_borrow(std::vector<DecompositionState>& states,
                   const std::vector<PointCloud>& targets, std::vector<double>& errors,
                   const DistanceMatrix& target_dist, const ScheduleConfig& cfg,
                   const VaeParams& params, uint64_t master_seed);

// Full single-target schedule (phase III needs a collection and is run by
// the pipeline); returns the best-loss state seen.
DecompositionState run_schedule(std::string target_id, const PointCloud& target, int64_t k,
                                const ScheduleConfig& cfg, const VaeParams& params,
                                uint64_t seed);

void save_state(const DecompositionState& state, const std::string& path);
DecompositionState load_state(const std::string& path);

}  // namespace para
