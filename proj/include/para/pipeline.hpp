#pragma once

#include <string>
#include <utility>
#include <vector>

#include "para/decompose.hpp"
#include "para/io.hpp"
#include "para/retrieval.hpp"
#include "para/vae.hpp"

namespace para {

// Normalized collection: targets centered at the origin, one shared scale.
struct Dataset {
    std::vector<std::pair<std::string, PointCloud>> targets;
    PartLibrary library;
    double scale = 1.0;  // factor applied to all source coordinates
    std::string source_tag;
};

struct IngestConfig {
    int64_t target_points = 2048;  // interior samples per mesh target
    int64_t part_points = 512;
    uint64_t seed = 0;
};

// Load targets and library parts (ply/raw clouds or watertight obj meshes),
// sample mesh interiors, center targets, and apply one global scale so the
// largest target bbox diagonal is 1.
Dataset ingest(const std::vector<std::string>& target_paths,
               const std::vector<std::string>& part_paths, const IngestConfig& cfg);

void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

DistanceMatrix target_distance_matrix(const std::vector<PointCloud>& targets);

struct RunConfig {
    ScheduleConfig sched;
    RetrievalConfig retrieval;
    int64_t parallelism = 1;
    uint64_t seed = 0;
};

uint64_t run_config_checksum(const RunConfig& cfg);

struct TargetResult {
    std::string target_id;
    std::vector<KCandidate> candidates;  // one per k, in k_set order
    Assembly assembly;                   // the selected k
    bool failed = false;
    std::string error;
};

struct CollectionResult {
    std::vector<TargetResult> results;  // one per dataset target, same order
};

// Collection-mode optimization: all targets advance together so Phase III
// can borrow across them; per-target failures are recorded, not fatal.
CollectionResult run_collection(const Dataset& ds, const RunConfig& cfg,
                                const VaeParams& params);

struct BankEntry {
    std::string target_id;
    PointCloud target;
    DecompositionState state;  // the chosen-k decomposition
    Assembly assembly;
};
using TrainingBank = std::vector<BankEntry>;

TrainingBank make_bank(const Dataset& ds, const CollectionResult& res);
void save_bank(const TrainingBank& bank, const std::string& dir);
TrainingBank load_bank(const std::string& dir);

struct InferResult {
    Assembly assembly;
    bool from_scratch = false;  // empty-bank fallback
    std::string neighbor_id;
    int64_t phase1_iterations = 0;
};

// Warm-start inference: nearest bank entry initializes a short Phase-I-only
// run (n1/3 steps) followed by final retrieval.
InferResult amortized_infer(const std::string& target_id, const PointCloud& target,
                            const TrainingBank& bank, const PartLibrary& library,
                            const RunConfig& cfg, const VaeParams& params);

// Deterministic JSON manifests (sorted keys, schema_version field).
std::string assembly_manifest(const Assembly& a);
std::string dataset_manifest(const Dataset& ds);
void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

}  // namespace para
