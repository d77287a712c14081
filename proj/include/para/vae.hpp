#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "para/geom.hpp"
#include "para/graph.hpp"
#include "para/pointcloud.hpp"
#include "para/rng.hpp"

namespace para {

// Canonicalized library part: 512 points, centered, yaw-OBB-aligned.
struct PartEntry {
    std::string id;
    PointCloud canonical;
    RigidPose canonical_pose;  // maps canonical back to the source cloud
    std::string source;
};

struct PartLibrary {
    std::vector<PartEntry> parts;
    int64_t size() const { return static_cast<int64_t>(parts.size()); }
};

using LatentCode = std::vector<double>;  // 64-dim

struct VaeConfig {
    int64_t latent = 64;
    int64_t points = 512;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;
    double lrelu_slope = 0.01;
};

struct VaeTrainConfig {
    VaeConfig arch;
    int64_t epochs = 500;
    int64_t batch = 32;
    double beta = 1e-3;
    double lr = 1e-3;
    // cosine-decay floor; equal to lr means a constant rate
    double lr_min = -1.0;
    uint64_t seed = 0;
};

// Encoder/decoder weights. Mutable until frozen; all inference entry
// points require frozen params.
class VaeParams {
  public:
    explicit VaeParams(VaeConfig cfg = {});

    const VaeConfig& config() const { return cfg_; }
    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }

    // random initialization (He for linears, identity batchnorm)
    void init_random(Rng& rng);

    const std::map<std::string, Tensor>& weights() const { return weights_; }
    std::map<std::string, Tensor>& mutable_weights();

    uint64_t checksum() const;

    // Append the encoder / decoder to a graph, reusing param nodes via the
    // cache so several copies share one set of parameters.
    // Returns the mu node; lv_out (if non-null) receives the log-variance
    // head node.
    int append_encoder(Graph& g, int x, std::map<std::string, int>& cache,
                       int* lv_out = nullptr) const;
    // z [B,latent] -> cloud [B,points,3]
    int append_decoder(Graph& g, int z, std::map<std::string, int>& cache) const;

    // Copy trained params (and batchnorm running stats) back from a graph.
    void absorb(const Graph& g, const std::map<std::string, int>& cache);

  private:
    VaeConfig cfg_;
    std::map<std::string, Tensor> weights_;
    bool frozen_ = false;
};

// Resample a cloud to exactly n points: farthest-point subsampling when
// larger, resampling with repetition when smaller.
PointCloud resample_cloud(const PointCloud& c, int64_t n);

PartEntry canonicalize_part(const PointCloud& raw, std::string id = {},
                            std::string source = {}, int64_t points = 512);

// Deterministic eval-mode encoding of a canonical cloud.
void encode(const VaeParams& params, const PointCloud& p, LatentCode& mu, LatentCode& logvar);
LatentCode encode_mu(const VaeParams& params, const PointCloud& p);

// Deterministic eval-mode decoding of a latent code.
PointCloud decode(const VaeParams& params, const LatentCode& e);

// Reusable eval-mode graphs bound to one frozen VaeParams; avoids
// rebuilding the decoder graph in hot loops. Not thread-safe.
class VaeEval {
  public:
    explicit VaeEval(const VaeParams& params);
    const VaeParams& params() const { return params_; }
    void encode(const PointCloud& p, LatentCode& mu, LatentCode& logvar);
    LatentCode encode_mu(const PointCloud& p);
    PointCloud decode(const LatentCode& e);

  private:
    const VaeParams& params_;
    Graph enc_, dec_;
    int enc_x_, enc_mu_, enc_lv_, dec_z_, dec_out_;
};

double kl_divergence(const LatentCode& mu, const LatentCode& logvar);
double vae_loss(const PointCloud& p, const PointCloud& recon, const LatentCode& mu,
                const LatentCode& logvar, double beta);

struct VaeDivergenceError : std::runtime_error {
    VaeDivergenceError(const std::string& msg, std::shared_ptr<VaeParams> checkpoint)
        : std::runtime_error(msg), last_checkpoint(std::move(checkpoint)) {}
    std::shared_ptr<VaeParams> last_checkpoint;
};

// Reparameterization-trick training on the whole library; returns frozen
// params with eval-mode batchnorm statistics. The loss curve (one entry
// per epoch) is appended to *curve when given.
VaeParams train_vae(const PartLibrary& library, const VaeTrainConfig& cfg,
                    std::vector<double>* curve = nullptr);

void save_vae(const VaeParams& params, const std::string& path);
VaeParams load_vae(const std::string& path);

}  // namespace para
