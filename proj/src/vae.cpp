#include "para/vae.hpp"

#include "para/optim.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace para {

namespace {

struct LayerSpec {
    const char* name;
    int64_t in, out;
    bool bn;  // batchnorm + leaky-relu follows
};

std::vector<LayerSpec> encoder_layers(const VaeConfig& cfg) {
    return {{"enc.pl1", 3, 32, true},
            {"enc.pl2", 32, 64, true},
            {"enc.pl3", 64, 64, true},
            {"enc.pl4", 64, 64, true},
            {"enc.mu", 64, cfg.latent, false},
            {"enc.lv", 64, cfg.latent, false}};
}

std::vector<LayerSpec> decoder_layers(const VaeConfig& cfg) {
    return {{"dec.fc1", cfg.latent, 512, true},
            {"dec.fc2", 512, 512, true},
            {"dec.fc3", 512, 1024, true},
            {"dec.fc4", 1024, 1024, true},
            {"dec.fc5", 1024, cfg.points * 3, false}};
}

}  // namespace

VaeParams::VaeParams(VaeConfig cfg) : cfg_(cfg) {
    auto declare = [&](const std::vector<LayerSpec>& layers) {
        for (const auto& l : layers) {
            weights_[std::string(l.name) + ".w"] = Tensor::zeros({l.in, l.out});
            weights_[std::string(l.name) + ".b"] = Tensor::zeros({l.out});
            if (l.bn) {
                std::string bn = std::string(l.name) + ".bn";
                weights_[bn + ".gamma"] = Tensor::full({l.out}, 1.0);
                weights_[bn + ".beta"] = Tensor::zeros({l.out});
                weights_[bn + ".rm"] = Tensor::zeros({l.out});
                weights_[bn + ".rv"] = Tensor::full({l.out}, 1.0);
            }
        }
    };
    declare(encoder_layers(cfg_));
    declare(decoder_layers(cfg_));
}

void VaeParams::init_random(Rng& rng) {
    if (frozen_) throw std::logic_error("VaeParams: frozen");
    for (auto& [name, t] : weights_) {
        if (name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0) {
            // near-zero log-variance head so initial sigma is close to 1
            double std = name == "enc.lv.w" ? 1e-3
                                            : std::sqrt(2.0 / static_cast<double>(t.shape[0]));
            for (auto& v : t.data) v = std * rng.normal();
        }
    }
    // start with small posterior noise so the decoder learns to use z
    for (auto& v : weights_.at("enc.lv.b").data) v = -12.0;
}

std::map<std::string, Tensor>& VaeParams::mutable_weights() {
    if (frozen_) throw std::logic_error("VaeParams: frozen");
    return weights_;
}

uint64_t VaeParams::checksum() const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&](const void* p, size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& [name, t] : weights_) {
        mix(name.data(), name.size());
        mix(t.data.data(), t.data.size() * sizeof(double));
    }
    return h;
}

namespace {

int shared_param(Graph& g, std::map<std::string, int>& cache,
                 const std::map<std::string, Tensor>& w, const std::string& name) {
    auto it = cache.find(name);
    if (it != cache.end()) return it->second;
    int id = g.param(name, w.at(name));
    cache.emplace(name, id);
    return id;
}

// One stack of (pointwise-)linear layers with optional batchnorm+leaky-relu.
// Batchnorm nodes are per-instance but read/record the shared running stats;
// the first instance's node id is cached under "<layer>.bn.node" so absorb()
// can read trained stats back.
int append_stack(Graph& g, int x, const std::vector<LayerSpec>& layers, bool pointwise,
                 std::map<std::string, int>& cache, const std::map<std::string, Tensor>& w,
                 const VaeConfig& cfg, size_t count) {
    for (size_t i = 0; i < count; ++i) {
        const auto& l = layers[i];
        int wi = shared_param(g, cache, w, std::string(l.name) + ".w");
        int bi = shared_param(g, cache, w, std::string(l.name) + ".b");
        x = pointwise ? g.pointwise_linear(l.name, x, wi, bi) : g.linear(l.name, x, wi, bi);
        if (l.bn) {
            std::string bn = std::string(l.name) + ".bn";
            int ga = shared_param(g, cache, w, bn + ".gamma");
            int be = shared_param(g, cache, w, bn + ".beta");
            x = g.batchnorm(bn, x, ga, be, cfg.bn_momentum, cfg.bn_eps);
            g.node(x).running_mean = w.at(bn + ".rm");
            g.node(x).running_var = w.at(bn + ".rv");
            cache.emplace(bn + ".node", x);
            x = g.leaky_relu(x, cfg.lrelu_slope);
        }
    }
    return x;
}

}  // namespace

int VaeParams::append_encoder(Graph& g, int x, std::map<std::string, int>& cache,
                              int* lv_out) const {
    auto layers = encoder_layers(cfg_);
    int feat = append_stack(g, x, layers, true, cache, weights_, cfg_, 4);
    feat = g.maxpool_points(feat);
    int wm = shared_param(g, cache, weights_, "enc.mu.w");
    int bm = shared_param(g, cache, weights_, "enc.mu.b");
    int mu = g.linear("enc.mu", feat, wm, bm);
    if (lv_out) {
        int wl = shared_param(g, cache, weights_, "enc.lv.w");
        int bl = shared_param(g, cache, weights_, "enc.lv.b");
        *lv_out = g.linear("enc.lv", feat, wl, bl);
    }
    return mu;
}

int VaeParams::append_decoder(Graph& g, int z, std::map<std::string, int>& cache) const {
    auto layers = decoder_layers(cfg_);
    int y = append_stack(g, z, layers, false, cache, weights_, cfg_, layers.size());
    int64_t b = g.node(z).out_shape[0];
    return g.reshape(y, {b, cfg_.points, 3});
}

void VaeParams::absorb(const Graph& g, const std::map<std::string, int>& cache) {
    if (frozen_) throw std::logic_error("VaeParams: frozen");
    for (auto& [name, t] : weights_) {
        bool rm = name.size() > 3 && name.compare(name.size() - 3, 3, ".rm") == 0;
        bool rv = name.size() > 3 && name.compare(name.size() - 3, 3, ".rv") == 0;
        if (rm || rv) {
            auto it = cache.find(name.substr(0, name.size() - 3) + ".node");
            if (it != cache.end())
                t = rm ? g.node(it->second).running_mean : g.node(it->second).running_var;
        } else {
            auto it = cache.find(name);
            if (it != cache.end()) t = g.value(it->second);
        }
    }
}

PointCloud resample_cloud(const PointCloud& c, int64_t n) {
    int64_t m = c.size();
    if (m == 0) throw std::invalid_argument("resample_cloud: empty cloud");
    PointCloud out;
    out.pts.reserve(static_cast<size_t>(n));
    if (m == n) return c;
    if (m < n) {
        // repeat points round-robin; deterministic, near-uniform weights
        for (int64_t i = 0; i < n; ++i) out.pts.push_back(c.pts[static_cast<size_t>(i % m)]);
        return out;
    }
    // farthest-point subsampling seeded at point 0
    std::vector<double> d2(static_cast<size_t>(m), std::numeric_limits<double>::infinity());
    int64_t cur = 0;
    for (int64_t k = 0; k < n; ++k) {
        out.pts.push_back(c.pts[static_cast<size_t>(cur)]);
        int64_t next = 0;
        double best = -1;
        for (int64_t i = 0; i < m; ++i) {
            Vec3 d = c.pts[static_cast<size_t>(i)] - c.pts[static_cast<size_t>(cur)];
            double v = std::min(d2[static_cast<size_t>(i)], dot(d, d));
            d2[static_cast<size_t>(i)] = v;
            if (v > best) {
                best = v;
                next = i;
            }
        }
        cur = next;
    }
    return out;
}

PartEntry canonicalize_part(const PointCloud& raw, std::string id, std::string source,
                            int64_t points) {
    if (raw.empty()) throw std::invalid_argument("canonicalize_part: empty cloud");
    Vec3 c0 = raw.centroid();
    bool degenerate = true;
    for (const auto& p : raw.pts)
        if (dist(p, raw.pts[0]) > 0) {
            degenerate = false;
            break;
        }
    if (degenerate) throw std::invalid_argument("canonicalize_part: all points identical");

    YawObb box = yaw_obb(raw);
    PointCloud centered;
    centered.pts.reserve(raw.pts.size());
    for (const auto& p : raw.pts) centered.pts.push_back(p - c0);
    PointCloud aligned = apply_pose(centered, RigidPose{{0, 0, 0}, box.yaw});
    PointCloud sampled = resample_cloud(aligned, points);
    // exact recentering after resampling
    Vec3 c1 = sampled.centroid();
    for (auto& p : sampled.pts) p = p - c1;

    PartEntry e;
    e.id = std::move(id);
    e.source = std::move(source);
    e.canonical = std::move(sampled);
    // canonical -> source: rotate back by -yaw, then translate; the small
    // resampling recenter folds into the translation
    Vec3 c1w = apply_pose(c1, RigidPose{{0, 0, 0}, -box.yaw});
    e.canonical_pose = RigidPose{c0 + c1w, -box.yaw};
    return e;
}

VaeEval::VaeEval(const VaeParams& params) : params_(params) {
    if (!params.frozen()) throw std::logic_error("VaeEval: params must be frozen");
    const auto& cfg = params.config();
    std::map<std::string, int> cache;
    enc_x_ = enc_.input("x", {1, cfg.points, 3});
    enc_mu_ = params.append_encoder(enc_, enc_x_, cache, &enc_lv_);
    cache.clear();
    dec_z_ = dec_.input("z", {1, cfg.latent});
    dec_out_ = params.append_decoder(dec_, dec_z_, cache);
    enc_.set_training(false);
    dec_.set_training(false);
}

void VaeEval::encode(const PointCloud& p, LatentCode& mu, LatentCode& logvar) {
    const auto& cfg = params_.config();
    if (p.size() != cfg.points)
        throw std::invalid_argument("encode: expected " + std::to_string(cfg.points) +
                                    " points, got " + std::to_string(p.size()));
    Tensor x = Tensor::zeros({1, cfg.points, 3});
    for (int64_t i = 0; i < cfg.points; ++i)
        for (int d = 0; d < 3; ++d) x.at(0, i, d) = p.pts[static_cast<size_t>(i)][d];
    enc_.set_input(enc_x_, x);
    enc_.forward();
    mu = enc_.value(enc_mu_).data;
    logvar = enc_.value(enc_lv_).data;
}

LatentCode VaeEval::encode_mu(const PointCloud& p) {
    LatentCode mu, lv;
    encode(p, mu, lv);
    return mu;
}

PointCloud VaeEval::decode(const LatentCode& e) {
    const auto& cfg = params_.config();
    if (static_cast<int64_t>(e.size()) != cfg.latent)
        throw std::invalid_argument("decode: latent size mismatch");
    for (double v : e)
        if (!std::isfinite(v)) throw std::invalid_argument("decode: non-finite latent");
    dec_.set_input(dec_z_, Tensor::from({1, cfg.latent}, e));
    dec_.forward();
    const Tensor& y = dec_.value(dec_out_);
    PointCloud out;
    out.pts.resize(static_cast<size_t>(cfg.points));
    for (int64_t i = 0; i < cfg.points; ++i)
        for (int d = 0; d < 3; ++d) out.pts[static_cast<size_t>(i)][d] = y.at(0, i, d);
    return out;
}

void encode(const VaeParams& params, const PointCloud& p, LatentCode& mu, LatentCode& logvar) {
    VaeEval(params).encode(p, mu, logvar);
}

LatentCode encode_mu(const VaeParams& params, const PointCloud& p) {
    return VaeEval(params).encode_mu(p);
}

PointCloud decode(const VaeParams& params, const LatentCode& e) {
    return VaeEval(params).decode(e);
}

double kl_divergence(const LatentCode& mu, const LatentCode& logvar) {
    if (mu.size() != logvar.size()) throw std::invalid_argument("kl_divergence: size mismatch");
    double acc = 0;
    for (size_t i = 0; i < mu.size(); ++i)
        acc += mu[i] * mu[i] + std::exp(logvar[i]) - logvar[i] - 1.0;
    return 0.5 * acc;
}

double vae_loss(const PointCloud& p, const PointCloud& recon, const LatentCode& mu,
                const LatentCode& logvar, double beta) {
    if (p.size() != recon.size()) throw std::invalid_argument("vae_loss: shape mismatch");
    return chamfer(recon, p) + beta * kl_divergence(mu, logvar);
}

VaeParams train_vae(const PartLibrary& library, const VaeTrainConfig& cfg,
                    std::vector<double>* curve) {
    int64_t count = library.size();
    if (count < 1) throw std::invalid_argument("train_vae: empty library");
    const VaeConfig& arch = cfg.arch;
    for (const auto& part : library.parts)
        if (part.canonical.size() != arch.points)
            throw std::invalid_argument("train_vae: part '" + part.id + "' has " +
                                        std::to_string(part.canonical.size()) + " points");

    Rng rng(cfg.seed);
    VaeParams params(arch);
    params.init_random(rng);

    // Batch statistics over duplicates of a single part are degenerate, so
    // a 1-part library trains with frozen identity batchnorm stats (a pure
    // affine map); that keeps training and eval forwards identical.
    bool frozen_bn = count < 2;
    // with frozen stats, duplicate rows are harmless and average the
    // reparameterization noise
    int64_t bsz = frozen_bn ? cfg.batch : std::min<int64_t>(cfg.batch, count);
    if (bsz < 2) bsz = 2;
    Graph g;
    g.set_training(!frozen_bn);
    std::map<std::string, int> cache;
    int x = g.input("x", {bsz, arch.points, 3});
    int noise = g.input("eps", {bsz, arch.latent});
    int lv = -1;
    int mu = params.append_encoder(g, x, cache, &lv);
    int z = g.add(mu, g.mul(g.exp(g.scale(lv, 0.5)), noise));
    int recon = params.append_decoder(g, z, cache);
    int loss = g.add(g.chamfer(recon, x), g.scale(g.kl_diag(mu, lv), cfg.beta));

    auto pids = g.param_ids();
    std::vector<Tensor*> pvals;
    for (int id : pids) pvals.push_back(&g.param_value(id));
    AdamState adam = AdamState::init(pvals);

    auto checkpoint = std::make_shared<VaeParams>(params);
    checkpoint->absorb(g, cache);

    std::vector<int64_t> order(static_cast<size_t>(count));
    std::iota(order.begin(), order.end(), 0);
    Tensor xb = Tensor::zeros({bsz, arch.points, 3});
    Tensor eb = Tensor::zeros({bsz, arch.latent});

    double lr_min = cfg.lr_min < 0 ? cfg.lr : cfg.lr_min;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double frac = cfg.epochs > 1
                          ? static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1)
                          : 0.0;
        double lr = lr_min + 0.5 * (cfg.lr - lr_min) * (1.0 + std::cos(M_PI * frac));
        for (int64_t i = count - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)],
                      order[static_cast<size_t>(rng.uniform_int(0, i))]);
        int64_t nbatch = (count + bsz - 1) / bsz;
        double epoch_loss = 0;
        for (int64_t bidx = 0; bidx < nbatch; ++bidx) {
            for (int64_t s = 0; s < bsz; ++s) {
                // short final batch wraps around the permutation
                int64_t src = order[static_cast<size_t>((bidx * bsz + s) % count)];
                const PointCloud& p = library.parts[static_cast<size_t>(src)].canonical;
                for (int64_t i = 0; i < arch.points; ++i)
                    for (int d = 0; d < 3; ++d) xb.at(s, i, d) = p.pts[static_cast<size_t>(i)][d];
                for (int64_t c = 0; c < arch.latent; ++c) eb.at(s, c) = rng.normal();
            }
            g.set_input(x, xb);
            g.set_input(noise, eb);
            g.forward();
            double lv_now = g.value(loss).data[0];
            if (!std::isfinite(lv_now))
                throw VaeDivergenceError("train_vae: loss diverged at epoch " +
                                             std::to_string(epoch),
                                         checkpoint);
            epoch_loss += lv_now;
            g.backward(loss);
            std::vector<const Tensor*> grads;
            for (int id : pids) grads.push_back(&g.grad(id));
            adam_update(pvals, grads, adam, lr);
        }
        if (curve) curve->push_back(epoch_loss / static_cast<double>(nbatch));
        checkpoint = std::make_shared<VaeParams>(params);
        checkpoint->absorb(g, cache);
    }

    // Recalibrate batchnorm statistics with noise-free forwards over the
    // library in index order. Stores the biased variance actually used to
    // normalize, so eval reproduces the calibration activations even at
    // small batch sizes.
    if (!frozen_bn) {
        std::vector<int> bn_ids;
        for (const auto& [key, id] : cache)
            if (key.size() > 5 && key.compare(key.size() - 5, 5, ".node") == 0)
                bn_ids.push_back(id);
        std::map<int, Tensor> m1, m2;
        for (int id : bn_ids) {
            int64_t c = g.node(id).running_mean.numel();
            m1[id] = Tensor::zeros({c});
            m2[id] = Tensor::zeros({c});
        }
        for (auto& v : eb.data) v = 0.0;
        int64_t nbatch = (count + bsz - 1) / bsz;
        for (int64_t bidx = 0; bidx < nbatch; ++bidx) {
            for (int64_t s = 0; s < bsz; ++s) {
                const PointCloud& p =
                    library.parts[static_cast<size_t>((bidx * bsz + s) % count)].canonical;
                for (int64_t i = 0; i < arch.points; ++i)
                    for (int d = 0; d < 3; ++d) xb.at(s, i, d) = p.pts[static_cast<size_t>(i)][d];
            }
            g.set_input(x, xb);
            g.set_input(noise, eb);
            g.forward();
            for (int id : bn_ids) {
                const Node& n = g.node(id);
                for (int64_t j = 0; j < m1[id].numel(); ++j) {
                    double mean = n.saved_mean.data[static_cast<size_t>(j)];
                    double invstd = n.saved_invstd.data[static_cast<size_t>(j)];
                    double var = 1.0 / (invstd * invstd) - arch.bn_eps;
                    m1[id].data[static_cast<size_t>(j)] += mean;
                    m2[id].data[static_cast<size_t>(j)] += var + mean * mean;
                }
            }
        }
        for (int id : bn_ids) {
            Node& n = g.node(id);
            for (int64_t j = 0; j < m1[id].numel(); ++j) {
                double mean = m1[id].data[static_cast<size_t>(j)] / static_cast<double>(nbatch);
                double raw = m2[id].data[static_cast<size_t>(j)] / static_cast<double>(nbatch);
                n.running_mean.data[static_cast<size_t>(j)] = mean;
                n.running_var.data[static_cast<size_t>(j)] = std::max(raw - mean * mean, 0.0);
            }
        }
    }

    params.absorb(g, cache);
    params.freeze();
    return params;
}

namespace {

constexpr char kMagic[8] = {'P', 'A', 'R', 'T', 'V', 'A', 'E', '1'};

void put_u32(FILE* f, uint32_t v) { std::fwrite(&v, 4, 1, f); }
void put_i64(FILE* f, int64_t v) { std::fwrite(&v, 8, 1, f); }

uint32_t get_u32(FILE* f) {
    uint32_t v = 0;
    if (std::fread(&v, 4, 1, f) != 1) throw std::runtime_error("vae file: truncated");
    return v;
}
int64_t get_i64(FILE* f) {
    int64_t v = 0;
    if (std::fread(&v, 8, 1, f) != 1) throw std::runtime_error("vae file: truncated");
    return v;
}

}  // namespace

void save_vae(const VaeParams& params, const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("save_vae: cannot open " + path);
    std::fwrite(kMagic, 1, 8, f);
    put_u32(f, 1);  // format version
    put_i64(f, params.config().latent);
    put_i64(f, params.config().points);
    put_u32(f, params.frozen() ? 1 : 0);
    put_u32(f, static_cast<uint32_t>(params.weights().size()));
    for (const auto& [name, t] : params.weights()) {
        put_u32(f, static_cast<uint32_t>(name.size()));
        std::fwrite(name.data(), 1, name.size(), f);
        put_u32(f, static_cast<uint32_t>(t.shape.size()));
        for (int64_t d : t.shape) put_i64(f, d);
        std::fwrite(t.data.data(), sizeof(double), t.data.size(), f);
    }
    if (std::fclose(f) != 0) throw std::runtime_error("save_vae: write failed for " + path);
}

VaeParams load_vae(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw std::runtime_error("load_vae: cannot open " + path);
    struct Closer {
        FILE* f;
        ~Closer() { std::fclose(f); }
    } closer{f};
    char magic[8];
    if (std::fread(magic, 1, 8, f) != 8 || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("load_vae: bad magic in " + path);
    uint32_t version = get_u32(f);
    if (version != 1) throw std::runtime_error("load_vae: unsupported version");
    VaeConfig cfg;
    cfg.latent = get_i64(f);
    cfg.points = get_i64(f);
    bool frozen = get_u32(f) != 0;
    uint32_t nlayers = get_u32(f);
    VaeParams params(cfg);
    auto& w = params.mutable_weights();
    if (nlayers != w.size()) throw std::runtime_error("load_vae: layer count mismatch");
    for (uint32_t i = 0; i < nlayers; ++i) {
        uint32_t len = get_u32(f);
        std::string name(len, '\0');
        if (std::fread(name.data(), 1, len, f) != len)
            throw std::runtime_error("vae file: truncated");
        auto it = w.find(name);
        if (it == w.end()) throw std::runtime_error("load_vae: unknown layer " + name);
        uint32_t nd = get_u32(f);
        std::vector<int64_t> dims(nd);
        for (auto& d : dims) d = get_i64(f);
        if (dims != it->second.shape)
            throw std::runtime_error("load_vae: shape mismatch for " + name);
        if (std::fread(it->second.data.data(), sizeof(double), it->second.data.size(), f) !=
            it->second.data.size())
            throw std::runtime_error("vae file: truncated");
    }
    if (frozen) params.freeze();
    return params;
}

}  // namespace para
