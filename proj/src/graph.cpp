#include "para/graph.hpp"

#include <algorithm>
#include <cmath>

#include "para/nn.hpp"

namespace para {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw GraphError(msg);
}

}  // namespace

int Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    forward_done_ = false;
    return static_cast<int>(nodes_.size()) - 1;
}

void Graph::check_arg(int id) const {
    require(id >= 0 && id < static_cast<int>(nodes_.size()), "graph: bad operand index");
}

int Graph::input(std::string name, std::vector<int64_t> shape, bool requires_grad) {
    Node n;
    n.kind = OpKind::Input;
    n.name = std::move(name);
    n.out_shape = std::move(shape);
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

int Graph::param(std::string name, Tensor init) {
    Node n;
    n.kind = OpKind::Param;
    n.name = std::move(name);
    n.out_shape = init.shape;
    n.value = std::move(init);
    return push(std::move(n));
}

int Graph::linear(std::string name, int x, int w, int b) {
    check_arg(x);
    check_arg(w);
    check_arg(b);
    const auto& xs = nodes_[x].out_shape;
    const auto& ws = nodes_[w].out_shape;
    const auto& bs = nodes_[b].out_shape;
    require(ws.size() == 2 && bs.size() == 1 && bs[0] == ws[1] && !xs.empty() &&
                xs.back() == ws[0],
            "linear '" + name + "': shape mismatch, x=" + shape_str(xs) + " W=" + shape_str(ws) +
                " b=" + shape_str(bs));
    Node n;
    n.kind = OpKind::Linear;
    n.name = std::move(name);
    n.args = {x, w, b};
    n.out_shape = xs;
    n.out_shape.back() = ws[1];
    return push(std::move(n));
}

int Graph::pointwise_linear(std::string name, int x, int w, int b) {
    check_arg(x);
    require(nodes_[x].out_shape.size() == 3,
            "pointwise_linear '" + name + "': expects [B,N,C] input");
    int id = linear(std::move(name), x, w, b);
    nodes_[id].kind = OpKind::PointwiseLinear;
    return id;
}

int Graph::leaky_relu(int x, double slope) {
    check_arg(x);
    Node n;
    n.kind = OpKind::LeakyRelu;
    n.args = {x};
    n.slope = slope;
    n.out_shape = nodes_[x].out_shape;
    return push(std::move(n));
}

int Graph::batchnorm(std::string name, int x, int gamma, int beta, double momentum, double eps) {
    check_arg(x);
    check_arg(gamma);
    check_arg(beta);
    const auto& xs = nodes_[x].out_shape;
    int64_t c = xs.back();
    require(nodes_[gamma].out_shape == std::vector<int64_t>{c} &&
                nodes_[beta].out_shape == std::vector<int64_t>{c},
            "batchnorm '" + name + "': gamma/beta must be [C], x=" + shape_str(xs));
    Node n;
    n.kind = OpKind::BatchNorm;
    n.name = std::move(name);
    n.args = {x, gamma, beta};
    n.momentum = momentum;
    n.eps = eps;
    n.out_shape = xs;
    n.running_mean = Tensor::zeros({c});
    n.running_var = Tensor::full({c}, 1.0);
    return push(std::move(n));
}

int Graph::maxpool_points(int x) {
    check_arg(x);
    const auto& xs = nodes_[x].out_shape;
    require(xs.size() == 3, "maxpool_points: expects [B,N,C], got " + shape_str(xs));
    Node n;
    n.kind = OpKind::MaxPoolPoints;
    n.args = {x};
    n.out_shape = {xs[0], xs[2]};
    return push(std::move(n));
}

int Graph::reshape(int x, std::vector<int64_t> shape) {
    check_arg(x);
    require(Tensor::numel_of(shape) == Tensor::numel_of(nodes_[x].out_shape),
            "reshape: element count mismatch " + shape_str(nodes_[x].out_shape) + " -> " +
                shape_str(shape));
    Node n;
    n.kind = OpKind::Reshape;
    n.args = {x};
    n.out_shape = std::move(shape);
    return push(std::move(n));
}

int Graph::add(int a, int b) {
    check_arg(a);
    check_arg(b);
    require(nodes_[a].out_shape == nodes_[b].out_shape, "add: shape mismatch");
    Node n;
    n.kind = OpKind::Add;
    n.args = {a, b};
    n.out_shape = nodes_[a].out_shape;
    return push(std::move(n));
}

int Graph::mul(int a, int b) {
    check_arg(a);
    check_arg(b);
    require(nodes_[a].out_shape == nodes_[b].out_shape, "mul: shape mismatch");
    Node n;
    n.kind = OpKind::Mul;
    n.args = {a, b};
    n.out_shape = nodes_[a].out_shape;
    return push(std::move(n));
}

int Graph::scale(int x, double c) {
    check_arg(x);
    Node n;
    n.kind = OpKind::Scale;
    n.args = {x};
    n.scale = c;
    n.out_shape = nodes_[x].out_shape;
    return push(std::move(n));
}

int Graph::exp(int x) {
    check_arg(x);
    Node n;
    n.kind = OpKind::Exp;
    n.args = {x};
    n.out_shape = nodes_[x].out_shape;
    return push(std::move(n));
}

int Graph::sum(int x) {
    check_arg(x);
    Node n;
    n.kind = OpKind::Sum;
    n.args = {x};
    n.out_shape = {1};
    return push(std::move(n));
}

int Graph::concat(std::vector<int> clouds) {
    require(!clouds.empty(), "concat: no operands");
    int64_t total = 0;
    for (int c : clouds) {
        check_arg(c);
        const auto& s = nodes_[c].out_shape;
        require(s.size() == 2 && s[1] == 3, "concat: operands must be [N,3]");
        total += s[0];
    }
    Node n;
    n.kind = OpKind::Concat;
    n.args = std::move(clouds);
    n.out_shape = {total, 3};
    return push(std::move(n));
}

int Graph::chamfer(int a, int b) {
    check_arg(a);
    check_arg(b);
    const auto& as = nodes_[a].out_shape;
    const auto& bs = nodes_[b].out_shape;
    bool ok2 = as.size() == 2 && bs.size() == 2 && as[1] == 3 && bs[1] == 3;
    bool ok3 = as.size() == 3 && bs.size() == 3 && as[0] == bs[0] && as[2] == 3 && bs[2] == 3;
    require(ok2 || ok3, "chamfer: expects [N,3]x[M,3] or [B,N,3]x[B,M,3], got " + shape_str(as) +
                            " x " + shape_str(bs));
    Node n;
    n.kind = OpKind::Chamfer;
    n.args = {a, b};
    n.out_shape = {1};
    return push(std::move(n));
}

int Graph::rigid_transform(int points, int t, int r) {
    check_arg(points);
    check_arg(t);
    check_arg(r);
    const auto& ps = nodes_[points].out_shape;
    require(ps.size() == 2 && ps[1] == 3, "rigid_transform: points must be [N,3]");
    require(nodes_[t].out_shape == std::vector<int64_t>{3}, "rigid_transform: t must be [3]");
    require(Tensor::numel_of(nodes_[r].out_shape) == 1, "rigid_transform: r must be scalar");
    Node n;
    n.kind = OpKind::RigidTransform;
    n.args = {points, t, r};
    n.out_shape = ps;
    return push(std::move(n));
}

int Graph::reflect(int points, const double* plane_point, const double* plane_normal) {
    check_arg(points);
    const auto& ps = nodes_[points].out_shape;
    require(ps.size() == 2 && ps[1] == 3, "reflect: points must be [N,3]");
    Node n;
    n.kind = OpKind::Reflect;
    n.args = {points};
    n.out_shape = ps;
    for (int d = 0; d < 3; ++d) {
        n.plane_point[d] = plane_point[d];
        n.plane_normal[d] = plane_normal[d];
    }
    return push(std::move(n));
}

int Graph::overlap_penalty(int a, int b, double tau) {
    check_arg(a);
    check_arg(b);
    require(nodes_[a].out_shape.size() == 2 && nodes_[a].out_shape[1] == 3 &&
                nodes_[b].out_shape.size() == 2 && nodes_[b].out_shape[1] == 3,
            "overlap_penalty: expects [N,3] x [M,3]");
    Node n;
    n.kind = OpKind::OverlapPenalty;
    n.args = {a, b};
    n.tau = tau;
    n.out_shape = {1};
    return push(std::move(n));
}

int Graph::kl_diag(int mu, int logvar) {
    check_arg(mu);
    check_arg(logvar);
    require(nodes_[mu].out_shape == nodes_[logvar].out_shape &&
                nodes_[mu].out_shape.size() == 2,
            "kl_diag: mu/logvar must be matching [B,C]");
    Node n;
    n.kind = OpKind::KlDiag;
    n.args = {mu, logvar};
    n.out_shape = {1};
    return push(std::move(n));
}

void Graph::set_input(int id, const Tensor& v) {
    check_arg(id);
    Node& n = nodes_[id];
    require(n.kind == OpKind::Input, "set_input: node is not an input");
    require(v.shape == n.out_shape, "set_input '" + n.name + "': shape " + shape_str(v.shape) +
                                        " does not match declared " + shape_str(n.out_shape));
    n.value = v;
    n.has_input = true;
}

void Graph::set_input(const std::string& name, const Tensor& v) {
    int id = find(name);
    require(id >= 0, "set_input: no node named '" + name + "'");
    set_input(id, v);
}

int Graph::find(const std::string& name) const {
    for (int i = 0; i < static_cast<int>(nodes_.size()); ++i)
        if (nodes_[i].name == name) return i;
    return -1;
}

Tensor& Graph::param_value(int id) {
    check_arg(id);
    require(nodes_[id].kind == OpKind::Param, "param_value: node is not a param");
    return nodes_[id].value;
}

std::vector<int> Graph::param_ids() const {
    std::vector<int> ids;
    for (int i = 0; i < static_cast<int>(nodes_.size()); ++i)
        if (nodes_[i].kind == OpKind::Param) ids.push_back(i);
    return ids;
}

void Graph::forward() {
    for (auto& n : nodes_) forward_node(n);
    forward_done_ = true;
}

namespace {

// Single-direction chamfer term: for each point of a, distance to its
// nearest neighbor in b. Uses a grid when the pair is large enough to pay
// for it; results are identical either way.
double chamfer_half(const double* a, int64_t n, const double* b, int64_t m,
                    std::vector<int64_t>& nn_out, int64_t base) {
    double acc = 0.0;
    if (n * m > 16384 && m > 64) {
        NnGrid grid(b, m);
        for (int64_t i = 0; i < n; ++i) {
            double d2;
            int64_t j = grid.nearest(&a[3 * i], &d2);
            nn_out[base + i] = j;
            acc += std::sqrt(d2);
        }
    } else {
        for (int64_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            int64_t bj = 0;
            for (int64_t j = 0; j < m; ++j) {
                double dx = a[3 * i] - b[3 * j];
                double dy = a[3 * i + 1] - b[3 * j + 1];
                double dz = a[3 * i + 2] - b[3 * j + 2];
                double d2 = dx * dx + dy * dy + dz * dz;
                if (d2 < best) {
                    best = d2;
                    bj = j;
                }
            }
            nn_out[base + i] = bj;
            acc += std::sqrt(best);
        }
    }
    return acc / static_cast<double>(n);
}

}  // namespace

void Graph::forward_node(Node& n) {
    auto& V = [&]() -> Tensor& { return n.value; }();
    switch (n.kind) {
        case OpKind::Input:
            require(n.has_input, "forward: input '" + n.name + "' was never set");
            break;
        case OpKind::Param:
            break;
        case OpKind::Linear:
        case OpKind::PointwiseLinear: {
            const Tensor& x = nodes_[n.args[0]].value;
            const Tensor& w = nodes_[n.args[1]].value;
            const Tensor& b = nodes_[n.args[2]].value;
            int64_t in = w.shape[0], out = w.shape[1];
            int64_t rows = x.numel() / in;
            V = Tensor::zeros(n.out_shape);
            for (int64_t mrow = 0; mrow < rows; ++mrow) {
                const double* xr = &x.data[mrow * in];
                double* yr = &V.data[mrow * out];
                for (int64_t o = 0; o < out; ++o) yr[o] = b.data[o];
                for (int64_t i = 0; i < in; ++i) {
                    double xi = xr[i];
                    if (xi == 0.0) continue;
                    const double* wr = &w.data[i * out];
                    for (int64_t o = 0; o < out; ++o) yr[o] += xi * wr[o];
                }
            }
            break;
        }
        case OpKind::LeakyRelu: {
            const Tensor& x = nodes_[n.args[0]].value;
            V = x;
            for (auto& v : V.data)
                if (v < 0) v *= n.slope;
            break;
        }
        case OpKind::BatchNorm: {
            const Tensor& x = nodes_[n.args[0]].value;
            const Tensor& gamma = nodes_[n.args[1]].value;
            const Tensor& beta = nodes_[n.args[2]].value;
            int64_t c = n.out_shape.back();
            int64_t rows = x.numel() / c;
            V = Tensor::zeros(n.out_shape);
            n.saved_xhat = Tensor::zeros(n.out_shape);
            n.saved_mean = Tensor::zeros({c});
            n.saved_invstd = Tensor::zeros({c});
            if (training_) {
                for (int64_t j = 0; j < c; ++j) {
                    double mean = 0;
                    for (int64_t r = 0; r < rows; ++r) mean += x.data[r * c + j];
                    mean /= static_cast<double>(rows);
                    double var = 0;
                    for (int64_t r = 0; r < rows; ++r) {
                        double d = x.data[r * c + j] - mean;
                        var += d * d;
                    }
                    var /= static_cast<double>(rows);
                    n.saved_mean.data[j] = mean;
                    n.saved_invstd.data[j] = 1.0 / std::sqrt(var + n.eps);
                    double unbiased = rows > 1 ? var * rows / static_cast<double>(rows - 1) : var;
                    n.running_mean.data[j] =
                        (1 - n.momentum) * n.running_mean.data[j] + n.momentum * mean;
                    n.running_var.data[j] =
                        (1 - n.momentum) * n.running_var.data[j] + n.momentum * unbiased;
                }
            } else {
                for (int64_t j = 0; j < c; ++j) {
                    n.saved_mean.data[j] = n.running_mean.data[j];
                    n.saved_invstd.data[j] = 1.0 / std::sqrt(n.running_var.data[j] + n.eps);
                }
            }
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < c; ++j) {
                    double xh = (x.data[r * c + j] - n.saved_mean.data[j]) * n.saved_invstd.data[j];
                    n.saved_xhat.data[r * c + j] = xh;
                    V.data[r * c + j] = gamma.data[j] * xh + beta.data[j];
                }
            break;
        }
        case OpKind::MaxPoolPoints: {
            const Tensor& x = nodes_[n.args[0]].value;
            int64_t bdim = x.shape[0], np = x.shape[1], c = x.shape[2];
            V = Tensor::zeros(n.out_shape);
            n.saved_idx.assign(bdim * c, 0);
            for (int64_t bi = 0; bi < bdim; ++bi)
                for (int64_t j = 0; j < c; ++j) {
                    double best = x.at(bi, 0, j);
                    int64_t bp = 0;
                    for (int64_t p = 1; p < np; ++p)
                        if (x.at(bi, p, j) > best) {
                            best = x.at(bi, p, j);
                            bp = p;
                        }
                    V.at(bi, j) = best;
                    n.saved_idx[bi * c + j] = bp;
                }
            break;
        }
        case OpKind::Reshape: {
            V = nodes_[n.args[0]].value;
            V.shape = n.out_shape;
            break;
        }
        case OpKind::Add: {
            V = nodes_[n.args[0]].value;
            const Tensor& b = nodes_[n.args[1]].value;
            for (size_t i = 0; i < V.data.size(); ++i) V.data[i] += b.data[i];
            break;
        }
        case OpKind::Mul: {
            V = nodes_[n.args[0]].value;
            const Tensor& b = nodes_[n.args[1]].value;
            for (size_t i = 0; i < V.data.size(); ++i) V.data[i] *= b.data[i];
            break;
        }
        case OpKind::Scale: {
            V = nodes_[n.args[0]].value;
            for (auto& v : V.data) v *= n.scale;
            break;
        }
        case OpKind::Exp: {
            V = nodes_[n.args[0]].value;
            for (auto& v : V.data) v = std::exp(v);
            break;
        }
        case OpKind::Sum: {
            const Tensor& x = nodes_[n.args[0]].value;
            double acc = 0;
            for (double v : x.data) acc += v;
            V = Tensor::scalar(acc);
            break;
        }
        case OpKind::Concat: {
            V = Tensor::zeros(n.out_shape);
            int64_t off = 0;
            for (int a : n.args) {
                const Tensor& x = nodes_[a].value;
                std::copy(x.data.begin(), x.data.end(), V.data.begin() + off);
                off += x.numel();
            }
            break;
        }
        case OpKind::Chamfer: {
            const Tensor& a = nodes_[n.args[0]].value;
            const Tensor& b = nodes_[n.args[1]].value;
            bool batched = a.ndim() == 3;
            int64_t bdim = batched ? a.shape[0] : 1;
            int64_t na = batched ? a.shape[1] : a.shape[0];
            int64_t nb = batched ? b.shape[1] : b.shape[0];
            require(na > 0 && nb > 0, "chamfer: empty cloud");
            n.saved_idx.assign(bdim * na, 0);
            n.saved_idx2.assign(bdim * nb, 0);
            double total = 0;
            for (int64_t bi = 0; bi < bdim; ++bi) {
                const double* ap = &a.data[bi * na * 3];
                const double* bp = &b.data[bi * nb * 3];
                total += chamfer_half(ap, na, bp, nb, n.saved_idx, bi * na);
                total += chamfer_half(bp, nb, ap, na, n.saved_idx2, bi * nb);
            }
            V = Tensor::scalar(total / static_cast<double>(bdim));
            break;
        }
        case OpKind::RigidTransform: {
            const Tensor& p = nodes_[n.args[0]].value;
            const Tensor& t = nodes_[n.args[1]].value;
            double r = nodes_[n.args[2]].value.data[0];
            double c = std::cos(r), s = std::sin(r);
            V = Tensor::zeros(n.out_shape);
            int64_t np = p.shape[0];
            for (int64_t i = 0; i < np; ++i) {
                double px = p.at(i, 0), py = p.at(i, 1), pz = p.at(i, 2);
                V.at(i, 0) = c * px + s * pz + t.data[0];
                V.at(i, 1) = py + t.data[1];
                V.at(i, 2) = -s * px + c * pz + t.data[2];
            }
            break;
        }
        case OpKind::Reflect: {
            const Tensor& p = nodes_[n.args[0]].value;
            V = Tensor::zeros(n.out_shape);
            const double* q = n.plane_point;
            const double* nv = n.plane_normal;
            for (int64_t i = 0; i < p.shape[0]; ++i) {
                double dx = p.at(i, 0) - q[0], dy = p.at(i, 1) - q[1], dz = p.at(i, 2) - q[2];
                double proj = dx * nv[0] + dy * nv[1] + dz * nv[2];
                V.at(i, 0) = p.at(i, 0) - 2 * proj * nv[0];
                V.at(i, 1) = p.at(i, 1) - 2 * proj * nv[1];
                V.at(i, 2) = p.at(i, 2) - 2 * proj * nv[2];
            }
            break;
        }
        case OpKind::OverlapPenalty: {
            const Tensor& a = nodes_[n.args[0]].value;
            const Tensor& b = nodes_[n.args[1]].value;
            int64_t na = a.shape[0], nb = b.shape[0];
            double acc = 0;
            for (int64_t i = 0; i < na; ++i) {
                double ax = a.at(i, 0), ay = a.at(i, 1), az = a.at(i, 2);
                for (int64_t j = 0; j < nb; ++j) {
                    double dx = ax - b.at(j, 0), dy = ay - b.at(j, 1), dz = az - b.at(j, 2);
                    double d = std::sqrt(dx * dx + dy * dy + dz * dz);
                    if (d < n.tau) acc += n.tau - d;
                }
            }
            V = Tensor::scalar(acc / static_cast<double>(na * nb));
            break;
        }
        case OpKind::KlDiag: {
            const Tensor& mu = nodes_[n.args[0]].value;
            const Tensor& lv = nodes_[n.args[1]].value;
            int64_t bdim = mu.shape[0];
            double acc = 0;
            for (size_t i = 0; i < mu.data.size(); ++i)
                acc += mu.data[i] * mu.data[i] + std::exp(lv.data[i]) - lv.data[i] - 1.0;
            V = Tensor::scalar(0.5 * acc / static_cast<double>(bdim));
            break;
        }
    }
}

void Graph::backward(int seed) {
    require(forward_done_, "backward: forward() has not been run on this graph");
    check_arg(seed);
    require(nodes_[seed].value.numel() == 1, "backward: seed must be scalar");
    for (auto& n : nodes_) n.grad = Tensor::zeros(n.out_shape);
    nodes_[seed].grad.data[0] = 1.0;
    for (int i = seed; i >= 0; --i) backward_node(nodes_[i]);
}

void Graph::backward_node(Node& n) {
    const Tensor& g = n.grad;
    bool any = false;
    for (double v : g.data)
        if (v != 0) {
            any = true;
            break;
        }
    if (!any) return;
    switch (n.kind) {
        case OpKind::Input:
        case OpKind::Param:
            break;
        case OpKind::Linear:
        case OpKind::PointwiseLinear: {
            const Tensor& x = nodes_[n.args[0]].value;
            const Tensor& w = nodes_[n.args[1]].value;
            Tensor& gx = nodes_[n.args[0]].grad;
            Tensor& gw = nodes_[n.args[1]].grad;
            Tensor& gb = nodes_[n.args[2]].grad;
            int64_t in = w.shape[0], out = w.shape[1];
            int64_t rows = x.numel() / in;
            for (int64_t mrow = 0; mrow < rows; ++mrow) {
                const double* gr = &g.data[mrow * out];
                const double* xr = &x.data[mrow * in];
                double* gxr = &gx.data[mrow * in];
                for (int64_t o = 0; o < out; ++o) gb.data[o] += gr[o];
                for (int64_t i = 0; i < in; ++i) {
                    const double* wr = &w.data[i * out];
                    double* gwr = &gw.data[i * out];
                    double acc = 0;
                    double xi = xr[i];
                    for (int64_t o = 0; o < out; ++o) {
                        acc += gr[o] * wr[o];
                        gwr[o] += xi * gr[o];
                    }
                    gxr[i] += acc;
                }
            }
            break;
        }
        case OpKind::LeakyRelu: {
            const Tensor& x = nodes_[n.args[0]].value;
            Tensor& gx = nodes_[n.args[0]].grad;
            for (size_t i = 0; i < x.data.size(); ++i)
                gx.data[i] += g.data[i] * (x.data[i] < 0 ? n.slope : 1.0);
            break;
        }
        case OpKind::BatchNorm: {
            const Tensor& gamma = nodes_[n.args[1]].value;
            Tensor& gx = nodes_[n.args[0]].grad;
            Tensor& ggamma = nodes_[n.args[1]].grad;
            Tensor& gbeta = nodes_[n.args[2]].grad;
            int64_t c = n.out_shape.back();
            int64_t rows = n.saved_xhat.numel() / c;
            for (int64_t j = 0; j < c; ++j) {
                double sum_g = 0, sum_gx = 0;
                for (int64_t r = 0; r < rows; ++r) {
                    double gr = g.data[r * c + j];
                    sum_g += gr;
                    sum_gx += gr * n.saved_xhat.data[r * c + j];
                }
                gbeta.data[j] += sum_g;
                ggamma.data[j] += sum_gx;
                double gam = gamma.data[j];
                double inv = n.saved_invstd.data[j];
                if (training_) {
                    double invn = 1.0 / static_cast<double>(rows);
                    for (int64_t r = 0; r < rows; ++r) {
                        double gh = g.data[r * c + j] * gam;
                        double xh = n.saved_xhat.data[r * c + j];
                        gx.data[r * c + j] +=
                            inv * (gh - invn * gam * sum_g - invn * xh * gam * sum_gx);
                    }
                } else {
                    // frozen stats: pure affine map
                    for (int64_t r = 0; r < rows; ++r)
                        gx.data[r * c + j] += g.data[r * c + j] * gam * inv;
                }
            }
            break;
        }
        case OpKind::MaxPoolPoints: {
            Tensor& gx = nodes_[n.args[0]].grad;
            int64_t bdim = n.out_shape[0], c = n.out_shape[1];
            int64_t np = nodes_[n.args[0]].out_shape[1];
            for (int64_t bi = 0; bi < bdim; ++bi)
                for (int64_t j = 0; j < c; ++j) {
                    int64_t p = n.saved_idx[bi * c + j];
                    gx.data[(bi * np + p) * c + j] += g.at(bi, j);
                }
            break;
        }
        case OpKind::Reshape: {
            Tensor& gx = nodes_[n.args[0]].grad;
            for (size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
            break;
        }
        case OpKind::Add: {
            Tensor& ga = nodes_[n.args[0]].grad;
            Tensor& gb = nodes_[n.args[1]].grad;
            for (size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] += g.data[i];
                gb.data[i] += g.data[i];
            }
            break;
        }
        case OpKind::Mul: {
            const Tensor& a = nodes_[n.args[0]].value;
            const Tensor& b = nodes_[n.args[1]].value;
            Tensor& ga = nodes_[n.args[0]].grad;
            Tensor& gb = nodes_[n.args[1]].grad;
            for (size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] += g.data[i] * b.data[i];
                gb.data[i] += g.data[i] * a.data[i];
            }
            break;
        }
        case OpKind::Scale: {
            Tensor& gx = nodes_[n.args[0]].grad;
            for (size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i] * n.scale;
            break;
        }
        case OpKind::Exp: {
            Tensor& gx = nodes_[n.args[0]].grad;
            for (size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i] * n.value.data[i];
            break;
        }
        case OpKind::Sum: {
            Tensor& gx = nodes_[n.args[0]].grad;
            for (auto& v : gx.data) v += g.data[0];
            break;
        }
        case OpKind::Concat: {
            int64_t off = 0;
            for (int a : n.args) {
                Tensor& gx = nodes_[a].grad;
                for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += g.data[off + i];
                off += gx.numel();
            }
            break;
        }
        case OpKind::Chamfer: {
            const Tensor& a = nodes_[n.args[0]].value;
            const Tensor& b = nodes_[n.args[1]].value;
            Tensor& ga = nodes_[n.args[0]].grad;
            Tensor& gb = nodes_[n.args[1]].grad;
            bool batched = a.ndim() == 3;
            int64_t bdim = batched ? a.shape[0] : 1;
            int64_t na = batched ? a.shape[1] : a.shape[0];
            int64_t nb = batched ? b.shape[1] : b.shape[0];
            double gs = g.data[0] / static_cast<double>(bdim);
            for (int64_t bi = 0; bi < bdim; ++bi) {
                const double* ap = &a.data[bi * na * 3];
                const double* bp = &b.data[bi * nb * 3];
                double* gap = &ga.data[bi * na * 3];
                double* gbp = &gb.data[bi * nb * 3];
                double wa = gs / static_cast<double>(na);
                for (int64_t i = 0; i < na; ++i) {
                    int64_t j = n.saved_idx[bi * na + i];
                    double dx = ap[3 * i] - bp[3 * j];
                    double dy = ap[3 * i + 1] - bp[3 * j + 1];
                    double dz = ap[3 * i + 2] - bp[3 * j + 2];
                    double d = std::sqrt(dx * dx + dy * dy + dz * dz);
                    if (d == 0) continue;
                    double w = wa / d;
                    gap[3 * i] += w * dx;
                    gap[3 * i + 1] += w * dy;
                    gap[3 * i + 2] += w * dz;
                    gbp[3 * j] -= w * dx;
                    gbp[3 * j + 1] -= w * dy;
                    gbp[3 * j + 2] -= w * dz;
                }
                double wb = gs / static_cast<double>(nb);
                for (int64_t j = 0; j < nb; ++j) {
                    int64_t i = n.saved_idx2[bi * nb + j];
                    double dx = bp[3 * j] - ap[3 * i];
                    double dy = bp[3 * j + 1] - ap[3 * i + 1];
                    double dz = bp[3 * j + 2] - ap[3 * i + 2];
                    double d = std::sqrt(dx * dx + dy * dy + dz * dz);
                    if (d == 0) continue;
                    double w = wb / d;
                    gbp[3 * j] += w * dx;
                    gbp[3 * j + 1] += w * dy;
                    gbp[3 * j + 2] += w * dz;
                    gap[3 * i] -= w * dx;
                    gap[3 * i + 1] -= w * dy;
                    gap[3 * i + 2] -= w * dz;
                }
            }
            break;
        }
        case OpKind::RigidTransform: {
            const Tensor& p = nodes_[n.args[0]].value;
            double r = nodes_[n.args[2]].value.data[0];
            double c = std::cos(r), s = std::sin(r);
            Tensor& gp = nodes_[n.args[0]].grad;
            Tensor& gt = nodes_[n.args[1]].grad;
            Tensor& gr = nodes_[n.args[2]].grad;
            int64_t np = p.shape[0];
            double racc = 0;
            for (int64_t i = 0; i < np; ++i) {
                double gx = g.at(i, 0), gy = g.at(i, 1), gz = g.at(i, 2);
                double px = p.at(i, 0), pz = p.at(i, 2);
                // rotated point before translation
                double rx = c * px + s * pz;
                double rz = -s * px + c * pz;
                gp.at(i, 0) += c * gx - s * gz;
                gp.at(i, 1) += gy;
                gp.at(i, 2) += s * gx + c * gz;
                gt.data[0] += gx;
                gt.data[1] += gy;
                gt.data[2] += gz;
                racc += gx * rz - gz * rx;
            }
            gr.data[0] += racc;
            break;
        }
        case OpKind::Reflect: {
            Tensor& gp = nodes_[n.args[0]].grad;
            const double* nv = n.plane_normal;
            for (int64_t i = 0; i < n.out_shape[0]; ++i) {
                double gx = g.at(i, 0), gy = g.at(i, 1), gz = g.at(i, 2);
                double proj = gx * nv[0] + gy * nv[1] + gz * nv[2];
                gp.at(i, 0) += gx - 2 * proj * nv[0];
                gp.at(i, 1) += gy - 2 * proj * nv[1];
                gp.at(i, 2) += gz - 2 * proj * nv[2];
            }
            break;
        }
        case OpKind::OverlapPenalty: {
            const Tensor& a = nodes_[n.args[0]].value;
            const Tensor& b = nodes_[n.args[1]].value;
            Tensor& ga = nodes_[n.args[0]].grad;
            Tensor& gb = nodes_[n.args[1]].grad;
            int64_t na = a.shape[0], nb = b.shape[0];
            double w0 = g.data[0] / static_cast<double>(na * nb);
            for (int64_t i = 0; i < na; ++i) {
                double ax = a.at(i, 0), ay = a.at(i, 1), az = a.at(i, 2);
                for (int64_t j = 0; j < nb; ++j) {
                    double dx = ax - b.at(j, 0), dy = ay - b.at(j, 1), dz = az - b.at(j, 2);
                    double d = std::sqrt(dx * dx + dy * dy + dz * dz);
                    if (d >= n.tau || d == 0) continue;
                    double w = -w0 / d;
                    ga.at(i, 0) += w * dx;
                    ga.at(i, 1) += w * dy;
                    ga.at(i, 2) += w * dz;
                    gb.at(j, 0) -= w * dx;
                    gb.at(j, 1) -= w * dy;
                    gb.at(j, 2) -= w * dz;
                }
            }
            break;
        }
        case OpKind::KlDiag: {
            const Tensor& mu = nodes_[n.args[0]].value;
            const Tensor& lv = nodes_[n.args[1]].value;
            Tensor& gmu = nodes_[n.args[0]].grad;
            Tensor& glv = nodes_[n.args[1]].grad;
            double w = g.data[0] / static_cast<double>(mu.shape[0]);
            for (size_t i = 0; i < mu.data.size(); ++i) {
                gmu.data[i] += w * mu.data[i];
                glv.data[i] += 0.5 * w * (std::exp(lv.data[i]) - 1.0);
            }
            break;
        }
    }
}

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                            double h) {
    Tensor g = Tensor::zeros(x.shape);
    Tensor probe = x;
    for (int64_t i = 0; i < x.numel(); ++i) {
        double orig = probe.data[i];
        probe.data[i] = orig + h;
        double fp = f(probe);
        probe.data[i] = orig - h;
        double fm = f(probe);
        probe.data[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw GraphError("finite_diff_gradient: non-finite function value");
        g.data[i] = (fp - fm) / (2 * h);
    }
    return g;
}

}  // namespace para
