#include "para/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace para {

AdamState AdamState::init(const std::vector<Tensor*>& params, double beta1, double beta2,
                          double eps) {
    AdamState s;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    for (const Tensor* p : params) {
        s.m.push_back(Tensor::zeros(p->shape));
        s.v.push_back(Tensor::zeros(p->shape));
    }
    return s;
}

void adam_update(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                 AdamState& state, double lr) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw std::invalid_argument("adam_update: parameter/gradient/state count mismatch");
    if (lr <= 0) throw std::invalid_argument("adam_update: lr must be positive");
    state.step += 1;
    double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        const Tensor& g = *grads[k];
        if (!p.same_shape(g)) throw std::invalid_argument("adam_update: shape mismatch");
        if (!g.all_finite()) {
            state.skipped += 1;
            continue;
        }
        Tensor& m = state.m[k];
        Tensor& v = state.v[k];
        for (size_t i = 0; i < p.data.size(); ++i) {
            m.data[i] = state.beta1 * m.data[i] + (1 - state.beta1) * g.data[i];
            v.data[i] = state.beta2 * v.data[i] + (1 - state.beta2) * g.data[i] * g.data[i];
            double mhat = m.data[i] / bc1;
            double vhat = v.data[i] / bc2;
            p.data[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

}  // namespace para
