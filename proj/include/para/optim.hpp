#pragma once

#include <cstdint>
#include <vector>

#include "para/tensor.hpp"

namespace para {

// Bias-corrected Adam state over a fixed parameter list.
struct AdamState {
    int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<Tensor> m, v;
    int64_t skipped = 0;  // parameters skipped due to non-finite gradients

    static AdamState init(const std::vector<Tensor*>& params, double beta1 = 0.9,
                          double beta2 = 0.999, double eps = 1e-8);
};

// One Adam step in place. A parameter whose gradient contains non-finite
// values is left untouched for this step and counted in state.skipped.
void adam_update(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                 AdamState& state, double lr);

}  // namespace para
