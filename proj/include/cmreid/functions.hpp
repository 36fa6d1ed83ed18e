#pragma once

// Value-level counterparts of the differentiable primitives, for callers that
// need numbers rather than a tape.

#include <algorithm>
#include <cmath>
#include <vector>

#include "cmreid/autodiff.hpp"
#include "cmreid/tensor.hpp"

namespace cmreid {

/// u.v / (|u||v| + 1e-12), clipped to [-1, 1].
inline double cosine_sim(const Tensor& u, const Tensor& v) {
    if (u.rank() != 1 || v.rank() != 1) throw DimensionError("cosine_sim expects rank-1 tensors");
    require_same_shape(u, v, "cosine_sim");
    double dot = 0.0, uu = 0.0, vv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        uu += u[i] * u[i];
        vv += v[i] * v[i];
    }
    return std::clamp(dot / (std::sqrt(uu) * std::sqrt(vv) + ad::kCosineEps), -1.0, 1.0);
}

inline double clamp_nonneg(double x) { return x > 0.0 ? x : 0.0; }

/// Max-subtracted softmax of a rank-1 tensor.
inline Tensor softmax(const Tensor& logits) {
    if (logits.rank() != 1) throw DimensionError("softmax expects a rank-1 tensor");
    const double mx = *std::max_element(logits.values().begin(), logits.values().end());
    std::vector<double> out(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) z += (out[i] = std::exp(logits[i] - mx));
    for (double& v : out) v /= z;
    return Tensor::vector(std::move(out));
}

}  // namespace cmreid
