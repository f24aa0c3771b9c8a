// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <random>

#include "qavit/ops.hpp"
#include "qavit/tensor.hpp"

namespace qavit {

/// Per-forward settings shared by every layer.
struct ForwardContext {
    bool train = false;
    std::mt19937_64* rng = nullptr;
};

/// Truncated normal (±2σ) initializer, std 0.02 by default.
Tensor trunc_normal(Shape shape, DType dtype, std::mt19937_64& rng, double std = 0.02);

/// Low-rank adapter on a frozen linear map:
/// y = base(x) + scale · B(A(dropout(x))), scale = alpha / rank, B = 0 at init.
struct LoRAAdapter {
    Tensor a;  // rank × d_in
    Tensor b;  // d_out × rank
    double scale = 1.0;
    double dropout = 0.0;

    std::size_t rank() const { return a.rows(); }
};

struct Linear {
    Tensor weight;  // out × in
    Tensor bias;    // out, may be undefined
    std::shared_ptr<LoRAAdapter> lora;

    static Linear init(std::size_t in, std::size_t out, DType dtype, std::mt19937_64& rng,
                       bool with_bias = true, double std = 0.02);

    std::size_t in_features() const { return weight.cols(); }
    std::size_t out_features() const { return weight.rows(); }

    Tensor operator()(const Tensor& x, ForwardContext& ctx) const;
    /// Inference path without dropout; LoRA (if any) still applies.
    Tensor operator()(const Tensor& x) const;
};

struct LayerNormWeights {
    Tensor gamma;
    Tensor beta;
    double eps = 1e-5;

    static LayerNormWeights init(std::size_t width, DType dtype);
    Tensor operator()(const Tensor& x) const { return layernorm(x, gamma, beta, eps); }
};

/// Two linear maps with a gelu in between.
struct MLP {
    Linear fc1;
    Linear fc2;

    static MLP init(std::size_t in, std::size_t hidden, std::size_t out, DType dtype,
                    std::mt19937_64& rng, double std = 0.02);
    Tensor operator()(const Tensor& x, ForwardContext& ctx) const;
};

}  // namespace qavit
