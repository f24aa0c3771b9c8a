// SPDX-License-Identifier: Apache-2.0

#include "qavit/layers.hpp"

namespace qavit {

Tensor trunc_normal(Shape shape, DType dtype, std::mt19937_64& rng, double std) {
    Tensor t = Tensor::zeros(std::move(shape), dtype);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < t.numel(); ++i) {
        double z = normal(rng);
        while (z < -2.0 || z > 2.0) {
            z = normal(rng);
        }
        t.set(i, z * std);
    }
    return t;
}

Linear Linear::init(std::size_t in, std::size_t out, DType dtype, std::mt19937_64& rng,
                    bool with_bias, double std) {
    Linear l;
    l.weight = trunc_normal({out, in}, dtype, rng, std);
    if (with_bias) {
        l.bias = Tensor::zeros({out}, dtype);
    }
    return l;
}

Tensor Linear::operator()(const Tensor& x, ForwardContext& ctx) const {
    Tensor y = linear(x, weight, bias);
    if (!lora) {
        return y;
    }
    Tensor in = x;
    if (ctx.train && lora->dropout > 0.0) {
        if (ctx.rng == nullptr) {
            throw std::logic_error("LoRA dropout in training mode needs an rng");
        }
        in = dropout(x, lora->dropout, true, *ctx.rng);
    }
    Tensor low = linear(linear(in, lora->a, Tensor()), lora->b, Tensor());
    return add(y, scale(low, lora->scale));
}

Tensor Linear::operator()(const Tensor& x) const {
    ForwardContext ctx;
    return (*this)(x, ctx);
}

LayerNormWeights LayerNormWeights::init(std::size_t width, DType dtype) {
    return {Tensor::full({width}, 1.0, dtype), Tensor::zeros({width}, dtype), 1e-5};
}

MLP MLP::init(std::size_t in, std::size_t hidden, std::size_t out, DType dtype,
              std::mt19937_64& rng, double std) {
    MLP m;
    m.fc1 = Linear::init(in, hidden, dtype, rng, true, std);
    m.fc2 = Linear::init(hidden, out, dtype, rng, true, std);
    return m;
}

Tensor MLP::operator()(const Tensor& x, ForwardContext& ctx) const {
    return fc2(gelu(fc1(x, ctx)), ctx);
}

}  // namespace qavit
