// SPDX-License-Identifier: Apache-2.0

#include "qavit/fusion.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace qavit {

std::string_view fusion_mode_name(FusionMode mode) {
    switch (mode) {
        case FusionMode::none: return "none";
        case FusionMode::early: return "early";
        case FusionMode::late: return "late";
        case FusionMode::sparse: return "sparse";
        case FusionMode::all: return "all";
        case FusionMode::custom: return "custom";
    }
    return "none";
}

FusionMode parse_fusion_mode(std::string_view name) {
    for (auto m : {FusionMode::none, FusionMode::early, FusionMode::late, FusionMode::sparse,
                   FusionMode::all, FusionMode::custom}) {
        if (fusion_mode_name(m) == name) {
            return m;
        }
    }
    throw std::invalid_argument("unknown fusion mode '" + std::string(name) + "'");
}

bool FusionPlan::contains(std::size_t layer) const {
    return std::binary_search(layers.begin(), layers.end(), layer);
}

FusionPlan plan_fusion(FusionMode mode, std::size_t n, std::size_t l,
                       std::span<const std::size_t> custom_layers) {
    if (l > n) {
        throw RangeError("fusion L = " + std::to_string(l) + " exceeds depth " + std::to_string(n));
    }
    FusionPlan plan;
    plan.mode = mode;
    plan.L = l;
    switch (mode) {
        case FusionMode::none:
            plan.L = 0;
            break;
        case FusionMode::early:
            for (std::size_t i = 0; i < l; ++i) plan.layers.push_back(i);
            break;
        case FusionMode::late:
            for (std::size_t i = n - l; i < n; ++i) plan.layers.push_back(i);
            break;
        case FusionMode::sparse:
            for (std::size_t i = 1; i < n; i += 2) plan.layers.push_back(i);
            break;
        case FusionMode::all:
            for (std::size_t i = 0; i < n; ++i) plan.layers.push_back(i);
            break;
        case FusionMode::custom:
            plan.layers.assign(custom_layers.begin(), custom_layers.end());
            std::sort(plan.layers.begin(), plan.layers.end());
            plan.layers.erase(std::unique(plan.layers.begin(), plan.layers.end()),
                              plan.layers.end());
            if (!plan.layers.empty() && plan.layers.back() >= n) {
                throw RangeError("custom fusion layer " + std::to_string(plan.layers.back()) +
                                 " exceeds depth " + std::to_string(n));
            }
            break;
    }
    if (mode != FusionMode::early && mode != FusionMode::late) {
        plan.L = plan.layers.size();
    }
    return plan;
}

FusedLayerWeights FusedLayerWeights::init(std::size_t width, DType dtype, std::mt19937_64& rng) {
    FusedLayerWeights w;
    w.beta = Tensor::zeros({1}, dtype);
    w.pg = Linear::init(width, width, dtype, rng);
    return w;
}

namespace {

void check_widths(const Tensor& f_v, const Tensor& f_q) {
    if (f_v.rank() != 2 || f_q.rank() != 2 || f_v.cols() != f_q.cols()) {
        throw ShapeError("fused attention: visual " + shape_str(f_v.shape()) + " and text " +
                         shape_str(f_q.shape()) + " widths disagree");
    }
}

Tensor normed_sequence(const Tensor& f_v, const Tensor& f_q, const BlockWeights& block) {
    Tensor ln_v = block.ln1(f_v);
    return f_q.rows() == 0 ? ln_v : concat_rows(ln_v, block.ln1(f_q));
}

}  // namespace

Tensor fused_attention(const Tensor& f_v, const Tensor& f_q, const BlockWeights& block,
                       std::size_t heads, std::vector<std::vector<double>>* probs) {
    check_widths(f_v, f_q);
    ForwardContext ctx;
    Tensor ln_v = block.ln1(f_v);
    Tensor s = f_q.rows() == 0 ? ln_v : concat_rows(ln_v, block.ln1(f_q));
    const std::size_t q_offs[] = {0, f_v.rows()};
    const std::size_t kv_offs[] = {0, s.rows()};
    return attention_core(block, ln_v, s, heads, q_offs, kv_offs, ctx, probs);
}

Tensor fused_attention_full(const Tensor& f_v, const Tensor& f_q, const BlockWeights& block,
                            std::size_t heads) {
    check_widths(f_v, f_q);
    ForwardContext ctx;
    Tensor s = normed_sequence(f_v, f_q, block);
    const std::size_t offs[] = {0, s.rows()};
    return slice_rows(attention_core(block, s, s, heads, offs, offs, ctx), 0, f_v.rows());
}

Tensor gated_projection(const Tensor& f_prime, const Linear& p, const FusedLayerWeights& w,
                        ForwardContext& ctx, double dropout_p) {
    Tensor in = f_prime;
    if (ctx.train && dropout_p > 0.0) {
        if (ctx.rng == nullptr) {
            throw std::logic_error("fused dropout in training mode needs an rng");
        }
        in = dropout(f_prime, dropout_p, true, *ctx.rng);
    }
    return add(p(f_prime, ctx), scale_by(w.pg(in, ctx), tanh(w.beta)));
}

Tensor gated_projection(const Tensor& f_prime, const Linear& p, const FusedLayerWeights& w) {
    ForwardContext ctx;
    return gated_projection(f_prime, p, w, ctx);
}

Tensor fused_block(const Tensor& x, const Tensor& text, std::span<const std::size_t> text_offsets,
                   std::size_t batch, const BlockWeights& block, const FusedLayerWeights& w,
                   std::size_t heads, ForwardContext& ctx, double dropout_p) {
    if (batch == 0 || x.rank() != 2 || x.rows() % batch != 0) {
        throw ShapeError("fused_block: " + shape_str(x.shape()) + " cannot split into " +
                         std::to_string(batch) + " samples");
    }
    if (text_offsets.size() != batch + 1 || text_offsets.back() != text.rows()) {
        throw ShapeError("fused_block: text offsets do not match the batch");
    }
    check_widths(x, text);
    const std::size_t m = x.rows() / batch;
    Tensor ln_v = block.ln1(x);
    Tensor s = ln_v;
    std::vector<std::size_t> kv_offs(1, 0);
    if (text.rows() > 0) {
        Tensor ln_t = block.ln1(text);
        std::vector<Tensor> parts;
        parts.reserve(2 * batch);
        for (std::size_t b = 0; b < batch; ++b) {
            parts.push_back(batch == 1 ? ln_v : slice_rows(ln_v, b * m, (b + 1) * m));
            const std::size_t t0 = text_offsets[b], t1 = text_offsets[b + 1];
            if (t1 > t0) {
                parts.push_back(t0 == 0 && t1 == text.rows() ? ln_t : slice_rows(ln_t, t0, t1));
            }
            kv_offs.push_back(kv_offs.back() + m + (t1 - t0));
        }
        s = concat_rows(parts);
    } else {
        kv_offs = uniform_offsets(batch, m);
    }
    auto q_offs = uniform_offsets(batch, m);
    Tensor f_prime = attention_core(block, ln_v, s, heads, q_offs, kv_offs, ctx);
    Tensor h = add(x, gated_projection(f_prime, block.out, w, ctx, dropout_p));
    return block_mlp_residual(h, block, ctx);
}

}  // namespace qavit
