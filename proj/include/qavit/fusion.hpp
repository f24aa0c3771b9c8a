// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "qavit/vit.hpp"

namespace qavit {

enum class FusionMode { none, early, late, sparse, all, custom };

std::string_view fusion_mode_name(FusionMode mode);
/// Throws std::invalid_argument on an unknown name.
FusionMode parse_fusion_mode(std::string_view name);

/// The layer indices that receive question tokens, ascending.
struct FusionPlan {
    FusionMode mode = FusionMode::none;
    std::size_t L = 0;
    std::vector<std::size_t> layers;

    bool contains(std::size_t layer) const;
    bool empty() const { return layers.empty(); }
};

/// late → {N−L..N−1}, early → {0..L−1}, sparse → odd indices, all → every
/// layer, none → ∅, custom → `custom_layers` (sorted, deduplicated).
/// Throws RangeError when L > N or a custom index is ≥ N.
FusionPlan plan_fusion(FusionMode mode, std::size_t n, std::size_t l,
                       std::span<const std::size_t> custom_layers = {});

/// Trainable parts of a fused layer. The frozen attention maps and the
/// frozen output projection P stay in the layer's BlockWeights.
struct FusedLayerWeights {
    Tensor beta;  // {1}, zero at init
    Linear pg;    // C × C

    static FusedLayerWeights init(std::size_t width, DType dtype, std::mt19937_64& rng);
};

/// Visual rows of frozen attention over concat(LN(f_v), LN(f_q)), before
/// the output projection. Queries are computed for the visual rows only.
Tensor fused_attention(const Tensor& f_v, const Tensor& f_q, const BlockWeights& block,
                       std::size_t heads, std::vector<std::vector<double>>* probs = nullptr);

/// Literal form: attention for all M+K query rows, then rows 0..M.
Tensor fused_attention_full(const Tensor& f_v, const Tensor& f_q, const BlockWeights& block,
                            std::size_t heads);

/// P(f′) + P_g(f′)·tanh(β).
Tensor gated_projection(const Tensor& f_prime, const Linear& p, const FusedLayerWeights& w,
                        ForwardContext& ctx, double dropout_p = 0.0);
Tensor gated_projection(const Tensor& f_prime, const Linear& p, const FusedLayerWeights& w);

/// A whole backbone layer with fusion for a batch: `x` holds `batch`
/// samples of equal row count, `text` the projected question rows split by
/// `text_offsets` (batch + 1 entries). Returns the next visual rows.
Tensor fused_block(const Tensor& x, const Tensor& text, std::span<const std::size_t> text_offsets,
                   std::size_t batch, const BlockWeights& block, const FusedLayerWeights& w,
                   std::size_t heads, ForwardContext& ctx, double dropout_p = 0.0);

}  // namespace qavit
