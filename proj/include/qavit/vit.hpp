// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>
#include <span>
#include <vector>

#include "qavit/layers.hpp"

namespace qavit {

struct ViTConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t channels = 3;
    std::size_t depth = 6;
    std::size_t width = 64;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    /// Std of the truncated-normal init of every backbone matrix, the CLS
    /// token and the positional table.
    double init_std = 0.02;
    /// Overrides for the query/key matrices and the positional table;
    /// 0 means init_std.
    double qk_init_std = 0.0;
    double pos_init_std = 0.0;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t patch_count() const { return grid() * grid(); }
    /// Patch tokens plus the CLS token.
    std::size_t token_count() const { return patch_count() + 1; }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    void validate() const;
};

struct PatchEmbedWeights {
    Linear proj;  // width × patch_dim
    Tensor cls;   // 1 × width
    Tensor pos;   // token_count × width
};

/// Pre-norm transformer block. `out` is the attention output projection.
struct BlockWeights {
    LayerNormWeights ln1;
    Linear q, k, v, out;
    LayerNormWeights ln2;
    MLP mlp;

    static BlockWeights init(std::size_t width, std::size_t mlp_ratio, DType dtype,
                             std::mt19937_64& rng, double std = 0.02, double qk_std = 0.0);
};

struct Backbone {
    ViTConfig config;
    PatchEmbedWeights embed;
    std::vector<BlockWeights> blocks;
    LayerNormWeights ln_final;

    static Backbone init(const ViTConfig& config, DType dtype, std::mt19937_64& rng);
};

/// Non-overlapping patches of a channels×size×size image in raster order,
/// each flattened channel-major: [patch_count × patch_dim].
Tensor patchify(const Tensor& image, const ViTConfig& config);
Tensor patchify_batch(std::span<const Tensor> images, const ViTConfig& config);

/// Token matrix [(batch·M) × C] from stacked patch rows: row 0 of every
/// sample is CLS, then the projected patches; positional rows are added.
Tensor embed_patches(const Tensor& patch_rows, std::size_t batch, const PatchEmbedWeights& w,
                     const ViTConfig& config);
Tensor patchify_embed(const Tensor& image, const PatchEmbedWeights& w, const ViTConfig& config);

/// Multi-head attention of the block's frozen q/k/v maps, before the output
/// projection. Queries come from `query_in`, keys and values from `kv_in`.
Tensor attention_core(const BlockWeights& w, const Tensor& query_in, const Tensor& kv_in,
                      std::size_t heads, std::span<const std::size_t> q_offsets,
                      std::span<const std::size_t> kv_offsets, ForwardContext& ctx,
                      std::vector<std::vector<double>>* probs = nullptr);

/// Self-attention of a single token matrix, output projection included,
/// no normalization and no residual.
Tensor mhsa(const Tensor& f, const BlockWeights& w, std::size_t heads);

/// f + mhsa(LN(f)), then + MLP(LN(·)), over `batch` equal segments.
Tensor vit_block(const Tensor& f, const BlockWeights& w, std::size_t heads, std::size_t batch,
                 ForwardContext& ctx);
Tensor vit_block(const Tensor& f, const BlockWeights& w, std::size_t heads);

/// The MLP half of a block: f + MLP(LN2(f)).
Tensor block_mlp_residual(const Tensor& f, const BlockWeights& w, ForwardContext& ctx);

/// Unconditioned encoder V(I): embed, all blocks, final layernorm.
Tensor encode_image(const Tensor& image, const Backbone& backbone);
Tensor encode_images(std::span<const Tensor> images, const Backbone& backbone,
                     ForwardContext& ctx);

}  // namespace qavit
