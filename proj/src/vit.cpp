// SPDX-License-Identifier: Apache-2.0

#include "qavit/vit.hpp"

#include <string>

namespace qavit {

void ViTConfig::validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
        throw ShapeError("image_size " + std::to_string(image_size) +
                         " is not divisible by patch_size " + std::to_string(patch_size));
    }
    if (heads == 0 || width == 0 || width % heads != 0) {
        throw ShapeError("width " + std::to_string(width) + " is not divisible by " +
                         std::to_string(heads) + " heads");
    }
    if (channels == 0 || mlp_ratio == 0) {
        throw ShapeError("channels and mlp_ratio must be positive");
    }
    if (!(init_std > 0.0) || !(qk_init_std >= 0.0) || !(pos_init_std >= 0.0)) {
        throw ShapeError("init_std must be positive and the overrides non-negative");
    }
}

BlockWeights BlockWeights::init(std::size_t width, std::size_t mlp_ratio, DType dtype,
                                std::mt19937_64& rng, double std, double qk_std) {
    if (qk_std == 0.0) {
        qk_std = std;
    }
    BlockWeights b;
    b.ln1 = LayerNormWeights::init(width, dtype);
    b.q = Linear::init(width, width, dtype, rng, true, qk_std);
    b.k = Linear::init(width, width, dtype, rng, true, qk_std);
    b.v = Linear::init(width, width, dtype, rng, true, std);
    b.out = Linear::init(width, width, dtype, rng, true, std);
    b.ln2 = LayerNormWeights::init(width, dtype);
    b.mlp = MLP::init(width, width * mlp_ratio, width, dtype, rng, std);
    return b;
}

Backbone Backbone::init(const ViTConfig& config, DType dtype, std::mt19937_64& rng) {
    config.validate();
    Backbone bb;
    bb.config = config;
    const double std = config.init_std;
    bb.embed.proj = Linear::init(config.patch_dim(), config.width, dtype, rng, true, std);
    bb.embed.cls = trunc_normal({1, config.width}, dtype, rng, std);
    bb.embed.pos = trunc_normal({config.token_count(), config.width}, dtype, rng,
                                config.pos_init_std > 0.0 ? config.pos_init_std : std);
    for (std::size_t i = 0; i < config.depth; ++i) {
        bb.blocks.push_back(BlockWeights::init(config.width, config.mlp_ratio, dtype, rng, std,
                                               config.qk_init_std));
    }
    bb.ln_final = LayerNormWeights::init(config.width, dtype);
    return bb;
}

Tensor patchify(const Tensor& image, const ViTConfig& config) {
    const Tensor one[] = {image};
    return patchify_batch(one, config);
}

Tensor patchify_batch(std::span<const Tensor> images, const ViTConfig& config) {
    config.validate();
    const std::size_t s = config.image_size, p = config.patch_size, g = config.grid();
    const std::size_t ch = config.channels, dim = config.patch_dim();
    if (images.empty()) {
        throw ShapeError("patchify: empty batch");
    }
    const DType dtype = images[0].dtype();
    Tensor out = Tensor::zeros({images.size() * g * g, dim}, dtype);
    dispatch(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto ov = out.values<T>();
        std::size_t row = 0;
        for (const auto& image : images) {
            if (image.shape() != Shape{ch, s, s} || image.dtype() != dtype) {
                throw ShapeError("patchify: image " + shape_str(image.shape()) + " does not match " +
                                 shape_str({ch, s, s}));
            }
            auto iv = image.values<T>();
            for (std::size_t pr = 0; pr < g; ++pr) {
                for (std::size_t pc = 0; pc < g; ++pc, ++row) {
                    T* dst = ov.data() + row * dim;
                    for (std::size_t c = 0; c < ch; ++c) {
                        for (std::size_t dy = 0; dy < p; ++dy) {
                            for (std::size_t dx = 0; dx < p; ++dx) {
                                *dst++ = iv[(c * s + pr * p + dy) * s + pc * p + dx];
                            }
                        }
                    }
                }
            }
        }
    });
    return out;
}

Tensor embed_patches(const Tensor& patch_rows, std::size_t batch, const PatchEmbedWeights& w,
                     const ViTConfig& config) {
    const std::size_t n = config.patch_count();
    if (patch_rows.rank() != 2 || patch_rows.rows() != batch * n ||
        patch_rows.cols() != config.patch_dim()) {
        throw ShapeError("embed_patches: patch rows " + shape_str(patch_rows.shape()) +
                         " do not match the configuration");
    }
    if (w.pos.rows() != config.token_count()) {
        throw ShapeError("embed_patches: positional table has " + std::to_string(w.pos.rows()) +
                         " rows, expected " + std::to_string(config.token_count()));
    }
    Tensor projected = w.proj(patch_rows);
    std::vector<Tensor> parts;
    parts.reserve(2 * batch);
    for (std::size_t b = 0; b < batch; ++b) {
        parts.push_back(w.cls);
        parts.push_back(batch == 1 ? projected : slice_rows(projected, b * n, (b + 1) * n));
    }
    return add_tiled(concat_rows(parts), w.pos);
}

Tensor patchify_embed(const Tensor& image, const PatchEmbedWeights& w, const ViTConfig& config) {
    return embed_patches(patchify(image, config), 1, w, config);
}

Tensor attention_core(const BlockWeights& w, const Tensor& query_in, const Tensor& kv_in,
                      std::size_t heads, std::span<const std::size_t> q_offsets,
                      std::span<const std::size_t> kv_offsets, ForwardContext& ctx,
                      std::vector<std::vector<double>>* probs) {
    Tensor q = w.q(query_in, ctx);
    Tensor k = w.k(kv_in, ctx);
    Tensor v = w.v(kv_in, ctx);
    return attention(q, k, v, heads, q_offsets, kv_offsets, probs);
}

Tensor mhsa(const Tensor& f, const BlockWeights& w, std::size_t heads) {
    ForwardContext ctx;
    auto offs = uniform_offsets(1, f.rows());
    return w.out(attention_core(w, f, f, heads, offs, offs, ctx), ctx);
}

Tensor block_mlp_residual(const Tensor& f, const BlockWeights& w, ForwardContext& ctx) {
    return add(f, w.mlp(w.ln2(f), ctx));
}

Tensor vit_block(const Tensor& f, const BlockWeights& w, std::size_t heads, std::size_t batch,
                 ForwardContext& ctx) {
    if (batch == 0 || f.rank() != 2 || f.rows() % batch != 0) {
        throw ShapeError("vit_block: " + shape_str(f.shape()) + " cannot split into " +
                         std::to_string(batch) + " samples");
    }
    auto offs = uniform_offsets(batch, f.rows() / batch);
    Tensor h = w.ln1(f);
    Tensor x = add(f, w.out(attention_core(w, h, h, heads, offs, offs, ctx), ctx));
    return block_mlp_residual(x, w, ctx);
}

Tensor vit_block(const Tensor& f, const BlockWeights& w, std::size_t heads) {
    ForwardContext ctx;
    return vit_block(f, w, heads, 1, ctx);
}

Tensor encode_images(std::span<const Tensor> images, const Backbone& backbone,
                     ForwardContext& ctx) {
    const auto& cfg = backbone.config;
    Tensor x = embed_patches(patchify_batch(images, cfg), images.size(), backbone.embed, cfg);
    for (const auto& block : backbone.blocks) {
        x = vit_block(x, block, cfg.heads, images.size(), ctx);
    }
    return backbone.ln_final(x);
}

Tensor encode_image(const Tensor& image, const Backbone& backbone) {
    ForwardContext ctx;
    const Tensor one[] = {image};
    return encode_images(one, backbone, ctx);
}

}  // namespace qavit
