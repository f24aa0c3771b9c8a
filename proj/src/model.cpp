// SPDX-License-Identifier: Apache-2.0

#include "qavit/model.hpp"

namespace qavit {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer over the combined words
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

namespace {

enum Stream : std::uint64_t { backbone_stream = 1, text_stream, projector_stream, fuse_stream,
                              head_stream, lora_stream };

void add_block(ParameterRegistry& r, const std::string& prefix, BlockWeights& b,
               ParamStatus status) {
    r.add(prefix + ".ln1.gamma", b.ln1.gamma, status);
    r.add(prefix + ".ln1.beta", b.ln1.beta, status);
    r.add_linear(prefix + ".attn.q", b.q, status);
    r.add_linear(prefix + ".attn.k", b.k, status);
    r.add_linear(prefix + ".attn.v", b.v, status);
    r.add_linear(prefix + ".attn.out", b.out, status);
    r.add(prefix + ".ln2.gamma", b.ln2.gamma, status);
    r.add(prefix + ".ln2.beta", b.ln2.beta, status);
    r.add_mlp(prefix + ".mlp", b.mlp, status);
}

}  // namespace

QAViTModel::QAViTModel(const ModelConfig& config, Vocab vocab, std::uint64_t seed)
    : config_(config), vocab_(std::move(vocab)) {
    config_.vit.validate();
    plan_ = plan_fusion(config_.fusion_mode, config_.vit.depth, config_.fusion_L,
                        config_.fusion_layers);
    const DType dt = config_.dtype;
    const std::size_t c = config_.vit.width;

    std::mt19937_64 bb_rng(derive_seed(seed, backbone_stream));
    backbone = Backbone::init(config_.vit, dt, bb_rng);

    TextEncoderConfig tc;
    tc.source = config_.text_source;
    tc.vocab_size = vocab_.size();
    tc.width = config_.text_width;
    tc.heads = config_.text_heads;
    tc.depth = config_.text_depth;
    tc.k_max = config_.k_max;
    std::mt19937_64 text_rng(derive_seed(seed, text_stream));
    text = TextEncoderWeights::init(tc, dt, text_rng);

    // Per-layer streams keep layer i's weights identical across fusion plans.
    for (auto layer : plan_.layers) {
        std::mt19937_64 p_rng(derive_seed(derive_seed(seed, projector_stream), layer));
        projector.layers.emplace(layer, MLP::init(config_.text_width, c, c, dt, p_rng));
        std::mt19937_64 f_rng(derive_seed(derive_seed(seed, fuse_stream), layer));
        fused.emplace(layer, FusedLayerWeights::init(c, dt, f_rng));
    }

    std::mt19937_64 head_rng(derive_seed(seed, head_stream));
    proj_head = ProjectionHead::init(c, config_.head_width, dt, head_rng);
    answer_head = AnswerHead::init(config_.head_mode, config_.pooling, config_.head_width,
                                   config_.text_width, config_.answer_classes, dt, head_rng);
    build_registry(seed);
}

void QAViTModel::build_registry(std::uint64_t seed) {
    auto& r = registry_;
    const auto T = ParamStatus::trainable;
    r.add_linear("vit.patch", backbone.embed.proj, T);
    r.add("vit.cls", backbone.embed.cls, T);
    r.add("vit.pos", backbone.embed.pos, T);
    for (std::size_t i = 0; i < backbone.blocks.size(); ++i) {
        add_block(r, "vit.blocks." + std::to_string(i), backbone.blocks[i], T);
    }
    r.add("vit.ln_final.gamma", backbone.ln_final.gamma, T);
    r.add("vit.ln_final.beta", backbone.ln_final.beta, T);

    r.add("text.embed", text.embed, T);
    if (text.config.source == TextSource::tiny_encoder) {
        r.add("text.pos", text.pos, T);
        for (std::size_t j = 0; j < text.blocks.size(); ++j) {
            add_block(r, "text.blocks." + std::to_string(j), text.blocks[j], T);
        }
        r.add("text.ln_final.gamma", text.ln_final.gamma, T);
        r.add("text.ln_final.beta", text.ln_final.beta, T);
    }
    for (auto& [layer, mlp] : projector.layers) {
        r.add_mlp("proj." + std::to_string(layer), mlp, T);
    }
    for (auto& [layer, fw] : fused) {
        const std::string prefix = "fuse." + std::to_string(layer);
        r.add(prefix + ".beta", fw.beta, T);
        r.add_linear(prefix + ".pg", fw.pg, T);
    }
    r.add_mlp("head.proj", proj_head.mlp, T, LrGroup::projection_x100);
    if (answer_head.q_map.weight.defined()) {
        r.add_linear("head.answer.q_map", answer_head.q_map, T);
    }
    r.add_linear("head.answer.classifier", answer_head.classifier, T);

    if (config_.freeze_backbone) {
        freeze_backbone(r);
    }
    if (!config_.lora.targets.empty()) {
        std::mt19937_64 lora_rng(derive_seed(seed, lora_stream));
        apply_lora(r, config_.lora.targets, config_.lora.rank, config_.lora.alpha,
                   config_.lora.dropout, lora_rng);
    }
}

std::size_t QAViTModel::capture_layer() const {
    return plan_.empty() ? config_.vit.depth - 1 : plan_.layers.back();
}

QuestionTokens QAViTModel::prompt_tokens() const {
    return tokenize(config_.prompt, vocab_, config_.k_max);
}

TextBatch QAViTModel::encode_text(std::span<const QuestionTokens> questions,
                                  ForwardContext& ctx) const {
    for (const auto& q : questions) {
        for (auto id : q.ids) {
            if (id >= vocab_.size()) {
                throw RangeError("token id " + std::to_string(id) + " outside the vocabulary of " +
                                 std::to_string(vocab_.size()));
            }
        }
    }
    TextBatch batch;
    batch.features = encode_questions(questions, text, ctx, batch.offsets);
    return batch;
}

std::map<std::size_t, Tensor> QAViTModel::project_text(const Tensor& features,
                                                       ForwardContext& ctx) const {
    std::map<std::size_t, Tensor> out;
    for (auto layer : plan_.layers) {
        out.emplace(layer, project_question(features, layer, projector, ctx));
    }
    return out;
}

Tensor QAViTModel::encode_with_text(std::span<const Tensor> images,
                                    const std::map<std::size_t, Tensor>& text_rows,
                                    std::span<const std::size_t> text_offsets, ForwardContext& ctx,
                                    ForwardTrace* trace) const {
    const auto& cfg = config_.vit;
    const std::size_t batch = images.size();
    Tensor x = embed_patches(patchify_batch(images, cfg), batch, backbone.embed, cfg);
    const std::size_t capture_at = capture_layer();
    for (std::size_t i = 0; i < backbone.blocks.size(); ++i) {
        const auto& block = backbone.blocks[i];
        if (plan_.contains(i)) {
            auto it = text_rows.find(i);
            if (it == text_rows.end()) {
                throw RangeError("no projected text for fused layer " + std::to_string(i));
            }
            x = fused_block(x, it->second, text_offsets, batch, block, fused.at(i), cfg.heads, ctx,
                            config_.fused_dropout);
        } else {
            x = vit_block(x, block, cfg.heads, batch, ctx);
        }
        if (trace != nullptr) {
            if (trace->record_layers) {
                trace->layer_outputs.push_back(x);
            }
            if (trace->capture && i == capture_at) {
                x = x.detach();
                x.set_requires_grad(true);
                trace->captured = x;
            }
        }
    }
    return backbone.ln_final(x);
}

Tensor QAViTModel::encode(std::span<const Tensor> images, std::span<const QuestionTokens> questions,
                          ForwardContext& ctx, ForwardTrace* trace) const {
    if (questions.size() != images.size()) {
        throw ShapeError("encode: " + std::to_string(images.size()) + " images but " +
                         std::to_string(questions.size()) + " questions");
    }
    if (plan_.empty()) {
        std::vector<std::size_t> offsets(images.size() + 1, 0);
        return encode_with_text(images, {}, offsets, ctx, trace);
    }
    std::vector<QuestionTokens> prompts;
    std::span<const QuestionTokens> fusion_questions = questions;
    if (config_.prompt_tuning) {
        prompts.assign(images.size(), prompt_tokens());
        fusion_questions = prompts;
    }
    TextBatch tb = encode_text(fusion_questions, ctx);
    return encode_with_text(images, project_text(tb.features, ctx), tb.offsets, ctx, trace);
}

Tensor QAViTModel::logits(std::span<const Tensor> images, std::span<const QuestionTokens> questions,
                          ForwardContext& ctx, ForwardTrace* trace) const {
    Tensor f = encode(images, questions, ctx, trace);
    Tensor projected = project_features(f, proj_head, ctx);
    Tensor q_pooled;
    if (answer_head.mode == HeadMode::visual_plus_question) {
        // The head always reads the real question, also under prompt tuning.
        TextBatch tb = encode_text(questions, ctx);
        q_pooled = segment_mean_rows(tb.features, tb.offsets);
    }
    return answer_logits_batch(projected, images.size(), q_pooled, answer_head, ctx);
}

Tensor encode_image_conditioned(const Tensor& image, const QuestionTokens& q,
                                const QAViTModel& model) {
    ForwardContext ctx;
    const Tensor images[] = {image};
    const QuestionTokens questions[] = {q};
    return model.encode(images, questions, ctx);
}

}  // namespace qavit
