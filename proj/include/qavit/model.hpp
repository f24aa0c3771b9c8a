// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "qavit/fusion.hpp"
#include "qavit/head.hpp"
#include "qavit/question.hpp"

namespace qavit {

struct ModelConfig {
    ViTConfig vit;
    FusionMode fusion_mode = FusionMode::late;
    std::size_t fusion_L = 2;
    std::vector<std::size_t> fusion_layers;  // custom mode only
    TextSource text_source = TextSource::tiny_encoder;
    std::size_t text_width = 32;
    std::size_t text_depth = 2;
    std::size_t text_heads = 2;
    std::size_t k_max = 32;
    HeadMode head_mode = HeadMode::visual_only;
    Pooling pooling = Pooling::mean;
    std::size_t head_width = 128;
    std::size_t answer_classes = 29;
    /// Feed `prompt` to the fused layers instead of the question.
    bool prompt_tuning = false;
    std::string prompt = "a photo of";
    bool freeze_backbone = true;
    LoRAConfig lora;
    double fused_dropout = 0.0;
    DType dtype = DType::f32;
};

/// Encoded questions: stacked F_Q′ rows and per-sample row offsets.
struct TextBatch {
    Tensor features;
    std::vector<std::size_t> offsets;
};

/// Optional instrumentation of a forward pass.
struct ForwardTrace {
    /// Keep the visual rows after every layer.
    bool record_layers = false;
    std::vector<Tensor> layer_outputs;
    /// Cut the graph after the capture layer and continue from a fresh
    /// leaf that collects gradients (used for saliency).
    bool capture = false;
    Tensor captured;
};

/// V(I|Q): backbone, fusion plan, question pathway, heads and registry.
/// Holds pointers into itself, so it is neither copyable nor movable.
class QAViTModel {
  public:
    QAViTModel(const ModelConfig& config, Vocab vocab, std::uint64_t seed);
    QAViTModel(const QAViTModel&) = delete;
    QAViTModel& operator=(const QAViTModel&) = delete;

    const ModelConfig& config() const { return config_; }
    const Vocab& vocab() const { return vocab_; }
    const FusionPlan& plan() const { return plan_; }
    ParameterRegistry& registry() { return registry_; }
    const ParameterRegistry& registry() const { return registry_; }

    /// The layer whose output saliency reads: the last fused layer, or the
    /// last layer when nothing is fused.
    std::size_t capture_layer() const;
    QuestionTokens prompt_tokens() const;

    TextBatch encode_text(std::span<const QuestionTokens> questions, ForwardContext& ctx) const;
    /// F_Q^i for every fused layer i.
    std::map<std::size_t, Tensor> project_text(const Tensor& features, ForwardContext& ctx) const;

    /// Visual rows after the final layernorm, given projected text per
    /// fused layer. `text_offsets` has images.size() + 1 entries.
    Tensor encode_with_text(std::span<const Tensor> images,
                            const std::map<std::size_t, Tensor>& text,
                            std::span<const std::size_t> text_offsets, ForwardContext& ctx,
                            ForwardTrace* trace = nullptr) const;
    Tensor encode(std::span<const Tensor> images, std::span<const QuestionTokens> questions,
                  ForwardContext& ctx, ForwardTrace* trace = nullptr) const;

    /// [batch × classes] answer logits.
    Tensor logits(std::span<const Tensor> images, std::span<const QuestionTokens> questions,
                  ForwardContext& ctx, ForwardTrace* trace = nullptr) const;

    Backbone backbone;
    std::map<std::size_t, FusedLayerWeights> fused;
    TextEncoderWeights text;
    PerLayerProjector projector;
    ProjectionHead proj_head;
    AnswerHead answer_head;

  private:
    void build_registry(std::uint64_t seed);

    ModelConfig config_;
    Vocab vocab_;
    FusionPlan plan_;
    ParameterRegistry registry_;
};

/// Conditioned encoding of a single image: [M × C].
Tensor encode_image_conditioned(const Tensor& image, const QuestionTokens& q,
                                const QAViTModel& model);

/// Stream-specific seed derived from a run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace qavit
