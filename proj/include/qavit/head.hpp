// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qavit/layers.hpp"

namespace qavit {

/// Rowwise D₁ → D₂ → D₂ map into the head space.
struct ProjectionHead {
    MLP mlp;

    static ProjectionHead init(std::size_t in_width, std::size_t head_width, DType dtype,
                               std::mt19937_64& rng);
    std::size_t width() const { return mlp.fc2.out_features(); }
};

Tensor project_features(const Tensor& f_vq, const ProjectionHead& head, ForwardContext& ctx);
Tensor project_features(const Tensor& f_vq, const ProjectionHead& head);

enum class HeadMode { visual_only, visual_plus_question };
enum class Pooling { mean, cls };

std::string_view head_mode_name(HeadMode mode);
HeadMode parse_head_mode(std::string_view name);
std::string_view pooling_name(Pooling pooling);
Pooling parse_pooling(std::string_view name);

struct AnswerHead {
    HeadMode mode = HeadMode::visual_only;
    Pooling pooling = Pooling::mean;
    Linear q_map;       // text width → D₂, visual_plus_question only
    Linear classifier;  // D₂ → classes

    static AnswerHead init(HeadMode mode, Pooling pooling, std::size_t head_width,
                           std::size_t text_width, std::size_t classes, DType dtype,
                           std::mt19937_64& rng);
    std::size_t classes() const { return classifier.out_features(); }
};

/// Logits for one sample. `q_embed` (the pooled question, 1 × text width)
/// must be given iff the head is in visual_plus_question mode.
Tensor answer_logits(const Tensor& projected, const Tensor& q_embed, const AnswerHead& head);

/// Batched form: `projected` stacks `batch` equal segments; `q_pooled` has
/// one row per sample or is undefined.
Tensor answer_logits_batch(const Tensor& projected, std::size_t batch, const Tensor& q_pooled,
                           const AnswerHead& head, ForwardContext& ctx);

enum class ParamStatus { frozen, trainable, adapter };
enum class LrGroup { base, projection_x100 };

std::string_view status_name(ParamStatus status);
std::string_view lr_group_name(LrGroup group);

struct ParamEntry {
    std::string name;
    Tensor tensor;
    ParamStatus status = ParamStatus::trainable;
    LrGroup lr_group = LrGroup::base;
    /// Linear layer owning this weight, when adapters may attach to it.
    Linear* owner = nullptr;

    bool optimized() const { return status != ParamStatus::frozen; }
};

/// Every model parameter by name with its training status. Statuses drive
/// requires_grad on the underlying tensors.
class ParameterRegistry {
  public:
    ParamEntry& add(std::string name, Tensor tensor, ParamStatus status,
                    LrGroup group = LrGroup::base, Linear* owner = nullptr);
    void add_linear(const std::string& prefix, Linear& layer, ParamStatus status,
                    LrGroup group = LrGroup::base);
    void add_mlp(const std::string& prefix, MLP& mlp, ParamStatus status,
                 LrGroup group = LrGroup::base);

    bool contains(std::string_view name) const;
    ParamEntry& at(std::string_view name);
    const ParamEntry& at(std::string_view name) const;
    void set_status(std::string_view name, ParamStatus status);

    std::vector<ParamEntry>& entries() { return entries_; }
    const std::vector<ParamEntry>& entries() const { return entries_; }

    std::size_t total_count() const;
    std::size_t count(ParamStatus status) const;

    /// "name,status,lr_group,param_count" with a header line.
    std::string to_csv() const;

  private:
    std::vector<ParamEntry> entries_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

struct LoRAConfig {
    std::vector<std::string> targets;
    std::size_t rank = 16;
    double alpha = 32.0;
    double dropout = 0.05;
};

/// Attaches adapters to the named 2-D weights. Targets and their biases
/// become frozen; the new "<layer>.lora_a" / "<layer>.lora_b" entries are
/// adapters. Returns the adapter entry names.
std::vector<std::string> apply_lora(ParameterRegistry& registry,
                                    std::span<const std::string> target_names, std::size_t rank,
                                    double alpha, double dropout, std::mt19937_64& rng);

/// Freezes every "vit." entry, including the output projections P.
void freeze_backbone(ParameterRegistry& registry);

}  // namespace qavit
