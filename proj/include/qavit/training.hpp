// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qavit/model.hpp"
#include "qavit/synthetic.hpp"

namespace qavit {

struct TrainConfig {
    double base_lr = 3e-4;
    double projection_lr_multiplier = 100.0;
    /// Upper bound on the multiplied projection rate; 0 disables the cap.
    double projection_lr_cap = 3e-2;
    std::size_t warmup_steps = 100;
    std::size_t total_steps = 3000;
    std::size_t batch_size = 32;
    double weight_decay = 0.05;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    /// Global gradient-norm clip; 0 disables clipping.
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    double qa_loss_weight = 1.0;
    double caption_loss_weight = 1.0;
    std::size_t log_every = 10;

    void validate() const;
};

/// Linear warm-up to base_lr, then cosine decay to 0.01·base_lr at
/// total_steps. Throws RangeError outside [0, total_steps].
double lr_at(std::size_t step, const TrainConfig& cfg);
/// Rate for a parameter group given the schedule value.
double group_lr(double lr, LrGroup group, const TrainConfig& cfg);

/// Data source of a mixture entry: one QA kind, all three QA kinds
/// uniformly, or captioning.
enum class DataKind { color_at, glyph_at, count_color, qa, caption };

std::string_view data_kind_name(DataKind kind);
DataKind parse_data_kind(std::string_view name);

struct MixtureEntry {
    std::string id;
    double size = 1.0;
    DataKind kind = DataKind::qa;
};

struct MixtureSpec {
    std::vector<MixtureEntry> entries;

    /// p_i = size_i / Σ size.
    std::vector<double> probabilities() const;
    void validate() const;
};

/// Categorical draw proportional to dataset size.
std::size_t sample_dataset(const MixtureSpec& mixture, std::mt19937_64& rng);

/// A task-homogeneous batch.
struct Batch {
    std::string dataset;
    bool caption = false;
    std::vector<Tensor> images;
    std::vector<QuestionTokens> questions;
    std::vector<std::size_t> labels;  // QA
    Tensor targets;                   // captions: batch × colors
    std::size_t size() const { return images.size(); }
};

/// Samples [first, first + count) of one mixture entry in a split.
Batch make_batch(const MixtureEntry& entry, const GridWorldSpec& spec, const Vocab& vocab,
                 std::uint64_t seed, std::uint32_t split, std::uint64_t first, std::size_t count,
                 DType dtype = DType::f32);

/// The training batch of update `step` (0-based); a pure function of the
/// seed and step, so resumed runs see the same data.
Batch training_batch(const MixtureSpec& mixture, const GridWorldSpec& spec, const Vocab& vocab,
                     const TrainConfig& cfg, std::size_t step, DType dtype = DType::f32);

struct AdamSlot {
    std::vector<double> m;
    std::vector<double> v;
};

/// Moments for optimized (trainable or adapter) parameters only.
struct OptimizerState {
    std::map<std::string, AdamSlot> slots;
    std::size_t step = 0;

    static OptimizerState create(const ParameterRegistry& registry);
};

/// One AdamW update of `param` at 1-based `step` with decoupled weight decay.
void adamw_update(Tensor& param, std::span<const double> grad, AdamSlot& slot, double rate,
                  double weight_decay, std::size_t step, const TrainConfig& cfg);

/// Task loss of a batch (weighted by the task's loss weight).
Tensor batch_loss(const QAViTModel& model, const Batch& batch, const TrainConfig& cfg,
                  ForwardContext& ctx);

/// Forward, backward, clip, one AdamW update at lr_at(opt.step + 1), zero
/// gradients. Throws NumericFault naming the step on non-finite values.
double train_step(QAViTModel& model, const Batch& batch, OptimizerState& opt,
                  const TrainConfig& cfg);

struct LossRecord {
    std::size_t step = 0;
    std::string task;
    double loss = 0.0;
    double lr = 0.0;
};

struct TrainRunOptions {
    /// Stop once opt.step reaches this value (defaults to total_steps).
    std::size_t stop_at = static_cast<std::size_t>(-1);
    std::function<void(const LossRecord&)> on_record;
};

struct TrainedArtifact {
    std::vector<LossRecord> curve;
    std::string registry_audit;
    std::size_t steps = 0;
};

/// Runs updates opt.step .. stop from the seeded data stream. Records the
/// loss every cfg.log_every steps and at the final step.
TrainedArtifact train_run(QAViTModel& model, const MixtureSpec& mixture, const GridWorldSpec& spec,
                          const TrainConfig& cfg, OptimizerState& opt,
                          const TrainRunOptions& options = {});

/// "step,task,loss,lr" with a header line.
std::string loss_csv(const std::vector<LossRecord>& curve);

}  // namespace qavit
