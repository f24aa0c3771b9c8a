// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qavit/config.hpp"

namespace qavit {

struct TaskMetrics {
    std::size_t n = 0;
    std::size_t correct = 0;
    double accuracy() const { return n == 0 ? 0.0 : static_cast<double>(correct) / n; }
};

struct MetricsReport {
    /// Keyed by task name.
    std::map<std::string, TaskMetrics> tasks;
    std::uint64_t seed = 0;
    std::string config_digest;
    double wall_seconds = 0.0;

    std::size_t n() const;
    /// Pooled over the QA tasks; empty when none was evaluated.
    std::optional<double> qa_acc() const;
    std::optional<double> cap_acc() const;
    /// {"qa_acc", "cap_acc", "n", "tasks", "seed", "config_digest", "wall_seconds"};
    /// a missing accuracy is null.
    nlohmann::json to_json() const;
};

/// Task-homogeneous batches from the evaluation split; `dataset` holds the
/// task name.
struct EvalSet {
    std::vector<Batch> batches;
    std::size_t size() const;
};

EvalSet make_eval_set(const GridWorldSpec& spec, const Vocab& vocab,
                      std::span<const TaskKind> tasks, std::size_t samples_per_task,
                      std::uint64_t seed, DType dtype = DType::f32, std::size_t chunk = 128);

/// Maps a batch to [batch × classes] logits.
using Predictor = std::function<Tensor(const Batch&)>;

/// Argmax accuracy for QA; for captions the predicted color set
/// {k : logit_k > 0} must equal the target set. Throws
/// std::invalid_argument on an empty set.
MetricsReport evaluate(const Predictor& predict, const EvalSet& set);
/// Inference mode, no gradients.
MetricsReport evaluate(const QAViTModel& model, const EvalSet& set);

/// Non-negative relevance per patch, row-major.
struct SaliencyMap {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

/// relevance_i = max(0, mean_c grad_ic · act_ic) over the patch rows of one
/// sample (row 0, the CLS token, is dropped), then divided by the maximum.
SaliencyMap saliency_from_activations(const Tensor& activations, const Tensor& gradients,
                                      std::size_t grid);

/// Grad-CAM of the target logit at the output of the model's capture layer.
/// Leaves parameter values and gradients as they were.
SaliencyMap saliency(const QAViTModel& model, const Tensor& image, const QuestionTokens& question,
                     std::size_t target_class);

/// Binary P5 image, nearest-neighbour upscaled, byte = round(255·value).
std::string encode_pgm(const SaliencyMap& map, std::size_t upscale = 1);
void export_pgm(const SaliencyMap& map, const std::filesystem::path& path,
                std::size_t upscale = 1);

struct AblationAxes {
    std::vector<FusionMode> modes;
    std::vector<std::size_t> Ls;
    std::vector<TextSource> text_sources;
    std::vector<HeadMode> head_modes;
    std::vector<bool> pt;
    std::vector<bool> freeze;
    std::vector<std::uint64_t> seeds;
};

struct AblationSpec {
    RunConfig base;
    AblationAxes axes;
    /// Total optimizer steps allowed across all cells.
    std::size_t budget_steps = 0;
};

AblationSpec ablation_from_json(const nlohmann::json& doc);
AblationSpec load_ablation_spec(const std::filesystem::path& path);

struct AblationCell {
    RunConfig config;
    std::string digest;
};

/// Cartesian product in axis order; an empty axis keeps the base value.
/// Throws ConfigError if a cell is invalid or two cells share a digest.
std::vector<AblationCell> expand_cells(const AblationSpec& spec);

struct AblationRow {
    AblationCell cell;
    MetricsReport metrics;
    double delta_vs_baseline = 0.0;
};

struct AblationResult {
    /// Sorted by QA accuracy (caption accuracy when there is none),
    /// best first; ties keep grid order.
    std::vector<AblationRow> rows;

    std::string csv() const;
};

using CellRunner = std::function<MetricsReport(const AblationCell&)>;

/// Trains and evaluates one configuration in memory.
MetricsReport run_cell(const RunConfig& cfg);

/// Checks the budget (cells × total_steps ≤ budget_steps, else BudgetError),
/// runs the cells on up to `jobs` threads and attaches deltas against the
/// plan=none cell of the same seed (the first cell of that seed when the
/// grid has no such cell).
AblationResult run_ablation(const AblationSpec& spec, std::size_t jobs,
                            const CellRunner& runner = {});

}  // namespace qavit
