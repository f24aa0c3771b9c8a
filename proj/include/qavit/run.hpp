// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <ostream>
#include <string_view>
#include <vector>

#include "qavit/config.hpp"
#include "qavit/eval.hpp"

namespace qavit {

/// Files of a training run directory.
struct RunFiles {
    std::filesystem::path dir;

    std::filesystem::path model() const { return dir / "model.ckpt"; }
    std::filesystem::path train_state() const { return dir / "train_state.ckpt"; }
    std::filesystem::path loss() const { return dir / "loss.csv"; }
    std::filesystem::path registry() const { return dir / "registry.csv"; }
    std::filesystem::path vocab() const { return dir / "vocab.tsv"; }
    std::filesystem::path config() const { return dir / "config.json"; }
    std::filesystem::path metrics() const { return dir / "metrics.json"; }
};

/// Trains `cfg` and writes the model checkpoint, optimizer state, loss CSV,
/// registry audit, vocabulary and canonical config into `dir`. With
/// `resume`, continues from the optimizer state already in `dir` (whose
/// config must have the same digest). Intermediate checkpoints follow
/// cfg.checkpoint_every.
TrainedArtifact train_to_directory(const RunConfig& cfg, const std::filesystem::path& dir,
                                   bool resume = false, std::ostream* log = nullptr);

/// Loads a model checkpoint; a vocab.tsv next to it must match the model.
void load_model_checkpoint(QAViTModel& model, const std::filesystem::path& path);

std::vector<LossRecord> parse_loss_csv(std::string_view text);

}  // namespace qavit
