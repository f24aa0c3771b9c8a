// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "qavit/model.hpp"
#include "qavit/training.hpp"

namespace qavit {

/// Malformed or schema-violating configuration.
class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// A requested workload does not fit the declared budget.
class BudgetError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct EvalSpec {
    std::vector<TaskKind> tasks = {TaskKind::color_at, TaskKind::glyph_at, TaskKind::count_color,
                                   TaskKind::caption};
    /// Samples per task.
    std::size_t samples = 2000;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "runs/default";
    ModelConfig model;
    TrainConfig train;
    MixtureSpec mixture{{{"vqa", 2.3, DataKind::qa}, {"caption", 0.7, DataKind::caption}}};
    GridWorldSpec data;
    EvalSpec eval;
    /// Write a resumable checkpoint every this many steps; 0 only at the end.
    std::size_t checkpoint_every = 0;
};

const nlohmann::json& run_config_schema();
const nlohmann::json& ablation_schema();

/// Parses JSON text; syntax errors become ConfigError with line and column.
nlohmann::json parse_json_text(std::string_view text, std::string_view source = "<config>");

/// Draft-07 subset: type, enum, properties, required, additionalProperties,
/// items, minItems, minLength, minimum, maximum, exclusiveMinimum,
/// exclusiveMaximum and local "$ref". Throws ConfigError naming the path.
void validate_against(const nlohmann::json& doc, const nlohmann::json& schema);

/// Schema check, defaults, then cross-field checks (fusion L ≤ depth,
/// matching image sizes, divisibility).
RunConfig run_config_from_json(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);

/// Full canonical form, every field present.
nlohmann::json to_json(const RunConfig& cfg);

/// 16 hex digits of FNV-1a over the canonical JSON dump.
std::string config_digest(const RunConfig& cfg);
std::uint64_t fnv1a(std::string_view bytes);

}  // namespace qavit
