// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "qavit/question.hpp"

namespace qavit {

struct GridWorldSpec {
    std::size_t grid = 4;
    std::size_t colors = 8;
    std::size_t glyphs = 4;
    std::size_t image_size = 32;
    std::uint64_t seed = 0;

    std::size_t block() const { return image_size / grid; }
    std::size_t cells() const { return grid * grid; }
    void validate() const;
};

enum class TaskKind { color_at, glyph_at, count_color, caption };

std::string_view task_name(TaskKind task);
TaskKind parse_task(std::string_view name);

/// Palette of the eight RGB cube corners, in answer-id order.
inline constexpr std::array<std::string_view, 8> color_names = {
    "black", "white", "red", "green", "blue", "yellow", "cyan", "magenta"};
inline constexpr std::array<std::string_view, 4> glyph_names = {
    "hbar", "vbar", "diag", "antidiag"};

/// The 13 caption instructions, sampled uniformly.
const std::array<std::string_view, 13>& caption_templates();

struct Cell {
    std::uint8_t color = 0;
    std::uint8_t glyph = 0;
};

struct GridCells {
    std::size_t grid = 0;
    std::vector<Cell> cells;  // row-major

    const Cell& at(std::size_t r, std::size_t c) const { return cells[r * grid + c]; }
    bool operator==(const GridCells& other) const;
};

/// Every cell drawn independently and uniformly.
GridCells sample_cells_iid(const GridWorldSpec& spec, std::mt19937_64& rng);
/// Random arrangement in which each color and each glyph occurs equally
/// often (when the cell count allows it), so the image alone says nothing
/// about what sits at a given cell.
GridCells sample_cells_balanced(const GridWorldSpec& spec, std::mt19937_64& rng);

/// Solid color blocks with a 2-pixel glyph pattern in the shade
/// 0.75·color + 0.25·(1 − color). Returns [3 × size × size] in [0, 1].
Tensor render(const GridCells& cells, const GridWorldSpec& spec, DType dtype = DType::f32);

/// Answer ids: colors, then glyphs, then counts 0..G².
std::size_t answer_classes(const GridWorldSpec& spec);
std::size_t glyph_answer(const GridWorldSpec& spec, std::size_t glyph);
std::size_t count_answer(const GridWorldSpec& spec, std::size_t count);

/// Question words, caption template words and the default prompt.
Vocab build_vocab(const GridWorldSpec& spec);

struct QASample {
    Tensor image;
    GridCells cells;
    TaskKind task = TaskKind::color_at;
    std::string question_text;
    QuestionTokens question;
    std::size_t answer_id = 0;
};

struct CaptionSample {
    Tensor image;
    GridCells cells;
    std::size_t template_index = 0;
    std::string instruction_text;
    QuestionTokens instruction;
    std::vector<std::uint8_t> target;  // color presence, length spec.colors
};

/// A question of kind `task` (uniform over the three QA kinds if absent)
/// about a uniformly chosen cell or color.
QASample gen_qa_sample(const GridWorldSpec& spec, const Vocab& vocab, std::mt19937_64& rng,
                       std::optional<TaskKind> task = std::nullopt);
CaptionSample gen_caption_sample(const GridWorldSpec& spec, const Vocab& vocab,
                                 std::mt19937_64& rng);

/// Best constant-guess accuracy for a task: 1/colors, 1/glyphs, the mode of
/// the binomial count, or the most likely exact color set for captions.
double chance_accuracy(TaskKind task, const GridWorldSpec& spec);
/// Same, by task name; throws std::invalid_argument for unknown names.
double chance_accuracy(std::string_view task, const GridWorldSpec& spec);

/// Deterministic per-sample generator: split 0 is training, 1 evaluation.
std::mt19937_64 sample_rng(std::uint64_t seed, std::uint32_t split, std::uint64_t index);

/// Record-framed binary dump: u32 LE payload length, then image f32 LE,
/// u16 token count, u16 token ids and a u16 answer (color bitmask for
/// captions).
void append_record(std::string& out, const Tensor& image, const QuestionTokens& q,
                   std::uint16_t answer);

}  // namespace qavit
