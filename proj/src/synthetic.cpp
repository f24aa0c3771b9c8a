// SPDX-License-Identifier: Apache-2.0

#include "qavit/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "qavit/model.hpp"

namespace qavit {

void GridWorldSpec::validate() const {
    if (grid == 0 || image_size == 0 || image_size % grid != 0) {
        throw std::invalid_argument("image_size " + std::to_string(image_size) +
                                    " is not divisible by grid " + std::to_string(grid));
    }
    if (colors < 2 || colors > color_names.size()) {
        throw std::invalid_argument("color count must be in [2, 8]");
    }
    if (glyphs < 1 || glyphs > glyph_names.size()) {
        throw std::invalid_argument("glyph count must be in [1, 4]");
    }
    if (block() < 2) {
        throw std::invalid_argument("cells must be at least 2 pixels wide");
    }
}

std::string_view task_name(TaskKind task) {
    switch (task) {
        case TaskKind::color_at: return "color_at";
        case TaskKind::glyph_at: return "glyph_at";
        case TaskKind::count_color: return "count_color";
        case TaskKind::caption: return "caption";
    }
    return "color_at";
}

TaskKind parse_task(std::string_view name) {
    for (auto t : {TaskKind::color_at, TaskKind::glyph_at, TaskKind::count_color,
                   TaskKind::caption}) {
        if (task_name(t) == name) return t;
    }
    throw std::invalid_argument("unknown task '" + std::string(name) + "'");
}

const std::array<std::string_view, 13>& caption_templates() {
    static const std::array<std::string_view, 13> templates = {
        "A short image caption:",
        "A short image description:",
        "A photo of",
        "An image that shows",
        "Write a short description for the image.",
        "Write a description for the photo.",
        "Provide a description of what is presented in the photo.",
        "Briefly describe the content of the image.",
        "Can you briefly explain what you see in the image?",
        "Could you use a few words to describe what you perceive in the photo?",
        "Please provide a short depiction of the picture.",
        "Using language, provide a short account of the image.",
        "Use a few words to illustrate what is happening in the picture.",
    };
    return templates;
}

bool GridCells::operator==(const GridCells& other) const {
    if (grid != other.grid || cells.size() != other.cells.size()) return false;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (cells[i].color != other.cells[i].color || cells[i].glyph != other.cells[i].glyph) {
            return false;
        }
    }
    return true;
}

namespace {

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

// Each value 0..n−1 repeated as evenly as possible, then shuffled. When n
// does not divide the length the surplus values are picked at random.
std::vector<std::uint8_t> balanced_values(std::size_t length, std::size_t n,
                                          std::mt19937_64& rng) {
    std::vector<std::uint8_t> surplus(n);
    for (std::size_t i = 0; i < n; ++i) surplus[i] = static_cast<std::uint8_t>(i);
    std::shuffle(surplus.begin(), surplus.end(), rng);
    std::vector<std::uint8_t> v;
    v.reserve(length);
    for (std::size_t i = 0; i < length - length % n; ++i) v.push_back(static_cast<std::uint8_t>(i % n));
    for (std::size_t i = 0; i < length % n; ++i) v.push_back(surplus[i]);
    std::shuffle(v.begin(), v.end(), rng);
    return v;
}

const double palette[8][3] = {{0, 0, 0}, {1, 1, 1}, {1, 0, 0}, {0, 1, 0},
                              {0, 0, 1}, {1, 1, 0}, {0, 1, 1}, {1, 0, 1}};

bool glyph_pixel(std::size_t glyph, std::size_t dy, std::size_t dx, std::size_t b) {
    const std::size_t mid = b / 2 - 1;
    switch (glyph) {
        case 0: return dy == mid || dy == mid + 1;
        case 1: return dx == mid || dx == mid + 1;
        case 2: return dx == dy || dx == dy + 1;
        default: return dx + dy == b - 1 || dx + dy == b;
    }
}

std::string coordinate_question(std::string_view head, std::size_t r, std::size_t c) {
    return std::string(head) + " at r" + std::to_string(r) + " c" + std::to_string(c);
}

double binomial_pmf(std::size_t n, std::size_t k, double p) {
    double log_c = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
    return std::exp(log_c + k * std::log(p) + (n - k) * std::log1p(-p));
}

}  // namespace

GridCells sample_cells_iid(const GridWorldSpec& spec, std::mt19937_64& rng) {
    GridCells g;
    g.grid = spec.grid;
    g.cells.resize(spec.cells());
    for (auto& cell : g.cells) {
        cell.color = static_cast<std::uint8_t>(uniform_index(rng, spec.colors));
        cell.glyph = static_cast<std::uint8_t>(uniform_index(rng, spec.glyphs));
    }
    return g;
}

GridCells sample_cells_balanced(const GridWorldSpec& spec, std::mt19937_64& rng) {
    GridCells g;
    g.grid = spec.grid;
    auto colors = balanced_values(spec.cells(), spec.colors, rng);
    auto glyphs = balanced_values(spec.cells(), spec.glyphs, rng);
    g.cells.resize(spec.cells());
    for (std::size_t i = 0; i < g.cells.size(); ++i) {
        g.cells[i] = {colors[i], glyphs[i]};
    }
    return g;
}

Tensor render(const GridCells& cells, const GridWorldSpec& spec, DType dtype) {
    spec.validate();
    if (cells.grid != spec.grid || cells.cells.size() != spec.cells()) {
        throw ShapeError("render: cell grid does not match the spec");
    }
    const std::size_t s = spec.image_size, b = spec.block();
    std::vector<double> px(3 * s * s);
    for (std::size_t r = 0; r < spec.grid; ++r) {
        for (std::size_t c = 0; c < spec.grid; ++c) {
            const Cell& cell = cells.at(r, c);
            const double* rgb = palette[cell.color];
            for (std::size_t dy = 0; dy < b; ++dy) {
                for (std::size_t dx = 0; dx < b; ++dx) {
                    const bool mark = glyph_pixel(cell.glyph, dy, dx, b);
                    for (std::size_t ch = 0; ch < 3; ++ch) {
                        const double base = rgb[ch];
                        px[(ch * s + r * b + dy) * s + c * b + dx] =
                            mark ? 0.75 * base + 0.25 * (1.0 - base) : base;
                    }
                }
            }
        }
    }
    return Tensor::from_values({3, s, s}, px, dtype);
}

std::size_t answer_classes(const GridWorldSpec& spec) {
    return spec.colors + spec.glyphs + spec.cells() + 1;
}

std::size_t glyph_answer(const GridWorldSpec& spec, std::size_t glyph) { return spec.colors + glyph; }

std::size_t count_answer(const GridWorldSpec& spec, std::size_t count) {
    return spec.colors + spec.glyphs + count;
}

Vocab build_vocab(const GridWorldSpec& spec) {
    Vocab v;
    for (auto w : {"color", "at", "glyph", "count"}) v.add(w);
    for (std::size_t i = 0; i < spec.grid; ++i) v.add("r" + std::to_string(i));
    for (std::size_t i = 0; i < spec.grid; ++i) v.add("c" + std::to_string(i));
    for (std::size_t i = 0; i < spec.colors; ++i) v.add(color_names[i]);
    for (auto t : caption_templates()) {
        for (const auto& w : split_words(t)) v.add(w);
    }
    for (const auto& w : split_words(ModelConfig{}.prompt)) v.add(w);
    return v;
}

QASample gen_qa_sample(const GridWorldSpec& spec, const Vocab& vocab, std::mt19937_64& rng,
                       std::optional<TaskKind> task) {
    spec.validate();
    QASample s;
    s.task = task.value_or(static_cast<TaskKind>(uniform_index(rng, 3)));
    switch (s.task) {
        case TaskKind::color_at:
        case TaskKind::glyph_at: {
            s.cells = sample_cells_balanced(spec, rng);
            const std::size_t r = uniform_index(rng, spec.grid), c = uniform_index(rng, spec.grid);
            const Cell& cell = s.cells.at(r, c);
            if (s.task == TaskKind::color_at) {
                s.question_text = coordinate_question("color", r, c);
                s.answer_id = cell.color;
            } else {
                s.question_text = coordinate_question("glyph", r, c);
                s.answer_id = glyph_answer(spec, cell.glyph);
            }
            break;
        }
        case TaskKind::count_color: {
            s.cells = sample_cells_iid(spec, rng);
            const std::size_t k = uniform_index(rng, spec.colors);
            s.question_text = "count color " + std::string(color_names[k]);
            s.answer_id = count_answer(
                spec, std::count_if(s.cells.cells.begin(), s.cells.cells.end(),
                                    [&](const Cell& cell) { return cell.color == k; }));
            break;
        }
        case TaskKind::caption:
            throw std::invalid_argument("gen_qa_sample: caption is not a QA task");
    }
    s.image = render(s.cells, spec);
    s.question = tokenize(s.question_text, vocab);
    return s;
}

CaptionSample gen_caption_sample(const GridWorldSpec& spec, const Vocab& vocab,
                                 std::mt19937_64& rng) {
    spec.validate();
    CaptionSample s;
    s.cells = sample_cells_iid(spec, rng);
    s.template_index = uniform_index(rng, caption_templates().size());
    s.instruction_text = std::string(caption_templates()[s.template_index]);
    s.instruction = tokenize(s.instruction_text, vocab);
    s.target.assign(spec.colors, 0);
    for (const auto& cell : s.cells.cells) s.target[cell.color] = 1;
    s.image = render(s.cells, spec);
    return s;
}

double chance_accuracy(TaskKind task, const GridWorldSpec& spec) {
    spec.validate();
    const std::size_t n = spec.cells();
    switch (task) {
        case TaskKind::color_at:
            return 1.0 / static_cast<double>(spec.colors);
        case TaskKind::glyph_at:
            return 1.0 / static_cast<double>(spec.glyphs);
        case TaskKind::count_color: {
            double best = 0.0;
            for (std::size_t k = 0; k <= n; ++k) {
                best = std::max(best, binomial_pmf(n, k, 1.0 / spec.colors));
            }
            return best;
        }
        case TaskKind::caption: {
            // P(the set of present colors equals one fixed set of size m)
            // by inclusion-exclusion over missing colors.
            double best = 0.0;
            const double total = std::pow(static_cast<double>(spec.colors), n);
            for (std::size_t m = 1; m <= spec.colors; ++m) {
                double onto = 0.0;
                for (std::size_t j = 0; j <= m; ++j) {
                    const double binom = std::exp(std::lgamma(m + 1.0) - std::lgamma(j + 1.0) -
                                                  std::lgamma(m - j + 1.0));
                    onto += (j % 2 ? -1.0 : 1.0) * binom * std::pow(static_cast<double>(m - j), n);
                }
                best = std::max(best, onto / total);
            }
            return best;
        }
    }
    throw std::invalid_argument("chance_accuracy: undefined task");
}

double chance_accuracy(std::string_view task, const GridWorldSpec& spec) {
    return chance_accuracy(parse_task(task), spec);
}

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint32_t split, std::uint64_t index) {
    const std::uint64_t offset = split == 0 ? 0 : (std::uint64_t{1} << 40) * split;
    return std::mt19937_64(derive_seed(seed, offset + index));
}

void append_record(std::string& out, const Tensor& image, const QuestionTokens& q,
                   std::uint16_t answer) {
    std::string payload;
    auto put16 = [&](std::uint16_t v) {
        payload.push_back(static_cast<char>(v & 0xff));
        payload.push_back(static_cast<char>(v >> 8));
    };
    for (double x : image.to_vector()) {
        float f = static_cast<float>(x);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        for (int i = 0; i < 4; ++i) payload.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
    put16(static_cast<std::uint16_t>(q.size()));
    for (auto id : q.ids) put16(static_cast<std::uint16_t>(id));
    put16(answer);
    const auto len = static_cast<std::uint32_t>(payload.size());
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
    out += payload;
}

}  // namespace qavit
