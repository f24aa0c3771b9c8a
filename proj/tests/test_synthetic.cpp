// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <random>
#include <vector>

#include "qavit/synthetic.hpp"

using namespace qavit;

namespace {

// Pixel rule written from the description: glyph strokes are two pixels
// wide through the cell middle (bars) or along the diagonals.
bool stroke(std::size_t glyph, std::size_t y, std::size_t x, std::size_t b) {
    const std::size_t m = b / 2 - 1;
    if (glyph == 0) return y == m || y == m + 1;
    if (glyph == 1) return x == m || x == m + 1;
    if (glyph == 2) return x == y || x == y + 1;
    return x + y == b - 1 || x + y == b;
}

double channel(std::size_t color, std::size_t ch) {
    static const int rgb[8][3] = {{0, 0, 0}, {1, 1, 1}, {1, 0, 0}, {0, 1, 0},
                                  {0, 0, 1}, {1, 1, 0}, {0, 1, 1}, {1, 0, 1}};
    return rgb[color][ch];
}

std::uint32_t le32(const std::string& s, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[at + i]);
    return v;
}

std::uint16_t le16(const std::string& s, std::size_t at) {
    return static_cast<std::uint16_t>(static_cast<unsigned char>(s[at]) |
                                      (static_cast<unsigned char>(s[at + 1]) << 8));
}

}  // namespace

TEST(Render, EveryPixelFollowsTheRule) {
    GridWorldSpec spec;
    std::mt19937_64 rng(1);
    for (int t = 0; t < 5; ++t) {
        GridCells cells = sample_cells_iid(spec, rng);
        Tensor img = render(cells, spec);
        ASSERT_EQ(img.shape(), (Shape{3, 32, 32}));
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t y = 0; y < 32; ++y)
                for (std::size_t x = 0; x < 32; ++x) {
                    const Cell& c = cells.at(y / 8, x / 8);
                    const double base = channel(c.color, ch);
                    const double want = stroke(c.glyph, y % 8, x % 8, 8) ? (base ? 0.75 : 0.25) : base;
                    ASSERT_FLOAT_EQ(img.at((ch * 32 + y) * 32 + x), want);
                }
    }
}

TEST(Render, GlyphsAreDistinctAndShapeChecked) {
    GridWorldSpec spec;
    GridCells cells;
    cells.grid = 4;
    std::vector<std::vector<double>> seen;
    for (std::uint8_t g = 0; g < 4; ++g) {
        cells.cells.assign(16, Cell{2, g});
        seen.push_back(render(cells, spec).to_vector());
    }
    for (int a = 0; a < 4; ++a)
        for (int b = a + 1; b < 4; ++b) EXPECT_NE(seen[a], seen[b]);
    cells.grid = 3;
    cells.cells.resize(9);
    EXPECT_THROW(render(cells, spec), ShapeError);
}

TEST(Cells, BalancedArrangementHasEqualCounts) {
    GridWorldSpec spec;
    std::mt19937_64 rng(2);
    std::map<std::size_t, std::size_t> at_cell;
    for (int t = 0; t < 400; ++t) {
        GridCells g = sample_cells_balanced(spec, rng);
        std::vector<int> colors(8), glyphs(4);
        for (const auto& c : g.cells) {
            ++colors[c.color];
            ++glyphs[c.glyph];
        }
        for (int v : colors) EXPECT_EQ(v, 2);
        for (int v : glyphs) EXPECT_EQ(v, 4);
        ++at_cell[g.at(1, 2).color];
    }
    // The color at a fixed cell is spread over the whole palette.
    EXPECT_EQ(at_cell.size(), 8u);
    for (auto [k, n] : at_cell) EXPECT_GT(n, 20u) << k;
}

TEST(Cells, BalancedWithRemainderStaysNearlyEven) {
    GridWorldSpec spec;
    spec.colors = 6;
    std::mt19937_64 rng(3);
    GridCells g = sample_cells_balanced(spec, rng);
    std::vector<int> colors(6);
    for (const auto& c : g.cells) ++colors[c.color];
    EXPECT_EQ(*std::max_element(colors.begin(), colors.end()) - *std::min_element(colors.begin(), colors.end()), 1);
}

TEST(Samples, AnswersMatchTheCells) {
    GridWorldSpec spec;
    Vocab v = build_vocab(spec);
    std::mt19937_64 rng(4);
    for (int t = 0; t < 200; ++t) {
        QASample s = gen_qa_sample(spec, v, rng);
        auto words = split_words(s.question_text);
        EXPECT_EQ(s.question.size(), words.size());
        for (auto id : s.question.ids) EXPECT_NE(id, Vocab::unk_id);
        if (s.task == TaskKind::count_color) {
            std::size_t k = std::find(color_names.begin(), color_names.end(), words[2]) - color_names.begin();
            std::size_t n = std::count_if(s.cells.cells.begin(), s.cells.cells.end(),
                                          [&](const Cell& c) { return c.color == k; });
            EXPECT_EQ(s.answer_id, 8 + 4 + n);
        } else {
            std::size_t r = std::stoul(words[2].substr(1)), c = std::stoul(words[3].substr(1));
            if (s.task == TaskKind::color_at) {
                EXPECT_EQ(words[0], "color");
                EXPECT_EQ(s.answer_id, s.cells.at(r, c).color);
            } else {
                EXPECT_EQ(s.answer_id, 8u + s.cells.at(r, c).glyph);
            }
        }
        EXPECT_EQ(s.image.to_vector(), render(s.cells, spec).to_vector());
    }
    EXPECT_EQ(answer_classes(spec), 29u);
    EXPECT_THROW(gen_qa_sample(spec, v, rng, TaskKind::caption), std::invalid_argument);
}

TEST(Samples, CaptionTargetsAreColorPresence) {
    GridWorldSpec spec;
    Vocab v = build_vocab(spec);
    std::mt19937_64 rng(5);
    std::vector<int> used(13);
    for (int t = 0; t < 300; ++t) {
        CaptionSample s = gen_caption_sample(spec, v, rng);
        ++used[s.template_index];
        EXPECT_EQ(s.instruction_text, caption_templates()[s.template_index]);
        for (std::size_t k = 0; k < 8; ++k) {
            bool present = std::any_of(s.cells.cells.begin(), s.cells.cells.end(),
                                       [&](const Cell& c) { return c.color == k; });
            EXPECT_EQ(s.target[k], present ? 1 : 0);
        }
    }
    for (int n : used) EXPECT_GT(n, 5);
}

TEST(Samples, StreamsAreIndexedAndSplitsDiffer) {
    GridWorldSpec spec;
    Vocab v = build_vocab(spec);
    auto a = sample_rng(7, 0, 12), b = sample_rng(7, 0, 12), c = sample_rng(7, 1, 12);
    QASample sa = gen_qa_sample(spec, v, a), sb = gen_qa_sample(spec, v, b), sc = gen_qa_sample(spec, v, c);
    EXPECT_EQ(sa.cells, sb.cells);
    EXPECT_EQ(sa.question_text, sb.question_text);
    EXPECT_FALSE(sa.cells == sc.cells);
}

TEST(Chance, MatchesIndependentComputations) {
    GridWorldSpec spec;
    EXPECT_DOUBLE_EQ(chance_accuracy(TaskKind::color_at, spec), 0.125);
    EXPECT_DOUBLE_EQ(chance_accuracy(TaskKind::glyph_at, spec), 0.25);

    // Count of one color among 16 cells by dynamic programming.
    std::vector<double> dp(17, 0.0);
    dp[0] = 1.0;
    for (int cell = 0; cell < 16; ++cell) {
        std::vector<double> next(17, 0.0);
        for (int k = 0; k <= cell; ++k) {
            next[k] += dp[k] * 7.0 / 8.0;
            next[k + 1] += dp[k] / 8.0;
        }
        dp = next;
    }
    EXPECT_NEAR(chance_accuracy(TaskKind::count_color, spec), *std::max_element(dp.begin(), dp.end()), 1e-12);

    // Exact color set over all 2^8 subsets, again by dynamic programming.
    std::vector<double> sets(256, 0.0);
    sets[0] = 1.0;
    for (int cell = 0; cell < 16; ++cell) {
        std::vector<double> next(256, 0.0);
        for (int s = 0; s < 256; ++s)
            for (int k = 0; k < 8; ++k) next[s | (1 << k)] += sets[s] / 8.0;
        sets = next;
    }
    EXPECT_NEAR(chance_accuracy(TaskKind::caption, spec), *std::max_element(sets.begin(), sets.end()), 1e-12);
    EXPECT_THROW(chance_accuracy("vqa", spec), std::invalid_argument);
}

TEST(Vocabulary, CoversQuestionsTemplatesAndPrompt) {
    GridWorldSpec spec;
    Vocab v = build_vocab(spec);
    for (auto t : caption_templates())
        for (auto& w : split_words(t)) EXPECT_TRUE(v.contains(w)) << w;
    for (auto w : {"color", "at", "r3", "c0", "magenta", "count", "glyph", "photo"}) EXPECT_TRUE(v.contains(w)) << w;
}

TEST(Records, LayoutRoundTrips) {
    GridWorldSpec spec;
    spec.image_size = 8;
    spec.grid = 4;
    Vocab v = build_vocab(spec);
    std::mt19937_64 rng(8);
    QASample s = gen_qa_sample(spec, v, rng, TaskKind::color_at);
    std::string out;
    append_record(out, s.image, s.question, static_cast<std::uint16_t>(s.answer_id));
    append_record(out, s.image, QuestionTokens{}, 0xABCD);
    const std::size_t len = 3 * 64 * 4 + 2 + 2 * s.question.size() + 2;
    ASSERT_EQ(le32(out, 0), len);
    for (std::size_t i = 0; i < 192; ++i) {
        float f;
        std::uint32_t bits = le32(out, 4 + 4 * i);
        std::memcpy(&f, &bits, 4);
        EXPECT_EQ(f, static_cast<float>(s.image.at(i)));
    }
    std::size_t at = 4 + 768;
    ASSERT_EQ(le16(out, at), s.question.size());
    for (std::size_t k = 0; k < s.question.size(); ++k) EXPECT_EQ(le16(out, at + 2 + 2 * k), s.question.ids[k]);
    EXPECT_EQ(le16(out, at + 2 + 2 * s.question.size()), s.answer_id);
    const std::size_t second = 4 + len;
    EXPECT_EQ(le32(out, second), 768u + 4u);
    EXPECT_EQ(le16(out, second + 4 + 768 + 2), 0xABCD);
    EXPECT_EQ(out.size(), second + 4 + 772);
}

TEST(Spec, RejectsBadWorlds) {
    GridWorldSpec s;
    s.colors = 9;
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = GridWorldSpec{};
    s.image_size = 30;
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = GridWorldSpec{};
    s.glyphs = 0;
    EXPECT_THROW(s.validate(), std::invalid_argument);
}
