// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>
#include <string>
#include <vector>

#include "qavit/question.hpp"

using namespace qavit;

namespace {

Vocab words(std::initializer_list<const char*> list) {
    Vocab v;
    for (const char* w : list) v.add(w);
    return v;
}

TextEncoderConfig text_cfg(TextSource source, std::size_t vocab) {
    TextEncoderConfig c;
    c.source = source;
    c.vocab_size = vocab;
    c.width = 8;
    c.heads = 2;
    c.depth = 2;
    c.k_max = 6;
    return c;
}

}  // namespace

TEST(Vocab, ReservedIdsAndUnknownWords) {
    Vocab v = words({"what", "color"});
    EXPECT_EQ(v.token(Vocab::pad_id), "<pad>");
    EXPECT_EQ(v.token(Vocab::unk_id), "<unk>");
    EXPECT_EQ(v.id("what"), 2u);
    EXPECT_EQ(v.id("zebra"), Vocab::unk_id);
    EXPECT_EQ(v.add("what"), 2u);
    EXPECT_THROW(v.token(99), RangeError);
}

TEST(Vocab, SerializeParseRoundTrip) {
    Vocab v = words({"a", "b", "c"});
    std::string text = v.serialize();
    EXPECT_EQ(text.substr(0, 8), "<pad>\t0\n");
    EXPECT_EQ(Vocab::parse(text), v);
    EXPECT_THROW(Vocab::parse("<pad>\t0\n<unk> 1\n"), std::invalid_argument);
    EXPECT_THROW(Vocab::parse("<pad>\t0\n<unk>\t2\n"), std::invalid_argument);
    EXPECT_THROW(Vocab::parse("a\t0\nb\t1\n"), std::invalid_argument);
}

TEST(Tokenize, LowercasesSplitsPunctuationAndTruncates) {
    Vocab v = words({"what", "color", "at", "1", "2"});
    QuestionTokens q = tokenize("What COLOR at 1, 2?", v);
    std::vector<std::size_t> expect = {v.id("what"), v.id("color"), v.id("at"), v.id("1"), v.id("2")};
    EXPECT_EQ(q.ids, expect);
    EXPECT_EQ(tokenize("what what what what", v, 3).size(), 3u);
    EXPECT_TRUE(tokenize("  ...  ", v).empty());
    EXPECT_EQ(tokenize("purple", v).ids, std::vector<std::size_t>{Vocab::unk_id});
}

TEST(TextSource, NamesRoundTrip) {
    for (auto s : {TextSource::embedding_only, TextSource::tiny_encoder})
        EXPECT_EQ(parse_text_source(text_source_name(s)), s);
    EXPECT_THROW(parse_text_source("bert"), std::invalid_argument);
}

TEST(Encoder, EmbeddingOnlyIsLookup) {
    std::mt19937_64 rng(1);
    auto w = TextEncoderWeights::init(text_cfg(TextSource::embedding_only, 10), DType::f64, rng);
    QuestionTokens q{{4, 7, 4}};
    Tensor out = encode_question(q, w);
    ASSERT_EQ(out.shape(), (Shape{3, 8}));
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(out.at(k * 8 + j), w.embed.at(q.ids[k] * 8 + j));
}

TEST(Encoder, TinyEncoderShapeAndEmptyQuestion) {
    std::mt19937_64 rng(2);
    auto w = TextEncoderWeights::init(text_cfg(TextSource::tiny_encoder, 10), DType::f64, rng);
    EXPECT_EQ(encode_question(QuestionTokens{{2, 3, 4, 5}}, w).shape(), (Shape{4, 8}));
    EXPECT_EQ(encode_question(QuestionTokens{}, w).rows(), 0u);
    EXPECT_THROW(encode_question(QuestionTokens{{2, 2, 2, 2, 2, 2, 2}}, w), RangeError);
}

TEST(Encoder, BatchedQuestionsDoNotInteract) {
    std::mt19937_64 rng(3);
    auto w = TextEncoderWeights::init(text_cfg(TextSource::tiny_encoder, 12), DType::f64, rng);
    std::vector<QuestionTokens> qs = {{{2, 3}}, {{4, 5, 6, 7}}, {{8}}};
    ForwardContext ctx;
    std::vector<std::size_t> offsets;
    Tensor all = encode_questions(qs, w, ctx, offsets);
    EXPECT_EQ(offsets, (std::vector<std::size_t>{0, 2, 6, 7}));
    for (std::size_t i = 0; i < qs.size(); ++i) {
        Tensor one = encode_question(qs[i], w);
        Tensor part = slice_rows(all, offsets[i], offsets[i + 1]);
        for (std::size_t k = 0; k < one.numel(); ++k) EXPECT_NEAR(part.at(k), one.at(k), 1e-12);
    }
}

TEST(Projector, OneMlpPerLayerWithoutAliasing) {
    std::mt19937_64 rng(4);
    const std::size_t layers[] = {4, 5};
    auto p = PerLayerProjector::init(layers, 8, 16, DType::f64, rng);
    ASSERT_EQ(p.layers.size(), 2u);
    EXPECT_NE(p.layers.at(4).fc1.weight.impl(), p.layers.at(5).fc1.weight.impl());
    EXPECT_NE(p.layers.at(4).fc1.weight.to_vector(), p.layers.at(5).fc1.weight.to_vector());
    Tensor f = trunc_normal({3, 8}, DType::f64, rng, 1.0);
    Tensor out = project_question(f, 5, p);
    EXPECT_EQ(out.shape(), (Shape{3, 16}));
    ForwardContext ctx;
    const MLP& m = p.layers.at(5);
    Tensor ref = m.fc2(gelu(m.fc1(f)));
    EXPECT_EQ(out.to_vector(), ref.to_vector());
    EXPECT_THROW(project_question(f, 3, p), RangeError);
}
