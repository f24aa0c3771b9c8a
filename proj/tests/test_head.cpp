// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "qavit/head.hpp"
#include "qavit/model.hpp"

using namespace qavit;

namespace {

ModelConfig small_model(FusionMode mode, std::size_t L) {
    ModelConfig c;
    c.vit.image_size = 16;
    c.vit.patch_size = 4;
    c.vit.width = 16;
    c.vit.heads = 2;
    c.vit.depth = 4;
    c.vit.mlp_ratio = 2;
    c.fusion_mode = mode;
    c.fusion_L = L;
    c.text_width = 8;
    c.text_depth = 1;
    c.head_width = 24;
    c.answer_classes = 5;
    c.dtype = DType::f64;
    return c;
}

Vocab small_vocab() {
    Vocab v;
    for (const char* w : {"what", "color", "at", "0", "1", "2", "3", "a", "photo", "of"}) v.add(w);
    return v;
}

Tensor image(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> v(3 * 16 * 16);
    for (auto& x : v) x = u(rng);
    return Tensor::from_values({3, 16, 16}, v, DType::f64);
}

std::size_t block_params(std::size_t c, std::size_t r) {
    return 2 * c + 4 * (c * c + c) + 2 * c + (c * r * c + r * c) + (r * c * c + c);
}

}  // namespace

TEST(Head, UniformRowsPoolToThemselves) {
    std::mt19937_64 rng(1);
    AnswerHead h = AnswerHead::init(HeadMode::visual_only, Pooling::mean, 6, 4, 3, DType::f64, rng);
    std::vector<double> row = {0.1, -0.4, 2.0, 0.0, 1.5, -1.0};
    std::vector<double> rows;
    for (int i = 0; i < 5; ++i) rows.insert(rows.end(), row.begin(), row.end());
    Tensor logits = answer_logits(Tensor::from_values({5, 6}, rows, DType::f64), Tensor(), h);
    ASSERT_EQ(logits.shape(), (Shape{3}));
    for (std::size_t o = 0; o < 3; ++o) {
        double s = h.classifier.bias.at(o);
        for (std::size_t k = 0; k < 6; ++k) s += h.classifier.weight.at(o * 6 + k) * row[k];
        EXPECT_NEAR(logits.at(o), s, 1e-12);
    }
}

TEST(Head, ClsPoolingReadsFirstRow) {
    std::mt19937_64 rng(2);
    AnswerHead h = AnswerHead::init(HeadMode::visual_only, Pooling::cls, 4, 4, 2, DType::f64, rng);
    Tensor x = trunc_normal({3, 4}, DType::f64, rng, 1.0);
    Tensor first = slice_rows(x, 0, 1);
    Tensor y = answer_logits(x, Tensor(), h);
    Tensor ref = h.classifier(first);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(y.at(i), ref.at(i), 1e-12);
}

TEST(Head, QuestionContractIsEnforced) {
    std::mt19937_64 rng(3);
    AnswerHead vis = AnswerHead::init(HeadMode::visual_only, Pooling::mean, 4, 3, 2, DType::f64, rng);
    AnswerHead vpq =
        AnswerHead::init(HeadMode::visual_plus_question, Pooling::mean, 4, 3, 2, DType::f64, rng);
    Tensor x = trunc_normal({3, 4}, DType::f64, rng, 1.0);
    Tensor q = trunc_normal({3}, DType::f64, rng, 1.0);
    EXPECT_THROW(answer_logits(x, q, vis), std::invalid_argument);
    EXPECT_THROW(answer_logits(x, Tensor(), vpq), std::invalid_argument);
    Tensor with_q = answer_logits(x, q, vpq);
    Tensor pooled = add(mean_rows(x, 3), vpq.q_map(q.reshape({1, 3})));
    Tensor ref = vpq.classifier(pooled);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(with_q.at(i), ref.at(i), 1e-12);
}

TEST(Head, ProjectionChangesWidth) {
    std::mt19937_64 rng(4);
    ProjectionHead p = ProjectionHead::init(16, 32, DType::f64, rng);
    EXPECT_EQ(p.width(), 32u);
    EXPECT_EQ(project_features(Tensor::zeros({17, 16}, DType::f64), p).shape(), (Shape{17, 32}));
}

TEST(Registry, CountsEveryParameterOnce) {
    auto cfg = small_model(FusionMode::late, 2);
    QAViTModel m(cfg, small_vocab(), 1);
    const std::size_t c = 16, ct = 8, d2 = 24, t = 17, pd = 48, v = small_vocab().size();
    std::size_t expect = (pd * c + c) + c + t * c + 4 * block_params(c, 2) + 2 * c;
    expect += v * ct + 32 * ct + block_params(ct, 4) + 2 * ct;
    expect += 2 * ((ct * c + c) + (c * c + c));
    expect += 2 * (1 + c * c + c);
    expect += (c * d2 + d2) + (d2 * d2 + d2) + (d2 * 5 + 5);
    EXPECT_EQ(m.registry().total_count(), expect);

    std::set<const void*> seen;
    for (const auto& e : m.registry().entries()) EXPECT_TRUE(seen.insert(e.tensor.impl().get()).second) << e.name;
    for (const auto& e : m.registry().entries()) {
        bool frozen = e.name.starts_with("vit.");
        EXPECT_EQ(e.status == ParamStatus::frozen, frozen) << e.name;
        EXPECT_EQ(e.lr_group == LrGroup::projection_x100, e.name.starts_with("head.proj")) << e.name;
    }
    EXPECT_LT(m.registry().count(ParamStatus::trainable), m.registry().total_count());
    EXPECT_EQ(m.registry().to_csv().substr(0, 32), "name,status,lr_group,param_count");
}

TEST(Registry, FreezeIsIdempotentAndOptional) {
    auto cfg = small_model(FusionMode::late, 2);
    QAViTModel m(cfg, small_vocab(), 2);
    const std::string before = m.registry().to_csv();
    freeze_backbone(m.registry());
    EXPECT_EQ(m.registry().to_csv(), before);

    cfg.freeze_backbone = false;
    QAViTModel full(cfg, small_vocab(), 2);
    EXPECT_EQ(full.registry().count(ParamStatus::frozen), 0u);
}

TEST(Lora, IdentityAtInitAndScale) {
    std::mt19937_64 rng(5);
    ParameterRegistry reg;
    Linear l = Linear::init(32, 24, DType::f64, rng, true, 0.2);
    reg.add_linear("layer", l, ParamStatus::trainable);
    Tensor x = trunc_normal({100, 32}, DType::f64, rng, 1.0);
    Tensor before = l(x);
    const std::string target[] = {"layer.weight"};
    auto added = apply_lora(reg, target, 16, 32.0, 0.05, rng);
    EXPECT_EQ(added, (std::vector<std::string>{"layer.lora_a", "layer.lora_b"}));
    ASSERT_TRUE(l.lora);
    EXPECT_DOUBLE_EQ(l.lora->scale, 2.0);
    Tensor after = l(x);
    for (std::size_t i = 0; i < after.numel(); ++i) EXPECT_LE(std::abs(after.at(i) - before.at(i)), 1e-6);
    EXPECT_EQ(reg.at("layer.weight").status, ParamStatus::frozen);
    EXPECT_EQ(reg.at("layer.bias").status, ParamStatus::frozen);
    EXPECT_EQ(reg.at("layer.lora_a").status, ParamStatus::adapter);
}

TEST(Lora, ForwardIsBasePlusScaledLowRank) {
    std::mt19937_64 rng(6);
    ParameterRegistry reg;
    Linear l = Linear::init(6, 5, DType::f64, rng, true, 0.2);
    reg.add_linear("l", l, ParamStatus::trainable);
    const std::string target[] = {"l.weight"};
    apply_lora(reg, target, 2, 3.0, 0.0, rng);
    for (std::size_t i = 0; i < l.lora->b.numel(); ++i) l.lora->b.set(i, 0.1 * (i + 1));
    Tensor x = trunc_normal({3, 6}, DType::f64, rng, 1.0);
    Tensor y = l(x);
    const auto& a = l.lora->a;
    const auto& b = l.lora->b;
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t o = 0; o < 5; ++o) {
            double base = l.bias.at(o), low = 0;
            for (std::size_t k = 0; k < 6; ++k) base += l.weight.at(o * 6 + k) * x.at(n * 6 + k);
            for (std::size_t r = 0; r < 2; ++r) {
                double ax = 0;
                for (std::size_t k = 0; k < 6; ++k) ax += a.at(r * 6 + k) * x.at(n * 6 + k);
                low += b.at(o * 2 + r) * ax;
            }
            EXPECT_NEAR(y.at(n * 5 + o), base + 1.5 * low, 1e-12);
        }
}

TEST(Lora, RejectsBadTargets) {
    std::mt19937_64 rng(7);
    ParameterRegistry reg;
    Linear l = Linear::init(4, 4, DType::f64, rng);
    reg.add_linear("l", l, ParamStatus::trainable);
    reg.add("gate", Tensor::zeros({1}, DType::f64), ParamStatus::trainable);
    const std::string missing[] = {"nope.weight"}, gate[] = {"gate"}, bias[] = {"l.bias"},
                      ok[] = {"l.weight"};
    EXPECT_THROW(apply_lora(reg, missing, 2, 4, 0, rng), std::out_of_range);
    EXPECT_THROW(apply_lora(reg, gate, 2, 4, 0, rng), std::invalid_argument);
    EXPECT_THROW(apply_lora(reg, bias, 2, 4, 0, rng), std::invalid_argument);
    EXPECT_THROW(apply_lora(reg, ok, 5, 4, 0, rng), RangeError);
    EXPECT_THROW(apply_lora(reg, ok, 0, 4, 0, rng), RangeError);
    apply_lora(reg, ok, 2, 4, 0, rng);
    EXPECT_THROW(apply_lora(reg, ok, 2, 4, 0, rng), std::invalid_argument);
}

TEST(Lora, ModelAdaptersStartAsIdentity) {
    auto cfg = small_model(FusionMode::late, 2);
    QAViTModel plain(cfg, small_vocab(), 3);
    cfg.lora.targets = {"head.proj.fc1.weight", "head.proj.fc2.weight"};
    QAViTModel adapted(cfg, small_vocab(), 3);
    EXPECT_EQ(adapted.registry().count(ParamStatus::adapter), (16u * 16 + 24 * 16) + (16u * 24 + 24 * 16));
    std::mt19937_64 rng(8);
    std::vector<Tensor> imgs = {image(rng)};
    std::vector<QuestionTokens> qs = {tokenize("what color at 1 2", small_vocab())};
    ForwardContext ctx;
    Tensor a = plain.logits(imgs, qs, ctx), b = adapted.logits(imgs, qs, ctx);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_LE(std::abs(a.at(i) - b.at(i)), 1e-6);
}

TEST(VisualOnly, QuestionPathwayHasNoGradientWithoutFusion) {
    auto cfg = small_model(FusionMode::none, 0);
    QAViTModel m(cfg, small_vocab(), 4);
    std::mt19937_64 rng(9);
    std::vector<Tensor> imgs = {image(rng), image(rng)};
    std::vector<QuestionTokens> qs = {tokenize("what color at 0 1", m.vocab()),
                                      tokenize("what color at 3 3", m.vocab())};
    ForwardContext ctx;
    const std::size_t labels[] = {1, 3};
    backward(cross_entropy(m.logits(imgs, qs, ctx), labels));
    bool head_moved = false;
    for (auto& e : m.registry().entries()) {
        auto g = e.tensor.grad_vector();
        double mx = 0;
        for (double v : g) mx = std::max(mx, std::abs(v));
        if (e.name.starts_with("text.") || e.name.starts_with("proj.")) {
            EXPECT_EQ(mx, 0.0) << e.name;
        }
        if (e.name.starts_with("head.")) head_moved |= mx > 0;
    }
    EXPECT_TRUE(head_moved);
}

TEST(VisualOnly, LateFusionRoutesGradientToQuestionPathway) {
    auto cfg = small_model(FusionMode::late, 2);
    QAViTModel m(cfg, small_vocab(), 5);
    for (auto& [i, f] : m.fused) f.beta.set(0, 0.5);
    std::mt19937_64 rng(10);
    std::vector<Tensor> imgs = {image(rng)};
    std::vector<QuestionTokens> qs = {tokenize("what color at 0 1", m.vocab())};
    ForwardContext ctx;
    const std::size_t labels[] = {2};
    backward(cross_entropy(m.logits(imgs, qs, ctx), labels));
    double mx = 0;
    for (double v : m.registry().at("text.embed").tensor.grad_vector()) mx = std::max(mx, std::abs(v));
    EXPECT_GT(mx, 0.0);
}
