// SPDX-License-Identifier: Apache-2.0

#include "qavit/gradcheck_suite.hpp"

#include <cmath>
#include <random>

#include "qavit/layers.hpp"
#include "qavit/model.hpp"
#include "qavit/ops.hpp"
#include "qavit/synthetic.hpp"

namespace qavit {

namespace {

Tensor random_f64(Shape shape, std::mt19937_64& rng, double std = 1.0) {
    Tensor t = trunc_normal(std::move(shape), DType::f64, rng, std);
    t.set_requires_grad(true);
    return t;
}

void add_entry(SuiteResult& out, std::string module, const GradcheckReport& r) {
    merge_reports(out.overall, r);
    out.modules.push_back({std::move(module), r});
}

void check_ops(SuiteResult& out, std::uint64_t seed, double tol) {
    std::mt19937_64 rng(seed);
    Tensor x = random_f64({5, 6}, rng);
    Tensor gamma = random_f64({6}, rng), beta = random_f64({6}, rng);
    Tensor w = random_f64({4, 6}, rng, 0.5), b = random_f64({4}, rng);
    Tensor s = random_f64({1}, rng);
    Tensor table = random_f64({7, 4}, rng);
    Tensor m = random_f64({6, 3}, rng);
    const std::size_t labels[] = {0, 3, 1, 2, 3};
    const std::size_t ids[] = {6, 0, 6, 2, 5};
    const std::size_t segments[] = {0, 2, 5};
    const Tensor targets = Tensor::from_values(
        {5, 4}, {1, 0, 0, 1, 0, 1, 1, 0, 1, 1, 0, 0, 0, 0, 1, 1, 1, 0, 1, 0}, DType::f64);
    auto f = [&] {
        Tensor h = gelu(layernorm(x, gamma, beta));
        Tensor logits = add(linear(h, w, b), gather_rows(table, ids));
        Tensor loss = cross_entropy(logits, labels);
        loss = add(loss, bce_with_logits(scale_by(tanh(logits), s), targets));
        Tensor p = softmax_rows(concat_rows(slice_rows(x, 0, 2), slice_rows(x, 2, 5)));
        loss = add(loss, mean(mul(p, sub(x, scale(x, 0.5)))));
        loss = add(loss, sum(segment_mean_rows(slice_cols(logits, 1, 3), segments)));
        return add(loss, sum(mean_rows(matmul(h, m), 5)));
    };
    const NamedTensor params[] = {{"ops.x", x},         {"ops.gamma", gamma}, {"ops.beta", beta},
                                  {"ops.w", w},         {"ops.b", b},         {"ops.s", s},
                                  {"ops.table", table}, {"ops.m", m}};
    add_entry(out, "ops", gradcheck(f, params, {1e-5, 400, tol, seed}));
}

void check_attention(SuiteResult& out, std::uint64_t seed, double tol) {
    std::mt19937_64 rng(seed + 1);
    Tensor q = random_f64({7, 8}, rng), k = random_f64({9, 8}, rng), v = random_f64({9, 8}, rng);
    const Tensor r = trunc_normal({7, 8}, DType::f64, rng, 1.0);
    const std::size_t q_off[] = {0, 3, 7};
    const std::size_t kv_off[] = {0, 5, 9};
    auto f = [&] { return sum(mul(attention(q, k, v, 2, q_off, kv_off), r)); };
    const NamedTensor params[] = {{"attention.q", q}, {"attention.k", k}, {"attention.v", v}};
    add_entry(out, "attention", gradcheck(f, params, {1e-5, 400, tol, seed}));
}

struct ModelCase {
    std::string name;
    ModelConfig config;
    std::size_t samples_per_group;
};

void check_model(SuiteResult& out, const ModelCase& mc, std::uint64_t seed, double tol) {
    GridWorldSpec spec;
    spec.image_size = mc.config.vit.image_size;
    ModelConfig cfg = mc.config;
    cfg.answer_classes = answer_classes(spec);
    cfg.dtype = DType::f64;
    const Vocab vocab = build_vocab(spec);
    QAViTModel model(cfg, vocab, seed);

    std::mt19937_64 rng(derive_seed(seed, 0x6763));
    // At the training init most gradients are tiny and central differences
    // drown in rounding noise, so redraw every parameter at unit-gain scale.
    // Gates are opened and adapters get a non-zero up-projection so every
    // path carries gradient.
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& e : model.registry().entries()) {
        Tensor& t = e.tensor;
        const bool matrix = t.rank() == 2;
        const double std = matrix ? 1.0 / std::sqrt(static_cast<double>(t.cols())) : 0.2;
        const double offset = e.name.ends_with(".gamma") ? 1.0 : 0.0;
        for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, offset + std * normal(rng));
        if (e.name.ends_with(".beta") && e.name.starts_with("fuse.")) t.set(0, 0.5);
        t.set_requires_grad(true);
    }

    std::vector<Tensor> images, cap_images;
    std::vector<QuestionTokens> questions, instructions;
    std::vector<std::size_t> labels;
    std::vector<double> targets;
    for (std::size_t i = 0; i < 2; ++i) {
        auto s = gen_qa_sample(spec, vocab, rng);
        images.push_back(s.image.to(DType::f64));
        questions.push_back(s.question);
        labels.push_back(s.answer_id);
        auto c = gen_caption_sample(spec, vocab, rng);
        cap_images.push_back(c.image.to(DType::f64));
        instructions.push_back(c.instruction);
        targets.insert(targets.end(), c.target.begin(), c.target.end());
    }
    const Tensor target_t = Tensor::from_values({2, spec.colors}, targets, DType::f64);
    auto f = [&] {
        ForwardContext ctx;
        Tensor qa = cross_entropy(model.logits(images, questions, ctx), labels);
        Tensor cap = model.logits(cap_images, instructions, ctx);
        return add(qa, bce_with_logits(slice_cols(cap, 0, spec.colors), target_t));
    };

    const char* groups[] = {"vit.", "text.", "proj.", "fuse.", "lora", "head."};
    for (const char* g : groups) {
        std::vector<NamedTensor> params;
        for (const auto& e : model.registry().entries()) {
            const bool lora = e.name.find(".lora_") != std::string::npos;
            const bool match = std::string_view(g) == "lora" ? lora : (!lora && e.name.starts_with(g));
            // A key bias shifts every score of a query row equally, so its
            // true gradient is zero and only rounding noise would be compared.
            if (match && !e.name.ends_with(".attn.k.bias")) params.push_back({e.name, e.tensor});
        }
        if (params.empty()) continue;
        std::string module = mc.name + "/" + g;
        if (module.back() == '.') module.pop_back();
        add_entry(out, module, gradcheck(f, params, {1e-5, mc.samples_per_group, tol, seed}));
    }
}

}  // namespace

SuiteResult run_gradcheck_suite(std::uint64_t seed, double tolerance) {
    SuiteResult out;
    check_ops(out, seed, tolerance);
    check_attention(out, seed, tolerance);

    ModelConfig base;
    base.vit.image_size = 16;
    base.vit.patch_size = 4;
    base.vit.width = 16;
    base.vit.heads = 2;
    base.vit.depth = 4;
    base.vit.mlp_ratio = 2;
    base.text_width = 8;
    base.text_depth = 1;
    base.head_width = 16;
    base.freeze_backbone = false;

    ModelCase late{"late", base, 800};
    late.config.head_mode = HeadMode::visual_plus_question;
    late.config.lora.targets = {"vit.blocks.3.attn.q.weight", "vit.blocks.3.attn.k.weight",
                                "head.proj.fc1.weight"};
    late.config.lora.rank = 4;
    late.config.lora.alpha = 8.0;
    late.config.lora.dropout = 0.0;
    check_model(out, late, seed, tolerance);

    ModelCase all{"all", base, 300};
    all.config.vit.depth = 3;
    all.config.fusion_mode = FusionMode::all;
    all.config.text_source = TextSource::embedding_only;
    all.config.pooling = Pooling::cls;
    all.config.prompt_tuning = true;
    check_model(out, all, seed + 7, tolerance);
    return out;
}

}  // namespace qavit
