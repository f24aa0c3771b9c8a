// SPDX-License-Identifier: Apache-2.0

#include "qavit/training.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace qavit {

void TrainConfig::validate() const {
    if (!(base_lr >= 0.0) || !(projection_lr_multiplier >= 0.0) || projection_lr_cap < 0.0) {
        throw std::invalid_argument("learning rates must be non-negative");
    }
    // A zero-step run only materializes the initialization.
    if (total_steps > 0 && warmup_steps > total_steps) {
        throw std::invalid_argument("warmup_steps exceeds total_steps");
    }
    if (batch_size == 0) {
        throw std::invalid_argument("batch_size must be positive");
    }
    if (weight_decay < 0.0 || adam_eps <= 0.0 || adam_beta1 < 0.0 || adam_beta1 >= 1.0 ||
        adam_beta2 < 0.0 || adam_beta2 >= 1.0 || grad_clip < 0.0) {
        throw std::invalid_argument("invalid optimizer hyperparameters");
    }
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
    if (step > cfg.total_steps) {
        throw RangeError("step " + std::to_string(step) + " is past total_steps " +
                         std::to_string(cfg.total_steps));
    }
    const double base = cfg.base_lr;
    if (step < cfg.warmup_steps) {
        return base * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    }
    if (cfg.total_steps == cfg.warmup_steps) {
        return base;
    }
    const double min_lr = 0.01 * base;
    const double t = static_cast<double>(step - cfg.warmup_steps) /
                     static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    return min_lr + 0.5 * (base - min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

double group_lr(double lr, LrGroup group, const TrainConfig& cfg) {
    if (group == LrGroup::base) {
        return lr;
    }
    const double scaled = lr * cfg.projection_lr_multiplier;
    return cfg.projection_lr_cap > 0.0 ? std::min(scaled, cfg.projection_lr_cap) : scaled;
}

std::string_view data_kind_name(DataKind kind) {
    switch (kind) {
        case DataKind::color_at: return "color_at";
        case DataKind::glyph_at: return "glyph_at";
        case DataKind::count_color: return "count_color";
        case DataKind::qa: return "qa";
        case DataKind::caption: return "caption";
    }
    return "qa";
}

DataKind parse_data_kind(std::string_view name) {
    for (auto k : {DataKind::color_at, DataKind::glyph_at, DataKind::count_color, DataKind::qa,
                   DataKind::caption}) {
        if (data_kind_name(k) == name) return k;
    }
    throw std::invalid_argument("unknown data kind '" + std::string(name) + "'");
}

void MixtureSpec::validate() const {
    if (entries.empty()) {
        throw std::invalid_argument("mixture is empty");
    }
    for (const auto& e : entries) {
        if (!(e.size > 0.0) || !std::isfinite(e.size)) {
            throw std::invalid_argument("mixture entry '" + e.id + "' needs a positive size");
        }
    }
}

std::vector<double> MixtureSpec::probabilities() const {
    validate();
    double total = 0.0;
    for (const auto& e : entries) total += e.size;
    std::vector<double> p;
    for (const auto& e : entries) p.push_back(e.size / total);
    return p;
}

std::size_t sample_dataset(const MixtureSpec& mixture, std::mt19937_64& rng) {
    const auto p = mixture.probabilities();
    const double u = std::generate_canonical<double, 53>(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < p.size(); ++i) {
        acc += p[i];
        if (u < acc) return i;
    }
    return p.size() - 1;
}

Batch make_batch(const MixtureEntry& entry, const GridWorldSpec& spec, const Vocab& vocab,
                 std::uint64_t seed, std::uint32_t split, std::uint64_t first, std::size_t count,
                 DType dtype) {
    Batch b;
    b.dataset = entry.id;
    b.caption = entry.kind == DataKind::caption;
    std::vector<double> targets;
    for (std::size_t j = 0; j < count; ++j) {
        auto rng = sample_rng(seed, split, first + j);
        if (b.caption) {
            auto s = gen_caption_sample(spec, vocab, rng);
            b.images.push_back(dtype == DType::f32 ? s.image : s.image.to(dtype));
            b.questions.push_back(std::move(s.instruction));
            targets.insert(targets.end(), s.target.begin(), s.target.end());
        } else {
            std::optional<TaskKind> task;
            if (entry.kind == DataKind::color_at) task = TaskKind::color_at;
            if (entry.kind == DataKind::glyph_at) task = TaskKind::glyph_at;
            if (entry.kind == DataKind::count_color) task = TaskKind::count_color;
            auto s = gen_qa_sample(spec, vocab, rng, task);
            b.images.push_back(dtype == DType::f32 ? s.image : s.image.to(dtype));
            b.questions.push_back(std::move(s.question));
            b.labels.push_back(s.answer_id);
        }
    }
    if (b.caption) {
        b.targets = Tensor::from_values({count, spec.colors}, targets, dtype);
    }
    return b;
}

Batch training_batch(const MixtureSpec& mixture, const GridWorldSpec& spec, const Vocab& vocab,
                     const TrainConfig& cfg, std::size_t step, DType dtype) {
    std::mt19937_64 mix_rng(derive_seed(cfg.seed, 0x6d6978ULL + step * 0x10001ULL));
    const auto& entry = mixture.entries[sample_dataset(mixture, mix_rng)];
    return make_batch(entry, spec, vocab, cfg.seed, 0,
                      static_cast<std::uint64_t>(step) * cfg.batch_size, cfg.batch_size, dtype);
}

OptimizerState OptimizerState::create(const ParameterRegistry& registry) {
    OptimizerState s;
    for (const auto& e : registry.entries()) {
        if (e.optimized()) {
            s.slots[e.name] = {std::vector<double>(e.tensor.numel(), 0.0),
                               std::vector<double>(e.tensor.numel(), 0.0)};
        }
    }
    return s;
}

Tensor batch_loss(const QAViTModel& model, const Batch& batch, const TrainConfig& cfg,
                  ForwardContext& ctx) {
    Tensor logits = model.logits(batch.images, batch.questions, ctx);
    if (batch.caption) {
        const std::size_t colors = batch.targets.cols();
        return scale(bce_with_logits(slice_cols(logits, 0, colors), batch.targets),
                     cfg.caption_loss_weight);
    }
    return scale(cross_entropy(logits, batch.labels), cfg.qa_loss_weight);
}

namespace {

bool decays(const ParamEntry& e) {
    return e.tensor.rank() == 2 &&
           (e.name.ends_with(".weight") || e.name.ends_with(".lora_a") ||
            e.name.ends_with(".lora_b"));
}

}  // namespace

void adamw_update(Tensor& param, std::span<const double> grad, AdamSlot& slot, double rate,
                  double weight_decay, std::size_t step, const TrainConfig& cfg) {
    if (grad.size() != param.numel() || slot.m.size() != param.numel() ||
        slot.v.size() != param.numel()) {
        throw ShapeError("adamw_update: gradient or moments do not match the parameter");
    }
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
    dispatch(param.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto w = param.values<T>();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double g = grad[i];
            slot.m[i] = cfg.adam_beta1 * slot.m[i] + (1.0 - cfg.adam_beta1) * g;
            slot.v[i] = cfg.adam_beta2 * slot.v[i] + (1.0 - cfg.adam_beta2) * g * g;
            const double mhat = slot.m[i] / bc1, vhat = slot.v[i] / bc2;
            const double delta = rate * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + weight_decay * w[i]);
            w[i] = static_cast<T>(w[i] - delta);
        }
    });
}

double train_step(QAViTModel& model, const Batch& batch, OptimizerState& opt,
                  const TrainConfig& cfg) {
    auto& entries = model.registry().entries();
    for (auto& e : entries) e.tensor.zero_grad();

    const std::size_t step = opt.step + 1;
    std::mt19937_64 dropout_rng(derive_seed(cfg.seed, 0xd50ULL + step * 0x10001ULL));
    ForwardContext ctx{true, &dropout_rng};
    double loss_value = 0.0;
    try {
        Tensor loss = batch_loss(model, batch, cfg, ctx);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
            throw NumericFault("non-finite loss");
        }
        backward(loss);
    } catch (const NumericFault& e) {
        throw NumericFault("step " + std::to_string(step) + ": " + e.what());
    }

    double sq = 0.0;
    for (auto& e : entries) {
        if (!e.optimized() || !e.tensor.has_grad()) continue;
        for (double g : e.tensor.grad_vector()) sq += g * g;
    }
    if (!std::isfinite(sq)) {
        throw NumericFault("step " + std::to_string(step) + ": non-finite gradient");
    }
    const double norm = std::sqrt(sq);
    const double clip = cfg.grad_clip > 0.0 && norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;

    const double lr = lr_at(step, cfg);
    for (auto& e : entries) {
        if (!e.optimized()) continue;
        auto it = opt.slots.find(e.name);
        if (it == opt.slots.end()) {
            throw std::logic_error("optimizer has no state for '" + e.name + "'");
        }
        auto grad = e.tensor.has_grad() ? e.tensor.grad_vector()
                                        : std::vector<double>(e.tensor.numel(), 0.0);
        for (double& g : grad) g *= clip;
        adamw_update(e.tensor, grad, it->second, group_lr(lr, e.lr_group, cfg),
                     decays(e) ? cfg.weight_decay : 0.0, step, cfg);
    }
    for (auto& e : entries) e.tensor.zero_grad();
    opt.step = step;
    return loss_value;
}

TrainedArtifact train_run(QAViTModel& model, const MixtureSpec& mixture, const GridWorldSpec& spec,
                          const TrainConfig& cfg, OptimizerState& opt,
                          const TrainRunOptions& options) {
    cfg.validate();
    mixture.validate();
    const std::size_t stop = std::min(options.stop_at, cfg.total_steps);
    TrainedArtifact art;
    while (opt.step < stop) {
        Batch batch = training_batch(mixture, spec, model.vocab(), cfg, opt.step,
                                     model.config().dtype);
        const double loss = train_step(model, batch, opt, cfg);
        const std::size_t s = opt.step;
        if ((cfg.log_every > 0 && s % cfg.log_every == 0) || s == cfg.total_steps) {
            LossRecord rec{s, batch.dataset, loss, lr_at(s, cfg)};
            if (options.on_record) options.on_record(rec);
            art.curve.push_back(std::move(rec));
        }
    }
    art.steps = opt.step;
    art.registry_audit = model.registry().to_csv();
    return art;
}

std::string loss_csv(const std::vector<LossRecord>& curve) {
    std::ostringstream os;
    os.precision(9);
    os << "step,task,loss,lr\n";
    for (const auto& r : curve) {
        os << r.step << ',' << r.task << ',' << r.loss << ',' << r.lr << '\n';
    }
    return os.str();
}

}  // namespace qavit
