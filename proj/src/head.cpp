// SPDX-License-Identifier: Apache-2.0

#include "qavit/head.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace qavit {

ProjectionHead ProjectionHead::init(std::size_t in_width, std::size_t head_width, DType dtype,
                                    std::mt19937_64& rng) {
    return {MLP::init(in_width, head_width, head_width, dtype, rng)};
}

Tensor project_features(const Tensor& f_vq, const ProjectionHead& head, ForwardContext& ctx) {
    return head.mlp(f_vq, ctx);
}

Tensor project_features(const Tensor& f_vq, const ProjectionHead& head) {
    ForwardContext ctx;
    return project_features(f_vq, head, ctx);
}

std::string_view head_mode_name(HeadMode mode) {
    return mode == HeadMode::visual_only ? "visual_only" : "visual_plus_question";
}

HeadMode parse_head_mode(std::string_view name) {
    if (name == "visual_only") return HeadMode::visual_only;
    if (name == "visual_plus_question") return HeadMode::visual_plus_question;
    throw std::invalid_argument("unknown head mode '" + std::string(name) + "'");
}

std::string_view pooling_name(Pooling pooling) { return pooling == Pooling::mean ? "mean" : "cls"; }

Pooling parse_pooling(std::string_view name) {
    if (name == "mean") return Pooling::mean;
    if (name == "cls") return Pooling::cls;
    throw std::invalid_argument("unknown pooling '" + std::string(name) + "'");
}

AnswerHead AnswerHead::init(HeadMode mode, Pooling pooling, std::size_t head_width,
                            std::size_t text_width, std::size_t classes, DType dtype,
                            std::mt19937_64& rng) {
    AnswerHead h;
    h.mode = mode;
    h.pooling = pooling;
    if (mode == HeadMode::visual_plus_question) {
        h.q_map = Linear::init(text_width, head_width, dtype, rng);
    }
    h.classifier = Linear::init(head_width, classes, dtype, rng);
    return h;
}

Tensor answer_logits_batch(const Tensor& projected, std::size_t batch, const Tensor& q_pooled,
                           const AnswerHead& head, ForwardContext& ctx) {
    if (batch == 0 || projected.rank() != 2 || projected.rows() % batch != 0 ||
        projected.rows() == 0) {
        throw ShapeError("answer head: " + shape_str(projected.shape()) + " cannot split into " +
                         std::to_string(batch) + " samples");
    }
    const bool wants_question = head.mode == HeadMode::visual_plus_question;
    if (wants_question != q_pooled.defined()) {
        throw std::invalid_argument(wants_question
                                        ? "answer head in visual_plus_question mode needs a question"
                                        : "answer head in visual_only mode must not see the question");
    }
    const std::size_t m = projected.rows() / batch;
    Tensor pooled;
    if (head.pooling == Pooling::mean) {
        pooled = mean_rows(projected, m);
    } else {
        std::vector<std::size_t> ids(batch);
        for (std::size_t b = 0; b < batch; ++b) ids[b] = b * m;
        pooled = gather_rows(projected, ids);
    }
    if (wants_question) {
        if (q_pooled.rank() != 2 || q_pooled.rows() != batch) {
            throw ShapeError("answer head: pooled question " + shape_str(q_pooled.shape()) +
                             " does not have one row per sample");
        }
        pooled = add(pooled, head.q_map(q_pooled, ctx));
    }
    return head.classifier(pooled, ctx);
}

Tensor answer_logits(const Tensor& projected, const Tensor& q_embed, const AnswerHead& head) {
    ForwardContext ctx;
    Tensor q = q_embed;
    if (q.defined() && q.rank() == 1) {
        q = q.reshape({1, q.numel()});
    }
    return answer_logits_batch(projected, 1, q, head, ctx).reshape({head.classes()});
}

std::string_view status_name(ParamStatus status) {
    switch (status) {
        case ParamStatus::frozen: return "frozen";
        case ParamStatus::trainable: return "trainable";
        case ParamStatus::adapter: return "adapter";
    }
    return "frozen";
}

std::string_view lr_group_name(LrGroup group) {
    return group == LrGroup::base ? "base" : "projection_x100";
}

ParamEntry& ParameterRegistry::add(std::string name, Tensor tensor, ParamStatus status,
                                   LrGroup group, Linear* owner) {
    if (!tensor.defined()) {
        throw std::invalid_argument("registry: parameter '" + name + "' is undefined");
    }
    if (index_.contains(name)) {
        throw std::invalid_argument("registry: duplicate parameter '" + name + "'");
    }
    for (const auto& e : entries_) {
        if (e.tensor.impl() == tensor.impl()) {
            throw std::invalid_argument("registry: '" + name + "' aliases '" + e.name + "'");
        }
    }
    tensor.set_requires_grad(status != ParamStatus::frozen);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(tensor), status, group, owner});
    return entries_.back();
}

void ParameterRegistry::add_linear(const std::string& prefix, Linear& layer, ParamStatus status,
                                   LrGroup group) {
    add(prefix + ".weight", layer.weight, status, group, &layer);
    if (layer.bias.defined()) {
        add(prefix + ".bias", layer.bias, status, group);
    }
}

void ParameterRegistry::add_mlp(const std::string& prefix, MLP& mlp, ParamStatus status,
                                LrGroup group) {
    add_linear(prefix + ".fc1", mlp.fc1, status, group);
    add_linear(prefix + ".fc2", mlp.fc2, status, group);
}

bool ParameterRegistry::contains(std::string_view name) const { return index_.contains(name); }

ParamEntry& ParameterRegistry::at(std::string_view name) {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw std::out_of_range("registry: unknown parameter '" + std::string(name) + "'");
    }
    return entries_[it->second];
}

const ParamEntry& ParameterRegistry::at(std::string_view name) const {
    return const_cast<ParameterRegistry*>(this)->at(name);
}

void ParameterRegistry::set_status(std::string_view name, ParamStatus status) {
    auto& e = at(name);
    e.status = status;
    e.tensor.set_requires_grad(status != ParamStatus::frozen);
}

std::size_t ParameterRegistry::total_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
}

std::size_t ParameterRegistry::count(ParamStatus status) const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
        if (e.status == status) n += e.tensor.numel();
    }
    return n;
}

std::string ParameterRegistry::to_csv() const {
    std::ostringstream os;
    os << "name,status,lr_group,param_count\n";
    for (const auto& e : entries_) {
        os << e.name << ',' << status_name(e.status) << ',' << lr_group_name(e.lr_group) << ','
           << e.tensor.numel() << '\n';
    }
    return os.str();
}

std::vector<std::string> apply_lora(ParameterRegistry& registry,
                                    std::span<const std::string> target_names, std::size_t rank,
                                    double alpha, double dropout, std::mt19937_64& rng) {
    if (rank == 0) {
        throw RangeError("LoRA rank must be positive");
    }
    std::vector<std::string> added;
    for (const auto& target : target_names) {
        if (!registry.contains(target)) {
            throw std::out_of_range("LoRA target '" + target + "' is not a parameter");
        }
        auto& entry = registry.at(target);
        if (entry.owner == nullptr || entry.tensor.rank() != 2) {
            throw std::invalid_argument("LoRA target '" + target + "' is not a linear weight");
        }
        Linear& layer = *entry.owner;
        if (layer.lora) {
            throw std::invalid_argument("LoRA target '" + target + "' already has an adapter");
        }
        const std::size_t d_out = layer.out_features(), d_in = layer.in_features();
        if (rank > std::min(d_in, d_out)) {
            throw RangeError("LoRA rank " + std::to_string(rank) + " exceeds min(" +
                             std::to_string(d_in) + ", " + std::to_string(d_out) + ")");
        }
        const DType dtype = entry.tensor.dtype();
        const LrGroup group = entry.lr_group;
        auto adapter = std::make_shared<LoRAAdapter>();
        // Kaiming-uniform style A, zero B: the adapter starts as the identity.
        const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
        std::uniform_real_distribution<double> u(-bound, bound);
        adapter->a = Tensor::zeros({rank, d_in}, dtype);
        for (std::size_t i = 0; i < adapter->a.numel(); ++i) adapter->a.set(i, u(rng));
        adapter->b = Tensor::zeros({d_out, rank}, dtype);
        adapter->scale = alpha / static_cast<double>(rank);
        adapter->dropout = dropout;
        layer.lora = adapter;

        std::string base = target;
        if (base.ends_with(".weight")) base.resize(base.size() - 7);
        registry.set_status(target, ParamStatus::frozen);
        if (registry.contains(base + ".bias")) {
            registry.set_status(base + ".bias", ParamStatus::frozen);
        }
        registry.add(base + ".lora_a", adapter->a, ParamStatus::adapter, group);
        registry.add(base + ".lora_b", adapter->b, ParamStatus::adapter, group);
        added.push_back(base + ".lora_a");
        added.push_back(base + ".lora_b");
    }
    return added;
}

void freeze_backbone(ParameterRegistry& registry) {
    for (auto& e : registry.entries()) {
        if (e.name.starts_with("vit.")) {
            e.status = ParamStatus::frozen;
            e.tensor.set_requires_grad(false);
        }
    }
}

}  // namespace qavit
