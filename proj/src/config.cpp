// SPDX-License-Identifier: Apache-2.0

#include "qavit/config.hpp"

#include <algorithm>
#include <cstdio>

#include "qavit/checkpoint.hpp"

namespace qavit {

namespace detail {
extern const std::string_view run_config_schema_text;
extern const std::string_view ablation_schema_text;
}  // namespace detail

using nlohmann::json;

namespace {

std::string pointer_str(const std::string& path) { return path.empty() ? "/" : path; }

bool type_matches(const json& v, const std::string& type) {
    if (type == "object") return v.is_object();
    if (type == "array") return v.is_array();
    if (type == "string") return v.is_string();
    if (type == "boolean") return v.is_boolean();
    if (type == "integer") return v.is_number_integer();
    if (type == "number") return v.is_number();
    if (type == "null") return v.is_null();
    throw std::logic_error("schema uses unsupported type '" + type + "'");
}

const json& resolve(const json& schema, const json& root) {
    if (!schema.contains("$ref")) {
        return schema;
    }
    const std::string ref = schema.at("$ref").get<std::string>();
    if (ref.rfind("#/", 0) != 0) {
        throw std::logic_error("schema reference '" + ref + "' is not local");
    }
    return root.at(json::json_pointer(ref.substr(1)));
}

void check(const json& v, const json& node, const json& root, const std::string& path) {
    const json& s = resolve(node, root);
    auto fail = [&](const std::string& what) {
        throw ConfigError("config " + pointer_str(path) + ": " + what);
    };
    if (s.contains("type") && !type_matches(v, s.at("type").get<std::string>())) {
        fail("expected " + s.at("type").get<std::string>() + ", got " + v.type_name());
    }
    if (s.contains("enum")) {
        const auto& options = s.at("enum");
        if (std::find(options.begin(), options.end(), v) == options.end()) {
            fail(v.dump() + " is not one of " + options.dump());
        }
    }
    if (v.is_number()) {
        const double x = v.get<double>();
        if (s.contains("minimum") && x < s.at("minimum").get<double>()) {
            fail(v.dump() + " is below the minimum " + s.at("minimum").dump());
        }
        if (s.contains("maximum") && x > s.at("maximum").get<double>()) {
            fail(v.dump() + " is above the maximum " + s.at("maximum").dump());
        }
        if (s.contains("exclusiveMinimum") && x <= s.at("exclusiveMinimum").get<double>()) {
            fail(v.dump() + " must be greater than " + s.at("exclusiveMinimum").dump());
        }
        if (s.contains("exclusiveMaximum") && x >= s.at("exclusiveMaximum").get<double>()) {
            fail(v.dump() + " must be less than " + s.at("exclusiveMaximum").dump());
        }
    }
    if (v.is_string() && s.contains("minLength") &&
        v.get<std::string>().size() < s.at("minLength").get<std::size_t>()) {
        fail("string is shorter than " + s.at("minLength").dump());
    }
    if (v.is_array()) {
        if (s.contains("minItems") && v.size() < s.at("minItems").get<std::size_t>()) {
            fail("needs at least " + s.at("minItems").dump() + " items");
        }
        if (s.contains("items")) {
            for (std::size_t i = 0; i < v.size(); ++i) {
                check(v[i], s.at("items"), root, path + "/" + std::to_string(i));
            }
        }
    }
    if (v.is_object()) {
        if (s.contains("required")) {
            for (const auto& key : s.at("required")) {
                if (!v.contains(key.get<std::string>())) {
                    fail("missing required key \"" + key.get<std::string>() + "\"");
                }
            }
        }
        const json empty = json::object();
        const json& props = s.contains("properties") ? s.at("properties") : empty;
        const bool closed = s.contains("additionalProperties") &&
                            s.at("additionalProperties").is_boolean() &&
                            !s.at("additionalProperties").get<bool>();
        for (const auto& [key, value] : v.items()) {
            if (props.contains(key)) {
                check(value, props.at(key), root, path + "/" + key);
            } else if (closed) {
                fail("unknown key \"" + key + "\"");
            }
        }
    }
}

template <class T>
void read(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) {
        out = obj.at(key).get<T>();
    }
}

}  // namespace

const json& run_config_schema() {
    static const json schema = json::parse(detail::run_config_schema_text);
    return schema;
}

const json& ablation_schema() {
    static const json schema = json::parse(detail::ablation_schema_text);
    return schema;
}

json parse_json_text(std::string_view text, std::string_view source) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        // Byte offsets are 1-based and point one past the offending byte.
        const std::size_t end = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
        std::size_t line = 1, column = 1;
        for (std::size_t i = 0; i < end; ++i) {
            if (text[i] == '\n') {
                ++line;
                column = 1;
            } else {
                ++column;
            }
        }
        throw ConfigError(std::string(source) + ": line " + std::to_string(line) + ", column " +
                          std::to_string(column) + ": malformed JSON");
    }
}

void validate_against(const json& doc, const json& schema) { check(doc, schema, schema, ""); }

RunConfig run_config_from_json(const json& doc) {
    validate_against(doc, run_config_schema());
    RunConfig cfg;
    read(doc, "seed", cfg.seed);
    read(doc, "out_dir", cfg.out_dir);

    auto& m = cfg.model;
    const json none = json::object();
    const json& model = doc.value("model", none);
    const json& vit = model.value("vit", none);
    read(vit, "image_size", m.vit.image_size);
    read(vit, "patch_size", m.vit.patch_size);
    read(vit, "channels", m.vit.channels);
    read(vit, "depth", m.vit.depth);
    read(vit, "width", m.vit.width);
    read(vit, "heads", m.vit.heads);
    read(vit, "mlp_ratio", m.vit.mlp_ratio);
    read(vit, "init_std", m.vit.init_std);
    read(vit, "qk_init_std", m.vit.qk_init_std);
    read(vit, "pos_init_std", m.vit.pos_init_std);
    const json& fusion = model.value("fusion", none);
    if (fusion.contains("mode")) m.fusion_mode = parse_fusion_mode(fusion.at("mode").get<std::string>());
    read(fusion, "L", m.fusion_L);
    read(fusion, "layers", m.fusion_layers);
    const json& text = model.value("text", none);
    if (text.contains("source")) m.text_source = parse_text_source(text.at("source").get<std::string>());
    read(text, "width", m.text_width);
    read(text, "depth", m.text_depth);
    read(text, "heads", m.text_heads);
    read(text, "k_max", m.k_max);
    const json& head = model.value("head", none);
    if (head.contains("mode")) m.head_mode = parse_head_mode(head.at("mode").get<std::string>());
    if (head.contains("pooling")) m.pooling = parse_pooling(head.at("pooling").get<std::string>());
    read(head, "width", m.head_width);
    read(model, "prompt_tuning", m.prompt_tuning);
    read(model, "prompt", m.prompt);
    read(model, "freeze_backbone", m.freeze_backbone);
    const json& lora = model.value("lora", none);
    read(lora, "targets", m.lora.targets);
    read(lora, "rank", m.lora.rank);
    read(lora, "alpha", m.lora.alpha);
    read(lora, "dropout", m.lora.dropout);
    read(model, "fused_dropout", m.fused_dropout);
    if (model.contains("dtype")) {
        m.dtype = model.at("dtype").get<std::string>() == "f64" ? DType::f64 : DType::f32;
    }

    auto& t = cfg.train;
    const json& train = doc.value("train", none);
    read(train, "base_lr", t.base_lr);
    read(train, "projection_lr_multiplier", t.projection_lr_multiplier);
    read(train, "projection_lr_cap", t.projection_lr_cap);
    read(train, "warmup_steps", t.warmup_steps);
    read(train, "total_steps", t.total_steps);
    read(train, "batch_size", t.batch_size);
    read(train, "weight_decay", t.weight_decay);
    read(train, "adam_beta1", t.adam_beta1);
    read(train, "adam_beta2", t.adam_beta2);
    read(train, "adam_eps", t.adam_eps);
    read(train, "grad_clip", t.grad_clip);
    read(train, "qa_loss_weight", t.qa_loss_weight);
    read(train, "caption_loss_weight", t.caption_loss_weight);
    read(train, "log_every", t.log_every);
    read(train, "checkpoint_every", cfg.checkpoint_every);
    if (train.contains("mixture")) {
        cfg.mixture.entries.clear();
        for (const auto& e : train.at("mixture")) {
            cfg.mixture.entries.push_back({e.at("id").get<std::string>(), e.at("size").get<double>(),
                                           parse_data_kind(e.at("kind").get<std::string>())});
        }
    }

    const json& data = doc.value("data", none);
    read(data, "grid", cfg.data.grid);
    read(data, "colors", cfg.data.colors);
    read(data, "glyphs", cfg.data.glyphs);
    read(data, "image_size", cfg.data.image_size);
    read(data, "eval_samples", cfg.eval.samples);
    if (data.contains("eval_tasks")) {
        cfg.eval.tasks.clear();
        for (const auto& name : data.at("eval_tasks")) {
            cfg.eval.tasks.push_back(parse_task(name.get<std::string>()));
        }
    }

    // Cross-field rules the schema cannot express.
    t.seed = cfg.seed;
    cfg.data.seed = cfg.seed;
    m.answer_classes = 0;
    try {
        m.vit.validate();
        cfg.data.validate();
        t.validate();
        cfg.mixture.validate();
        m.answer_classes = answer_classes(cfg.data);
        plan_fusion(m.fusion_mode, m.vit.depth, m.fusion_L, m.fusion_layers);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (cfg.data.image_size != m.vit.image_size) {
        throw ConfigError("config: data.image_size " + std::to_string(cfg.data.image_size) +
                          " differs from model.vit.image_size " +
                          std::to_string(m.vit.image_size));
    }
    if (m.text_source == TextSource::tiny_encoder && m.text_width % m.text_heads != 0) {
        throw ConfigError("config: text width is not divisible by text heads");
    }
    if (m.lora.rank > 0 && !m.lora.targets.empty() && m.lora.alpha <= 0.0) {
        throw ConfigError("config: lora alpha must be positive");
    }
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    return run_config_from_json(parse_json_text(text, path.string()));
}

json to_json(const RunConfig& cfg) {
    const auto& m = cfg.model;
    const auto& t = cfg.train;
    json mixture = json::array();
    for (const auto& e : cfg.mixture.entries) {
        mixture.push_back({{"id", e.id}, {"size", e.size}, {"kind", data_kind_name(e.kind)}});
    }
    json tasks = json::array();
    for (auto task : cfg.eval.tasks) tasks.push_back(task_name(task));
    return {
        {"seed", cfg.seed},
        {"out_dir", cfg.out_dir},
        {"model",
         {{"vit",
           {{"image_size", m.vit.image_size},
            {"patch_size", m.vit.patch_size},
            {"channels", m.vit.channels},
            {"depth", m.vit.depth},
            {"width", m.vit.width},
            {"heads", m.vit.heads},
            {"mlp_ratio", m.vit.mlp_ratio},
            {"init_std", m.vit.init_std},
            {"qk_init_std", m.vit.qk_init_std},
            {"pos_init_std", m.vit.pos_init_std}}},
          {"fusion",
           {{"mode", fusion_mode_name(m.fusion_mode)},
            {"L", m.fusion_L},
            {"layers", m.fusion_layers}}},
          {"text",
           {{"source", text_source_name(m.text_source)},
            {"width", m.text_width},
            {"depth", m.text_depth},
            {"heads", m.text_heads},
            {"k_max", m.k_max}}},
          {"head",
           {{"mode", head_mode_name(m.head_mode)},
            {"pooling", pooling_name(m.pooling)},
            {"width", m.head_width}}},
          {"prompt_tuning", m.prompt_tuning},
          {"prompt", m.prompt},
          {"freeze_backbone", m.freeze_backbone},
          {"lora",
           {{"targets", m.lora.targets},
            {"rank", m.lora.rank},
            {"alpha", m.lora.alpha},
            {"dropout", m.lora.dropout}}},
          {"fused_dropout", m.fused_dropout},
          {"dtype", m.dtype == DType::f64 ? "f64" : "f32"}}},
        {"train",
         {{"base_lr", t.base_lr},
          {"projection_lr_multiplier", t.projection_lr_multiplier},
          {"projection_lr_cap", t.projection_lr_cap},
          {"warmup_steps", t.warmup_steps},
          {"total_steps", t.total_steps},
          {"batch_size", t.batch_size},
          {"weight_decay", t.weight_decay},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"adam_eps", t.adam_eps},
          {"grad_clip", t.grad_clip},
          {"qa_loss_weight", t.qa_loss_weight},
          {"caption_loss_weight", t.caption_loss_weight},
          {"log_every", t.log_every},
          {"checkpoint_every", cfg.checkpoint_every},
          {"mixture", mixture}}},
        {"data",
         {{"grid", cfg.data.grid},
          {"colors", cfg.data.colors},
          {"glyphs", cfg.data.glyphs},
          {"image_size", cfg.data.image_size},
          {"eval_samples", cfg.eval.samples},
          {"eval_tasks", tasks}}},
    };
}

std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string config_digest(const RunConfig& cfg) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a(to_json(cfg).dump())));
    return buf;
}

}  // namespace qavit
