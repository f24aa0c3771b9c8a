// SPDX-License-Identifier: Apache-2.0

#include "qavit/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include "qavit/checkpoint.hpp"

namespace qavit {

using nlohmann::json;

std::size_t MetricsReport::n() const {
    std::size_t total = 0;
    for (const auto& [_, m] : tasks) total += m.n;
    return total;
}

namespace {

std::optional<double> pooled(const std::map<std::string, TaskMetrics>& tasks, bool captions) {
    std::size_t n = 0, correct = 0;
    for (const auto& [name, m] : tasks) {
        if ((name == task_name(TaskKind::caption)) == captions) {
            n += m.n;
            correct += m.correct;
        }
    }
    if (n == 0) {
        return std::nullopt;
    }
    return static_cast<double>(correct) / n;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

DataKind data_kind_of(TaskKind task) {
    switch (task) {
        case TaskKind::color_at: return DataKind::color_at;
        case TaskKind::glyph_at: return DataKind::glyph_at;
        case TaskKind::count_color: return DataKind::count_color;
        case TaskKind::caption: return DataKind::caption;
    }
    throw std::logic_error("unhandled task kind");
}

}  // namespace

std::optional<double> MetricsReport::qa_acc() const { return pooled(tasks, false); }
std::optional<double> MetricsReport::cap_acc() const { return pooled(tasks, true); }

json MetricsReport::to_json() const {
    json per_task = json::object();
    for (const auto& [name, m] : tasks) {
        per_task[name] = {{"n", m.n}, {"correct", m.correct}, {"accuracy", m.accuracy()}};
    }
    return {{"qa_acc", optional_json(qa_acc())},
            {"cap_acc", optional_json(cap_acc())},
            {"n", n()},
            {"tasks", per_task},
            {"seed", seed},
            {"config_digest", config_digest},
            {"wall_seconds", wall_seconds}};
}

std::size_t EvalSet::size() const {
    std::size_t total = 0;
    for (const auto& b : batches) total += b.size();
    return total;
}

EvalSet make_eval_set(const GridWorldSpec& spec, const Vocab& vocab,
                      std::span<const TaskKind> tasks, std::size_t samples_per_task,
                      std::uint64_t seed, DType dtype, std::size_t chunk) {
    if (chunk == 0) {
        throw std::invalid_argument("make_eval_set: chunk must be positive");
    }
    EvalSet set;
    for (auto task : tasks) {
        const MixtureEntry entry{std::string(task_name(task)), 1.0, data_kind_of(task)};
        // Each task reads its own index range of the evaluation split.
        const std::uint64_t base = static_cast<std::uint64_t>(task) << 32;
        for (std::size_t first = 0; first < samples_per_task; first += chunk) {
            const std::size_t count = std::min(chunk, samples_per_task - first);
            set.batches.push_back(make_batch(entry, spec, vocab, seed, 1, base + first, count, dtype));
        }
    }
    return set;
}

MetricsReport evaluate(const Predictor& predict, const EvalSet& set) {
    if (set.size() == 0) {
        throw std::invalid_argument("evaluate: empty evaluation set");
    }
    const auto start = std::chrono::steady_clock::now();
    MetricsReport report;
    for (const auto& batch : set.batches) {
        if (batch.size() == 0) {
            continue;
        }
        const Tensor logits = predict(batch);
        if (logits.rank() != 2 || logits.rows() != batch.size()) {
            throw ShapeError("evaluate: predictor returned " + shape_str(logits.shape()) + " for " +
                             std::to_string(batch.size()) + " samples");
        }
        auto& m = report.tasks[batch.dataset];
        const auto v = logits.to_vector();
        const std::size_t classes = logits.cols();
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const double* row = v.data() + i * classes;
            bool ok;
            if (batch.caption) {
                const std::size_t colors = batch.targets.cols();
                if (colors > classes) {
                    throw ShapeError("evaluate: caption targets wider than the logits");
                }
                ok = true;
                for (std::size_t k = 0; k < colors && ok; ++k) {
                    ok = (row[k] > 0.0) == (batch.targets.at(i * colors + k) > 0.5);
                }
            } else {
                ok = static_cast<std::size_t>(std::max_element(row, row + classes) - row) ==
                     batch.labels[i];
            }
            ++m.n;
            m.correct += ok ? 1 : 0;
        }
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

MetricsReport evaluate(const QAViTModel& model, const EvalSet& set) {
    NoGradGuard no_grad;
    return evaluate(
        [&](const Batch& b) {
            ForwardContext ctx;
            return model.logits(b.images, b.questions, ctx);
        },
        set);
}

SaliencyMap saliency_from_activations(const Tensor& activations, const Tensor& gradients,
                                      std::size_t grid) {
    if (activations.rank() != 2 || activations.shape() != gradients.shape() ||
        activations.rows() != grid * grid + 1) {
        throw ShapeError("saliency: activations " + shape_str(activations.shape()) +
                         " and gradients " + shape_str(gradients.shape()) +
                         " do not form one sample of a " + std::to_string(grid) + "x" +
                         std::to_string(grid) + " patch grid");
    }
    const std::size_t width = activations.cols();
    const auto a = activations.to_vector();
    const auto g = gradients.to_vector();
    SaliencyMap map{grid, grid, std::vector<double>(grid * grid, 0.0)};
    double peak = 0.0;
    for (std::size_t p = 0; p < grid * grid; ++p) {
        const std::size_t row = (p + 1) * width;
        double s = 0.0;
        for (std::size_t c = 0; c < width; ++c) s += a[row + c] * g[row + c];
        map.values[p] = std::max(0.0, s / static_cast<double>(width));
        peak = std::max(peak, map.values[p]);
    }
    if (peak > 0.0) {
        for (auto& v : map.values) v /= peak;
    }
    return map;
}

SaliencyMap saliency(const QAViTModel& model, const Tensor& image, const QuestionTokens& question,
                     std::size_t target_class) {
    const std::size_t classes = model.answer_head.classes();
    if (target_class >= classes) {
        throw RangeError("saliency: class " + std::to_string(target_class) + " out of range [0, " +
                         std::to_string(classes) + ")");
    }
    ForwardTrace trace;
    trace.capture = true;
    ForwardContext ctx;
    const Tensor images[] = {image};
    const QuestionTokens questions[] = {question};
    const Tensor logits = model.logits(images, questions, ctx, &trace);
    backward(sum(slice_cols(logits, target_class, target_class + 1)));
    SaliencyMap map = saliency_from_activations(
        trace.captured.detach(),
        Tensor::from_values(trace.captured.shape(), trace.captured.grad_vector(), DType::f64),
        model.config().vit.grid());
    for (const auto& e : model.registry().entries()) {
        Tensor handle = e.tensor;
        handle.zero_grad();
    }
    return map;
}

std::string encode_pgm(const SaliencyMap& map, std::size_t upscale) {
    if (upscale == 0) {
        throw std::invalid_argument("encode_pgm: upscale must be positive");
    }
    const std::size_t w = map.cols * upscale, h = map.rows * upscale;
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double v = std::clamp(map.at(y / upscale, x / upscale), 0.0, 1.0);
            out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
        }
    }
    return out;
}

void export_pgm(const SaliencyMap& map, const std::filesystem::path& path, std::size_t upscale) {
    write_file(path, encode_pgm(map, upscale));
}

AblationSpec ablation_from_json(const json& doc) {
    validate_against(doc, ablation_schema());
    AblationSpec spec;
    spec.base = run_config_from_json(doc.at("base"));
    spec.budget_steps = doc.at("budget_steps").get<std::size_t>();
    const json grid = doc.value("grid", json::object());
    auto strings = [&](const char* key) {
        return grid.contains(key) ? grid.at(key).get<std::vector<std::string>>()
                                  : std::vector<std::string>{};
    };
    for (const auto& s : strings("mode")) spec.axes.modes.push_back(parse_fusion_mode(s));
    for (const auto& s : strings("text_source")) spec.axes.text_sources.push_back(parse_text_source(s));
    for (const auto& s : strings("head_mode")) spec.axes.head_modes.push_back(parse_head_mode(s));
    if (grid.contains("L")) spec.axes.Ls = grid.at("L").get<std::vector<std::size_t>>();
    if (grid.contains("pt")) spec.axes.pt = grid.at("pt").get<std::vector<bool>>();
    if (grid.contains("freeze")) spec.axes.freeze = grid.at("freeze").get<std::vector<bool>>();
    if (grid.contains("seeds")) spec.axes.seeds = grid.at("seeds").get<std::vector<std::uint64_t>>();
    return spec;
}

AblationSpec load_ablation_spec(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    return ablation_from_json(parse_json_text(text, path.string()));
}

namespace {

template <class T>
std::vector<T> or_base(const std::vector<T>& axis, T base) {
    return axis.empty() ? std::vector<T>{base} : axis;
}

}  // namespace

std::vector<AblationCell> expand_cells(const AblationSpec& spec) {
    const auto& b = spec.base;
    std::vector<AblationCell> cells;
    for (auto mode : or_base(spec.axes.modes, b.model.fusion_mode)) {
        for (auto l : or_base(spec.axes.Ls, b.model.fusion_L)) {
            for (auto source : or_base(spec.axes.text_sources, b.model.text_source)) {
                for (auto head : or_base(spec.axes.head_modes, b.model.head_mode)) {
                    for (bool pt : or_base(spec.axes.pt, b.model.prompt_tuning)) {
                        for (bool freeze : or_base(spec.axes.freeze, b.model.freeze_backbone)) {
                            for (auto seed : or_base(spec.axes.seeds, b.seed)) {
                                json doc = to_json(b);
                                auto& m = doc["model"];
                                m["fusion"]["mode"] = fusion_mode_name(mode);
                                m["fusion"]["L"] = l;
                                m["text"]["source"] = text_source_name(source);
                                m["head"]["mode"] = head_mode_name(head);
                                m["prompt_tuning"] = pt;
                                m["freeze_backbone"] = freeze;
                                doc["seed"] = seed;
                                RunConfig cfg = run_config_from_json(doc);
                                cells.push_back({cfg, config_digest(cfg)});
                            }
                        }
                    }
                }
            }
        }
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            if (cells[i].digest == cells[j].digest) {
                throw ConfigError("ablation grid repeats a configuration (digest " +
                                  cells[i].digest + ")");
            }
        }
        cells[i].config.out_dir = (std::filesystem::path(b.out_dir) / ("cell-" + cells[i].digest)).string();
    }
    return cells;
}

MetricsReport run_cell(const RunConfig& cfg) {
    const auto start = std::chrono::steady_clock::now();
    const Vocab vocab = build_vocab(cfg.data);
    QAViTModel model(cfg.model, vocab, cfg.seed);
    OptimizerState opt = OptimizerState::create(model.registry());
    train_run(model, cfg.mixture, cfg.data, cfg.train, opt);
    const EvalSet set = make_eval_set(cfg.data, vocab, cfg.eval.tasks, cfg.eval.samples, cfg.seed,
                                      cfg.model.dtype);
    MetricsReport report = evaluate(model, set);
    report.seed = cfg.seed;
    report.config_digest = config_digest(cfg);
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

std::string AblationResult::csv() const {
    std::ostringstream os;
    os << "mode,L,text_source,head_mode,pt,freeze,seed,qa_acc,cap_acc,delta_vs_baseline\n";
    auto fmt = [](const std::optional<double>& v) {
        if (!v) return std::string();
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4f", *v);
        return std::string(buf);
    };
    for (const auto& row : rows) {
        const auto& m = row.cell.config.model;
        os << fusion_mode_name(m.fusion_mode) << ',' << m.fusion_L << ','
           << text_source_name(m.text_source) << ',' << head_mode_name(m.head_mode) << ','
           << (m.prompt_tuning ? 1 : 0) << ',' << (m.freeze_backbone ? 1 : 0) << ','
           << row.cell.config.seed << ',' << fmt(row.metrics.qa_acc()) << ','
           << fmt(row.metrics.cap_acc()) << ',' << fmt(row.delta_vs_baseline) << '\n';
    }
    return os.str();
}

AblationResult run_ablation(const AblationSpec& spec, std::size_t jobs, const CellRunner& runner) {
    const auto cells = expand_cells(spec);
    const std::size_t steps = spec.base.train.total_steps;
    if (steps != 0 && cells.size() > spec.budget_steps / steps) {
        throw BudgetError("ablation needs " + std::to_string(cells.size()) + " cells x " +
                          std::to_string(steps) + " steps but the budget is " +
                          std::to_string(spec.budget_steps) + " steps");
    }
    std::vector<MetricsReport> reports(cells.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            try {
                reports[i] = runner ? runner(cells[i]) : run_cell(cells[i].config);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next = cells.size();
            }
        }
    };
    jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(cells.size(), 1));
    std::vector<std::thread> pool;
    for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (failure) {
        std::rethrow_exception(failure);
    }

    auto score = [](const MetricsReport& r) {
        return r.qa_acc() ? *r.qa_acc() : r.cap_acc().value_or(0.0);
    };
    AblationResult result;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto& cfg = cells[i].config;
        std::optional<std::size_t> base, same_head, first;
        for (std::size_t j = 0; j < cells.size(); ++j) {
            const auto& other = cells[j].config;
            if (other.seed != cfg.seed) continue;
            if (!first) first = j;
            if (other.model.fusion_mode != FusionMode::none) continue;
            if (!base) base = j;
            if (!same_head && other.model.head_mode == cfg.model.head_mode) same_head = j;
        }
        const std::size_t ref = same_head ? *same_head : base ? *base : *first;
        result.rows.push_back({cells[i], reports[i], score(reports[i]) - score(reports[ref])});
    }
    std::stable_sort(result.rows.begin(), result.rows.end(), [&](const auto& a, const auto& b) {
        return score(a.metrics) > score(b.metrics);
    });
    return result;
}

}  // namespace qavit
