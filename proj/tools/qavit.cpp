// SPDX-License-Identifier: Apache-2.0
//
// qavit: train, evaluate, ablate and inspect question-aware ViT models.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "qavit/checkpoint.hpp"
#include "qavit/eval.hpp"
#include "qavit/gradcheck_suite.hpp"
#include "qavit/run.hpp"

namespace {

using namespace qavit;

enum Exit : int {
    ok = 0,
    failure = 1,
    config_error = 2,
    numeric_error = 3,
    integrity_error = 4,
    shape_error = 5,
    budget_error = 6,
    gradcheck_error = 7,
};

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::size_t jobs = 1;
    bool resume = false;
    std::string checkpoint;
    std::uint64_t image_seed = 0;
    std::string question;
    std::optional<std::size_t> target;
    std::size_t upscale = 8;
    std::string split = "both";
    std::size_t count = 0;
    std::string fault;
};

bool deterministic() {
    const char* v = std::getenv("QAVIT_DETERMINISTIC");
    return v != nullptr && std::string(v) == "1";
}

// `--out` names the run directory only for commands that create one.
RunConfig load_config(const Options& o, bool out_is_run_dir = false) {
    RunConfig cfg = load_run_config(o.config);
    const bool set_out = out_is_run_dir && o.out;
    if (o.seed || set_out) {
        auto doc = to_json(cfg);
        if (o.seed) doc["seed"] = *o.seed;
        if (set_out) doc["out_dir"] = *o.out;
        cfg = run_config_from_json(doc);
    }
    return cfg;
}

// Model construction reports bad LoRA targets as argument errors; at this
// point they can only come from the configuration.
std::unique_ptr<QAViTModel> build_model(const RunConfig& cfg) {
    try {
        return std::make_unique<QAViTModel>(cfg.model, build_vocab(cfg.data), cfg.seed);
    } catch (const ShapeError&) {
        throw;
    } catch (const std::logic_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

int cmd_train(const Options& o) {
    const RunConfig cfg = load_config(o, true);
    build_model(cfg);
    const auto artifact = train_to_directory(cfg, cfg.out_dir, o.resume, &std::cerr);
    std::cout << "trained " << artifact.steps << " steps, config " << config_digest(cfg) << ", "
              << RunFiles{cfg.out_dir}.model().string() << '\n';
    return ok;
}

int cmd_eval(const Options& o) {
    const RunConfig cfg = load_config(o);
    auto model = build_model(cfg);
    load_model_checkpoint(*model, o.checkpoint);
    const EvalSet set = make_eval_set(cfg.data, model->vocab(), cfg.eval.tasks, cfg.eval.samples,
                                      cfg.seed, cfg.model.dtype);
    MetricsReport report = evaluate(*model, set);
    report.seed = cfg.seed;
    report.config_digest = config_digest(cfg);
    std::cout << report.to_json().dump() << '\n';
    return ok;
}

int cmd_ablate(const Options& o) {
    AblationSpec spec = load_ablation_spec(o.config);
    if (o.out) spec.base.out_dir = *o.out;
    const std::size_t jobs = deterministic() ? 1 : o.jobs;
    const auto result = run_ablation(spec, jobs, [](const AblationCell& cell) {
        const auto& cfg = cell.config;
        const auto t0 = std::chrono::steady_clock::now();
        train_to_directory(cfg, cfg.out_dir);
        QAViTModel model(cfg.model, build_vocab(cfg.data), cfg.seed);
        load_model_checkpoint(model, RunFiles{cfg.out_dir}.model());
        MetricsReport report = evaluate(
            model, make_eval_set(cfg.data, model.vocab(), cfg.eval.tasks, cfg.eval.samples,
                                 cfg.seed, cfg.model.dtype));
        report.seed = cfg.seed;
        report.config_digest = cell.digest;
        report.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_file(RunFiles{cfg.out_dir}.metrics(), report.to_json().dump(2) + "\n");
        return report;
    });
    const std::string csv = result.csv();
    write_file(std::filesystem::path(spec.base.out_dir) / "ablation.csv", csv);
    std::cout << csv;
    return ok;
}

int cmd_saliency(const Options& o) {
    const RunConfig cfg = load_config(o);
    auto model = build_model(cfg);
    load_model_checkpoint(*model, o.checkpoint);
    std::mt19937_64 rng = sample_rng(o.image_seed, 1, 0);
    const GridCells cells = sample_cells_balanced(cfg.data, rng);
    const Tensor image = render(cells, cfg.data, cfg.model.dtype);
    const QuestionTokens q = tokenize(o.question, model->vocab(), cfg.model.k_max);
    std::size_t target;
    if (o.target) {
        target = *o.target;
    } else {
        NoGradGuard no_grad;
        ForwardContext ctx;
        const Tensor images[] = {image};
        const QuestionTokens questions[] = {q};
        const auto logits = model->logits(images, questions, ctx).to_vector();
        target = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) -
                                          logits.begin());
    }
    const SaliencyMap map = saliency(*model, image, q, target);
    export_pgm(map, o.out.value_or("saliency.pgm"), o.upscale);
    std::cerr << "class " << target << ", config " << config_digest(cfg) << '\n';
    return ok;
}

int cmd_gradcheck(const Options& o) {
    if (o.fault == "gelu_sign_flip") {
        debug::set_gradient_fault(debug::GradientFault::gelu_sign_flip);
    } else if (!o.fault.empty()) {
        throw ConfigError("unknown fault '" + o.fault + "'");
    }
    const SuiteResult result = run_gradcheck_suite(o.seed.value_or(0));
    for (const auto& m : result.modules) {
        std::printf("%-12s %5zu coords  max rel err %.3e  %s\n", m.module.c_str(),
                    m.report.coordinates, m.report.max_rel_err, m.report.pass ? "ok" : "FAIL");
    }
    const auto& w = result.overall;
    std::printf("worst: %s[%zu] analytic %.9g numeric %.9g rel err %.3e over %zu coords\n",
                w.worst_param.c_str(), w.worst_index, w.worst_analytic, w.worst_numeric,
                w.max_rel_err, w.coordinates);
    std::printf("%s\n", w.pass ? "PASS" : "FAIL");
    return w.pass ? ok : gradcheck_error;
}

int cmd_gen_data(const Options& o) {
    const RunConfig cfg = load_config(o);
    const Vocab vocab = build_vocab(cfg.data);
    const std::filesystem::path dir = o.out.value_or(cfg.out_dir);
    auto dump = [&](std::uint32_t split, const char* name, std::size_t n) {
        std::string bytes;
        for (std::size_t i = 0; i < n; ++i) {
            // Splits follow the mixture in training and a uniform QA/caption
            // alternation for evaluation.
            const auto& entries = cfg.mixture.entries;
            std::mt19937_64 mix(derive_seed(cfg.seed, split * 0x100000000ULL + i));
            const auto& entry = split == 0 ? entries[sample_dataset(cfg.mixture, mix)]
                                           : entries[i % entries.size()];
            const Batch b = make_batch(entry, cfg.data, vocab, cfg.seed, split, i, 1);
            std::uint16_t answer = 0;
            if (b.caption) {
                for (std::size_t k = 0; k < cfg.data.colors; ++k) {
                    if (b.targets.at(k) > 0.5) answer |= static_cast<std::uint16_t>(1u << k);
                }
            } else {
                answer = static_cast<std::uint16_t>(b.labels[0]);
            }
            append_record(bytes, b.images[0], b.questions[0], answer);
        }
        write_file(dir / name, bytes);
        std::cout << (dir / name).string() << ": " << n << " records\n";
    };
    const std::size_t n_train = o.count ? o.count : cfg.train.total_steps * cfg.train.batch_size;
    const std::size_t n_eval = o.count ? o.count : cfg.eval.samples;
    if (o.split == "train" || o.split == "both") dump(0, "train.bin", n_train);
    if (o.split == "eval" || o.split == "both") dump(1, "eval.bin", n_eval);
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Question-aware vision transformer at desk scale"};
    app.require_subcommand(1);
    Options o;

    auto add_common = [&](CLI::App* sub, bool needs_config) {
        auto* c = sub->add_option("--config", o.config, "Run configuration (JSON)");
        if (needs_config) c->required();
        sub->add_option("--seed", o.seed, "Override the configured seed");
        sub->add_option("--out", o.out, "Output directory or file");
    };

    auto* train = app.add_subcommand("train", "Train a model and write its run directory");
    add_common(train, true);
    train->add_flag("--resume", o.resume, "Continue from the optimizer state in the run directory");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint; prints metrics JSON");
    add_common(eval, true);
    eval->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();

    auto* ablate = app.add_subcommand("ablate", "Run an ablation grid; prints the CSV table");
    add_common(ablate, true);
    ablate->add_option("--jobs", o.jobs, "Parallel cells")->check(CLI::PositiveNumber);

    auto* sal = app.add_subcommand("saliency", "Write a Grad-CAM map as a PGM image");
    add_common(sal, true);
    sal->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
    sal->add_option("--image-seed", o.image_seed, "Seed of the generated grid image");
    sal->add_option("--question", o.question, "Question text")->required();
    sal->add_option("--target", o.target, "Answer class (default: the prediction)");
    sal->add_option("--upscale", o.upscale, "Pixels per patch")->check(CLI::PositiveNumber);

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of all gradients");
    gc->add_option("--seed", o.seed, "Sampling seed");
    gc->add_option("--inject-fault", o.fault)->group("");

    auto* gen = app.add_subcommand("gen-data", "Dump generated samples as framed records");
    add_common(gen, true);
    gen->add_option("--split", o.split, "train, eval or both")
        ->check(CLI::IsMember({"train", "eval", "both"}));
    gen->add_option("--count", o.count, "Records per split");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return config_error;
    }

    try {
        if (*train) return cmd_train(o);
        if (*eval) return cmd_eval(o);
        if (*ablate) return cmd_ablate(o);
        if (*sal) return cmd_saliency(o);
        if (*gc) return cmd_gradcheck(o);
        if (*gen) return cmd_gen_data(o);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return config_error;
    } catch (const NumericFault& e) {
        std::cerr << "error: " << e.what() << '\n';
        return numeric_error;
    } catch (const IntegrityError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return integrity_error;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return shape_error;
    } catch (const RangeError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return shape_error;
    } catch (const BudgetError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return budget_error;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return failure;
    }
    return failure;
}
