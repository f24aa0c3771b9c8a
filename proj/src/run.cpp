// SPDX-License-Identifier: Apache-2.0

#include "qavit/run.hpp"

#include <sstream>

#include "qavit/checkpoint.hpp"

namespace qavit {

namespace {

void save_state(const QAViTModel& model, const OptimizerState& opt,
                const std::vector<LossRecord>& curve, const RunFiles& files) {
    write_file(files.model(), serialize_registry(model.registry()));
    write_file(files.train_state(), serialize_optimizer(opt));
    write_file(files.loss(), loss_csv(curve));
}

}  // namespace

TrainedArtifact train_to_directory(const RunConfig& cfg, const std::filesystem::path& dir,
                                   bool resume, std::ostream* log) {
    const RunFiles files{dir};
    const std::string digest = config_digest(cfg);
    const Vocab vocab = build_vocab(cfg.data);
    QAViTModel model(cfg.model, vocab, cfg.seed);
    OptimizerState opt = OptimizerState::create(model.registry());
    std::vector<LossRecord> curve;

    if (resume && std::filesystem::exists(files.train_state())) {
        const RunConfig previous = load_run_config(files.config());
        if (config_digest(previous) != digest) {
            throw ConfigError("cannot resume: " + files.config().string() +
                              " belongs to a different configuration");
        }
        load_model_checkpoint(model, files.model());
        opt = parse_optimizer(read_file(files.train_state()), model.registry());
        for (const auto& r : parse_loss_csv(read_file(files.loss()))) {
            if (r.step <= opt.step) curve.push_back(r);
        }
        if (log) *log << "resuming at step " << opt.step << '\n';
    }

    auto config_text = to_json(cfg).dump(2);
    config_text += '\n';
    write_file(files.config(), config_text);
    write_file(files.vocab(), vocab.serialize());
    write_file(files.registry(), model.registry().to_csv());

    TrainRunOptions options;
    options.on_record = [&](const LossRecord& r) {
        curve.push_back(r);
        if (log) *log << "step " << r.step << ' ' << r.task << " loss " << r.loss << '\n';
    };
    const std::size_t every = cfg.checkpoint_every;
    TrainedArtifact artifact;
    while (opt.step < cfg.train.total_steps) {
        options.stop_at = every == 0 ? cfg.train.total_steps : (opt.step / every + 1) * every;
        auto part = train_run(model, cfg.mixture, cfg.data, cfg.train, opt, options);
        artifact.registry_audit = part.registry_audit;
        save_state(model, opt, curve, files);
    }
    save_state(model, opt, curve, files);
    artifact.curve = curve;
    artifact.steps = opt.step;
    if (artifact.registry_audit.empty()) {
        artifact.registry_audit = model.registry().to_csv();
    }
    return artifact;
}

void load_model_checkpoint(QAViTModel& model, const std::filesystem::path& path) {
    const auto vocab_path = path.parent_path() / "vocab.tsv";
    if (std::filesystem::exists(vocab_path)) {
        if (!(Vocab::parse(read_file(vocab_path)) == model.vocab())) {
            throw ShapeError("vocabulary next to " + path.string() +
                             " does not match the configuration");
        }
    }
    load_registry(read_file(path), model.registry());
}

std::vector<LossRecord> parse_loss_csv(std::string_view text) {
    std::vector<LossRecord> out;
    std::istringstream is{std::string(text)};
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string step, task, loss, lr;
        std::getline(fields, step, ',');
        std::getline(fields, task, ',');
        std::getline(fields, loss, ',');
        std::getline(fields, lr, ',');
        out.push_back({std::stoul(step), task, std::stod(loss), std::stod(lr)});
    }
    return out;
}

}  // namespace qavit
