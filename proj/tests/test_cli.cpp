// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "qavit/checkpoint.hpp"
#include "qavit/config.hpp"
#include "qavit/run.hpp"

using namespace qavit;
namespace fs = std::filesystem;

namespace {

const char* tiny_config = R"({
  "seed": 3,
  "model": {
    "vit": {"image_size": 16, "patch_size": 4, "width": 16, "heads": 2, "depth": 3, "mlp_ratio": 2},
    "fusion": {"mode": "late", "L": 1},
    "text": {"width": 8, "depth": 1},
    "head": {"width": 16}
  },
  "train": {"total_steps": 3, "warmup_steps": 1, "batch_size": 2, "log_every": 1},
  "data": {"image_size": 16, "eval_samples": 8, "eval_tasks": ["color_at", "caption"]}
})";

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("qavit_test_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void put(const fs::path& p, const std::string& text) {
    std::ofstream(p, std::ios::binary) << text;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(QAVIT_CLI) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Bitwise CRC32 (reflected, poly 0xEDB88320).
std::uint32_t crc32_ref(std::string_view s) {
    std::uint32_t c = 0xFFFFFFFFu;
    for (unsigned char b : s) {
        c ^= b;
        for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
    }
    return ~c;
}

std::uint32_t le32(const std::string& s, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[at + i]);
    return v;
}

}  // namespace

TEST(Config, MalformedJsonNamesLineAndColumn) {
    try {
        parse_json_text("{\n  \"seed\": 1,\n  \"model\" {}\n}", "x.json");
        FAIL();
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("x.json"), std::string::npos) << msg;
        EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
        EXPECT_NE(msg.find("column"), std::string::npos) << msg;
    }
}

TEST(Config, SchemaAndCrossFieldErrors) {
    auto bad = [](const char* text) { return run_config_from_json(parse_json_text(text)); };
    EXPECT_THROW(bad(R"({"model": {"fusion": {"L": 9}}})"), ConfigError);
    EXPECT_THROW(bad(R"({"model": {"colour": 1}})"), ConfigError);
    EXPECT_THROW(bad(R"({"seed": "zero"})"), ConfigError);
    EXPECT_THROW(bad(R"({"model": {"fusion": {"mode": "middle"}}})"), ConfigError);
    EXPECT_THROW(bad(R"({"train": {"base_lr": -1}})"), ConfigError);
    EXPECT_THROW(bad(R"({"data": {"image_size": 24}})"), ConfigError);
    EXPECT_NO_THROW(bad(R"({"model": {"fusion": {"L": 6}}})"));
}

TEST(Config, CanonicalFormRoundTripsAndDigestIsStable) {
    const RunConfig a = run_config_from_json(parse_json_text(tiny_config));
    EXPECT_EQ(a.seed, 3u);
    EXPECT_EQ(a.model.vit.depth, 3u);
    EXPECT_EQ(a.train.total_steps, 3u);
    const RunConfig b = run_config_from_json(to_json(a));
    EXPECT_EQ(to_json(a), to_json(b));
    EXPECT_EQ(config_digest(a), config_digest(b));
    EXPECT_EQ(config_digest(a).size(), 16u);

    auto doc = to_json(a);
    doc["seed"] = 4;
    EXPECT_NE(config_digest(run_config_from_json(doc)), config_digest(a));

    // Published FNV-1a 64 vectors.
    EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
    EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Checkpoint, FramingMatchesLayoutAndCrc) {
    Tensor t = Tensor::from_values({2, 3}, {1.5, -2.0, 0.25, 4.0, 8.0, -0.5}, DType::f32);
    const std::string bytes = serialize_tensors({{"w", t}});
    ASSERT_EQ(bytes.substr(0, 4), "QAVT");
    EXPECT_EQ(le32(bytes, 4), checkpoint_version);
    EXPECT_EQ(le32(bytes, 8), 1u);
    // 12 header + 2 + 1 name + dtype + rank + 2 dims + 6 floats + crc
    EXPECT_EQ(bytes.size(), 12u + 3 + 2 + 8 + 24 + 4);
    const std::size_t body = bytes.size() - 4;
    EXPECT_EQ(le32(bytes, body), crc32_ref(std::string_view(bytes).substr(0, body)));
    auto back = parse_tensors(bytes);
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(back[0].name, "w");
    EXPECT_EQ(back[0].tensor.shape(), (Shape{2, 3}));
    EXPECT_EQ(back[0].tensor.to_vector(), t.to_vector());
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    const RunConfig cfg = run_config_from_json(parse_json_text(tiny_config));
    QAViTModel a(cfg.model, build_vocab(cfg.data), 1);
    QAViTModel b(cfg.model, build_vocab(cfg.data), 2);
    const std::string first = serialize_registry(a.registry());
    EXPECT_NE(first, serialize_registry(b.registry()));
    load_registry(first, b.registry());
    EXPECT_EQ(serialize_registry(b.registry()), first);

    const fs::path dir = scratch("roundtrip");
    write_file(dir / "m.ckpt", first);
    EXPECT_EQ(read_file(dir / "m.ckpt"), first);
}

TEST(Checkpoint, CorruptionAndMismatchAreDetected) {
    const RunConfig cfg = run_config_from_json(parse_json_text(tiny_config));
    QAViTModel a(cfg.model, build_vocab(cfg.data), 1);
    const std::string good = serialize_registry(a.registry());

    std::string flipped = good;
    flipped[good.size() / 2] ^= 0x10;
    EXPECT_THROW(parse_tensors(flipped), IntegrityError);
    EXPECT_THROW(load_registry(flipped, a.registry()), IntegrityError);
    EXPECT_THROW(parse_tensors(good.substr(0, good.size() - 9)), IntegrityError);
    std::string magic = good;
    magic[0] = 'X';
    EXPECT_THROW(parse_tensors(magic), IntegrityError);

    // Same names, different widths.
    RunConfig wide = cfg;
    wide.model.head_width = 24;
    QAViTModel c(wide.model, build_vocab(wide.data), 1);
    EXPECT_THROW(load_registry(good, c.registry()), ShapeError);
    // An archive with a parameter missing.
    auto tensors = parse_tensors(good);
    tensors.pop_back();
    EXPECT_THROW(load_registry(serialize_tensors(tensors), a.registry()), ShapeError);
}

TEST(RunDirectory, TrainWritesLoadableArtifacts) {
    const RunConfig cfg = run_config_from_json(parse_json_text(tiny_config));
    const fs::path dir = scratch("rundir");
    auto art = train_to_directory(cfg, dir);
    RunFiles f{dir};
    for (const auto& p : {f.model(), f.train_state(), f.loss(), f.registry(), f.vocab(), f.config()})
        EXPECT_TRUE(fs::exists(p)) << p;
    auto curve = parse_loss_csv(read_file(f.loss()));
    ASSERT_EQ(curve.size(), art.curve.size());
    for (std::size_t i = 0; i < curve.size(); ++i) {
        EXPECT_EQ(curve[i].step, art.curve[i].step);
        EXPECT_EQ(curve[i].task, art.curve[i].task);
        EXPECT_NEAR(curve[i].loss, art.curve[i].loss, 1e-6 * std::abs(art.curve[i].loss));
    }
    QAViTModel m(cfg.model, build_vocab(cfg.data), 77);
    load_model_checkpoint(m, f.model());
    EXPECT_EQ(serialize_registry(m.registry()), read_file(f.model()));
    EXPECT_EQ(config_digest(load_run_config(f.config())), config_digest(cfg));
}

TEST(Cli, ExitCodes) {
    const fs::path dir = scratch("exit");
    put(dir / "good.json", tiny_config);
    put(dir / "broken.json", "{\"seed\": 1,,}");
    put(dir / "deep.json", R"({"model": {"fusion": {"L": 9}}})");
    const std::string good = "--config " + (dir / "good.json").string();

    EXPECT_EQ(run_cli("train --config " + (dir / "broken.json").string()), 2);
    EXPECT_EQ(run_cli("train --config " + (dir / "deep.json").string()), 2);
    EXPECT_EQ(run_cli("train --config " + (dir / "missing.json").string()), 2);
    EXPECT_EQ(run_cli("train --bogus"), 2);

    ASSERT_EQ(run_cli("train " + good + " --out " + (dir / "run").string()), 0);
    const fs::path ckpt = dir / "run" / "model.ckpt";
    EXPECT_EQ(run_cli("eval " + good + " --checkpoint " + ckpt.string()), 0);
    EXPECT_EQ(run_cli("saliency " + good + " --checkpoint " + ckpt.string() + " --question 'color at r1 c2' --out " +
                      (dir / "s.pgm").string()),
              0);
    EXPECT_TRUE(fs::exists(dir / "s.pgm"));

    std::string bytes = read_file(ckpt);
    bytes[bytes.size() / 3] ^= 0x01;
    put(dir / "bad.ckpt", bytes);
    EXPECT_EQ(run_cli("eval " + good + " --checkpoint " + (dir / "bad.ckpt").string()), 4);
}

TEST(Cli, GradcheckPassesAndCatchesAnInjectedFault) {
    EXPECT_EQ(run_cli("gradcheck"), 0);
    EXPECT_EQ(run_cli("gradcheck --inject-fault gelu_sign_flip"), 7);
    EXPECT_EQ(run_cli("gradcheck --inject-fault nonsense"), 2);
}
