// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "qavit/vit.hpp"

using namespace qavit;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
    Mat m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i * t.cols() + j);
    return m;
}

Mat affine(const Mat& x, const Linear& l) {
    Mat w = to_mat(l.weight);
    Mat y(x.size(), std::vector<double>(w.size()));
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t o = 0; o < w.size(); ++o) {
            double s = l.bias.defined() ? l.bias.at(o) : 0.0;
            for (std::size_t k = 0; k < w[o].size(); ++k) s += w[o][k] * x[i][k];
            y[i][o] = s;
        }
    return y;
}

// Self-attention written out per head and per query.
Mat brute_mhsa(const Mat& f, const BlockWeights& w, std::size_t heads) {
    Mat q = affine(f, w.q), k = affine(f, w.k), v = affine(f, w.v);
    const std::size_t n = f.size(), c = f[0].size(), d = c / heads;
    Mat out(n, std::vector<double>(c, 0.0));
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> s(n);
            double mx = -1e300;
            for (std::size_t j = 0; j < n; ++j) {
                double dot = 0;
                for (std::size_t e = 0; e < d; ++e) dot += q[i][h * d + e] * k[j][h * d + e];
                s[j] = dot / std::sqrt(static_cast<double>(d));
                mx = std::max(mx, s[j]);
            }
            double z = 0;
            for (auto& x : s) z += (x = std::exp(x - mx));
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t e = 0; e < d; ++e) out[i][h * d + e] += s[j] / z * v[j][h * d + e];
        }
    return affine(out, w.out);
}

ViTConfig small_vit() {
    ViTConfig c;
    c.image_size = 16;
    c.patch_size = 4;
    c.width = 16;
    c.heads = 4;
    c.depth = 3;
    c.mlp_ratio = 2;
    c.init_std = 0.2;
    return c;
}

Tensor random_image(const ViTConfig& c, std::mt19937_64& rng, DType dtype = DType::f64) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> v(c.channels * c.image_size * c.image_size);
    for (auto& x : v) x = u(rng);
    return Tensor::from_values({c.channels, c.image_size, c.image_size}, v, dtype);
}

}  // namespace

TEST(ViTConfig, DeskDefaultsHaveSeventeenTokens) {
    ViTConfig c;
    EXPECT_EQ(c.token_count(), 17u);
    EXPECT_EQ(c.patch_dim(), 192u);
    EXPECT_NO_THROW(c.validate());
}

TEST(ViTConfig, RejectsIndivisibleSizes) {
    ViTConfig c;
    c.patch_size = 7;
    EXPECT_THROW(c.validate(), ShapeError);
    c = ViTConfig{};
    c.heads = 5;
    EXPECT_THROW(c.validate(), ShapeError);
}

TEST(Patchify, RowsFollowRasterAndChannelMajorOrder) {
    ViTConfig c = small_vit();
    std::mt19937_64 rng(1);
    Tensor img = random_image(c, rng);
    Tensor p = patchify(img, c);
    ASSERT_EQ(p.shape(), (Shape{16, 48}));
    const std::size_t s = 16, ps = 4;
    for (std::size_t pr = 0; pr < 4; ++pr)
        for (std::size_t pc = 0; pc < 4; ++pc)
            for (std::size_t ch = 0; ch < 3; ++ch)
                for (std::size_t dy = 0; dy < ps; ++dy)
                    for (std::size_t dx = 0; dx < ps; ++dx) {
                        std::size_t row = pr * 4 + pc, col = ch * 16 + dy * 4 + dx;
                        EXPECT_EQ(p.at(row * 48 + col),
                                  img.at((ch * s + pr * ps + dy) * s + pc * ps + dx));
                    }
}

TEST(Patchify, WrongImageShapeThrows) {
    ViTConfig c = small_vit();
    EXPECT_THROW(patchify(Tensor::zeros({3, 8, 8}, DType::f64), c), ShapeError);
}

TEST(Embed, ClsRowThenProjectedPatchesPlusPositions) {
    ViTConfig c = small_vit();
    std::mt19937_64 rng(2);
    Backbone bb = Backbone::init(c, DType::f64, rng);
    Tensor img = random_image(c, rng);
    Tensor e = patchify_embed(img, bb.embed, c);
    ASSERT_EQ(e.shape(), (Shape{17, 16}));
    Mat proj = affine(to_mat(patchify(img, c)), bb.embed.proj);
    for (std::size_t j = 0; j < 16; ++j) {
        EXPECT_NEAR(e.at(j), bb.embed.cls.at(j) + bb.embed.pos.at(j), 1e-12);
        for (std::size_t r = 1; r < 17; ++r)
            EXPECT_NEAR(e.at(r * 16 + j), proj[r - 1][j] + bb.embed.pos.at(r * 16 + j), 1e-12);
    }
}

TEST(Mhsa, MatchesBruteForce) {
    std::mt19937_64 rng(3);
    for (std::size_t heads : {1u, 2u, 4u}) {
        BlockWeights w = BlockWeights::init(16, 2, DType::f64, rng, 0.3);
        Tensor f = trunc_normal({9, 16}, DType::f64, rng, 1.0);
        Tensor got = mhsa(f, w, heads);
        Mat ref = brute_mhsa(to_mat(f), w, heads);
        for (std::size_t i = 0; i < 9; ++i)
            for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(got.at(i * 16 + j), ref[i][j], 1e-10);
    }
}

TEST(Mhsa, AttentionRowsSumToOne) {
    std::mt19937_64 rng(4);
    BlockWeights w = BlockWeights::init(16, 2, DType::f64, rng, 0.3);
    Tensor f = trunc_normal({7, 16}, DType::f64, rng, 1.0);
    ForwardContext ctx;
    auto offs = uniform_offsets(1, 7);
    std::vector<std::vector<double>> probs;
    attention_core(w, f, f, 4, offs, offs, ctx, &probs);
    ASSERT_EQ(probs.size(), 4u);
    for (const auto& p : probs) {
        ASSERT_EQ(p.size(), 49u);
        for (std::size_t r = 0; r < 7; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < 7; ++c) s += p[r * 7 + c];
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Block, ResidualStructure) {
    std::mt19937_64 rng(5);
    BlockWeights w = BlockWeights::init(16, 2, DType::f64, rng, 0.3);
    Tensor f = trunc_normal({5, 16}, DType::f64, rng, 1.0);
    Tensor x = add(f, mhsa(w.ln1(f), w, 2));
    ForwardContext ctx;
    Tensor ref = add(x, w.mlp(w.ln2(x), ctx));
    Tensor got = vit_block(f, w, 2);
    for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got.at(i), ref.at(i), 1e-12);
}

TEST(Encoder, DepthZeroIsFinalLayernormOfEmbedding) {
    ViTConfig c = small_vit();
    c.depth = 0;
    std::mt19937_64 rng(6);
    Backbone bb = Backbone::init(c, DType::f64, rng);
    Tensor img = random_image(c, rng);
    Tensor ref = bb.ln_final(patchify_embed(img, bb.embed, c));
    EXPECT_EQ(encode_image(img, bb).to_vector(), ref.to_vector());
}

TEST(Encoder, BatchedEqualsSingle) {
    ViTConfig c = small_vit();
    std::mt19937_64 rng(7);
    Backbone bb = Backbone::init(c, DType::f64, rng);
    std::vector<Tensor> imgs = {random_image(c, rng), random_image(c, rng), random_image(c, rng)};
    ForwardContext ctx;
    Tensor batched = encode_images(imgs, bb, ctx);
    for (std::size_t b = 0; b < 3; ++b) {
        Tensor one = encode_image(imgs[b], bb);
        Tensor part = slice_rows(batched, b * 17, (b + 1) * 17);
        for (std::size_t i = 0; i < one.numel(); ++i) EXPECT_NEAR(part.at(i), one.at(i), 1e-12);
    }
}

TEST(Init, SameSeedSameWeightsAndStdOverrides) {
    ViTConfig c = small_vit();
    std::mt19937_64 r1(8), r2(8);
    Backbone a = Backbone::init(c, DType::f64, r1), b = Backbone::init(c, DType::f64, r2);
    EXPECT_EQ(a.blocks[2].mlp.fc2.weight.to_vector(), b.blocks[2].mlp.fc2.weight.to_vector());
    for (double v : a.blocks[0].q.bias.to_vector()) EXPECT_EQ(v, 0.0);
    for (double v : a.blocks[0].v.weight.to_vector()) EXPECT_LE(std::abs(v), 2 * c.init_std);

    c.init_std = 0.01;
    c.pos_init_std = 3.0;
    std::mt19937_64 r3(9);
    Backbone d = Backbone::init(c, DType::f64, r3);
    double pos_max = 0, w_max = 0;
    for (double v : d.embed.pos.to_vector()) pos_max = std::max(pos_max, std::abs(v));
    for (double v : d.blocks[0].q.weight.to_vector()) w_max = std::max(w_max, std::abs(v));
    EXPECT_GT(pos_max, 0.1);
    EXPECT_LE(w_max, 0.02);
}
