// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "qavit/tensor.hpp"

namespace qavit {

// Differentiable operations. All shapes are checked; mismatches raise
// ShapeError. Binary operations require identical dtypes.

Tensor matmul(const Tensor& a, const Tensor& b);

/// x[m×in] · weightᵀ + bias, with weight stored as [out×in]. `bias` may be
/// undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// x * s where s is a one-element tensor (gradient flows to both).
Tensor scale_by(const Tensor& x, const Tensor& s);
/// x[m×n] + b[n] broadcast over rows.
Tensor add_row(const Tensor& x, const Tensor& b);
/// x[(g·r)×n] + t[r×n], tiling t over the g row groups.
Tensor add_tiled(const Tensor& x, const Tensor& t);

Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);
/// Inverted dropout. Identity when `train` is false or p == 0.
Tensor dropout(const Tensor& x, double p, bool train, std::mt19937_64& rng);

Tensor softmax_rows(const Tensor& x);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t end);
/// Rows of `table` selected by `ids`; gradient scatter-adds into the table.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean over each consecutive group of `group` rows: [(g·r)×n] -> [g×n].
Tensor mean_rows(const Tensor& x, std::size_t group);
/// Mean over uneven row segments given by prefix offsets (size segments+1).
Tensor segment_mean_rows(const Tensor& x, std::span<const std::size_t> offsets);

/// Mean softmax cross-entropy over rows of logits[b×v].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);
/// Mean sigmoid binary cross-entropy over all entries.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

/// Segmented multi-head scaled dot-product attention.
///
/// Segment s lets query rows [q_offsets[s], q_offsets[s+1]) attend to the
/// key/value rows [kv_offsets[s], kv_offsets[s+1]). Heads split the width
/// evenly; scores are scaled by 1/sqrt(width/heads). Output has the shape of
/// `q` and is the head concatenation before any output projection. If
/// `probs_out` is given it receives, per segment and head, the row-major
/// attention matrices in segment-major order.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const std::size_t> q_offsets, std::span<const std::size_t> kv_offsets,
                 std::vector<std::vector<double>>* probs_out = nullptr);

/// Offsets {0, n, 2n, ...} for `count` equal segments of `n` rows.
std::vector<std::size_t> uniform_offsets(std::size_t count, std::size_t n);

namespace debug {

/// Fault injection for mutation testing of the gradient checker.
enum class GradientFault : std::uint8_t { none, gelu_sign_flip };
void set_gradient_fault(GradientFault fault);
GradientFault gradient_fault();

}  // namespace debug

}  // namespace qavit
