// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "qavit/vit.hpp"

namespace qavit {

/// Token vocabulary with reserved ids pad = 0 and unk = 1.
class Vocab {
  public:
    static constexpr std::size_t pad_id = 0;
    static constexpr std::size_t unk_id = 1;

    Vocab();
    static Vocab from_tokens(std::span<const std::string> tokens);

    /// Adds `token` if absent; returns its id.
    std::size_t add(std::string_view token);
    /// Id of `token`, or unk_id when it is not in the vocabulary.
    std::size_t id(std::string_view token) const;
    bool contains(std::string_view token) const;
    const std::string& token(std::size_t id) const;
    std::size_t size() const { return tokens_.size(); }

    /// UTF-8 lines "token<TAB>id".
    std::string serialize() const;
    static Vocab parse(std::string_view text);

    bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> ids_;
};

struct QuestionTokens {
    std::vector<std::size_t> ids;

    std::size_t size() const { return ids.size(); }
    bool empty() const { return ids.empty(); }
};

/// Lowercased words split on whitespace and punctuation, mapped through
/// `vocab` (unk for misses) and truncated to `k_max`.
QuestionTokens tokenize(std::string_view text, const Vocab& vocab, std::size_t k_max = 32);
std::vector<std::string> split_words(std::string_view text);

enum class TextSource { embedding_only, tiny_encoder };

std::string_view text_source_name(TextSource source);
TextSource parse_text_source(std::string_view name);

struct TextEncoderConfig {
    TextSource source = TextSource::tiny_encoder;
    std::size_t vocab_size = 0;
    std::size_t width = 32;
    std::size_t heads = 2;
    std::size_t depth = 2;
    std::size_t mlp_ratio = 4;
    std::size_t k_max = 32;
};

/// Question representation E(Q): an embedding table, and in tiny_encoder
/// mode a small bidirectional transformer with learned positions.
struct TextEncoderWeights {
    TextEncoderConfig config;
    Tensor embed;  // vocab × width
    Tensor pos;    // k_max × width (tiny_encoder only)
    std::vector<BlockWeights> blocks;
    LayerNormWeights ln_final;

    static TextEncoderWeights init(const TextEncoderConfig& config, DType dtype,
                                   std::mt19937_64& rng);
};

/// F_Q′ for one question: [K × width]; K = 0 gives an empty matrix.
Tensor encode_question(const QuestionTokens& q, const TextEncoderWeights& w);

/// Stacked F_Q′ rows of all questions; `offsets` receives the prefix sums
/// of the per-question token counts.
Tensor encode_questions(std::span<const QuestionTokens> questions, const TextEncoderWeights& w,
                        ForwardContext& ctx, std::vector<std::size_t>& offsets);

/// One projection MLP (text width → C → C) per fused layer.
struct PerLayerProjector {
    std::map<std::size_t, MLP> layers;

    static PerLayerProjector init(std::span<const std::size_t> layer_indices,
                                  std::size_t text_width, std::size_t width, DType dtype,
                                  std::mt19937_64& rng);
};

/// F_Q^i = MLP^i(F_Q′), applied rowwise.
Tensor project_question(const Tensor& features, std::size_t layer, const PerLayerProjector& p,
                        ForwardContext& ctx);
Tensor project_question(const Tensor& features, std::size_t layer, const PerLayerProjector& p);

}  // namespace qavit
