// SPDX-License-Identifier: Apache-2.0

#include "qavit/question.hpp"

#include <cctype>
#include <sstream>

namespace qavit {

Vocab::Vocab() {
    add("<pad>");
    add("<unk>");
}

Vocab Vocab::from_tokens(std::span<const std::string> tokens) {
    Vocab v;
    for (const auto& t : tokens) {
        v.add(t);
    }
    return v;
}

std::size_t Vocab::add(std::string_view token) {
    auto it = ids_.find(std::string(token));
    if (it != ids_.end()) {
        return it->second;
    }
    const std::size_t id = tokens_.size();
    tokens_.emplace_back(token);
    ids_.emplace(tokens_.back(), id);
    return id;
}

std::size_t Vocab::id(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    return it == ids_.end() ? unk_id : it->second;
}

bool Vocab::contains(std::string_view token) const { return ids_.contains(std::string(token)); }

const std::string& Vocab::token(std::size_t id) const {
    if (id >= tokens_.size()) {
        throw RangeError("vocab id " + std::to_string(id) + " out of range");
    }
    return tokens_[id];
}

std::string Vocab::serialize() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        os << tokens_[i] << '\t' << i << '\n';
    }
    return os.str();
}

Vocab Vocab::parse(std::string_view text) {
    Vocab v;
    v.tokens_.clear();
    v.ids_.clear();
    std::istringstream is{std::string(text)};
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) {
            continue;
        }
        auto tab = line.rfind('\t');
        if (tab == std::string::npos) {
            throw std::invalid_argument("vocab line without a tab: " + line);
        }
        const std::size_t id = std::stoul(line.substr(tab + 1));
        if (id != v.tokens_.size()) {
            throw std::invalid_argument("vocab ids are not dense at line: " + line);
        }
        v.add(line.substr(0, tab));
    }
    if (v.size() < 2 || v.tokens_[pad_id] != "<pad>" || v.tokens_[unk_id] != "<unk>") {
        throw std::invalid_argument("vocab is missing the reserved tokens");
    }
    return v;
}

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    for (char ch : text) {
        auto u = static_cast<unsigned char>(ch);
        if (std::isspace(u) || std::ispunct(u)) {
            if (!current.empty()) {
                words.push_back(std::move(current));
                current.clear();
            }
            continue;
        }
        current.push_back(static_cast<char>(std::tolower(u)));
    }
    if (!current.empty()) {
        words.push_back(std::move(current));
    }
    return words;
}

QuestionTokens tokenize(std::string_view text, const Vocab& vocab, std::size_t k_max) {
    QuestionTokens q;
    for (const auto& w : split_words(text)) {
        if (q.ids.size() == k_max) {
            break;
        }
        q.ids.push_back(vocab.id(w));
    }
    return q;
}

std::string_view text_source_name(TextSource source) {
    return source == TextSource::embedding_only ? "embedding_only" : "tiny_encoder";
}

TextSource parse_text_source(std::string_view name) {
    if (name == "embedding_only") {
        return TextSource::embedding_only;
    }
    if (name == "tiny_encoder") {
        return TextSource::tiny_encoder;
    }
    throw std::invalid_argument("unknown text source '" + std::string(name) + "'");
}

TextEncoderWeights TextEncoderWeights::init(const TextEncoderConfig& config, DType dtype,
                                            std::mt19937_64& rng) {
    if (config.vocab_size < 2 || config.width == 0 || config.k_max == 0) {
        throw ShapeError("text encoder: invalid configuration");
    }
    TextEncoderWeights w;
    w.config = config;
    w.embed = trunc_normal({config.vocab_size, config.width}, dtype, rng);
    if (config.source == TextSource::tiny_encoder) {
        if (config.heads == 0 || config.width % config.heads != 0) {
            throw ShapeError("text encoder: width not divisible by heads");
        }
        w.pos = trunc_normal({config.k_max, config.width}, dtype, rng);
        for (std::size_t i = 0; i < config.depth; ++i) {
            w.blocks.push_back(BlockWeights::init(config.width, config.mlp_ratio, dtype, rng));
        }
        w.ln_final = LayerNormWeights::init(config.width, dtype);
    }
    return w;
}

Tensor encode_questions(std::span<const QuestionTokens> questions, const TextEncoderWeights& w,
                        ForwardContext& ctx, std::vector<std::size_t>& offsets) {
    std::vector<std::size_t> ids, positions;
    offsets.assign(1, 0);
    for (const auto& q : questions) {
        if (q.size() > w.config.k_max) {
            throw RangeError("question has " + std::to_string(q.size()) + " tokens, k_max is " +
                             std::to_string(w.config.k_max));
        }
        for (std::size_t i = 0; i < q.size(); ++i) {
            ids.push_back(q.ids[i]);
            positions.push_back(i);
        }
        offsets.push_back(ids.size());
    }
    Tensor x = gather_rows(w.embed, ids);
    if (w.config.source == TextSource::embedding_only) {
        return x;
    }
    x = add(x, gather_rows(w.pos, positions));
    for (const auto& block : w.blocks) {
        Tensor h = block.ln1(x);
        x = add(x, block.out(attention_core(block, h, h, w.config.heads, offsets, offsets, ctx), ctx));
        x = block_mlp_residual(x, block, ctx);
    }
    return w.ln_final(x);
}

Tensor encode_question(const QuestionTokens& q, const TextEncoderWeights& w) {
    ForwardContext ctx;
    std::vector<std::size_t> offsets;
    const QuestionTokens one[] = {q};
    return encode_questions(one, w, ctx, offsets);
}

PerLayerProjector PerLayerProjector::init(std::span<const std::size_t> layer_indices,
                                          std::size_t text_width, std::size_t width, DType dtype,
                                          std::mt19937_64& rng) {
    PerLayerProjector p;
    for (auto layer : layer_indices) {
        p.layers.emplace(layer, MLP::init(text_width, width, width, dtype, rng));
    }
    return p;
}

Tensor project_question(const Tensor& features, std::size_t layer, const PerLayerProjector& p,
                        ForwardContext& ctx) {
    auto it = p.layers.find(layer);
    if (it == p.layers.end()) {
        throw RangeError("no question projector for layer " + std::to_string(layer));
    }
    return it->second(features, ctx);
}

Tensor project_question(const Tensor& features, std::size_t layer, const PerLayerProjector& p) {
    ForwardContext ctx;
    return project_question(features, layer, p, ctx);
}

}  // namespace qavit
