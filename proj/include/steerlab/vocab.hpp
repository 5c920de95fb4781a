#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "steerlab/error.hpp"
#include "steerlab/text.hpp"

namespace steerlab {

using TokenId = std::int32_t;

/// Word-level vocabulary. Ids 0..3 are PAD/BOS/EOS/UNK, followed by the marker
/// tokens in declaration order, followed by corpus tokens in lexicographic order.
class Vocab {
public:
    static constexpr TokenId pad_id = 0;
    static constexpr TokenId bos_id = 1;
    static constexpr TokenId eos_id = 2;
    static constexpr TokenId unk_id = 3;
    static constexpr TokenId first_marker_id = 4;

    Vocab() = default;

    std::size_t size() const noexcept { return id_to_token_.size(); }
    std::size_t marker_count() const noexcept { return marker_count_; }

    bool is_marker(TokenId id) const noexcept {
        return id >= first_marker_id && id < first_marker_id + static_cast<TokenId>(marker_count_);
    }

    bool contains(std::string_view token) const { return token_to_id_.count(std::string(token)) != 0; }

    TokenId id(std::string_view token) const {
        const auto it = token_to_id_.find(std::string(token));
        return it == token_to_id_.end() ? unk_id : it->second;
    }

    /// Marker lookup; unlike id() an unknown marker is an error, not UNK.
    TokenId marker_id(std::string_view marker) const {
        const auto it = token_to_id_.find(std::string(marker));
        if (it == token_to_id_.end() || !is_marker(it->second)) {
            fail(ErrorCode::KeyError, "unknown marker token '" + std::string(marker) + "'");
        }
        return it->second;
    }

    const std::string& token(TokenId id) const {
        require(id >= 0 && static_cast<std::size_t>(id) < size(), ErrorCode::KeyError,
                "token id out of range: " + std::to_string(id));
        return id_to_token_[static_cast<std::size_t>(id)];
    }

    std::vector<TokenId> encode(std::string_view s) const {
        std::vector<TokenId> out;
        for (const auto& t : text::tokenize(s)) {
            out.push_back(id(t.text));
        }
        return out;
    }

    /// Space-joined surface form; special tokens are skipped.
    std::string decode(const std::vector<TokenId>& ids) const {
        std::vector<std::string> parts;
        for (const TokenId t : ids) {
            if (t == pad_id || t == bos_id || t == eos_id) {
                continue;
            }
            parts.push_back(token(t));
        }
        return text::join(parts, " ");
    }

    nlohmann::json to_json() const {
        // std::map keeps the dump byte-stable.
        std::map<std::string, TokenId> ordered(token_to_id_.begin(), token_to_id_.end());
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [tok, id] : ordered) {
            j[tok] = id;
        }
        return j;
    }

    static Vocab from_json(const nlohmann::json& j) {
        require(j.is_object(), ErrorCode::FormatError, "vocab must be a JSON object");
        std::vector<std::string> tokens(j.size());
        std::vector<bool> seen(j.size(), false);
        for (const auto& [tok, idv] : j.items()) {
            require(idv.is_number_integer(), ErrorCode::FormatError, "vocab id must be an integer");
            const auto id = idv.get<std::int64_t>();
            require(id >= 0 && static_cast<std::size_t>(id) < tokens.size() && !seen[static_cast<std::size_t>(id)],
                    ErrorCode::FormatError, "vocab ids must be a permutation of 0..n-1");
            tokens[static_cast<std::size_t>(id)] = tok;
            seen[static_cast<std::size_t>(id)] = true;
        }
        require(tokens.size() > 4 && tokens[0] == "<pad>" && tokens[1] == "<bos>" && tokens[2] == "<eos>" &&
                    tokens[3] == "<unk>",
                ErrorCode::FormatError, "vocab missing reserved tokens");
        Vocab v;
        std::size_t markers = 0;
        for (std::size_t i = first_marker_id; i < tokens.size() && looks_like_marker(tokens[i]); ++i) {
            ++markers;
        }
        v.assign(std::move(tokens), markers);
        return v;
    }

    friend Vocab build_tokenizer(const std::vector<std::string>& corpus, const std::vector<std::string>& markers);

private:
    static bool looks_like_marker(const std::string& t) {
        return t.size() > 2 && t.front() == '<' && t.back() == '>';
    }

    void assign(std::vector<std::string> tokens, std::size_t markers) {
        id_to_token_ = std::move(tokens);
        marker_count_ = markers;
        token_to_id_.clear();
        for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
            token_to_id_[id_to_token_[i]] = static_cast<TokenId>(i);
        }
    }

    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, TokenId> token_to_id_;
    std::size_t marker_count_ = 0;
};

/// Builds the vocabulary from raw texts plus marker tokens (written as "<name>").
inline Vocab build_tokenizer(const std::vector<std::string>& corpus, const std::vector<std::string>& markers) {
    if (corpus.empty()) {
        fail(ErrorCode::EmptyCorpus, "cannot build a vocabulary from an empty corpus");
    }
    std::vector<std::string> tokens = {"<pad>", "<bos>", "<eos>", "<unk>"};
    std::set<std::string> reserved(tokens.begin(), tokens.end());
    for (const auto& m : markers) {
        require(Vocab::looks_like_marker(m), ErrorCode::SpecError, "marker must look like <name>: " + m);
        require(reserved.insert(m).second, ErrorCode::SpecError, "duplicate marker " + m);
        tokens.push_back(m);
    }
    std::set<std::string> words;
    for (const auto& line : corpus) {
        for (auto& t : text::tokenize(line)) {
            if (reserved.count(t.text) == 0) {
                words.insert(std::move(t.text));
            }
        }
    }
    tokens.insert(tokens.end(), words.begin(), words.end());
    Vocab v;
    v.assign(std::move(tokens), markers.size());
    return v;
}

} // namespace steerlab
