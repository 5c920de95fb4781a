#pragma once

#include <optional>
#include <string>
#include <vector>

#include "steerlab/error.hpp"
#include "steerlab/vocab.hpp"

namespace steerlab {

/// A prompt plus its image surrogate (zero or more marker tokens injected as prefix embeddings).
struct PromptSample {
    std::string id;
    std::string prompt;
    std::vector<std::string> markers;
    std::optional<std::string> label;       ///< gold group label
    std::optional<std::string> generation;  ///< attached response text, if any
    std::optional<std::string> reference;   ///< gold reference description for match judging
    std::size_t line = 0;                   ///< source line when loaded from JSONL

    /// Identity used for disjointness checks between datasets.
    std::string key() const {
        std::string k;
        for (const auto& m : markers) {
            k += m;
            k += ' ';
        }
        return k + "|" + prompt;
    }

    friend bool operator==(const PromptSample& a, const PromptSample& b) {
        return a.id == b.id && a.prompt == b.prompt && a.markers == b.markers && a.label == b.label &&
               a.generation == b.generation && a.reference == b.reference;
    }
};

struct EncodedSample {
    std::vector<TokenId> markers;
    std::vector<TokenId> prompt;  ///< BOS followed by the prompt tokens
};

inline EncodedSample encode_sample(const Vocab& vocab, const PromptSample& s) {
    require(!s.prompt.empty(), ErrorCode::SchemaError, "prompt must be nonempty");
    EncodedSample e;
    for (const auto& m : s.markers) {
        e.markers.push_back(vocab.marker_id(m));
    }
    e.prompt.push_back(Vocab::bos_id);
    const auto body = vocab.encode(s.prompt);
    e.prompt.insert(e.prompt.end(), body.begin(), body.end());
    return e;
}

/// Training layout: markers, BOS, prompt, response, EOS.
inline std::vector<TokenId> training_sequence(const Vocab& vocab, const PromptSample& s) {
    const auto e = encode_sample(vocab, s);
    std::vector<TokenId> seq = e.markers;
    seq.insert(seq.end(), e.prompt.begin(), e.prompt.end());
    if (s.generation) {
        const auto resp = vocab.encode(*s.generation);
        seq.insert(seq.end(), resp.begin(), resp.end());
    }
    seq.push_back(Vocab::eos_id);
    return seq;
}

} // namespace steerlab
