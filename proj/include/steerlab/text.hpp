#pragma once

#include <algorithm>
#include <cctype>
#include <set>
#include <string>
#include <string_view>
#include <vector>

// ASCII text handling shared by the tokenizer, wordlist filters and the bigram counter.
//
// A word is a maximal run of [a-z0-9] characters, optionally joined by single
// internal '-' or '\'' characters ("native-american", "don't"). Any other
// non-space character is a one-character punctuation token.
namespace steerlab::text {

inline char fold(char c) noexcept {
    return static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
}

inline std::string lowercase(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), fold);
    return out;
}

inline bool is_word_char(char c) noexcept {
    return std::isalnum(static_cast<unsigned char>(c)) != 0;
}

inline bool is_joiner(char c) noexcept {
    return c == '-' || c == '\'';
}

struct Token {
    std::string text;
    bool word = false;
};

/// Lowercased tokens (words and punctuation) in order.
inline std::vector<Token> tokenize(std::string_view s) {
    std::vector<Token> out;
    std::size_t i = 0;
    const std::size_t n = s.size();
    while (i < n) {
        const char c = s[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
            continue;
        }
        if (is_word_char(c)) {
            std::size_t j = i + 1;
            while (j < n) {
                if (is_word_char(s[j])) {
                    ++j;
                } else if (is_joiner(s[j]) && j + 1 < n && is_word_char(s[j + 1])) {
                    j += 2;
                } else {
                    break;
                }
            }
            out.push_back({lowercase(s.substr(i, j - i)), true});
            i = j;
        } else {
            out.push_back({std::string(1, fold(c)), false});
            ++i;
        }
    }
    return out;
}

/// Lowercased word tokens only; punctuation is dropped.
inline std::vector<std::string> words(std::string_view s) {
    std::vector<std::string> out;
    for (auto& t : tokenize(s)) {
        if (t.word) {
            out.push_back(std::move(t.text));
        }
    }
    return out;
}

/// True when any word of `s` (whole-word, case-insensitive) is in `wordlist`.
inline bool contains_any_word(std::string_view s, const std::set<std::string>& wordlist) {
    for (const auto& w : words(s)) {
        if (wordlist.count(w) != 0) {
            return true;
        }
    }
    return false;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i != 0) {
            out += sep;
        }
        out += parts[i];
    }
    return out;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            out.emplace_back(s.substr(start));
            break;
        }
        out.emplace_back(s.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

inline std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) {
        ++b;
    }
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) {
        --e;
    }
    return std::string(s.substr(b, e - b));
}

} // namespace steerlab::text
