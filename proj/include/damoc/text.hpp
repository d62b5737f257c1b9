// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reference tokenizer and detokenization rule.
//
// Tokenization: split on Unicode whitespace, then every punctuation code
// point becomes its own token. Detokenization: word tokens are joined with
// one space, no space before closing punctuation or after opening brackets.
// Token lists produced by subword tokenizers (leading U+2581 or U+0120
// markers) are concatenated with markers turned into spaces.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace damoc::text {

inline constexpr std::string_view kTokenizerName = "damoc-ws-punct-v1";

/// Decodes one code point starting at s[i] and advances i. Invalid bytes
/// decode to themselves (one byte each) so no input is rejected.
inline char32_t next_code_point(std::string_view s, std::size_t& i) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    auto cont = [&](std::size_t k) -> int {
        if (i + k >= s.size()) return -1;
        const auto b = static_cast<unsigned char>(s[i + k]);
        return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
    };
    if (b0 < 0x80) {
        ++i;
        return b0;
    }
    int n = 0;
    char32_t cp = 0;
    if ((b0 & 0xE0) == 0xC0) {
        n = 1;
        cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
        n = 2;
        cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
        n = 3;
        cp = b0 & 0x07;
    } else {
        ++i;
        return b0;
    }
    for (int k = 1; k <= n; ++k) {
        const int c = cont(static_cast<std::size_t>(k));
        if (c < 0) {
            ++i;
            return b0;
        }
        cp = (cp << 6) | static_cast<char32_t>(c);
    }
    i += static_cast<std::size_t>(n) + 1;
    return cp;
}

inline bool is_space(char32_t c) {
    return (c >= 0x09 && c <= 0x0D) || c == 0x20 || c == 0x85 || c == 0xA0 || c == 0x1680 ||
           (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 || c == 0x202F ||
           c == 0x205F || c == 0x3000;
}

inline bool is_punct(char32_t c) {
    if (c < 0x80) {
        return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) ||
               (c >= 0x7B && c <= 0x7E);
    }
    switch (c) {
        case 0xA1: case 0xA7: case 0xAB: case 0xB6: case 0xB7: case 0xBB: case 0xBF:
            return true;
        default:
            break;
    }
    return (c >= 0x2010 && c <= 0x2027) || (c >= 0x2030 && c <= 0x205E) ||
           (c >= 0x3001 && c <= 0x3003) || (c >= 0x3008 && c <= 0x3011) ||
           (c >= 0xFF01 && c <= 0xFF0F) || (c >= 0xFF1A && c <= 0xFF20) ||
           (c >= 0xFF3B && c <= 0xFF40) || (c >= 0xFF5B && c <= 0xFF65);
}

inline std::vector<std::string> tokenize(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    std::size_t i = 0;
    while (i < s.size()) {
        const std::size_t start = i;
        const char32_t cp = next_code_point(s, i);
        if (is_space(cp)) {
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
        } else if (is_punct(cp)) {
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
            out.emplace_back(s.substr(start, i - start));
        } else {
            cur.append(s.substr(start, i - start));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

namespace detail {

inline bool attaches_left(std::string_view t) {
    static constexpr std::string_view kClose[] = {".", ",", "!", "?", ";", ":", "%", ")", "]", "}",
                                                  "…", "、", "。"};
    for (auto c : kClose)
        if (t == c) return true;
    return false;
}

inline bool attaches_right(std::string_view t) { return t == "(" || t == "[" || t == "{"; }

inline bool has_subword_marker(std::string_view t) {
    return t.starts_with("▁") || t.starts_with("Ġ");
}

}  // namespace detail

inline std::string detokenize(std::span<const std::string> tokens) {
    std::string out;
    bool subword = false;
    for (const auto& t : tokens)
        if (detail::has_subword_marker(t)) {
            subword = true;
            break;
        }
    if (subword) {
        for (const auto& t : tokens) {
            if (detail::has_subword_marker(t)) {
                out.push_back(' ');
                out.append(t.substr(t.starts_with("▁") ? std::string_view("▁").size()
                                                        : std::string_view("Ġ").size()));
            } else {
                out.append(t);
            }
        }
        const auto first = out.find_first_not_of(' ');
        return first == std::string::npos ? std::string{} : out.substr(first);
    }
    bool glue_next = true;
    for (const auto& t : tokens) {
        if (!glue_next && !detail::attaches_left(t)) out.push_back(' ');
        out.append(t);
        glue_next = detail::attaches_right(t);
    }
    return out;
}

/// True when a and b agree once all whitespace is removed.
inline bool equal_ignoring_space(std::string_view a, std::string_view b) {
    auto strip = [](std::string_view s) {
        std::string r;
        std::size_t i = 0;
        while (i < s.size()) {
            const std::size_t start = i;
            if (!is_space(next_code_point(s, i))) r.append(s.substr(start, i - start));
        }
        return r;
    };
    return strip(a) == strip(b);
}

inline std::string to_lower_ascii(std::string_view s) {
    std::string r(s);
    for (auto& c : r)
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    return r;
}

}  // namespace damoc::text
