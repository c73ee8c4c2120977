#pragma once

#include <string>
#include <vector>

#include "vfl/errors.hpp"

namespace vfl {

// Character-level vocabulary. Ids 0-41 are meaningful; the model's default
// vocabulary is padded to 72 rows and ids 42+ are never produced by encode.
//   0-25  a-z
//   26-35 0-9
//   36    space
//   37    comma
//   38-41 BOS, EOS, PAD, IMG
inline constexpr int kBosId = 38;
inline constexpr int kEosId = 39;
inline constexpr int kPadId = 40;
inline constexpr int kImgId = 41;
inline constexpr int kFirstReservedId = 42;
inline constexpr int kVocabSize = 72;

inline int char_token(char c) {
    if (c >= 'a' && c <= 'z') return c - 'a';
    if (c >= '0' && c <= '9') return 26 + (c - '0');
    if (c == ' ') return 36;
    if (c == ',') return 37;
    throw ContractError(std::string("character not in vocabulary: '") + c + "'");
}

// '?' marks ids that carry no character (specials and reserved padding).
inline char token_char(int id) {
    if (id >= 0 && id < 26) return char('a' + id);
    if (id >= 26 && id < 36) return char('0' + (id - 26));
    if (id == 36) return ' ';
    if (id == 37) return ',';
    return '?';
}

// Plain text only; BOS/EOS/IMG framing is the sequence builder's job.
inline std::vector<int> encode(const std::string& text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(char_token(c));
    return out;
}

inline std::string decode(const std::vector<int>& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) out.push_back(token_char(t));
    return out;
}

}  // namespace vfl
