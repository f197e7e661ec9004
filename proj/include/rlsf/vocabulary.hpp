#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "rlsf/common.hpp"

namespace rlsf {

/// Character-level vocabulary: three special tokens followed by '\n' and
/// printable ASCII. One character is one token, so character offsets in a
/// detokenized response are token offsets.
class Vocabulary {
public:
    /// The default character set used by every shipped model.
    static Vocabulary character_level();

    /// Build from an explicit token list. Special tokens must be present.
    explicit Vocabulary(std::vector<std::string> tokens);

    int size() const { return static_cast<int>(tokens_.size()); }
    TokenId bos() const { return bos_; }
    TokenId eos() const { return eos_; }
    TokenId pad() const { return pad_; }
    bool is_special(TokenId id) const { return id == bos_ || id == eos_ || id == pad_; }

    const std::vector<std::string>& tokens() const { return tokens_; }
    const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

    /// Throws ParameterError on a character outside the vocabulary.
    TokenSeq encode(std::string_view text) const;

    /// Concatenates non-special tokens; specials are dropped.
    std::string decode(const TokenSeq& ids) const;
    std::string decode(const TokenSeq& ids, std::size_t begin, std::size_t end) const;

    /// Ids in range, at most one eos and only as the final token.
    bool valid(const TokenSeq& ids) const;

    bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

    static constexpr std::string_view kBos = "<bos>";
    static constexpr std::string_view kEos = "<eos>";
    static constexpr std::string_view kPad = "<pad>";

private:
    std::vector<std::string> tokens_;
    std::array<TokenId, 256> char_to_id_{};
    TokenId bos_ = -1;
    TokenId eos_ = -1;
    TokenId pad_ = -1;
};

}  // namespace rlsf
