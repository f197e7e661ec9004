#include "rlsf/vocabulary.hpp"

#include <set>

namespace rlsf {

Vocabulary Vocabulary::character_level() {
    std::vector<std::string> tokens{std::string(kBos), std::string(kEos), std::string(kPad), "\n"};
    for (char c = 32; c < 127; ++c) tokens.emplace_back(1, c);
    return Vocabulary(std::move(tokens));
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    char_to_id_.fill(-1);
    std::set<std::string> seen;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        const auto& t = tokens_[i];
        if (!seen.insert(t).second) throw ParameterError("duplicate vocabulary token '" + t + "'");
        const auto id = static_cast<TokenId>(i);
        if (t == kBos) {
            bos_ = id;
        } else if (t == kEos) {
            eos_ = id;
        } else if (t == kPad) {
            pad_ = id;
        } else if (t.size() == 1) {
            char_to_id_[static_cast<unsigned char>(t[0])] = id;
        } else {
            throw ParameterError("non-special tokens must be single characters: '" + t + "'");
        }
    }
    if (bos_ < 0 || eos_ < 0 || pad_ < 0) throw ParameterError("vocabulary lacks a special token");
    if (size() < 16) throw ParameterError("vocabulary must have at least 16 tokens");
}

TokenSeq Vocabulary::encode(std::string_view text) const {
    TokenSeq out;
    out.reserve(text.size());
    for (char c : text) {
        const TokenId id = char_to_id_[static_cast<unsigned char>(c)];
        if (id < 0) throw ParameterError("character not in vocabulary: code " + std::to_string(int(c)));
        out.push_back(id);
    }
    return out;
}

std::string Vocabulary::decode(const TokenSeq& ids) const { return decode(ids, 0, ids.size()); }

std::string Vocabulary::decode(const TokenSeq& ids, std::size_t begin, std::size_t end) const {
    std::string out;
    for (std::size_t i = begin; i < end && i < ids.size(); ++i) {
        if (!is_special(ids[i])) out += token(ids[i]);
    }
    return out;
}

bool Vocabulary::valid(const TokenSeq& ids) const {
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= size()) return false;
        if (ids[i] == eos_ && i + 1 != ids.size()) return false;
    }
    return true;
}

}  // namespace rlsf
