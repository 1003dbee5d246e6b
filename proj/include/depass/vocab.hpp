#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "depass/errors.hpp"

namespace depass {

using TokenId = std::uint32_t;

inline constexpr TokenId kBosId = 0;

/// Whitespace tokenizer over a fixed word list. One token string per line,
/// line number = id, id 0 is BOS.
class Vocab {
public:
    Vocab() = default;

    explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
        if (tokens_.empty()) throw InputError("vocab must contain at least the BOS token");
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
                throw InputError("duplicate vocab token: " + tokens_[i]);
            }
        }
    }

    static Vocab load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw InputError("cannot open vocab file: " + path);
        std::vector<std::string> tokens;
        std::string line;
        while (std::getline(f, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            tokens.push_back(line);
        }
        return Vocab(std::move(tokens));
    }

    std::size_t size() const { return tokens_.size(); }

    const std::string& token(TokenId id) const {
        if (id >= tokens_.size()) throw InputError("token id out of range: " + std::to_string(id));
        return tokens_[id];
    }

    TokenId id_of(const std::string& word) const {
        auto it = index_.find(word);
        if (it == index_.end()) throw InputError("word not in vocab: " + word);
        return it->second;
    }

    /// Whitespace-split, BOS prepended. Unknown words are errors.
    std::vector<TokenId> tokenize(const std::string& text) const {
        std::vector<TokenId> ids{kBosId};
        std::istringstream ss(text);
        std::string word;
        while (ss >> word) {
            auto it = index_.find(word);
            if (it == index_.end()) throw InputError("word not in vocab: " + word);
            ids.push_back(it->second);
        }
        return ids;
    }

    /// Inverse of tokenize: drops a leading BOS, joins with single spaces.
    std::string detokenize(const std::vector<TokenId>& ids) const {
        std::string out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i == 0 && ids[i] == kBosId) continue;
            if (!out.empty()) out += ' ';
            out += token(ids[i]);
        }
        return out;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

}  // namespace depass
