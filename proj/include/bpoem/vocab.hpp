#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "bpoem/common.hpp"
#include "bpoem/corpus.hpp"

namespace bpoem {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

// Character-level vocabulary. Ids 0..5 are fixed specials; content
// characters follow in descending corpus frequency (ties by code point).
class Vocab {
public:
    static constexpr TokenId PAD = 0;
    static constexpr TokenId BOS = 1;
    static constexpr TokenId EOS = 2;
    static constexpr TokenId MASK = 3;
    static constexpr TokenId UNK = 4;
    static constexpr TokenId SEP = 5;
    static constexpr std::size_t kNumSpecials = 6;

    static Vocab build(const std::vector<Poem>& poems, std::size_t min_freq = 1) {
        if (poems.empty()) throw ValidationError("cannot build a vocabulary from an empty corpus");
        std::map<char32_t, std::size_t> freq;
        for (const auto& p : poems) {
            for (char32_t cp : utf8::decode_all(p.text)) {
                if (cp == charset::kLineSep || cp == charset::kUnknown) continue;
                ++freq[cp];
            }
        }
        std::vector<std::pair<char32_t, std::size_t>> entries(freq.begin(), freq.end());
        std::stable_sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        Vocab v;
        v.min_freq_ = min_freq;
        for (const auto& [cp, n] : entries) {
            if (n >= min_freq) v.add_token(cp);
        }
        return v;
    }

    std::size_t size() const { return kNumSpecials + id_to_char_.size(); }
    std::size_t min_freq() const { return min_freq_; }

    TokenId id_of(char32_t cp) const {
        if (cp == charset::kLineSep) return SEP;
        if (cp == charset::kUnknown) return MASK;
        auto it = char_to_id_.find(cp);
        return it == char_to_id_.end() ? UNK : it->second;
    }

    TokenSeq encode(const std::string& text) const {
        TokenSeq seq;
        seq.push_back(BOS);
        for (char32_t cp : utf8::decode_all(text)) seq.push_back(id_of(cp));
        seq.push_back(EOS);
        return seq;
    }

    std::string decode(const TokenSeq& seq) const {
        std::string out;
        for (TokenId id : seq) {
            if (id >= size()) {
                throw ValidationError("token id " + std::to_string(id) + " out of range");
            }
            switch (id) {
                case PAD:
                case BOS:
                case EOS: break;
                case MASK: out.push_back('?'); break;
                case UNK: utf8::append(out, 0xFFFD); break;
                case SEP: out.push_back('\n'); break;
                default: utf8::append(out, id_to_char_[id - kNumSpecials]); break;
            }
        }
        return out;
    }

    std::uint64_t content_hash() const {
        std::string blob = std::to_string(min_freq_);
        for (char32_t cp : id_to_char_) {
            blob.push_back('\x1f');
            utf8::append(blob, cp);
        }
        return fnv1a(blob);
    }

    // {tokens: ordered content characters, min_freq, specials} — token order
    // defines the id assignment.
    nlohmann::json to_json() const {
        nlohmann::json tokens = nlohmann::json::array();
        for (char32_t cp : id_to_char_) tokens.push_back(utf8::encode_one(cp));
        return {{"tokens", tokens},
                {"min_freq", min_freq_},
                {"specials",
                 {{"PAD", PAD}, {"BOS", BOS}, {"EOS", EOS}, {"MASK", MASK}, {"UNK", UNK}, {"SEP", SEP}}}};
    }

    static Vocab from_json(const nlohmann::json& j) {
        if (!j.is_object() || !j.contains("tokens") || !j["tokens"].is_array()) {
            throw ValidationError("invalid vocab file: missing tokens array");
        }
        Vocab v;
        v.min_freq_ = j.value("min_freq", std::size_t{1});
        for (const auto& t : j["tokens"]) {
            const auto cps = utf8::decode_all(t.get<std::string>());
            if (cps.size() != 1) throw ValidationError("vocab tokens must be single characters");
            v.add_token(cps[0]);
        }
        return v;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write vocab: " + path);
        out << to_json().dump(2) << "\n";
    }

    static Vocab load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open vocab: " + path);
        nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded()) throw ValidationError("vocab file is not valid JSON: " + path);
        return from_json(j);
    }

private:
    void add_token(char32_t cp) {
        const TokenId id = static_cast<TokenId>(kNumSpecials + id_to_char_.size());
        id_to_char_.push_back(cp);
        char_to_id_[cp] = id;
    }

    std::vector<char32_t> id_to_char_;
    std::unordered_map<char32_t, TokenId> char_to_id_;
    std::size_t min_freq_ = 1;
};

}  // namespace bpoem
