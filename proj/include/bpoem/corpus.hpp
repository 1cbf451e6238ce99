#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "bpoem/common.hpp"

namespace bpoem {

enum class Dynasty { Tang, Song, Other };
enum class PoemForm { QiLu, Other };

inline Dynasty dynasty_from_string(const std::string& s) {
    if (s == "Tang" || s == "tang" || s == "\xe5\x94\x90") return Dynasty::Tang;
    if (s == "Song" || s == "song" || s == "\xe5\xae\x8b") return Dynasty::Song;
    return Dynasty::Other;
}

inline std::string dynasty_to_string(Dynasty d, const std::string& other_name = "") {
    switch (d) {
        case Dynasty::Tang: return "Tang";
        case Dynasty::Song: return "Song";
        default: return other_name.empty() ? "Other" : other_name;
    }
}

struct Poem {
    std::string id;
    std::string title;
    std::string author;
    Dynasty dynasty = Dynasty::Other;
    std::string dynasty_name;  // verbatim source label
    PoemForm form = PoemForm::Other;
    std::string text;  // lines joined by '\n'
    std::string source;
    std::size_t replaced_chars = 0;  // unknowns turned into '?'
};

struct SplitSpec {
    double train_fraction = 0.8;
    double val_fraction = 0.1;
    double test_fraction = 0.1;
    std::uint64_t seed = 0;
    bool stratify_by_dynasty = false;

    void validate() const {
        const double sum = train_fraction + val_fraction + test_fraction;
        if (train_fraction < 0 || val_fraction < 0 || test_fraction < 0 ||
            std::abs(sum - 1.0) > 1e-9) {
            throw ValidationError("split fractions must be in [0,1] and sum to 1");
        }
    }
};

struct CorpusStats {
    std::size_t poem_count = 0;
    std::map<std::string, std::size_t> per_dynasty;
    std::map<std::string, std::size_t> per_form;
    std::size_t replaced_chars = 0;
    std::size_t duplicates_removed = 0;
    std::size_t char_inventory = 0;

    nlohmann::json to_json() const {
        return {{"poem_count", poem_count},
                {"per_dynasty", per_dynasty},
                {"per_form", per_form},
                {"replaced_chars", replaced_chars},
                {"duplicates_removed", duplicates_removed},
                {"char_inventory", char_inventory}};
    }
};

struct IngestIssue {
    std::size_t line = 0;
    std::string message;
};

struct IngestResult {
    std::vector<Poem> poems;
    std::vector<IngestIssue> issues;
};

namespace charset {

constexpr char32_t kLineSep = U'\n';
constexpr char32_t kUnknown = U'?';  // replacement sentinel, not punctuation

inline bool is_cjk(char32_t cp) {
    return (cp >= 0x4E00 && cp <= 0x9FFF) ||   // unified ideographs
           (cp >= 0x3400 && cp <= 0x4DBF) ||   // extension A
           (cp >= 0xF900 && cp <= 0xFAFF) ||   // compatibility ideographs
           (cp >= 0x20000 && cp <= 0x2FA1F);   // extensions B..F
}

// Whitelisted punctuation after normalization: full-width comma, full stop,
// question and exclamation marks. The full-width question mark is distinct
// from the ASCII '?' unknown sentinel.
inline bool is_whitelisted_punct(char32_t cp) {
    return cp == U'，' || cp == U'。' || cp == U'？' || cp == U'！';
}

// Half-width forms that normalization folds into the whitelist. ASCII '?' is
// deliberately absent: it is the unknown-character sentinel.
inline std::optional<char32_t> fold_punct(char32_t cp) {
    switch (cp) {
        case U',': return U'，';
        case U'.': return U'。';
        case U'!': return U'！';
        case U'、': return U'，';  // ideographic comma
        default: return std::nullopt;
    }
}

inline bool is_allowed(char32_t cp) {
    return is_cjk(cp) || is_whitelisted_punct(cp) || cp == kLineSep || cp == kUnknown;
}

// Content characters are the metered units of a line: ideographs and the
// '?' placeholder standing in for one.
inline bool is_content(char32_t cp) { return is_cjk(cp) || cp == kUnknown; }

}  // namespace charset

// Strips per-line whitespace, folds punctuation onto the whitelist and
// replaces everything else with '?'. Records the replacement count on the poem.
inline Poem normalize(const Poem& poem) {
    Poem out = poem;
    out.replaced_chars = poem.replaced_chars;

    std::vector<std::string> lines;
    {
        std::string cur;
        for (char c : poem.text) {
            if (c == '\n') {
                lines.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        lines.push_back(cur);
    }

    std::vector<std::string> norm_lines;
    for (const auto& line : lines) {
        std::string norm;
        for (char32_t cp : utf8::decode_all(line)) {
            if (cp == U' ' || cp == U'\t' || cp == U'\r' || cp == U'　') continue;
            if (auto folded = charset::fold_punct(cp)) {
                utf8::append(norm, *folded);
            } else if (charset::is_cjk(cp) || charset::is_whitelisted_punct(cp) ||
                       cp == charset::kUnknown) {
                utf8::append(norm, cp);
            } else {
                norm.push_back('?');
                ++out.replaced_chars;
            }
        }
        if (!norm.empty()) norm_lines.push_back(norm);
    }

    std::string text;
    for (std::size_t i = 0; i < norm_lines.size(); ++i) {
        if (i > 0) text.push_back('\n');
        text += norm_lines[i];
    }
    if (text.empty()) {
        throw ValidationError("poem '" + poem.id + "' is empty after normalization");
    }
    out.text = text;
    return out;
}

inline std::vector<std::string> poem_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::string cur;
    for (char c : text) {
        if (c == '\n') {
            lines.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    lines.push_back(cur);
    return lines;
}

inline std::size_t content_char_count(const std::string& line) {
    std::size_t n = 0;
    for (char32_t cp : utf8::decode_all(line))
        if (charset::is_content(cp)) ++n;
    return n;
}

// Structural test only: 8 lines of exactly 7 content characters.
inline PoemForm detect_form(const Poem& poem) {
    const auto lines = poem_lines(poem.text);
    if (lines.size() != 8) return PoemForm::Other;
    for (const auto& line : lines)
        if (content_char_count(line) != 7) return PoemForm::Other;
    return PoemForm::QiLu;
}

// Reads UTF-8 JSON Lines: {"text", "author", "dynasty", ["title"], ["source"],
// ["id"]}. Absent id falls back to a content hash. More than 10% malformed
// records fails the whole ingest.
inline IngestResult ingest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus file: " + path);

    IngestResult result;
    std::string line;
    std::size_t lineno = 0;
    std::size_t records = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
        ++records;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            result.issues.push_back({lineno, "invalid JSON object"});
            continue;
        }
        if (!j.contains("text") || !j["text"].is_string() || !j.contains("author") ||
            !j["author"].is_string() || !j.contains("dynasty") || !j["dynasty"].is_string()) {
            result.issues.push_back({lineno, "missing required key (text/author/dynasty)"});
            continue;
        }
        Poem p;
        p.text = j["text"].get<std::string>();
        p.author = j["author"].get<std::string>();
        p.dynasty_name = j["dynasty"].get<std::string>();
        p.dynasty = dynasty_from_string(p.dynasty_name);
        if (j.contains("title") && j["title"].is_string()) p.title = j["title"];
        if (j.contains("source") && j["source"].is_string()) p.source = j["source"];
        if (j.contains("id") && j["id"].is_string() && !j["id"].get<std::string>().empty()) {
            p.id = j["id"];
        } else {
            std::ostringstream oss;
            oss << "h" << std::hex << fnv1a(p.text + "\x1f" + p.author);
            p.id = oss.str();
        }
        result.poems.push_back(std::move(p));
    }
    if (records > 0 && result.issues.size() * 10 > records) {
        throw ValidationError("more than 10% of records malformed in " + path + " (" +
                              std::to_string(result.issues.size()) + " of " +
                              std::to_string(records) + ")");
    }
    return result;
}

// Removes byte-identical normalized texts, keeping the first occurrence.
inline std::vector<Poem> dedupe(const std::vector<Poem>& poems,
                                std::size_t* removed = nullptr) {
    std::vector<Poem> out;
    std::unordered_set<std::string> seen;
    for (const auto& p : poems) {
        if (seen.insert(p.text).second) out.push_back(p);
    }
    if (removed) *removed = poems.size() - out.size();
    return out;
}

struct SplitResult {
    std::vector<Poem> train, val, test;
};

namespace detail {

// Largest-remainder apportionment of n items over the three fractions.
inline std::array<std::size_t, 3> apportion(std::size_t n, const SplitSpec& spec) {
    const double fr[3] = {spec.train_fraction, spec.val_fraction, spec.test_fraction};
    std::array<std::size_t, 3> counts{};
    double rem[3];
    std::size_t used = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = fr[i] * static_cast<double>(n);
        counts[i] = static_cast<std::size_t>(exact);
        rem[i] = exact - static_cast<double>(counts[i]);
        used += counts[i];
    }
    while (used < n) {
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (rem[i] > rem[best]) best = i;
        ++counts[best];
        rem[best] = -1.0;
        ++used;
    }
    return counts;
}

inline void split_block(std::vector<const Poem*> block, const SplitSpec& spec, Rng& rng,
                        SplitResult& out) {
    // Fisher-Yates with the shared generator
    for (std::size_t i = block.size(); i > 1; --i) {
        const std::size_t j = rng.uniform_int(i);
        std::swap(block[i - 1], block[j]);
    }
    const auto counts = apportion(block.size(), spec);
    std::size_t k = 0;
    for (std::size_t i = 0; i < counts[0]; ++i) out.train.push_back(*block[k++]);
    for (std::size_t i = 0; i < counts[1]; ++i) out.val.push_back(*block[k++]);
    for (std::size_t i = 0; i < counts[2]; ++i) out.test.push_back(*block[k++]);
}

}  // namespace detail

inline SplitResult split(const std::vector<Poem>& poems, const SplitSpec& spec) {
    spec.validate();
    const int nonzero = (spec.train_fraction > 0) + (spec.val_fraction > 0) +
                        (spec.test_fraction > 0);
    if (poems.size() < static_cast<std::size_t>(nonzero)) {
        throw ValidationError("not enough poems to honor all nonzero split fractions");
    }
    Rng rng(spec.seed);
    SplitResult out;
    if (spec.stratify_by_dynasty) {
        std::map<std::string, std::vector<const Poem*>> by_dynasty;
        for (const auto& p : poems) by_dynasty[dynasty_to_string(p.dynasty, p.dynasty_name)].push_back(&p);
        for (auto& [name, block] : by_dynasty) detail::split_block(std::move(block), spec, rng, out);
    } else {
        std::vector<const Poem*> block;
        for (const auto& p : poems) block.push_back(&p);
        detail::split_block(std::move(block), spec, rng, out);
    }
    return out;
}

inline CorpusStats corpus_stats(const std::vector<Poem>& poems,
                                std::size_t duplicates_removed = 0) {
    CorpusStats s;
    s.poem_count = poems.size();
    s.duplicates_removed = duplicates_removed;
    std::set<char32_t> inventory;
    for (const auto& p : poems) {
        ++s.per_dynasty[dynasty_to_string(p.dynasty, p.dynasty_name)];
        ++s.per_form[p.form == PoemForm::QiLu ? "QiLu" : "Other"];
        s.replaced_chars += p.replaced_chars;
        for (char32_t cp : utf8::decode_all(p.text))
            if (cp != charset::kLineSep) inventory.insert(cp);
    }
    s.char_inventory = inventory.size();
    return s;
}

inline nlohmann::json poem_to_json(const Poem& p) {
    return {{"id", p.id},
            {"title", p.title},
            {"author", p.author},
            {"dynasty", p.dynasty_name.empty() ? dynasty_to_string(p.dynasty) : p.dynasty_name},
            {"form", p.form == PoemForm::QiLu ? "QiLu" : "Other"},
            {"text", p.text},
            {"source", p.source}};
}

inline void write_jsonl(const std::vector<Poem>& poems, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write: " + path);
    for (const auto& p : poems) out << poem_to_json(p).dump() << "\n";
}

}  // namespace bpoem
