#pragma once

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bpoem/common.hpp"
#include "bpoem/corpus.hpp"
#include "bpoem/model.hpp"
#include "bpoem/training.hpp"

namespace bpoem {

struct PoetReport {
    std::string poet;
    std::size_t poem_count = 0;
    std::map<std::string, double> mean_prob;       // arithmetic mean of per-poem scores
    std::map<std::string, double> vote_fraction;   // share of poems argmax-classified per style
    std::vector<StyleScore> per_poem;

    nlohmann::json to_json() const {
        return {{"name", poet}, {"n_poems", poem_count}, {"scores", mean_prob},
                {"vote_fraction", vote_fraction}};
    }
};

inline StyleScore score_poem(const Checkpoint& ckpt, const Poem& poem,
                             const std::vector<std::string>& labels,
                             bool strict_form = false) {
    if (strict_form && detect_form(poem) != PoemForm::QiLu)
        throw ValidationError("poem '" + poem.id + "' is not seven-character regulated verse");
    auto scores = classify(ckpt.params, ckpt.config, pad_batch({ckpt.vocab.encode(poem.text)}),
                           labels);
    return scores[0];
}

inline PoetReport score_poet(const Checkpoint& ckpt, const std::string& poet,
                             const std::vector<Poem>& poems,
                             const std::vector<std::string>& labels) {
    if (poems.empty()) throw ValidationError("score_poet: empty poem list for " + poet);
    PoetReport r;
    r.poet = poet;
    r.poem_count = poems.size();
    for (const auto& label : labels) {
        r.mean_prob[label] = 0.0;
        r.vote_fraction[label] = 0.0;
    }
    for (const auto& poem : poems) {
        auto s = score_poem(ckpt, poem, labels);
        std::string best;
        double best_p = -1;
        for (const auto& [label, p] : s.probs) {
            r.mean_prob[label] += p;
            if (p > best_p) {
                best_p = p;
                best = label;
            }
        }
        r.vote_fraction[best] += 1.0;
        r.per_poem.push_back(std::move(s));
    }
    const double inv = 1.0 / static_cast<double>(poems.size());
    for (auto& [label, v] : r.mean_prob) v *= inv;
    for (auto& [label, v] : r.vote_fraction) v *= inv;
    return r;
}

struct CompletionResult {
    std::string text;
    bool truncated = false;
};

// Fills '?' positions by constrained greedy decoding: the encoder reads the
// MASK-bearing sequence, the decoder is forced to emit every known input
// token verbatim and generates only at MASK positions, with PAD/BOS/MASK
// suppressed from the argmax.
inline CompletionResult complete_poem(const Checkpoint& ckpt, const Poem& poem) {
    const auto& cfg = ckpt.config;
    const TokenSeq input = ckpt.vocab.encode(poem.text);  // '?' -> MASK
    CompletionResult result;
    if (input.size() > cfg.max_positions) {
        result.text = poem.text;
        result.truncated = true;
        return result;
    }

    auto src = pad_batch({input});
    auto enc_states = encode(ckpt.params, cfg, src);

    // decoder input grows from BOS; target layout mirrors the input sequence
    TokenSeq generated{Vocab::BOS};
    const std::size_t out_len = input.size() - 1;  // content + EOS
    for (std::size_t pos = 0; pos < out_len; ++pos) {
        const TokenId wanted = input[pos + 1];
        if (wanted != Vocab::MASK) {
            generated.push_back(wanted);
            continue;
        }
        auto dec_in = pad_batch({generated});
        auto logits = decode(ckpt.params, cfg, dec_in, enc_states, src.mask);
        const std::size_t L = dec_in.length, V = cfg.vocab_size;
        const double* row = logits.values().data() + (L - 1) * V;
        // a masked position replaces exactly one content character, so
        // structural tokens (PAD/BOS/EOS/MASK/UNK/SEP) are never generated
        std::size_t best = Vocab::kNumSpecials;
        double best_v = -1e300;
        for (std::size_t v = Vocab::kNumSpecials; v < V; ++v) {
            if (row[v] > best_v) {
                best_v = row[v];
                best = v;
            }
        }
        generated.push_back(static_cast<TokenId>(best));
    }
    result.text = ckpt.vocab.decode(generated);
    return result;
}

// Table-shaped report: one numbered group per row block, one column per
// poet, a row per style. Probabilities are rounded to two decimals for the
// text form; the JSON form keeps full precision.
struct ReportGroup {
    std::string name;
    std::vector<PoetReport> poets;
};

inline nlohmann::json report_json(const std::vector<ReportGroup>& groups) {
    nlohmann::json out;
    out["groups"] = nlohmann::json::array();
    for (const auto& g : groups) {
        nlohmann::json jg = {{"name", g.name}, {"poets", nlohmann::json::array()}};
        for (const auto& p : g.poets) jg["poets"].push_back(p.to_json());
        out["groups"].push_back(std::move(jg));
    }
    return out;
}

inline std::string format_cell(double p) {
    std::ostringstream oss;
    oss << std::fixed << std::setprecision(2) << p;
    return oss.str();
}

inline std::string report_text(const std::vector<ReportGroup>& groups,
                               const std::vector<std::string>& styles) {
    std::size_t width = 0;
    for (const auto& g : groups) width = std::max(width, g.poets.size());
    std::ostringstream out;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& g = groups[gi];
        out << (gi + 1) << "\tpoets";
        for (std::size_t c = 0; c < width; ++c)
            out << "\t" << (c < g.poets.size() ? g.poets[c].poet : "\\");
        out << "\n";
        for (const auto& style : styles) {
            out << "\t" << style;
            for (std::size_t c = 0; c < width; ++c) {
                out << "\t";
                if (c < g.poets.size())
                    out << format_cell(g.poets[c].mean_prob.at(style));
                else
                    out << "\\";
            }
            out << "\n";
        }
    }
    return out.str();
}

inline std::vector<ReportGroup> report_from_json(const nlohmann::json& j) {
    std::vector<ReportGroup> groups;
    for (const auto& jg : j.at("groups")) {
        ReportGroup g;
        g.name = jg.at("name");
        for (const auto& jp : jg.at("poets")) {
            PoetReport p;
            p.poet = jp.at("name");
            p.poem_count = jp.at("n_poems");
            for (auto it = jp.at("scores").begin(); it != jp.at("scores").end(); ++it)
                p.mean_prob[it.key()] = it.value();
            if (jp.contains("vote_fraction"))
                for (auto it = jp["vote_fraction"].begin(); it != jp["vote_fraction"].end(); ++it)
                    p.vote_fraction[it.key()] = it.value();
            g.poets.push_back(std::move(p));
        }
        groups.push_back(std::move(g));
    }
    return groups;
}

}  // namespace bpoem
