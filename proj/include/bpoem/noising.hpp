#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "bpoem/common.hpp"
#include "bpoem/vocab.hpp"

namespace bpoem {

struct NoiseConfig {
    double mask_ratio = 0.15;
    std::size_t span_max_length = 3;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
            throw ValidationError("noise.mask_ratio must be in (0,1)");
        if (span_max_length < 1) throw ValidationError("noise.span_max_length must be >= 1");
    }
};

struct Span {
    std::size_t start = 0;
    std::size_t length = 0;
    bool operator==(const Span&) const = default;
};

struct NoisedExample {
    TokenSeq source;  // spans collapsed to single MASKs
    TokenSeq target;  // original sequence
    std::vector<Span> spans;  // over content positions of target (BOS excluded)
};

// Samples non-overlapping spans over [0, content_len). Span lengths are
// uniform over {1..span_max_length}; sampling stops once the coverage budget
// round(mask_ratio * content_len) is met, so the overshoot is bounded by
// span_max_length - 1. Rejection-sampled with a 10x proposal cap; short
// sequences may come in under budget.
inline std::vector<Span> sample_spans(std::size_t content_len, const NoiseConfig& cfg,
                                      Rng& rng) {
    cfg.validate();
    if (content_len == 0) return {};
    const std::size_t budget = static_cast<std::size_t>(
        std::llround(cfg.mask_ratio * static_cast<double>(content_len)));
    if (budget == 0) return {};

    std::vector<char> covered(content_len, 0);
    std::vector<Span> spans;
    std::size_t total = 0;
    const std::size_t max_proposals = 10 * (budget + 1);
    for (std::size_t attempt = 0; attempt < max_proposals && total < budget; ++attempt) {
        std::size_t len = 1 + rng.uniform_int(cfg.span_max_length);
        if (len > content_len) len = content_len;
        const std::size_t start = rng.uniform_int(content_len - len + 1);
        bool clash = false;
        for (std::size_t i = start; i < start + len; ++i)
            if (covered[i]) { clash = true; break; }
        if (clash) continue;
        for (std::size_t i = start; i < start + len; ++i) covered[i] = 1;
        spans.push_back({start, len});
        total += len;
    }
    std::sort(spans.begin(), spans.end(),
              [](const Span& a, const Span& b) { return a.start < b.start; });
    return spans;
}

// Replaces each span of the target's content with a single MASK token.
// Spans index content positions, i.e. target[1 + start ...]; BOS and EOS are
// never covered.
inline NoisedExample apply_infilling(const TokenSeq& target, std::vector<Span> spans) {
    if (target.size() < 2 || target.front() != Vocab::BOS || target.back() != Vocab::EOS) {
        throw ValidationError("infilling target must be a BOS..EOS token sequence");
    }
    const std::size_t content_len = target.size() - 2;
    std::sort(spans.begin(), spans.end(),
              [](const Span& a, const Span& b) { return a.start < b.start; });
    std::size_t prev_end = 0;
    for (std::size_t i = 0; i < spans.size(); ++i) {
        const Span& s = spans[i];
        if (s.length == 0 || s.start + s.length > content_len)
            throw ValidationError("infilling span out of range");
        if (i > 0 && s.start < prev_end) throw ValidationError("infilling spans overlap");
        prev_end = s.start + s.length;
    }

    NoisedExample ex;
    ex.target = target;
    ex.spans = std::move(spans);
    ex.source.push_back(Vocab::BOS);
    std::size_t pos = 0;
    for (const Span& s : ex.spans) {
        for (; pos < s.start; ++pos) ex.source.push_back(target[1 + pos]);
        ex.source.push_back(Vocab::MASK);
        pos = s.start + s.length;
    }
    for (; pos < content_len; ++pos) ex.source.push_back(target[1 + pos]);
    ex.source.push_back(Vocab::EOS);
    return ex;
}

inline NoisedExample make_noised_example(const TokenSeq& target, const NoiseConfig& cfg,
                                         Rng& rng) {
    const std::size_t content_len = target.size() >= 2 ? target.size() - 2 : 0;
    return apply_infilling(target, sample_spans(content_len, cfg, rng));
}

}  // namespace bpoem
