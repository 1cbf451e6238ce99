#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bpoem/autodiff.hpp"
#include "bpoem/common.hpp"
#include "bpoem/noising.hpp"
#include "bpoem/vocab.hpp"

// BART-style encoder-decoder transformer (pre-norm, learned absolute
// positions, tied input/output embeddings) plus a two-layer feedforward
// classification head on the mean-pooled encoder states.

namespace bpoem {

struct ModelConfig {
    std::size_t embedding_dim = 128;
    std::size_t feedforward_dim = 512;
    std::size_t hidden_dim = 128;
    std::size_t num_heads = 4;
    std::size_t num_layers = 2;  // per stack
    double dropout = 0.1;
    std::size_t vocab_size = 0;
    std::size_t max_positions = 128;
    std::size_t num_styles = 2;
    std::size_t head_hidden_dim = 0;  // 0 -> defaults to hidden_dim

    std::size_t head_hidden() const { return head_hidden_dim ? head_hidden_dim : hidden_dim; }

    void validate() const {
        std::vector<std::string> errs;
        if (hidden_dim == 0 || feedforward_dim == 0 || num_heads == 0 || num_layers == 0 ||
            max_positions == 0 || num_styles == 0)
            errs.push_back("all model dimensions must be positive");
        if (embedding_dim != hidden_dim)
            errs.push_back("embedding_dim must equal hidden_dim (tied widths)");
        if (num_heads && hidden_dim % num_heads != 0)
            errs.push_back("hidden_dim must be divisible by num_heads");
        if (dropout < 0.0 || dropout >= 1.0) errs.push_back("dropout must be in [0,1)");
        if (vocab_size == 0) errs.push_back("vocab_size must be set");
        if (!errs.empty()) {
            std::string msg = "invalid model config:";
            for (const auto& e : errs) msg += " " + e + ";";
            throw ValidationError(msg);
        }
    }

    nlohmann::json to_json() const {
        return {{"embedding_dim", embedding_dim}, {"feedforward_dim", feedforward_dim},
                {"hidden_dim", hidden_dim},       {"num_heads", num_heads},
                {"num_layers", num_layers},       {"dropout", dropout},
                {"vocab_size", vocab_size},       {"max_positions", max_positions},
                {"num_styles", num_styles},       {"head_hidden_dim", head_hidden_dim}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.embedding_dim = j.at("embedding_dim");
        c.feedforward_dim = j.at("feedforward_dim");
        c.hidden_dim = j.at("hidden_dim");
        c.num_heads = j.at("num_heads");
        c.num_layers = j.at("num_layers");
        c.dropout = j.at("dropout");
        c.vocab_size = j.at("vocab_size");
        c.max_positions = j.at("max_positions");
        c.num_styles = j.at("num_styles");
        c.head_hidden_dim = j.at("head_hidden_dim");
        return c;
    }
};

// Name -> shape table; every parameter tensor's shape is a pure function of
// the config. Map ordering (lexicographic by name) fixes the serialization
// and optimizer-state order.
inline std::map<std::string, ad::Shape> parameter_shapes(const ModelConfig& cfg) {
    const std::size_t H = cfg.hidden_dim, F = cfg.feedforward_dim, V = cfg.vocab_size;
    std::map<std::string, ad::Shape> shapes;
    shapes["embed.tok"] = {V, H};
    shapes["embed.pos"] = {cfg.max_positions, H};
    auto stack = [&](const std::string& prefix, bool cross) {
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
            const std::string p = prefix + "." + std::to_string(l) + ".";
            shapes[p + "self.wq"] = {H, H};
            shapes[p + "self.wk"] = {H, H};
            shapes[p + "self.wv"] = {H, H};
            shapes[p + "self.wo"] = {H, H};
            shapes[p + "ln1.g"] = {H};
            shapes[p + "ln1.b"] = {H};
            if (cross) {
                shapes[p + "cross.wq"] = {H, H};
                shapes[p + "cross.wk"] = {H, H};
                shapes[p + "cross.wv"] = {H, H};
                shapes[p + "cross.wo"] = {H, H};
                shapes[p + "ln_cross.g"] = {H};
                shapes[p + "ln_cross.b"] = {H};
            }
            shapes[p + "ff.w1"] = {H, F};
            shapes[p + "ff.b1"] = {F};
            shapes[p + "ff.w2"] = {F, H};
            shapes[p + "ff.b2"] = {H};
            shapes[p + "ln2.g"] = {H};
            shapes[p + "ln2.b"] = {H};
        }
        shapes[prefix + ".final_ln.g"] = {H};
        shapes[prefix + ".final_ln.b"] = {H};
    };
    stack("enc", false);
    stack("dec", true);
    shapes["head.w1"] = {H, cfg.head_hidden()};
    shapes["head.b1"] = {cfg.head_hidden()};
    shapes["head.w2"] = {cfg.head_hidden(), cfg.num_styles};
    shapes["head.b2"] = {cfg.num_styles};
    return shapes;
}

class Parameters {
public:
    Parameters() = default;

    static Parameters init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Parameters p;
        Rng rng(seed);
        for (const auto& [name, shape] : parameter_shapes(cfg)) {
            auto t = ad::Tensor::zeros(shape, /*requires_grad=*/true);
            const bool is_gain = name.ends_with("ln1.g") || name.ends_with("ln2.g") ||
                                 name.ends_with("ln_cross.g") || name.ends_with("final_ln.g");
            const bool is_bias = name.ends_with(".b") || name.ends_with(".b1") ||
                                 name.ends_with(".b2");
            if (is_gain) {
                for (auto& v : t.values()) v = 1.0;
            } else if (!is_bias) {
                for (auto& v : t.values()) v = rng.normal() * 0.02;
            }
            p.tensors_.emplace(name, std::move(t));
        }
        return p;
    }

    ad::Tensor& at(const std::string& name) {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw ValidationError("unknown parameter: " + name);
        return it->second;
    }
    const ad::Tensor& at(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw ValidationError("unknown parameter: " + name);
        return it->second;
    }
    std::map<std::string, ad::Tensor>& tensors() { return tensors_; }
    const std::map<std::string, ad::Tensor>& tensors() const { return tensors_; }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : tensors_) n += t.size();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : tensors_) t.zero_grad();
    }

    void set_requires_grad(bool on, const std::string& prefix = "") {
        for (auto& [name, t] : tensors_)
            if (prefix.empty() || name.starts_with(prefix)) t.node()->requires_grad = on;
    }

    Parameters clone() const {
        Parameters p;
        for (const auto& [name, t] : tensors_) {
            auto c = ad::Tensor::from_values(t.shape(), t.values(), t.requires_grad());
            p.tensors_.emplace(name, std::move(c));
        }
        return p;
    }

private:
    std::map<std::string, ad::Tensor> tensors_;
};

struct StyleScore {
    std::map<std::string, double> probs;  // style label -> probability
};

// Batched token matrix with padding bookkeeping.
struct Batch {
    std::vector<std::uint32_t> ids;   // B * L
    std::vector<char> mask;           // 1 = real token
    std::size_t batch = 0, length = 0;
};

inline Batch pad_batch(const std::vector<TokenSeq>& seqs) {
    if (seqs.empty()) throw ValidationError("empty batch");
    Batch b;
    b.batch = seqs.size();
    for (const auto& s : seqs) b.length = std::max(b.length, s.size());
    b.ids.assign(b.batch * b.length, Vocab::PAD);
    b.mask.assign(b.batch * b.length, 0);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        for (std::size_t j = 0; j < seqs[i].size(); ++j) {
            b.ids[i * b.length + j] = seqs[i][j];
            b.mask[i * b.length + j] = 1;
        }
    }
    return b;
}

namespace detail_model {

constexpr double kMaskNegInf = -1e30;

// Additive attention mask as a constant [B*heads, Lq, Lk] tensor.
// key_mask: B*Lk entries, 1 = attendable. causal adds the upper-triangle ban.
inline ad::Tensor attention_mask(std::size_t B, std::size_t heads, std::size_t Lq,
                                 std::size_t Lk, const std::vector<char>& key_mask,
                                 bool causal) {
    auto t = ad::Tensor::zeros({B * heads, Lq, Lk});
    auto& v = t.values();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t q = 0; q < Lq; ++q) {
                double* row = v.data() + ((b * heads + h) * Lq + q) * Lk;
                for (std::size_t k = 0; k < Lk; ++k) {
                    if (!key_mask[b * Lk + k] || (causal && k > q)) row[k] = kMaskNegInf;
                }
            }
    return t;
}

struct DropoutCtx {
    Rng* rng = nullptr;  // null -> eval mode
    double p = 0.0;
};

inline ad::Tensor maybe_dropout(const ad::Tensor& x, DropoutCtx& ctx) {
    if (!ctx.rng || ctx.p == 0.0) return x;
    return ad::dropout(x, ctx.p, *ctx.rng, true);
}

// Multi-head attention. q_in: [B, Lq, H]; kv_in: [B, Lk, H].
inline ad::Tensor attention(const Parameters& params, const std::string& prefix,
                            const ModelConfig& cfg, const ad::Tensor& q_in,
                            const ad::Tensor& kv_in, const ad::Tensor& mask,
                            DropoutCtx& drop) {
    using namespace ad;
    const std::size_t B = q_in.shape()[0], Lq = q_in.shape()[1], Lk = kv_in.shape()[1];
    const std::size_t H = cfg.hidden_dim, heads = cfg.num_heads, dh = H / heads;

    auto project = [&](const ad::Tensor& x, const std::string& w, std::size_t L) {
        auto flat = reshape(x, {B * L, H});
        auto proj = matmul(flat, params.at(prefix + w));
        // [B, L, heads, dh] -> [B, heads, L, dh] -> [B*heads, L, dh]
        return reshape(permute_0213(reshape(proj, {B, L, heads, dh})), {B * heads, L, dh});
    };
    auto q = project(q_in, ".wq", Lq);
    auto k = project(kv_in, ".wk", Lk);
    auto v = project(kv_in, ".wv", Lk);

    auto scores = scale(matmul(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(double(dh)));
    auto probs = softmax(add(scores, mask));
    probs = maybe_dropout(probs, drop);
    auto ctx = matmul(probs, v);  // [B*heads, Lq, dh]
    auto merged = reshape(permute_0213(reshape(ctx, {B, heads, Lq, dh})), {B * Lq, H});
    auto out = matmul(merged, params.at(prefix + ".wo"));
    return reshape(out, {B, Lq, H});
}

inline ad::Tensor feedforward(const Parameters& params, const std::string& prefix,
                              const ad::Tensor& x, DropoutCtx& drop) {
    using namespace ad;
    const std::size_t B = x.shape()[0], L = x.shape()[1], H = x.shape()[2];
    auto flat = reshape(x, {B * L, H});
    auto h = gelu(add(matmul(flat, params.at(prefix + ".w1")), params.at(prefix + ".b1")));
    h = maybe_dropout(h, drop);
    auto out = add(matmul(h, params.at(prefix + ".w2")), params.at(prefix + ".b2"));
    return reshape(out, {B, L, H});
}

inline ad::Tensor ln(const Parameters& params, const std::string& prefix, const ad::Tensor& x) {
    return ad::layer_norm(x, params.at(prefix + ".g"), params.at(prefix + ".b"));
}

inline ad::Tensor embed(const Parameters& params, const ModelConfig& cfg, const Batch& b,
                        DropoutCtx& drop) {
    using namespace ad;
    if (b.length > cfg.max_positions)
        throw ValidationError("sequence length " + std::to_string(b.length) +
                              " exceeds max_positions " + std::to_string(cfg.max_positions));
    auto tok = embedding_lookup(params.at("embed.tok"), b.ids, {b.batch, b.length});
    std::vector<std::uint32_t> pos_ids(b.length);
    for (std::size_t i = 0; i < b.length; ++i) pos_ids[i] = static_cast<std::uint32_t>(i);
    auto pos = embedding_lookup(params.at("embed.pos"), pos_ids, {b.length});
    auto x = add(tok, reshape(pos, {b.length, cfg.hidden_dim}));
    return maybe_dropout(x, drop);
}

}  // namespace detail_model

// Pre-norm transformer encoder. Returns [B, L, hidden]. PAD positions never
// influence non-PAD outputs (key masking).
inline ad::Tensor encode(const Parameters& params, const ModelConfig& cfg, const Batch& batch,
                         Rng* train_rng = nullptr) {
    using namespace ad;
    detail_model::DropoutCtx drop{train_rng, cfg.dropout};
    auto x = detail_model::embed(params, cfg, batch, drop);
    const auto mask = detail_model::attention_mask(batch.batch, cfg.num_heads, batch.length,
                                                   batch.length, batch.mask, false);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const std::string p = "enc." + std::to_string(l) + ".";
        auto normed = detail_model::ln(params, p + "ln1", x);
        auto attn = detail_model::attention(params, p + "self", cfg, normed, normed, mask, drop);
        x = add(x, detail_model::maybe_dropout(attn, drop));
        auto ff = detail_model::feedforward(params, p + "ff",
                                            detail_model::ln(params, p + "ln2", x), drop);
        x = add(x, detail_model::maybe_dropout(ff, drop));
    }
    return detail_model::ln(params, "enc.final_ln", x);
}

// Causal decoder with cross-attention; logits via the tied embedding table.
// Returns [B, L, vocab].
inline ad::Tensor decode(const Parameters& params, const ModelConfig& cfg,
                         const Batch& target, const ad::Tensor& encoder_states,
                         const std::vector<char>& src_mask, Rng* train_rng = nullptr) {
    using namespace ad;
    detail_model::DropoutCtx drop{train_rng, cfg.dropout};
    const std::size_t B = target.batch, L = target.length;
    const std::size_t Ls = encoder_states.shape()[1];
    auto x = detail_model::embed(params, cfg, target, drop);
    const auto self_mask =
        detail_model::attention_mask(B, cfg.num_heads, L, L, target.mask, true);
    const auto cross_mask =
        detail_model::attention_mask(B, cfg.num_heads, L, Ls, src_mask, false);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const std::string p = "dec." + std::to_string(l) + ".";
        auto normed = detail_model::ln(params, p + "ln1", x);
        auto sa = detail_model::attention(params, p + "self", cfg, normed, normed, self_mask,
                                          drop);
        x = add(x, detail_model::maybe_dropout(sa, drop));
        auto ca = detail_model::attention(params, p + "cross", cfg,
                                          detail_model::ln(params, p + "ln_cross", x),
                                          encoder_states, cross_mask, drop);
        x = add(x, detail_model::maybe_dropout(ca, drop));
        auto ff = detail_model::feedforward(params, p + "ff",
                                            detail_model::ln(params, p + "ln2", x), drop);
        x = add(x, detail_model::maybe_dropout(ff, drop));
    }
    x = detail_model::ln(params, "dec.final_ln", x);
    auto flat = reshape(x, {B * L, cfg.hidden_dim});
    auto logits = matmul(flat, params.at("embed.tok"), /*transpose_b=*/true);
    return reshape(logits, {B, L, cfg.vocab_size});
}

struct DenoiseMetrics {
    ad::Tensor loss;
    double masked_token_accuracy = 1.0;
    bool zero_denominator = false;  // no masked positions in the batch
};

// Teacher-forced denoising objective: decoder input is the target shifted
// right behind BOS; loss is mean cross-entropy over non-PAD label positions;
// accuracy is measured on span-covered positions only.
inline DenoiseMetrics denoise_forward(const Parameters& params, const ModelConfig& cfg,
                                      const std::vector<NoisedExample>& examples,
                                      Rng* train_rng = nullptr) {
    if (examples.empty()) throw ValidationError("denoise_forward: empty batch");
    std::vector<TokenSeq> sources, dec_inputs, labels;
    for (const auto& ex : examples) {
        sources.push_back(ex.source);
        dec_inputs.emplace_back(ex.target.begin(), ex.target.end() - 1);
        labels.emplace_back(ex.target.begin() + 1, ex.target.end());
    }
    auto src = pad_batch(sources);
    auto dec_in = pad_batch(dec_inputs);

    auto enc_states = encode(params, cfg, src, train_rng);
    auto logits = decode(params, cfg, dec_in, enc_states, src.mask, train_rng);

    const std::size_t B = dec_in.batch, L = dec_in.length, V = cfg.vocab_size;
    std::vector<std::uint32_t> flat_labels(B * L, Vocab::PAD);
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < labels[i].size(); ++j)
            flat_labels[i * L + j] = labels[i][j];

    DenoiseMetrics out{ad::cross_entropy(ad::reshape(logits, {B * L, V}), flat_labels,
                                         Vocab::PAD)};

    // masked-token accuracy: label position j covers target content position j
    std::size_t hits = 0, total = 0;
    for (std::size_t i = 0; i < B; ++i) {
        for (const Span& s : examples[i].spans) {
            for (std::size_t pos = s.start; pos < s.start + s.length; ++pos) {
                const double* row = logits.values().data() + (i * L + pos) * V;
                std::size_t best = 0;
                for (std::size_t v = 1; v < V; ++v)
                    if (row[v] > row[best]) best = v;
                hits += best == flat_labels[i * L + pos];
                ++total;
            }
        }
    }
    if (total == 0) {
        out.masked_token_accuracy = 1.0;
        out.zero_denominator = true;
    } else {
        out.masked_token_accuracy = static_cast<double>(hits) / static_cast<double>(total);
    }
    return out;
}

// Mean-pooled encoder states -> W1 + GELU -> W2. The decoder is not run.
inline ad::Tensor classify_logits(const Parameters& params, const ModelConfig& cfg,
                                  const Batch& batch, Rng* train_rng = nullptr) {
    using namespace ad;
    bool any_real = false;
    for (char m : batch.mask) any_real |= m != 0;
    if (!any_real) throw ValidationError("classify: all-PAD input");
    auto enc_states = encode(params, cfg, batch, train_rng);
    auto pooled = masked_mean_rows(enc_states, batch.mask);  // [B, H]
    auto h = gelu(add(matmul(pooled, params.at("head.w1")), params.at("head.b1")));
    return add(matmul(h, params.at("head.w2")), params.at("head.b2"));  // [B, S]
}

inline std::vector<StyleScore> classify(const Parameters& params, const ModelConfig& cfg,
                                        const Batch& batch,
                                        const std::vector<std::string>& style_labels) {
    if (style_labels.size() != cfg.num_styles)
        throw ValidationError("style label count does not match num_styles");
    auto probs = ad::softmax(classify_logits(params, cfg, batch));
    std::vector<StyleScore> out(batch.batch);
    for (std::size_t i = 0; i < batch.batch; ++i)
        for (std::size_t s = 0; s < cfg.num_styles; ++s)
            out[i].probs[style_labels[s]] = probs.values()[i * cfg.num_styles + s];
    return out;
}

}  // namespace bpoem
