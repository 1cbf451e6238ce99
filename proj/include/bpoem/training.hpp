#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bpoem/autodiff.hpp"
#include "bpoem/common.hpp"
#include "bpoem/corpus.hpp"
#include "bpoem/model.hpp"
#include "bpoem/noising.hpp"
#include "bpoem/vocab.hpp"

namespace bpoem {

struct CorruptCheckpointError : ValidationError {
    using ValidationError::ValidationError;
};
struct VersionMismatchError : ValidationError {
    using ValidationError::ValidationError;
};
struct ShapeTableError : ValidationError {
    using ValidationError::ValidationError;
};

struct PretrainConfig {
    std::size_t batch_size = 8;
    std::size_t total_steps = 400;
    double learning_rate = 2e-3;
    std::size_t warmup_steps = 40;
    NoiseConfig noise;
    std::size_t eval_every = 50;
    std::size_t checkpoint_every = 0;  // 0 = final only
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size < 1) throw ValidationError("pretrain.batch_size must be >= 1");
        if (warmup_steps > total_steps && total_steps > 0)
            throw ValidationError("pretrain.warmup_steps must be <= total_steps");
        noise.validate();
    }
};

struct FinetuneConfig {
    std::size_t batch_size = 16;
    std::size_t epochs = 3;
    double learning_rate = 5e-5;
    bool freeze_encoder = false;
    std::vector<std::string> labels = {"Tang", "Song"};
    std::uint64_t seed = 0;
};

// Linear warmup to learning_rate, then inverse-square-root decay. Step 0
// maps to rate 0; step == warmup_steps maps to exactly learning_rate.
inline double lr_at(std::size_t step, double learning_rate, std::size_t warmup_steps) {
    const double w = static_cast<double>(std::max<std::size_t>(warmup_steps, 1));
    const double t = static_cast<double>(step);
    if (t <= w) return learning_rate * t / w;
    return learning_rate * std::sqrt(w / t);
}

struct Checkpoint {
    ModelConfig config;
    Vocab vocab;
    Parameters params;
    std::uint64_t step = 0;
    nlohmann::json metrics = nlohmann::json::array();
    // optional optimizer state (Adam moments in parameter-name order)
    bool has_optimizer = false;
    std::uint64_t opt_step = 0;
    std::vector<std::vector<double>> opt_m, opt_v;
};

namespace detail_ckpt {

constexpr char kMagic[] = "BPOEM1";
constexpr std::uint32_t kVersion = 1;

inline void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(buf), 8);
}

inline std::uint64_t read_u64(std::istream& in) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    if (!in) throw CorruptCheckpointError("checkpoint truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{buf[i]} << (8 * i);
    return v;
}

inline void write_doubles(std::ostream& out, const std::vector<double>& xs) {
    for (double x : xs) {
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(x));
        std::memcpy(&bits, &x, 8);
        write_u64(out, bits);
    }
}

inline void read_doubles(std::istream& in, std::vector<double>& xs) {
    for (double& x : xs) {
        const std::uint64_t bits = read_u64(in);
        std::memcpy(&x, &bits, 8);
    }
}

}  // namespace detail_ckpt

// Binary container: magic "BPOEM1", length-prefixed UTF-8 JSON header, then
// raw little-endian float64 payloads in directory order.
inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);

    nlohmann::json dir = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.params.tensors()) {
        dir.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.size() * 8;
    }
    nlohmann::json header = {{"version", detail_ckpt::kVersion},
                             {"config", ckpt.config.to_json()},
                             {"vocab", ckpt.vocab.to_json()},
                             {"vocab_hash", ckpt.vocab.content_hash()},
                             {"step", ckpt.step},
                             {"metrics", ckpt.metrics},
                             {"tensors", dir},
                             {"has_optimizer", ckpt.has_optimizer},
                             {"opt_step", ckpt.opt_step}};
    const std::string hs = header.dump();
    out.write(detail_ckpt::kMagic, 6);
    detail_ckpt::write_u64(out, hs.size());
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : ckpt.params.tensors())
        detail_ckpt::write_doubles(out, t.values());
    if (ckpt.has_optimizer) {
        for (const auto& m : ckpt.opt_m) detail_ckpt::write_doubles(out, m);
        for (const auto& v : ckpt.opt_v) detail_ckpt::write_doubles(out, v);
    }
    if (!out) throw IoError("write failure on checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[6];
    in.read(magic, 6);
    if (!in || std::memcmp(magic, detail_ckpt::kMagic, 6) != 0)
        throw CorruptCheckpointError("bad checkpoint magic in " + path);
    const std::uint64_t header_len = detail_ckpt::read_u64(in);
    std::string hs(header_len, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw CorruptCheckpointError("checkpoint header truncated in " + path);
    nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
    if (header.is_discarded()) throw CorruptCheckpointError("checkpoint header is not JSON");
    if (header.value("version", 0u) != detail_ckpt::kVersion)
        throw VersionMismatchError("unsupported checkpoint version");

    Checkpoint ckpt;
    ckpt.config = ModelConfig::from_json(header.at("config"));
    ckpt.vocab = Vocab::from_json(header.at("vocab"));
    ckpt.step = header.value("step", std::uint64_t{0});
    ckpt.metrics = header.value("metrics", nlohmann::json::array());
    ckpt.has_optimizer = header.value("has_optimizer", false);
    ckpt.opt_step = header.value("opt_step", std::uint64_t{0});

    const auto expected = parameter_shapes(ckpt.config);
    std::map<std::string, ad::Shape> seen;
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name");
        ad::Shape shape = entry.at("shape").get<ad::Shape>();
        if (!seen.emplace(name, shape).second)
            throw ShapeTableError("duplicate tensor in checkpoint: " + name);
        auto it = expected.find(name);
        if (it == expected.end()) throw ShapeTableError("unexpected tensor: " + name);
        if (it->second != shape)
            throw ShapeTableError("tensor shape mismatch for " + name + ": got " +
                                  ad::shape_str(shape) + ", config requires " +
                                  ad::shape_str(it->second));
    }
    for (const auto& [name, shape] : expected)
        if (!seen.count(name)) throw ShapeTableError("missing tensor: " + name);

    // payloads are laid out in directory order (== map order)
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name");
        auto t = ad::Tensor::zeros(seen.at(name), /*requires_grad=*/true);
        detail_ckpt::read_doubles(in, t.values());
        ckpt.params.tensors().emplace(name, std::move(t));
    }
    if (ckpt.has_optimizer) {
        for (const auto& [name, t] : ckpt.params.tensors()) {
            ckpt.opt_m.emplace_back(t.size());
            detail_ckpt::read_doubles(in, ckpt.opt_m.back());
        }
        for (const auto& [name, t] : ckpt.params.tensors()) {
            ckpt.opt_v.emplace_back(t.size());
            detail_ckpt::read_doubles(in, ckpt.opt_v.back());
        }
    }
    return ckpt;
}

// Append-only JSON Lines metrics sink.
class MetricsLog {
public:
    MetricsLog() = default;
    explicit MetricsLog(std::string path) : path_(std::move(path)) {}

    void record(std::uint64_t step, double loss, double masked_acc, double lr) {
        nlohmann::json j = {{"step", step}, {"loss", loss}, {"masked_acc", masked_acc}, {"lr", lr}};
        history.push_back(j);
        if (!path_.empty()) {
            std::ofstream out(path_, std::ios::binary | std::ios::app);
            out << j.dump() << "\n";
        }
    }

    nlohmann::json history = nlohmann::json::array();

private:
    std::string path_;
};

namespace detail_train {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
    return fnv1a(std::to_string(a) + ":" + std::to_string(b) + ":" + std::to_string(c));
}

}  // namespace detail_train

inline std::vector<ad::Tensor> parameter_list(Parameters& params) {
    std::vector<ad::Tensor> out;
    for (auto& [name, t] : params.tensors()) out.push_back(t);
    return out;
}

// Pretraining loop: per-step sampled batch -> span noising -> teacher-forced
// denoising loss -> Adam with warmup / inverse-sqrt decay. Bit-reproducible
// for a fixed (corpus, configs, seed).
inline Checkpoint pretrain(const std::vector<Poem>& corpus, const Vocab& vocab,
                           const ModelConfig& model_cfg, const PretrainConfig& cfg,
                           MetricsLog* log = nullptr,
                           const std::string& diagnostic_path = "") {
    if (corpus.empty()) throw ValidationError("pretrain: empty corpus");
    tune_allocator();
    cfg.validate();
    model_cfg.validate();

    std::vector<TokenSeq> encoded;
    for (const auto& p : corpus) encoded.push_back(vocab.encode(p.text));
    for (const auto& s : encoded) {
        if (s.size() - 1 > model_cfg.max_positions)
            throw ValidationError("pretrain: poem longer than max_positions");
    }

    Checkpoint ckpt;
    ckpt.config = model_cfg;
    ckpt.vocab = vocab;
    ckpt.params = Parameters::init(model_cfg, cfg.seed);

    ad::Adam opt({.lr = cfg.learning_rate});
    auto plist = parameter_list(ckpt.params);
    Rng data_rng(detail_train::mix_seed(cfg.seed, 0xDA7A));

    for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
        std::vector<NoisedExample> batch;
        for (std::size_t i = 0; i < cfg.batch_size; ++i) {
            const std::size_t idx = data_rng.uniform_int(encoded.size());
            Rng noise_rng(detail_train::mix_seed(cfg.noise.seed, step, i));
            batch.push_back(make_noised_example(encoded[idx], cfg.noise, noise_rng));
        }
        Rng drop_rng(detail_train::mix_seed(cfg.seed, 0xD20, step));
        try {
            ckpt.params.zero_grad();
            auto metrics = denoise_forward(ckpt.params, model_cfg, batch, &drop_rng);
            const double loss = metrics.loss.item();
            ad::backward(metrics.loss);
            const double lr = lr_at(step, cfg.learning_rate, cfg.warmup_steps);
            opt.step(plist, lr);
            ckpt.step = step;
            if (log && (step % std::max<std::size_t>(cfg.eval_every, 1) == 0 ||
                        step == cfg.total_steps)) {
                log->record(step, loss, metrics.masked_token_accuracy, lr);
            }
        } catch (const NumericError& e) {
            if (!diagnostic_path.empty()) {
                ckpt.metrics.push_back({{"abort", e.what()}, {"step", step}});
                save_checkpoint(ckpt, diagnostic_path);
            }
            throw NumericError(std::string("pretraining aborted at step ") +
                               std::to_string(step) + ": " + e.what());
        }
        if (cfg.checkpoint_every && step % cfg.checkpoint_every == 0 &&
            !diagnostic_path.empty()) {
            // periodic checkpoints share the diagnostic path stem
            save_checkpoint(ckpt, diagnostic_path + ".step" + std::to_string(step));
        }
    }
    if (log) ckpt.metrics = log->history;
    ckpt.has_optimizer = true;
    ckpt.opt_step = opt.step_count();
    ckpt.opt_m = opt.first_moments();
    ckpt.opt_v = opt.second_moments();
    return ckpt;
}

// Held-out (or training-set) masked-token accuracy under fresh noise.
inline double evaluate_denoising(const Parameters& params, const ModelConfig& cfg,
                                 const std::vector<Poem>& poems, const Vocab& vocab,
                                 const NoiseConfig& noise, std::uint64_t seed) {
    std::size_t hits_total = 0, positions = 0;
    for (std::size_t i = 0; i < poems.size(); ++i) {
        Rng rng(detail_train::mix_seed(seed, i));
        auto ex = make_noised_example(vocab.encode(poems[i].text), noise, rng);
        if (ex.spans.empty()) continue;
        auto m = denoise_forward(params, cfg, {ex});
        std::size_t covered = 0;
        for (const auto& s : ex.spans) covered += s.length;
        hits_total += static_cast<std::size_t>(
            std::llround(m.masked_token_accuracy * static_cast<double>(covered)));
        positions += covered;
    }
    return positions ? static_cast<double>(hits_total) / static_cast<double>(positions) : 1.0;
}

// Fine-tunes the classifier head (and, unless frozen, the encoder) on
// labelled poems.
inline Checkpoint finetune(const Checkpoint& base,
                           const std::vector<std::pair<Poem, std::string>>& labeled,
                           const FinetuneConfig& cfg, MetricsLog* log = nullptr) {
    if (labeled.empty()) throw ValidationError("finetune: no labelled data");
    tune_allocator();
    if (cfg.labels.size() != base.config.num_styles)
        throw ValidationError("finetune: label set size does not match num_styles");

    std::map<std::string, std::uint32_t> label_idx;
    for (std::size_t i = 0; i < cfg.labels.size(); ++i)
        label_idx[cfg.labels[i]] = static_cast<std::uint32_t>(i);

    std::vector<TokenSeq> seqs;
    std::vector<std::uint32_t> targets;
    std::set<std::uint32_t> classes_seen;
    for (const auto& [poem, label] : labeled) {
        auto it = label_idx.find(label);
        if (it == label_idx.end())
            throw ValidationError("finetune: label '" + label + "' not in configured label set");
        seqs.push_back(base.vocab.encode(poem.text));
        targets.push_back(it->second);
        classes_seen.insert(it->second);
    }
    if (classes_seen.size() < 2)
        throw ValidationError("finetune: training data contains a single class");

    Checkpoint out;
    out.config = base.config;
    out.vocab = base.vocab;
    out.params = base.params.clone();
    out.step = base.step;
    out.metrics = base.metrics;

    if (cfg.freeze_encoder) {
        out.params.set_requires_grad(false, "enc");
        out.params.set_requires_grad(false, "embed");
    }

    ad::Adam opt({.lr = cfg.learning_rate});
    auto plist = parameter_list(out.params);
    Rng shuffle_rng(detail_train::mix_seed(cfg.seed, 0xF1E));

    std::vector<std::size_t> order(seqs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(begin + cfg.batch_size, order.size());
            std::vector<TokenSeq> bseqs;
            std::vector<std::uint32_t> btargets;
            for (std::size_t i = begin; i < end; ++i) {
                bseqs.push_back(seqs[order[i]]);
                btargets.push_back(targets[order[i]]);
            }
            Rng drop_rng(detail_train::mix_seed(cfg.seed, epoch, begin));
            out.params.zero_grad();
            auto logits = classify_logits(out.params, out.config, pad_batch(bseqs), &drop_rng);
            auto loss = ad::cross_entropy(logits, btargets, 0xFFFFFFFFu);
            epoch_loss += loss.item();
            ++batches;
            ad::backward(loss);
            opt.step(plist);
        }
        if (log && batches)
            log->record(epoch + 1, epoch_loss / static_cast<double>(batches), 0.0,
                        cfg.learning_rate);
    }
    // restore the trainable flag so later phases see a normal checkpoint
    out.params.set_requires_grad(true);
    return out;
}

struct EvalMetrics {
    double accuracy = 0.0;
    std::map<std::string, double> precision, recall, mean_prob;
    std::size_t count = 0;

    nlohmann::json to_json() const {
        return {{"accuracy", accuracy}, {"precision", precision}, {"recall", recall},
                {"mean_prob", mean_prob}, {"count", count}};
    }
};

inline EvalMetrics evaluate(const Checkpoint& ckpt,
                            const std::vector<std::pair<Poem, std::string>>& labeled,
                            const std::vector<std::string>& labels) {
    if (labeled.empty()) throw ValidationError("evaluate: no data");
    EvalMetrics m;
    m.count = labeled.size();
    std::map<std::string, std::size_t> tp, fp, fn;
    std::map<std::string, double> prob_sum;
    for (const auto& [poem, gold] : labeled) {
        auto scores = classify(ckpt.params, ckpt.config, pad_batch({ckpt.vocab.encode(poem.text)}),
                               labels);
        const auto& probs = scores[0].probs;
        std::string best;
        double best_p = -1;
        for (const auto& [label, p] : probs) {
            prob_sum[label] += p;
            if (p > best_p) {
                best_p = p;
                best = label;
            }
        }
        if (best == gold) {
            m.accuracy += 1.0;
            ++tp[gold];
        } else {
            ++fp[best];
            ++fn[gold];
        }
    }
    m.accuracy /= static_cast<double>(m.count);
    for (const auto& label : labels) {
        const double denom_p = static_cast<double>(tp[label] + fp[label]);
        const double denom_r = static_cast<double>(tp[label] + fn[label]);
        m.precision[label] = denom_p > 0 ? tp[label] / denom_p : 0.0;
        m.recall[label] = denom_r > 0 ? tp[label] / denom_r : 0.0;
        m.mean_prob[label] = prob_sum[label] / static_cast<double>(m.count);
    }
    return m;
}

}  // namespace bpoem
