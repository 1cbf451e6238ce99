#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bpoem/common.hpp"
#include "bpoem/corpus.hpp"
#include "bpoem/inference.hpp"
#include "bpoem/model.hpp"
#include "bpoem/noising.hpp"
#include "bpoem/training.hpp"
#include "bpoem/vocab.hpp"

namespace bpoem::cli {

// Exit codes: 0 success, 1 validation failure, 2 I/O failure, 3 numerical abort.
enum ExitCode { kOk = 0, kValidation = 1, kIo = 2, kNumeric = 3 };

// Flat key=value configuration with dotted section prefixes, e.g.
//   noise.mask_ratio=0.15
// '#' starts a comment; blank lines are ignored.
class Config {
public:
    static Config parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config file: " + path);
        Config cfg;
        std::string line;
        std::size_t lineno = 0;
        std::vector<std::string> errors;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                errors.push_back("line " + std::to_string(lineno) + ": expected key=value");
                continue;
            }
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty())
                errors.push_back("line " + std::to_string(lineno) + ": empty key");
            else
                cfg.values_[key] = value;
        }
        if (!errors.empty()) {
            std::string msg = "config errors in " + path + ":";
            for (const auto& e : errors) msg += "\n  " + e;
            throw ValidationError(msg);
        }
        return cfg;
    }

    std::optional<std::string> get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) return std::nullopt;
        return it->second;
    }
    std::string get_or(const std::string& key, const std::string& dflt) const {
        return get(key).value_or(dflt);
    }
    double get_double(const std::string& key, double dflt) const {
        auto v = get(key);
        if (!v) return dflt;
        try {
            return std::stod(*v);
        } catch (...) {
            throw ValidationError("config key " + key + " is not a number: " + *v);
        }
    }
    std::uint64_t get_uint(const std::string& key, std::uint64_t dflt) const {
        auto v = get(key);
        if (!v) return dflt;
        try {
            return std::stoull(*v);
        } catch (...) {
            throw ValidationError("config key " + key + " is not an integer: " + *v);
        }
    }
    bool get_bool(const std::string& key, bool dflt) const {
        auto v = get(key);
        if (!v) return dflt;
        if (*v == "true" || *v == "1" || *v == "yes") return true;
        if (*v == "false" || *v == "0" || *v == "no") return false;
        throw ValidationError("config key " + key + " is not a boolean: " + *v);
    }
    std::string require(const std::string& key) const {
        auto v = get(key);
        if (!v) throw ValidationError("config key missing: " + key);
        return *v;
    }

private:
    std::map<std::string, std::string> values_;
};

// Seed precedence: explicit flag > POEM_SEED env > config file.
inline std::uint64_t resolve_seed(const Config& cfg, std::optional<std::uint64_t> flag_seed) {
    if (flag_seed) return *flag_seed;
    if (const char* env = std::getenv("POEM_SEED")) {
        try {
            return std::stoull(env);
        } catch (...) {
            throw ValidationError("POEM_SEED is not an integer");
        }
    }
    return cfg.get_uint("seed", 0);
}

inline ModelConfig model_config_from(const Config& cfg, std::size_t vocab_size) {
    ModelConfig m;
    m.hidden_dim = cfg.get_uint("model.hidden_dim", 128);
    m.embedding_dim = cfg.get_uint("model.embedding_dim", m.hidden_dim);
    m.feedforward_dim = cfg.get_uint("model.feedforward_dim", 512);
    m.num_heads = cfg.get_uint("model.num_heads", 4);
    m.num_layers = cfg.get_uint("model.num_layers", 2);
    m.dropout = cfg.get_double("model.dropout", 0.1);
    m.max_positions = cfg.get_uint("model.max_positions", 128);
    m.num_styles = cfg.get_uint("model.num_styles", 2);
    m.head_hidden_dim = cfg.get_uint("model.head_hidden_dim", 0);
    m.vocab_size = vocab_size;
    return m;
}

inline NoiseConfig noise_config_from(const Config& cfg, std::uint64_t seed) {
    NoiseConfig n;
    n.mask_ratio = cfg.get_double("noise.mask_ratio", 0.15);
    n.span_max_length = cfg.get_uint("noise.span_max_length", 3);
    n.seed = cfg.get_uint("noise.seed", seed);
    return n;
}

inline std::vector<std::string> split_labels(const std::string& csv) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : csv) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

struct IngestOptions {
    std::vector<std::string> inputs;
    std::string output;
    std::string stats_path;
    bool qilu_only = false;
};

inline int cmd_ingest(const IngestOptions& opt) {
    std::vector<Poem> cleaned;
    std::size_t issue_count = 0;
    for (const auto& path : opt.inputs) {
        auto result = ingest(path);
        issue_count += result.issues.size();
        for (const auto& issue : result.issues)
            std::cerr << path << ":" << issue.line << ": " << issue.message << "\n";
        for (auto& poem : result.poems) {
            Poem p = normalize(poem);
            p.form = detect_form(p);
            if (opt.qilu_only && p.form != PoemForm::QiLu) continue;
            cleaned.push_back(std::move(p));
        }
    }
    std::size_t removed = 0;
    cleaned = dedupe(cleaned, &removed);
    write_jsonl(cleaned, opt.output);
    auto stats = corpus_stats(cleaned, removed);
    if (!opt.stats_path.empty()) {
        std::ofstream out(opt.stats_path, std::ios::binary);
        if (!out) throw IoError("cannot write stats: " + opt.stats_path);
        out << stats.to_json().dump(2) << "\n";
    }
    std::cout << nlohmann::json({{"command", "ingest"},
                                 {"poems", stats.poem_count},
                                 {"duplicates_removed", removed},
                                 {"record_errors", issue_count},
                                 {"output", opt.output}})
                     .dump()
              << "\n";
    return kOk;
}

inline std::vector<Poem> load_poems(const std::string& path) {
    auto result = ingest(path);
    std::vector<Poem> poems;
    for (auto& p : result.poems) {
        Poem n = normalize(p);
        n.form = detect_form(n);
        poems.push_back(std::move(n));
    }
    return poems;
}

inline int cmd_pretrain(const std::string& config_path,
                        std::optional<std::uint64_t> flag_seed) {
    auto cfg = Config::parse_file(config_path);
    const auto seed = resolve_seed(cfg, flag_seed);
    const auto data_path = cfg.require("data.train");
    const auto out_dir = cfg.get_or("out.dir", ".");
    std::filesystem::create_directories(out_dir);

    auto poems = load_poems(data_path);
    if (poems.empty()) throw ValidationError("no poems in " + data_path);
    auto vocab = Vocab::build(poems, cfg.get_uint("vocab.min_freq", 1));

    auto model_cfg = model_config_from(cfg, vocab.size());
    PretrainConfig pc;
    pc.batch_size = cfg.get_uint("pretrain.batch_size", 8);
    pc.total_steps = cfg.get_uint("pretrain.total_steps", 400);
    pc.learning_rate = cfg.get_double("pretrain.learning_rate", 2e-3);
    pc.warmup_steps = cfg.get_uint("pretrain.warmup_steps", 40);
    pc.eval_every = cfg.get_uint("pretrain.eval_every", 50);
    pc.checkpoint_every = cfg.get_uint("pretrain.checkpoint_every", 0);
    pc.seed = seed;
    pc.noise = noise_config_from(cfg, seed);

    const std::string ckpt_path = (std::filesystem::path(out_dir) / "pretrained.ckpt").string();
    MetricsLog log((std::filesystem::path(out_dir) / "pretrain_metrics.jsonl").string());
    auto ckpt = pretrain(poems, vocab, model_cfg, pc, &log,
                         (std::filesystem::path(out_dir) / "diagnostic.ckpt").string());
    save_checkpoint(ckpt, ckpt_path);
    vocab.save((std::filesystem::path(out_dir) / "vocab.json").string());

    double final_loss = 0.0, final_acc = 0.0;
    if (!log.history.empty()) {
        final_loss = log.history.back().value("loss", 0.0);
        final_acc = log.history.back().value("masked_acc", 0.0);
    }
    std::cout << nlohmann::json({{"command", "pretrain"},
                                 {"steps", ckpt.step},
                                 {"loss", final_loss},
                                 {"masked_acc", final_acc},
                                 {"checkpoint", ckpt_path}})
                     .dump()
              << "\n";
    return kOk;
}

inline int cmd_finetune(const std::string& config_path, const std::string& base_path,
                        std::optional<std::uint64_t> flag_seed) {
    auto cfg = Config::parse_file(config_path);
    const auto seed = resolve_seed(cfg, flag_seed);
    const auto data_path = cfg.require("data.labeled");
    const auto out_dir = cfg.get_or("out.dir", ".");
    std::filesystem::create_directories(out_dir);

    auto base = load_checkpoint(base_path);
    FinetuneConfig fc;
    fc.batch_size = cfg.get_uint("finetune.batch_size", 16);
    fc.epochs = cfg.get_uint("finetune.epochs", 3);
    fc.learning_rate = cfg.get_double("finetune.learning_rate", 5e-5);
    fc.freeze_encoder = cfg.get_bool("finetune.freeze_encoder", false);
    fc.labels = split_labels(cfg.get_or("finetune.labels", "Tang,Song"));
    fc.seed = seed;

    std::vector<std::pair<Poem, std::string>> labeled;
    for (auto& p : load_poems(data_path))
        labeled.emplace_back(p, dynasty_to_string(p.dynasty, p.dynasty_name));

    const std::string ckpt_path = (std::filesystem::path(out_dir) / "finetuned.ckpt").string();
    MetricsLog log((std::filesystem::path(out_dir) / "finetune_metrics.jsonl").string());
    auto ckpt = finetune(base, labeled, fc, &log);
    save_checkpoint(ckpt, ckpt_path);
    std::cout << nlohmann::json({{"command", "finetune"},
                                 {"examples", labeled.size()},
                                 {"epochs", fc.epochs},
                                 {"checkpoint", ckpt_path}})
                     .dump()
              << "\n";
    return kOk;
}

struct ScoreOptions {
    std::string ckpt_path;
    std::string input;
    std::string output;       // empty -> stdout
    std::string group_name;   // report group label for --by-poet
    bool by_poet = false;
    bool strict_form = false;
    std::vector<std::string> labels = {"Tang", "Song"};
};

inline int cmd_score(const ScoreOptions& opt) {
    auto ckpt = load_checkpoint(opt.ckpt_path);
    auto poems = load_poems(opt.input);
    if (poems.empty()) throw ValidationError("no poems in " + opt.input);

    nlohmann::json out;
    if (opt.by_poet) {
        std::map<std::string, std::vector<Poem>> by_author;
        std::vector<std::string> author_order;
        for (auto& p : poems) {
            if (!by_author.count(p.author)) author_order.push_back(p.author);
            by_author[p.author].push_back(p);
        }
        ReportGroup group;
        group.name = opt.group_name.empty() ? opt.input : opt.group_name;
        for (const auto& author : author_order)
            group.poets.push_back(score_poet(ckpt, author, by_author[author], opt.labels));
        out = report_json({group});
    } else {
        out["poems"] = nlohmann::json::array();
        for (const auto& p : poems) {
            try {
                auto s = score_poem(ckpt, p, opt.labels, opt.strict_form);
                out["poems"].push_back(
                    {{"id", p.id}, {"author", p.author}, {"scores", s.probs}});
            } catch (const ValidationError& e) {
                if (opt.strict_form) throw;
                out["poems"].push_back({{"id", p.id}, {"error", e.what()}});
            }
        }
    }
    if (!opt.strict_form) {
        for (const auto& p : poems)
            if (detect_form(p) != PoemForm::QiLu)
                std::cerr << "warning: poem " << p.id
                          << " is not seven-character regulated verse\n";
    }
    const std::string dump = out.dump(2);
    if (opt.output.empty()) {
        std::cout << dump << "\n";
    } else {
        std::ofstream f(opt.output, std::ios::binary);
        if (!f) throw IoError("cannot write scores: " + opt.output);
        f << dump << "\n";
        std::cout << nlohmann::json({{"command", "score"},
                                     {"poems", poems.size()},
                                     {"output", opt.output}})
                         .dump()
                  << "\n";
    }
    return kOk;
}

inline int cmd_complete(const std::string& ckpt_path, const std::string& input,
                        const std::string& output) {
    auto ckpt = load_checkpoint(ckpt_path);
    auto poems = load_poems(input);
    std::ofstream out(output, std::ios::binary);
    if (!out) throw IoError("cannot write completions: " + output);
    std::size_t truncated = 0;
    for (const auto& p : poems) {
        auto result = complete_poem(ckpt, p);
        truncated += result.truncated;
        nlohmann::json j = poem_to_json(p);
        j["completed"] = result.text;
        j["truncated"] = result.truncated;
        out << j.dump() << "\n";
    }
    std::cout << nlohmann::json({{"command", "complete"},
                                 {"poems", poems.size()},
                                 {"truncated", truncated},
                                 {"output", output}})
                     .dump()
              << "\n";
    return kOk;
}

inline int cmd_report(const std::vector<std::string>& score_files,
                      const std::string& json_out,
                      const std::vector<std::string>& styles) {
    std::vector<ReportGroup> groups;
    for (const auto& path : score_files) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open scores file: " + path);
        nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded()) throw ValidationError("scores file is not JSON: " + path);
        for (auto& g : report_from_json(j)) groups.push_back(std::move(g));
    }
    std::cout << report_text(groups, styles);
    if (!json_out.empty()) {
        std::ofstream out(json_out, std::ios::binary);
        if (!out) throw IoError("cannot write report: " + json_out);
        out << report_json(groups).dump(2) << "\n";
    }
    return kOk;
}

inline int run(std::vector<std::string> args) {
    CLI::App app{"classical-poetry style pipeline"};
    app.require_subcommand(1);

    IngestOptions ingest_opt;
    auto* ing = app.add_subcommand("ingest", "clean and filter a raw corpus");
    ing->add_option("--input", ingest_opt.inputs, "input JSONL file(s)")->required();
    ing->add_option("--output", ingest_opt.output, "cleaned JSONL output")->required();
    ing->add_option("--stats", ingest_opt.stats_path, "write corpus stats JSON here");
    ing->add_flag("--qilu-only", ingest_opt.qilu_only, "keep only 8x7 regulated verse");

    std::string config_path, base_path;
    std::optional<std::uint64_t> flag_seed;
    auto* pre = app.add_subcommand("pretrain", "denoising pretraining");
    pre->add_option("--config", config_path, "run configuration")->required();
    pre->add_option("--seed", flag_seed, "override config/env seed");

    auto* fin = app.add_subcommand("finetune", "style-classification fine-tuning");
    fin->add_option("--config", config_path, "run configuration")->required();
    fin->add_option("--base", base_path, "pretrained checkpoint")->required();
    fin->add_option("--seed", flag_seed, "override config/env seed");

    ScoreOptions score_opt;
    std::string labels_csv = "Tang,Song";
    auto* sco = app.add_subcommand("score", "style similarity scoring");
    sco->add_option("--ckpt", score_opt.ckpt_path, "fine-tuned checkpoint")->required();
    sco->add_option("--input", score_opt.input, "poems JSONL")->required();
    sco->add_option("--output", score_opt.output, "write scores JSON here");
    sco->add_option("--group-name", score_opt.group_name, "group label for --by-poet");
    sco->add_flag("--by-poet", score_opt.by_poet, "aggregate per poet");
    sco->add_flag("--strict-form", score_opt.strict_form, "reject non-regulated verse");
    sco->add_option("--labels", labels_csv, "comma-separated style labels");

    std::string complete_ckpt, complete_in, complete_out;
    auto* com = app.add_subcommand("complete", "fill damaged poems");
    com->add_option("--ckpt", complete_ckpt, "pretrained checkpoint")->required();
    com->add_option("--input", complete_in, "poems JSONL (with '?')")->required();
    com->add_option("--output", complete_out, "completed JSONL")->required();

    std::vector<std::string> score_files;
    std::string report_json_out, report_styles = "Tang,Song";
    auto* rep = app.add_subcommand("report", "render grouped score files as a table");
    rep->add_option("--scores", score_files, "score JSON file(s), one group each")->required();
    rep->add_option("--json", report_json_out, "also write the table as JSON");
    rep->add_option("--styles", report_styles, "comma-separated style rows");

    try {
        std::vector<const char*> argv;
        argv.push_back("bpoem");
        for (const auto& a : args) argv.push_back(a.c_str());
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kValidation;
    }

    try {
        if (ing->parsed()) return cmd_ingest(ingest_opt);
        if (pre->parsed()) return cmd_pretrain(config_path, flag_seed);
        if (fin->parsed()) return cmd_finetune(config_path, base_path, flag_seed);
        if (sco->parsed()) {
            score_opt.labels = split_labels(labels_csv);
            return cmd_score(score_opt);
        }
        if (com->parsed()) return cmd_complete(complete_ckpt, complete_in, complete_out);
        if (rep->parsed()) return cmd_report(score_files, report_json_out,
                                             split_labels(report_styles));
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kIo;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kNumeric;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    }
    return kValidation;
}

}  // namespace bpoem::cli
