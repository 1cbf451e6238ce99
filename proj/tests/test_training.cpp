#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bpoem/training.hpp"
#include "test_util.hpp"

#include <cstring>
#include <fstream>

using namespace bpoem;

namespace {

const std::vector<std::string> kLabels2 = {"Tang", "Song"};

ModelConfig tiny_config(std::size_t vocab_size) {
    ModelConfig cfg;
    cfg.embedding_dim = 32;
    cfg.hidden_dim = 32;
    cfg.feedforward_dim = 64;
    cfg.num_heads = 2;
    cfg.num_layers = 1;
    cfg.dropout = 0.0;
    cfg.vocab_size = vocab_size;
    return cfg;
}

Checkpoint tiny_checkpoint(std::uint64_t seed = 7) {
    auto poems = test_util::synthetic_corpus(8, 3, 16);
    Checkpoint ckpt;
    ckpt.vocab = Vocab::build(poems, 1);
    ckpt.config = tiny_config(ckpt.vocab.size());
    ckpt.params = Parameters::init(ckpt.config, seed);
    ckpt.step = 5;
    return ckpt;
}

// Rewrites a checkpoint file with a mutated JSON header, preserving the
// payload bytes that follow it.
void rewrite_header(const std::string& path,
                    const std::function<void(nlohmann::json&)>& mutate) {
    const std::string raw = test_util::read_file(path);
    REQUIRE(raw.size() > 14);
    std::uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i)
        hlen |= std::uint64_t{static_cast<unsigned char>(raw[6 + i])} << (8 * i);
    nlohmann::json header = nlohmann::json::parse(raw.substr(14, hlen));
    mutate(header);
    const std::string hs = header.dump();
    std::string out = raw.substr(0, 6);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((hs.size() >> (8 * i)) & 0xFF));
    out += hs;
    out += raw.substr(14 + hlen);
    test_util::write_file(path, out);
}

}  // namespace

TEST_CASE("learning rate schedule: warmup then inverse-sqrt decay") {
    const double lr = 3e-4;
    CHECK(lr_at(0, lr, 40) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(lr_at(40, lr, 40) == doctest::Approx(lr).epsilon(1e-12));
    CHECK(lr_at(20, lr, 40) == doctest::Approx(lr / 2).epsilon(1e-12));
    // strictly increasing through warmup, strictly decreasing after
    for (std::size_t s = 1; s <= 40; ++s) CHECK(lr_at(s, lr, 40) > lr_at(s - 1, lr, 40));
    for (std::size_t s = 41; s <= 80; ++s) CHECK(lr_at(s, lr, 40) < lr_at(s - 1, lr, 40));
    CHECK(lr_at(160, lr, 40) == doctest::Approx(lr / 2).epsilon(1e-12));
    // degenerate warmup of zero steps treated as one
    CHECK(lr_at(1, lr, 0) == doctest::Approx(lr).epsilon(1e-12));
}

TEST_CASE("checkpoint save/load/save round trip is byte identical") {
    test_util::TempDir tmp;
    auto ckpt = tiny_checkpoint();
    ckpt.metrics.push_back({{"step", 5}, {"loss", 1.25}});

    save_checkpoint(ckpt, tmp.file("a.ckpt"));
    auto loaded = load_checkpoint(tmp.file("a.ckpt"));
    save_checkpoint(loaded, tmp.file("b.ckpt"));

    CHECK(test_util::read_file(tmp.file("a.ckpt")) == test_util::read_file(tmp.file("b.ckpt")));
    CHECK(loaded.step == ckpt.step);
    CHECK(loaded.metrics == ckpt.metrics);
    CHECK(loaded.vocab.content_hash() == ckpt.vocab.content_hash());
    for (const auto& [name, t] : ckpt.params.tensors()) {
        const auto& lt = loaded.params.at(name);
        REQUIRE(lt.shape() == t.shape());
        CHECK(lt.values() == t.values());
    }
}

TEST_CASE("checkpoint with optimizer state round trips") {
    test_util::TempDir tmp;
    auto ckpt = tiny_checkpoint();
    ckpt.has_optimizer = true;
    ckpt.opt_step = 17;
    Rng rng(9);
    for (const auto& [name, t] : ckpt.params.tensors()) {
        std::vector<double> m(t.size()), v(t.size());
        for (auto& x : m) x = rng.normal();
        for (auto& x : v) x = rng.uniform();
        ckpt.opt_m.push_back(std::move(m));
        ckpt.opt_v.push_back(std::move(v));
    }
    save_checkpoint(ckpt, tmp.file("o.ckpt"));
    auto loaded = load_checkpoint(tmp.file("o.ckpt"));
    CHECK(loaded.has_optimizer);
    CHECK(loaded.opt_step == 17);
    CHECK(loaded.opt_m == ckpt.opt_m);
    CHECK(loaded.opt_v == ckpt.opt_v);
}

TEST_CASE("corrupted checkpoints raise distinct typed errors") {
    test_util::TempDir tmp;
    auto ckpt = tiny_checkpoint();
    const std::string path = tmp.file("c.ckpt");

    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_checkpoint(tmp.file("absent.ckpt")), IoError);
    }
    SUBCASE("bad magic") {
        save_checkpoint(ckpt, path);
        auto raw = test_util::read_file(path);
        raw[0] = 'X';
        test_util::write_file(path, raw);
        CHECK_THROWS_AS(load_checkpoint(path), CorruptCheckpointError);
    }
    SUBCASE("truncated header") {
        save_checkpoint(ckpt, path);
        auto raw = test_util::read_file(path);
        test_util::write_file(path, raw.substr(0, 20));
        CHECK_THROWS_AS(load_checkpoint(path), CorruptCheckpointError);
    }
    SUBCASE("truncated payload") {
        save_checkpoint(ckpt, path);
        auto raw = test_util::read_file(path);
        test_util::write_file(path, raw.substr(0, raw.size() - 64));
        CHECK_THROWS_AS(load_checkpoint(path), CorruptCheckpointError);
    }
    SUBCASE("header is not JSON") {
        save_checkpoint(ckpt, path);
        auto raw = test_util::read_file(path);
        for (std::size_t i = 14; i < 30; ++i) raw[i] = '\x01';
        test_util::write_file(path, raw);
        CHECK_THROWS_AS(load_checkpoint(path), CorruptCheckpointError);
    }
    SUBCASE("version mismatch") {
        save_checkpoint(ckpt, path);
        rewrite_header(path, [](nlohmann::json& h) { h["version"] = 99; });
        CHECK_THROWS_AS(load_checkpoint(path), VersionMismatchError);
    }
    SUBCASE("unexpected tensor in shape table") {
        save_checkpoint(ckpt, path);
        rewrite_header(path, [](nlohmann::json& h) {
            h["tensors"][0]["name"] = "not.a.real.tensor";
        });
        CHECK_THROWS_AS(load_checkpoint(path), ShapeTableError);
    }
    SUBCASE("tensor shape mismatch") {
        save_checkpoint(ckpt, path);
        rewrite_header(path, [](nlohmann::json& h) {
            h["tensors"][0]["shape"] = {1, 2, 3};
        });
        CHECK_THROWS_AS(load_checkpoint(path), ShapeTableError);
    }
    SUBCASE("missing tensor") {
        save_checkpoint(ckpt, path);
        rewrite_header(path, [](nlohmann::json& h) {
            h["tensors"].erase(h["tensors"].size() - 1);
        });
        CHECK_THROWS_AS(load_checkpoint(path), ShapeTableError);
    }
    SUBCASE("duplicate tensor") {
        save_checkpoint(ckpt, path);
        rewrite_header(path, [](nlohmann::json& h) {
            h["tensors"].push_back(h["tensors"][0]);
        });
        CHECK_THROWS_AS(load_checkpoint(path), ShapeTableError);
    }
}

TEST_CASE("pretrain with zero steps returns the seeded initialization") {
    auto poems = test_util::synthetic_corpus(4, 11, 16);
    auto vocab = Vocab::build(poems, 1);
    auto cfg = tiny_config(vocab.size());
    PretrainConfig pc;
    pc.total_steps = 0;
    pc.warmup_steps = 0;
    pc.seed = 21;

    auto ckpt = pretrain(poems, vocab, cfg, pc);
    auto fresh = Parameters::init(cfg, 21);
    CHECK(ckpt.step == 0);
    for (const auto& [name, t] : fresh.tensors())
        CHECK(ckpt.params.at(name).values() == t.values());
}

TEST_CASE("pretrain is bit-reproducible for a fixed seed") {
    auto poems = test_util::synthetic_corpus(6, 13, 16);
    auto vocab = Vocab::build(poems, 1);
    auto cfg = tiny_config(vocab.size());
    PretrainConfig pc;
    pc.total_steps = 10;
    pc.warmup_steps = 4;
    pc.batch_size = 2;
    pc.eval_every = 1;
    pc.seed = 5;
    pc.noise.seed = 5;

    test_util::TempDir tmp;
    MetricsLog log1, log2;
    auto c1 = pretrain(poems, vocab, cfg, pc, &log1);
    auto c2 = pretrain(poems, vocab, cfg, pc, &log2);

    CHECK(log1.history == log2.history);
    CHECK(log1.history.size() == 10);
    save_checkpoint(c1, tmp.file("r1.ckpt"));
    save_checkpoint(c2, tmp.file("r2.ckpt"));
    CHECK(test_util::read_file(tmp.file("r1.ckpt")) == test_util::read_file(tmp.file("r2.ckpt")));

    // different seed actually changes the trajectory
    pc.seed = 6;
    MetricsLog log3;
    pretrain(poems, vocab, cfg, pc, &log3);
    CHECK(log1.history != log3.history);
}

TEST_CASE("pretrain reduces denoising loss on a tiny corpus") {
    auto poems = test_util::synthetic_corpus(4, 17, 12);
    auto vocab = Vocab::build(poems, 1);
    auto cfg = tiny_config(vocab.size());
    PretrainConfig pc;
    pc.total_steps = 150;
    pc.warmup_steps = 10;
    pc.batch_size = 4;
    pc.learning_rate = 2e-3;
    pc.eval_every = 1;
    pc.seed = 1;

    MetricsLog log;
    pretrain(poems, vocab, cfg, pc, &log);
    // average a few steps at each end so single-batch noise cannot mask the trend
    auto window_mean = [&](std::size_t begin) {
        double sum = 0.0;
        for (std::size_t i = begin; i < begin + 5; ++i) sum += log.history[i].at("loss").get<double>();
        return sum / 5.0;
    };
    const double first = window_mean(0);
    const double last = window_mean(log.history.size() - 5);
    CHECK(last < first);
    CHECK(last < 0.8 * first);
}

TEST_CASE("metrics log appends parseable JSON lines") {
    test_util::TempDir tmp;
    const std::string path = tmp.file("metrics.jsonl");
    MetricsLog log(path);
    log.record(1, 2.5, 0.1, 1e-4);
    log.record(2, 2.0, 0.2, 2e-4);

    std::ifstream in(path);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        CHECK(j.contains("step"));
        CHECK(j.contains("loss"));
        CHECK(j.contains("masked_acc"));
        CHECK(j.contains("lr"));
        ++n;
    }
    CHECK(n == 2);
    CHECK(log.history[1].at("loss") == doctest::Approx(2.0));
}

TEST_CASE("finetune validates its label configuration") {
    auto base = tiny_checkpoint();
    auto poems = test_util::synthetic_corpus(4, 19, 16);
    FinetuneConfig fc;
    fc.epochs = 1;

    SUBCASE("empty data") {
        CHECK_THROWS_AS(finetune(base, {}, fc), ValidationError);
    }
    SUBCASE("label not in configured set") {
        std::vector<std::pair<Poem, std::string>> data = {{poems[0], "Tang"}, {poems[1], "Yuan"}};
        CHECK_THROWS_AS(finetune(base, data, fc), ValidationError);
    }
    SUBCASE("single class present") {
        std::vector<std::pair<Poem, std::string>> data = {{poems[0], "Tang"}, {poems[1], "Tang"}};
        CHECK_THROWS_AS(finetune(base, data, fc), ValidationError);
    }
    SUBCASE("label set size disagrees with num_styles") {
        fc.labels = {"Tang", "Song", "Yuan"};
        std::vector<std::pair<Poem, std::string>> data = {{poems[0], "Tang"}, {poems[1], "Song"}};
        CHECK_THROWS_AS(finetune(base, data, fc), ValidationError);
    }
}

TEST_CASE("finetune with zero epochs leaves parameters untouched") {
    auto base = tiny_checkpoint();
    auto poems = test_util::synthetic_corpus(4, 23, 16);
    FinetuneConfig fc;
    fc.epochs = 0;
    std::vector<std::pair<Poem, std::string>> data = {{poems[0], "Tang"}, {poems[1], "Song"}};

    auto out = finetune(base, data, fc);
    for (const auto& [name, t] : base.params.tensors())
        CHECK(out.params.at(name).values() == t.values());
}

TEST_CASE("freeze_encoder pins encoder and embeddings while the head moves") {
    auto base = tiny_checkpoint();
    auto poems = test_util::synthetic_corpus(8, 29, 16);
    FinetuneConfig fc;
    fc.epochs = 2;
    fc.batch_size = 4;
    fc.learning_rate = 1e-3;
    fc.freeze_encoder = true;
    std::vector<std::pair<Poem, std::string>> data;
    for (std::size_t i = 0; i < poems.size(); ++i)
        data.emplace_back(poems[i], i % 2 ? "Song" : "Tang");

    auto out = finetune(base, data, fc);
    for (const auto& [name, t] : base.params.tensors()) {
        const bool frozen = name.rfind("enc", 0) == 0 || name.rfind("embed", 0) == 0;
        if (frozen) {
            CHECK(out.params.at(name).values() == t.values());
        } else if (name.rfind("head", 0) == 0) {
            CHECK(out.params.at(name).values() != t.values());
        }
    }
    // the returned checkpoint is trainable again
    for (const auto& [name, t] : out.params.tensors()) CHECK(t.requires_grad());
}

TEST_CASE("finetune is deterministic and evaluation is repeatable") {
    auto base = tiny_checkpoint();
    auto poems = test_util::synthetic_corpus(8, 31, 16);
    FinetuneConfig fc;
    fc.epochs = 1;
    fc.batch_size = 4;
    std::vector<std::pair<Poem, std::string>> data;
    for (std::size_t i = 0; i < poems.size(); ++i)
        data.emplace_back(poems[i], i % 2 ? "Song" : "Tang");

    auto a = finetune(base, data, fc);
    auto b = finetune(base, data, fc);
    for (const auto& [name, t] : a.params.tensors())
        CHECK(b.params.at(name).values() == t.values());

    auto m1 = evaluate(a, data, kLabels2);
    auto m2 = evaluate(a, data, kLabels2);
    CHECK(m1.accuracy == m2.accuracy);
    CHECK(m1.mean_prob == m2.mean_prob);
    CHECK(m1.precision == m2.precision);
    CHECK(m1.recall == m2.recall);
}

TEST_CASE("evaluate reports coherent aggregate metrics") {
    auto base = tiny_checkpoint();
    auto poems = test_util::synthetic_corpus(6, 37, 16);
    std::vector<std::pair<Poem, std::string>> data;
    for (std::size_t i = 0; i < poems.size(); ++i)
        data.emplace_back(poems[i], i % 2 ? "Song" : "Tang");

    auto m = evaluate(base, data, {"Tang", "Song"});
    CHECK(m.count == 6);
    CHECK(m.accuracy >= 0.0);
    CHECK(m.accuracy <= 1.0);
    CHECK(m.mean_prob.at("Tang") + m.mean_prob.at("Song") == doctest::Approx(1.0).epsilon(1e-9));
    CHECK_THROWS_AS(evaluate(base, {}, {"Tang", "Song"}), ValidationError);
}
