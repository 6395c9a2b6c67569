#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "fedrai/checkpoint.hpp"
#include "fedrai/model.hpp"
#include "oracles.hpp"

using namespace fedrai;
using namespace fedrai::model;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.vocab_size = 16;
    c.embed_dim = 8;
    c.num_layers = 2;
    c.context_len = 16;
    c.adapter_rank = 2;
    c.adapter_targets = {"query", "value"};
    return c;
}

// Adapter with both factors randomised, so it is not a no-op.
AdapterSet random_adapter(const ModelConfig& c, uint64_t seed, double sigma = 0.1) {
    AdapterSet a = init_adapter(c, seed);
    std::mt19937_64 rng(seed * 7919 + 13);
    std::normal_distribution<double> dist(0.0, sigma);
    for (auto& t : a.targets) {
        for (auto& v : t.down.data) {
            v = dist(rng);
        }
        for (auto& v : t.up.data) {
            v = dist(rng);
        }
    }
    return a;
}

TokenSequence random_seq(const ModelConfig& c, size_t len, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> d(1, c.vocab_size - 1);  // avoid PAD
    TokenSequence s;
    for (size_t i = 0; i < len; ++i) {
        s.ids.push_back(d(rng));
    }
    return s;
}

double row_sumexp(const Matrix& table, size_t row) {
    double z = 0.0;
    for (size_t c = 0; c < table.cols; ++c) {
        z += std::exp(table(row, c));
    }
    return z;
}

}  // namespace

TEST_CASE("init_adapter: fresh adapter is a functional no-op") {
    ModelConfig c = small_config();
    BaseWeights base = random_base(c, 11, 0.3);
    AdapterSet a = init_adapter(c, 5);
    AdapterSet none = init_adapter(c, 6);
    for (auto& t : none.targets) {
        t.down.fill(0.0);
    }
    TokenSequence seq = random_seq(c, 8, 3);
    Matrix with_adapter = forward_logprobs(base, a, seq);
    Matrix base_only = forward_logprobs(base, none, seq);
    CHECK(max_abs_diff(with_adapter, base_only) == 0.0);
}

TEST_CASE("init_adapter: seeded determinism and distinct streams") {
    ModelConfig c = small_config();
    AdapterSet a1 = init_adapter(c, 42);
    AdapterSet a2 = init_adapter(c, 42);
    CHECK(adapter_max_abs_diff(a1, a2) == 0.0);

    AdapterSet b1 = init_adapter(c, 1);
    AdapterSet b2 = init_adapter(c, 2);
    bool down_differs = false;
    for (size_t t = 0; t < b1.targets.size(); ++t) {
        if (max_abs_diff(b1.targets[t].down, b2.targets[t].down) > 0.0) {
            down_differs = true;
        }
        // B factors start zero for every seed
        for (double v : b1.targets[t].up.data) {
            CHECK(v == 0.0);
        }
        for (double v : b2.targets[t].up.data) {
            CHECK(v == 0.0);
        }
    }
    CHECK(down_differs);
}

TEST_CASE("forward_logprobs: rows normalise for arbitrary inputs") {
    for (uint64_t seed = 0; seed < 8; ++seed) {
        ModelConfig c = small_config();
        c.num_layers = 1 + static_cast<int>(seed % 3);
        BaseWeights base = random_base(c, seed, 0.4);
        AdapterSet a = random_adapter(c, seed + 100);
        TokenSequence seq = random_seq(c, 3 + seed % 10, seed ^ 0xbeef);
        Matrix table = forward_logprobs(base, a, seq);
        for (size_t r = 0; r < table.rows; ++r) {
            CHECK(std::fabs(row_sumexp(table, r) - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("forward_logprobs: matches the straight-line oracle re-implementation") {
    ModelConfig c = small_config();  // 16-token vocab
    BaseWeights base = random_base(c, 21, 0.4);
    AdapterSet a = random_adapter(c, 22, 0.3);
    TokenSequence seq = random_seq(c, 8, 23);
    Matrix table = forward_logprobs(base, a, seq);
    auto naive = oracles::naive_forward(base, a, seq.ids);
    double worst = 0.0;
    for (size_t i = 0; i < table.rows; ++i) {
        for (size_t v = 0; v < table.cols; ++v) {
            worst = std::max(worst, std::fabs(table(i, v) - naive[i][v]));
        }
    }
    CHECK(worst <= 1e-10);
}

TEST_CASE("forward_logprobs: error paths") {
    ModelConfig c = small_config();
    BaseWeights base = random_base(c, 1, 0.2);
    AdapterSet a = init_adapter(c, 2);
    CHECK_THROWS_AS(forward_logprobs(base, a, random_seq(c, 17, 3)), LengthError);

    ModelConfig wrong = c;
    wrong.embed_dim = 10;  // factor dims no longer match the base
    AdapterSet bad = init_adapter(wrong, 2);
    CHECK_THROWS_AS(forward_logprobs(base, bad, random_seq(c, 4, 3)), ConfigError);

    ModelConfig deeper = c;
    deeper.num_layers = 3;
    AdapterSet extra_layers = init_adapter(deeper, 2);
    CHECK_THROWS_AS(forward_logprobs(base, extra_layers, random_seq(c, 4, 3)), ConfigError);
}

TEST_CASE("merge_adapter: zero-B merge is the identity") {
    ModelConfig c = small_config();
    BaseWeights base = random_base(c, 31, 0.3);
    AdapterSet noop = init_adapter(c, 32);
    BaseWeights merged = merge_adapter(base, noop);
    CHECK(max_abs_diff(merged.layers[0].query, base.layers[0].query) == 0.0);
    CHECK(max_abs_diff(merged.head, base.head) == 0.0);
}

TEST_CASE("merge_adapter: merged path equals adapter path") {
    ModelConfig c = small_config();
    BaseWeights base = random_base(c, 41, 0.3);
    AdapterSet a = random_adapter(c, 42, 0.2);
    TokenSequence seq = random_seq(c, 9, 43);
    BaseWeights merged = merge_adapter(base, a);
    AdapterSet noop = init_adapter(c, 44);
    for (auto& t : noop.targets) {
        t.down.fill(0.0);
    }
    Matrix via_merge = forward_logprobs(merged, noop, seq);
    Matrix via_adapter = forward_logprobs(base, a, seq);
    CHECK(max_abs_diff(via_merge, via_adapter) <= 1e-9);
}

TEST_CASE("merge_adapter: merging twice applies the delta twice") {
    ModelConfig c = small_config();
    BaseWeights base = random_base(c, 51, 0.3);
    AdapterSet a = random_adapter(c, 52, 0.2);
    BaseWeights once = merge_adapter(base, a);
    BaseWeights twice = merge_adapter(once, a);
    CHECK(max_abs_diff(once.layers[0].query, twice.layers[0].query) > 1e-6);
}

TEST_CASE("nll_loss_and_grad: uniform model scores ln(vocab)") {
    ModelConfig c = small_config();
    BaseWeights base = zero_base(c);
    AdapterSet a = init_adapter(c, 61);
    std::vector<TokenSequence> batch = {random_seq(c, 8, 62), random_seq(c, 5, 63)};
    LossResult res = nll_loss_and_grad(base, a, batch);
    CHECK(std::fabs(res.loss - std::log(16.0)) < 1e-9);
}

TEST_CASE("nll_loss_and_grad: duplicating the batch keeps the loss") {
    ModelConfig c = small_config();
    BaseWeights base = random_base(c, 71, 0.3);
    AdapterSet a = random_adapter(c, 72);
    std::vector<TokenSequence> batch = {random_seq(c, 8, 73), random_seq(c, 6, 74)};
    std::vector<TokenSequence> doubled = batch;
    doubled.insert(doubled.end(), batch.begin(), batch.end());
    CHECK(nll_loss_and_grad(base, a, batch).loss ==
          doctest::Approx(nll_loss_and_grad(base, a, doubled).loss).epsilon(1e-14));
}

TEST_CASE("nll_loss_and_grad: empty batch is an argument error") {
    ModelConfig c = small_config();
    BaseWeights base = zero_base(c);
    AdapterSet a = init_adapter(c, 1);
    CHECK_THROWS_AS(nll_loss_and_grad(base, a, {}), std::invalid_argument);
}

TEST_CASE("nll_loss_and_grad: analytic gradient matches finite differences") {
    ModelConfig c = small_config();
    BaseWeights base = random_base(c, 81, 0.3);
    AdapterSet a = random_adapter(c, 82, 0.15);
    std::vector<TokenSequence> batch = {random_seq(c, 8, 83), random_seq(c, 7, 84)};
    LossResult res = nll_loss_and_grad(base, a, batch);
    auto loss_fn = [&](const AdapterSet& p) { return nll_loss_and_grad(base, p, batch).loss; };
    CHECK(oracles::max_rel_grad_error(a, res.grads, loss_fn, 10, 85) <= 1e-4);
}

TEST_CASE("nll_conditioned: PAD targets are masked out") {
    ModelConfig c = small_config();
    BaseWeights base = random_base(c, 91, 0.3);
    AdapterSet a = init_adapter(c, 92);
    TokenSequence with_pad = random_seq(c, 6, 93);
    with_pad.ids.push_back(kPadToken);
    TokenSequence without = with_pad;
    without.ids.pop_back();
    LossResult padded = nll_loss_and_grad(base, a, {with_pad});
    LossResult plain = nll_loss_and_grad(base, a, {without});
    CHECK(padded.token_count == plain.token_count);
    CHECK(padded.loss == doctest::Approx(plain.loss).epsilon(1e-12));
}

TEST_CASE("apply_update: SGD definition on a scalar") {
    ModelConfig c;
    c.vocab_size = 8;
    c.embed_dim = 1;
    c.num_layers = 1;
    c.context_len = 4;
    c.adapter_rank = 1;
    c.adapter_targets = {"query"};
    AdapterSet a = init_adapter(c, 1);
    a.targets[0].down(0, 0) = 1.0;  // theta = [1.0]
    GradientSet g = zero_gradients(a);
    g.entries[0].down(0, 0) = 2.0;  // g = [2.0]
    UpdateParams p;
    p.mode = UpdateParams::Mode::sgd;
    p.lr = 0.1;
    auto [next, st] = apply_update(a, g, OptimizerState{}, p);
    CHECK(next.targets[0].down(0, 0) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(st.step == 1);
}

TEST_CASE("apply_update: zero gradient leaves the adapter unchanged") {
    ModelConfig c = small_config();
    AdapterSet a = random_adapter(c, 101);
    GradientSet g = zero_gradients(a);
    UpdateParams p;
    p.lr = 0.5;
    auto [next, st] = apply_update(a, g, OptimizerState{}, p);
    CHECK(adapter_max_abs_diff(a, next) == 0.0);
}

TEST_CASE("apply_update: non-finite gradient raises a numeric error") {
    ModelConfig c = small_config();
    AdapterSet a = random_adapter(c, 111);
    GradientSet g = zero_gradients(a);
    g.entries[0].down(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(apply_update(a, g, OptimizerState{}, UpdateParams{}), NumericError);
}

TEST_CASE("apply_update: AdamW matches the hand-rolled reference") {
    ModelConfig c;
    c.vocab_size = 8;
    c.embed_dim = 3;
    c.num_layers = 1;
    c.context_len = 4;
    c.adapter_rank = 1;
    c.adapter_targets = {"query"};
    AdapterSet a = init_adapter(c, 7);
    std::mt19937_64 rng(99);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : a.targets[0].down.data) {
        v = dist(rng);
    }
    for (auto& v : a.targets[0].up.data) {
        v = dist(rng);
    }

    UpdateParams p;
    p.mode = UpdateParams::Mode::adamw;
    p.lr = 0.05;
    p.beta1 = 0.9;
    p.beta2 = 0.999;
    p.eps = 1e-8;
    p.weight_decay = 0.01;

    std::vector<double> theta;
    for (double v : a.targets[0].down.data) {
        theta.push_back(v);
    }
    for (double v : a.targets[0].up.data) {
        theta.push_back(v);
    }
    oracles::AdamwRef ref;

    OptimizerState st;
    AdapterSet cur = a;
    for (int step = 0; step < 3; ++step) {
        GradientSet g = zero_gradients(cur);
        std::vector<double> flat;
        for (auto& v : g.entries[0].down.data) {
            v = dist(rng);
            flat.push_back(v);
        }
        for (auto& v : g.entries[0].up.data) {
            v = dist(rng);
            flat.push_back(v);
        }
        auto [next, nst] = apply_update(cur, g, st, p);
        cur = std::move(next);
        st = std::move(nst);
        ref.step(theta, flat, p.lr, p.beta1, p.beta2, p.eps, p.weight_decay);
    }

    size_t k = 0;
    double worst = 0.0;
    for (double v : cur.targets[0].down.data) {
        worst = std::max(worst, std::fabs(v - theta[k++]));
    }
    for (double v : cur.targets[0].up.data) {
        worst = std::max(worst, std::fabs(v - theta[k++]));
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("sample: temperature 0 is argmax of the forward rows") {
    ModelConfig c = small_config();
    BaseWeights base = random_base(c, 121, 0.4);
    AdapterSet a = random_adapter(c, 122);
    TokenSequence prompt = random_seq(c, 4, 123);
    TokenSequence out = sample(base, a, prompt, 6, 0.0, 1);

    TokenSequence ctx = prompt;
    for (int tok : out.ids) {
        Matrix table = forward_logprobs(base, a, ctx);
        const double* row = table.row(table.rows - 1);
        int argmax = 0;
        for (int v = 1; v < c.vocab_size; ++v) {
            if (row[v] > row[argmax]) {
                argmax = v;
            }
        }
        CHECK(tok == argmax);
        if (tok == kEosToken) {
            break;
        }
        ctx.ids.push_back(tok);
    }
}

TEST_CASE("sample: seeded determinism and length error") {
    ModelConfig c = small_config();
    BaseWeights base = random_base(c, 131, 0.4);
    AdapterSet a = random_adapter(c, 132);
    TokenSequence prompt = random_seq(c, 4, 133);
    CHECK(sample(base, a, prompt, 8, 0.7, 99) == sample(base, a, prompt, 8, 0.7, 99));

    TokenSequence full = random_seq(c, 16, 134);
    CHECK_THROWS_AS(sample(base, a, full, 1, 0.0, 1), LengthError);
}

TEST_CASE("sample: temperature 1 reproduces the exact model distribution") {
    // Hand-built model whose first-token distribution is (0.7, 0.2, 0.1).
    ModelConfig c;
    c.vocab_size = 3;
    c.embed_dim = 2;
    c.num_layers = 1;
    c.context_len = 4;
    c.adapter_rank = 1;
    c.adapter_targets = {"query"};
    BaseWeights base = zero_base(c);
    base.pos_embedding(0, 0) = 1.0;
    base.head(0, 0) = std::log(0.7);
    base.head(1, 0) = std::log(0.2);
    base.head(2, 0) = std::log(0.1);
    AdapterSet noop = init_adapter(c, 1);
    for (auto& t : noop.targets) {
        t.down.fill(0.0);
    }

    // the table itself is exact
    TokenSequence prompt(std::vector<int>{0});
    Matrix table = forward_logprobs(base, noop, prompt);
    CHECK(std::exp(table(0, 0)) == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(std::exp(table(0, 1)) == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(std::exp(table(0, 2)) == doctest::Approx(0.1).epsilon(1e-12));

    int counts[3] = {0, 0, 0};
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        TokenSequence out = sample(base, noop, prompt, 1, 1.0, static_cast<uint64_t>(i));
        REQUIRE(out.size() == 1);
        counts[out.ids[0]] += 1;
    }
    CHECK(std::fabs(counts[0] / double(n) - 0.7) < 0.02);
    CHECK(std::fabs(counts[1] / double(n) - 0.2) < 0.02);
    CHECK(std::fabs(counts[2] / double(n) - 0.1) < 0.02);
}

TEST_CASE("sequence_logprob: conditioning matches table accumulation") {
    ModelConfig c = small_config();
    BaseWeights base = random_base(c, 141, 0.4);
    AdapterSet a = random_adapter(c, 142);
    TokenSequence seq = random_seq(c, 10, 143);
    Matrix table = forward_logprobs(base, a, seq);
    double expect = 0.0;
    for (size_t pos = 4; pos < seq.size(); ++pos) {
        expect += table(pos - 1, static_cast<size_t>(seq.ids[pos]));
    }
    CHECK(sequence_logprob(base, a, seq, 4) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("pretrain_base: loss decreases on a tiny corpus") {
    ModelConfig c = small_config();
    std::vector<TokenSequence> corpus;
    for (uint64_t i = 0; i < 32; ++i) {
        corpus.push_back(random_seq(c, 8, 7000 + i));
    }
    PretrainParams p;
    p.steps = 60;
    p.batch_size = 8;
    p.lr = 0.01;
    BaseWeights before = random_base(c, derive_seed(5, "pretrain-init"), p.init_sigma);
    BaseWeights after = pretrain_base(c, corpus, p, 5);
    AdapterSet noop = init_adapter(c, 9);
    for (auto& t : noop.targets) {
        t.down.fill(0.0);
    }
    double l0 = nll_loss_and_grad(before, noop, corpus).loss;
    double l1 = nll_loss_and_grad(after, noop, corpus).loss;
    CHECK(l1 < l0);
}

TEST_CASE("checkpoint: bit-exact round trip") {
    ModelConfig c = small_config();
    AdapterSet a = random_adapter(c, 151);
    a.round_index = 17;

    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "fedrai_ckpt_test";
    fs::create_directories(dir);
    const std::string p1 = (dir / "a.frai").string();
    const std::string p2 = (dir / "b.frai").string();

    write_adapter_checkpoint(p1, a);
    AdapterSet back = read_adapter_checkpoint(p1);
    CHECK(back.round_index == 17);
    REQUIRE(back.targets.size() == a.targets.size());
    for (size_t t = 0; t < a.targets.size(); ++t) {
        CHECK(back.targets[t].name == a.targets[t].name);
        CHECK(max_abs_diff(back.targets[t].down, a.targets[t].down) == 0.0);
        CHECK(max_abs_diff(back.targets[t].up, a.targets[t].up) == 0.0);
    }
    write_adapter_checkpoint(p2, back);
    CHECK(read_text_file(p1) == read_text_file(p2));

    fs::remove_all(dir);
}

TEST_CASE("checkpoint: rejects corrupt input") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "fedrai_ckpt_bad";
    fs::create_directories(dir);
    const std::string p = (dir / "bad.frai").string();
    write_text_file_atomic(p, "NOPE");
    CHECK_THROWS_AS(read_adapter_checkpoint(p), IoError);
    fs::remove_all(dir);
}
