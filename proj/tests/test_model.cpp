#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "support/oracle.hpp"
#include "support/testutil.hpp"
#include "vfl/model/checkpoint.hpp"
#include "vfl/model/graph.hpp"
#include "vfl/model/infer.hpp"

using namespace vfl;
using vfltest::oracle_answer_logprob;
using vfltest::oracle_embed;
using vfltest::oracle_embed_tokens;
using vfltest::oracle_run;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.vocab_size = 20;
    c.image_size = 16;
    c.patch_size = 8;
    c.max_seq = 32;
    return c;
}

template <typename R>
MultimodalSequence make_seq(const ModelConfig& cfg, Rng& rng, int prompt_len, int answer_len,
                            bool with_image = true) {
    MultimodalSequence seq;
    seq.span.start = 0;
    seq.span.len = with_image ? cfg.n_patches() : 0;
    if (with_image) {
        seq.image = blank_image(cfg);
        for (float& v : seq.image.px) v = float(rng.next_double());
    }
    for (int i = 0; i < seq.span.len; ++i) seq.tokens.push_back(0);
    for (int i = 0; i < prompt_len + answer_len; ++i)
        seq.tokens.push_back(int(rng.next_below(uint64_t(cfg.vocab_size))));
    seq.prompt_end = seq.span.len + prompt_len;
    seq.answer_len = answer_len;
    return seq;
}

}  // namespace

TEST_CASE("embed_image on a zero image with zero bias yields position rows") {
    ModelConfig cfg = tiny_config();
    Params<float> p = init_params<float>(cfg, 5);
    for (float& v : p.patch_b.data) v = 0.0f;
    Image im = blank_image(cfg);
    Tensor32 rows = embed_image(p, im, 0);
    for (int i = 0; i < cfg.n_patches(); ++i)
        for (int j = 0; j < cfg.d_model; ++j) CHECK(rows.at(i, j) == p.pos_emb.at(i, j));
}

TEST_CASE("embed_image is deterministic and matches the hand projection") {
    ModelConfig cfg = tiny_config();
    Params<double> p = init_params<double>(cfg, 6);
    Rng rng(9);
    MultimodalSequence seq = make_seq<double>(cfg, rng, 3, 0);
    Tensor64 a = embed_image(p, seq.image, 0);
    Tensor64 b = embed_image(p, seq.image, 0);
    CHECK(a.data == b.data);
    auto rows = oracle_embed(p, seq);
    for (int i = 0; i < cfg.n_patches(); ++i)
        for (int j = 0; j < cfg.d_model; ++j)
            CHECK(a.at(i, j) == Catch::Approx(rows[size_t(i)][size_t(j)]).margin(1e-12));
}

TEST_CASE("single-patch grid reduces to one flattened projection row") {
    ModelConfig cfg = tiny_config();
    cfg.image_size = 8;  // one 8x8 patch
    Params<double> p = init_params<double>(cfg, 7);
    Image im = blank_image(cfg);
    Rng rng(3);
    for (float& v : im.px) v = float(rng.next_double());
    Tensor64 rows = embed_image(p, im, 0);
    REQUIRE(rows.shape == std::vector<int>{1, cfg.d_model});
    for (int j = 0; j < cfg.d_model; ++j) {
        double acc = p.patch_b.data[size_t(j)] + p.pos_emb.at(0, j);
        for (int t = 0; t < cfg.patch_dim(); ++t)
            acc += double(im.px[size_t(t)]) * p.patch_w.at(t, j);
        CHECK(rows.at(0, j) == Catch::Approx(acc).margin(1e-12));
    }
}

TEST_CASE("prefill matches the no-cache forward oracle at every text position") {
    ModelConfig cfg = tiny_config();
    Rng rng(21);
    for (int rep = 0; rep < 3; ++rep) {
        Params<float> p = init_params<float>(cfg, 100 + uint64_t(rep));
        MultimodalSequence seq = make_seq<float>(cfg, rng, 5, 3);
        std::vector<int> collect;
        for (int i = seq.span.len; i < seq.length() - 1; ++i) collect.push_back(i);
        std::vector<Tensor32> got;
        PrefillResult<float> res = prefill_engine(p, seq, cfg.n_layers, &collect, &got);
        auto tr = oracle_run(p, oracle_embed(p, seq));
        for (size_t ci = 0; ci < collect.size(); ++ci)
            for (int j = 0; j < cfg.vocab_size; ++j)
                CHECK(got[ci].data[size_t(j)] ==
                      Catch::Approx(tr.logits[size_t(collect[ci])][size_t(j)]).margin(1e-5));
        for (int j = 0; j < cfg.vocab_size; ++j)
            CHECK(res.last_logits.data[size_t(j)] ==
                  Catch::Approx(tr.logits.back()[size_t(j)]).margin(1e-5));
    }
}

TEST_CASE("text-only sequences run with an empty vision span") {
    ModelConfig cfg = tiny_config();
    Rng rng(33);
    Params<float> p = init_params<float>(cfg, 8);
    MultimodalSequence seq = make_seq<float>(cfg, rng, 6, 0, false);
    PrefillResult<float> res = prefill(p, seq);
    for (int l = 0; l < cfg.n_layers; ++l) CHECK(res.cache.vision_rows(l).empty());
    auto tr = oracle_run(p, oracle_embed(p, seq));
    for (int j = 0; j < cfg.vocab_size; ++j)
        CHECK(res.last_logits.data[size_t(j)] == Catch::Approx(tr.logits.back()[size_t(j)]).margin(1e-5));
}

TEST_CASE("two prefills of the same sequence produce bit-identical caches") {
    ModelConfig cfg = tiny_config();
    Rng rng(44);
    Params<float> p = init_params<float>(cfg, 9);
    MultimodalSequence seq = make_seq<float>(cfg, rng, 4, 0);
    PrefillResult<float> a = prefill(p, seq);
    PrefillResult<float> b = prefill(p, seq);
    CHECK(a.last_logits.data == b.last_logits.data);
    for (int l = 0; l < cfg.n_layers; ++l) {
        CHECK(a.cache.layers[size_t(l)].k == b.cache.layers[size_t(l)].k);
        CHECK(a.cache.layers[size_t(l)].v == b.cache.layers[size_t(l)].v);
        CHECK(a.cache.layers[size_t(l)].pos == b.cache.layers[size_t(l)].pos);
    }
}

TEST_CASE("cached greedy decode equals the no-cache forward at every step") {
    ModelConfig cfg = tiny_config();
    Rng rng(55);
    for (int rep = 0; rep < 20; ++rep) {
        Params<float> p = init_params<float>(cfg, 200 + uint64_t(rep));
        MultimodalSequence seq = make_seq<float>(cfg, rng, 4, 0, rep % 2 == 0);
        PrefillResult<float> res = prefill(p, seq);
        Tensor32 logits = res.last_logits;
        MultimodalSequence grown = seq;  // the oracle re-reads the whole prefix each step
        for (int step = 0; step < 8; ++step) {
            auto tr = oracle_run(p, oracle_embed(p, grown));
            for (int j = 0; j < cfg.vocab_size; ++j)
                CHECK(logits.data[size_t(j)] == Catch::Approx(tr.logits.back()[size_t(j)]).margin(1e-5));
            int tok = argmax_token(logits);
            grown.tokens.push_back(tok);
            grown.prompt_end = grown.length();
            int before = res.cache.layers[0].count();
            logits = decode_step(p, res.cache, tok);
            for (int l = 0; l < cfg.n_layers; ++l)
                CHECK(res.cache.layers[size_t(l)].count() == before + 1);
        }
    }
}

TEST_CASE("replay of the final position reproduces prefill logits bit for bit") {
    ModelConfig cfg = tiny_config();
    Rng rng(66);
    Params<float> p = init_params<float>(cfg, 10);
    MultimodalSequence seq = make_seq<float>(cfg, rng, 5, 0);
    PrefillResult<float> res = prefill(p, seq);
    Tensor32 again = replay_last(p, res.cache, seq.tokens.back());
    CHECK(again.data == res.last_logits.data);
}

TEST_CASE("argmax breaks ties toward the lowest token id") {
    Tensor32 logits({5}, {1.0f, 3.0f, 3.0f, 2.0f, 3.0f});
    CHECK(argmax_token(logits) == 1);
    Tensor32 flat({3}, {0.0f, 0.0f, 0.0f});
    CHECK(argmax_token(flat) == 0);
}

TEST_CASE("generate emits a forced token until max_new and stops at eos") {
    ModelConfig cfg = tiny_config();
    // Construct weights that force one fixed winning token at every step:
    // all layer weights zero (residual passthrough), every embedding is the
    // first basis vector, and the head maps it to token t.
    auto forced = [&](int t) {
        Params<float> p = init_params<float>(cfg, 0);
        p.for_each([](const std::string&, Tensor32& w) {
            for (float& v : w.data) v = 0.0f;
        });
        for (int l = 0; l < cfg.n_layers; ++l) {
            for (float& v : p.layers[size_t(l)].norm1_g.data) v = 1.0f;
            for (float& v : p.layers[size_t(l)].norm2_g.data) v = 1.0f;
        }
        for (float& v : p.final_norm_g.data) v = 1.0f;
        for (int r = 0; r < cfg.vocab_size; ++r) p.tok_emb.at(r, 0) = 1.0f;
        p.patch_b.data[0] = 1.0f;
        p.lm_head.at(0, t) = 1.0f;
        return p;
    };
    Rng rng(77);
    MultimodalSequence seq = make_seq<float>(cfg, rng, 3, 0);
    Params<float> p5 = forced(5);
    std::vector<int> out = generate(p5, seq, 4, /*eos=*/7);
    CHECK(out == std::vector<int>{5, 5, 5, 5});
    Params<float> p7 = forced(7);
    CHECK(generate(p7, seq, 4, 7).empty());
}

TEST_CASE("sequence_logprob of a one-token answer is the log softmax of prefill logits") {
    ModelConfig cfg = tiny_config();
    Rng rng(88);
    Params<float> p = init_params<float>(cfg, 11);
    MultimodalSequence full = make_seq<float>(cfg, rng, 4, 1);
    MultimodalSequence promptOnly = full;
    promptOnly.tokens.pop_back();
    promptOnly.answer_len = 0;
    PrefillResult<float> res = prefill(p, promptOnly);
    int ans = full.tokens.back();
    double mx = -1e300, z = 0.0;
    for (float v : res.last_logits.data) mx = std::max(mx, double(v));
    for (float v : res.last_logits.data) z += std::exp(double(v) - mx);
    double expect = double(res.last_logits.data[size_t(ans)]) - mx - std::log(z);
    CHECK(sequence_logprob(p, full) == Catch::Approx(expect).margin(1e-6));
}

TEST_CASE("sequence_logprob obeys the chain rule over answer prefixes") {
    ModelConfig cfg = tiny_config();
    Rng rng(99);
    Params<float> p = init_params<float>(cfg, 12);
    MultimodalSequence full = make_seq<float>(cfg, rng, 4, 3);
    double whole = sequence_logprob(p, full);
    double stepwise = 0.0;
    for (int a = 1; a <= 3; ++a) {
        MultimodalSequence part = full;
        part.tokens.resize(size_t(full.prompt_end + a));
        part.answer_len = a;
        double with = sequence_logprob(p, part);
        double without = 0.0;
        if (a > 1) {
            MultimodalSequence prev = full;
            prev.tokens.resize(size_t(full.prompt_end + a - 1));
            prev.answer_len = a - 1;
            without = sequence_logprob(p, prev);
        }
        stepwise += with - without;
    }
    CHECK(whole == Catch::Approx(stepwise).margin(1e-6));
}

TEST_CASE("sequence_logprob agrees with the oracle forward") {
    ModelConfig cfg = tiny_config();
    Rng rng(111);
    Params<double> p = init_params<double>(cfg, 13);
    MultimodalSequence seq = make_seq<double>(cfg, rng, 5, 3);
    auto tr = oracle_run(p, oracle_embed(p, seq));
    double expect = oracle_answer_logprob(tr.logits, seq.tokens, seq.prompt_end);
    CHECK(sequence_logprob(p, seq) == Catch::Approx(expect).margin(1e-9));
}

TEST_CASE("training graph loss equals the inference log-likelihood") {
    ModelConfig cfg = tiny_config();
    Rng rng(123);
    Params<double> p = init_params<double>(cfg, 14);
    MultimodalSequence seq = make_seq<double>(cfg, rng, 4, 3);
    Tape<double> tape;
    GraphParamIds<double> ids = register_params(tape, p, false);
    int loss = sample_loss(tape, ids, cfg, seq);
    double expect = -sequence_logprob(p, seq) / double(seq.answer_len);
    CHECK(tape.val(loss).data[0] == Catch::Approx(expect).margin(1e-9));
}

TEST_CASE("cache rejects out-of-order positions and over-capacity decode") {
    ModelConfig cfg = tiny_config();
    KvCache<float> cache(cfg);
    std::vector<float> row(size_t(cfg.d_model), 0.0f);
    cache.append(0, 3, row.data(), row.data());
    CHECK_THROWS_AS(cache.append(0, 3, row.data(), row.data()), ContractError);
    CHECK_THROWS_AS(cache.append(0, 1, row.data(), row.data()), ContractError);

    Rng rng(7);
    Params<float> p = init_params<float>(cfg, 15);
    MultimodalSequence seq = make_seq<float>(cfg, rng, cfg.max_seq - cfg.n_patches() - 1, 0);
    PrefillResult<float> res = prefill(p, seq);
    decode_step(p, res.cache, 1);  // fills the last free position
    CHECK_THROWS_AS(decode_step(p, res.cache, 1), CapacityError);
}

TEST_CASE("sequence validation rejects malformed inputs") {
    ModelConfig cfg = tiny_config();
    Rng rng(8);
    MultimodalSequence seq = make_seq<float>(cfg, rng, 3, 0);
    MultimodalSequence bad = seq;
    bad.tokens[size_t(bad.span.len)] = cfg.vocab_size;  // out of vocab
    CHECK_THROWS_AS(bad.validate(cfg), RangeError);
    bad = seq;
    bad.prompt_end = bad.span.len;  // empty prompt
    CHECK_THROWS_AS(bad.validate(cfg), ContractError);
    bad = seq;
    bad.span.len = 3;  // wrong span length
    CHECK_THROWS_AS(bad.validate(cfg), ContractError);
    CHECK_THROWS_AS(sequence_logprob(init_params<float>(cfg, 1), seq), ContractError);
}

TEST_CASE("checkpoint round trip is byte-identical and validates") {
    ModelConfig cfg = tiny_config();
    Params<float> p = init_params<float>(cfg, 99);
    std::string path = "ckpt_roundtrip_test.bin";
    save_checkpoint(path, p);
    Params<float> q = load_checkpoint(path);
    std::string path2 = "ckpt_roundtrip_test2.bin";
    save_checkpoint(path2, q);
    CHECK(read_file(path) == read_file(path2));

    std::string blob = read_file(path);
    write_file(path2, blob.substr(0, blob.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(path2), FormatError);
    write_file(path2, "NOTMAGIC" + blob.substr(8));
    CHECK_THROWS_AS(load_checkpoint(path2), FormatError);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}
