#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "support/oracle.hpp"
#include "support/testutil.hpp"
#include "vfl/intervene.hpp"

using namespace vfl;
using vfltest::Mat;
using vfltest::oracle_embed;
using vfltest::oracle_embed_tokens;
using vfltest::oracle_head;
using vfltest::oracle_layers;
using vfltest::oracle_rms;
using vfltest::oracle_run;
using vfltest::oracle_vecmat;

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
MultimodalSequence make_seq(const ModelConfig& cfg, Rng& rng, int prompt_len, int answer_len) {
    MultimodalSequence seq;
    seq.span.start = 0;
    seq.span.len = cfg.n_patches();
    seq.image = blank_image(cfg);
    for (float& v : seq.image.px) v = float(rng.next_double());
    for (int i = 0; i < seq.span.len; ++i) seq.tokens.push_back(0);
    for (int i = 0; i < prompt_len + answer_len; ++i)
        seq.tokens.push_back(int(rng.next_below(uint64_t(cfg.vocab_size))));
    seq.prompt_end = seq.span.len + prompt_len;
    seq.answer_len = answer_len;
    return seq;
}

// Attention + feed-forward of one layer for a single row, with the key and
// value rows supplied explicitly. Mirrors the test oracle's arithmetic.
template <typename R>
std::vector<R> hand_layer_step(const Params<R>& p, int layer, std::vector<R> x,
                               const Mat<R>& krows, const Mat<R>& vrows) {
    const ModelConfig& cfg = p.cfg;
    int d = cfg.d_model, H = cfg.n_heads, hd = d / H;
    int T = int(krows.size());
    const auto& lp = p.layers[size_t(layer)];
    std::vector<R> q = oracle_vecmat(oracle_rms(x, lp.norm1_g), lp.wq);
    std::vector<R> attn(size_t(d), R(0));
    for (int hh = 0; hh < H; ++hh) {
        std::vector<double> s(static_cast<size_t>(T));
        double mx = -1e300;
        for (int u = 0; u < T; ++u) {
            double dot = 0.0;
            for (int c = 0; c < hd; ++c)
                dot += double(q[size_t(hh * hd + c)]) * double(krows[size_t(u)][size_t(hh * hd + c)]);
            s[size_t(u)] = dot / std::sqrt(double(hd));
            mx = std::max(mx, s[size_t(u)]);
        }
        double z = 0.0;
        for (int u = 0; u < T; ++u) z += std::exp(s[size_t(u)] - mx);
        for (int u = 0; u < T; ++u) {
            double w = std::exp(s[size_t(u)] - mx) / z;
            for (int c = 0; c < hd; ++c)
                attn[size_t(hh * hd + c)] += R(w * double(vrows[size_t(u)][size_t(hh * hd + c)]));
        }
    }
    std::vector<R> proj = oracle_vecmat(attn, lp.wo);
    for (int j = 0; j < d; ++j) x[size_t(j)] += proj[size_t(j)];
    std::vector<R> f = oracle_vecmat(oracle_rms(x, lp.norm2_g), lp.w1);
    for (R& fv : f) fv = fv > R(0) ? fv : R(0);
    std::vector<R> out = oracle_vecmat(f, lp.w2);
    for (int j = 0; j < d; ++j) x[size_t(j)] += out[size_t(j)];
    return x;
}

}  // namespace

TEST_CASE("swapping a cache with itself is the identity at every layer") {
    ModelConfig cfg = tiny_config();
    Rng rng(1);
    Params<float> p = init_params<float>(cfg, 51);
    MultimodalSequence seq = make_seq<float>(cfg, rng, 4, 0);
    PrefillResult<float> res = prefill(p, seq);
    for (int k = 0; k < cfg.n_layers; ++k) {
        KvCache<float> out = splice_swap(res.cache, SwapSpec<float>{k, &res.cache});
        for (int l = 0; l < cfg.n_layers; ++l) {
            CHECK(out.layers[size_t(l)].k == res.cache.layers[size_t(l)].k);
            CHECK(out.layers[size_t(l)].v == res.cache.layers[size_t(l)].v);
        }
    }
}

TEST_CASE("swap touches exactly the vision rows of one layer") {
    ModelConfig cfg = tiny_config();
    Rng rng(2);
    Params<float> p = init_params<float>(cfg, 52);
    MultimodalSequence a = make_seq<float>(cfg, rng, 4, 0);
    MultimodalSequence b = make_seq<float>(cfg, rng, 4, 0);
    PrefillResult<float> ra = prefill(p, a);
    PrefillResult<float> rb = prefill(p, b);
    int k = 1;
    KvCache<float> out = splice_swap(ra.cache, SwapSpec<float>{k, &rb.cache});
    int d = cfg.d_model;
    int changed_k = 0, changed_v = 0;
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (int r = 0; r < out.layers[size_t(l)].count(); ++r) {
            bool dk = false, dv = false;
            for (int j = 0; j < d; ++j) {
                size_t idx = size_t(r) * size_t(d) + size_t(j);
                dk |= out.layers[size_t(l)].k[idx] != ra.cache.layers[size_t(l)].k[idx];
                dv |= out.layers[size_t(l)].v[idx] != ra.cache.layers[size_t(l)].v[idx];
            }
            bool vision = out.layers[size_t(l)].pos[size_t(r)] < cfg.n_patches();
            if (l != k || !vision) {
                CHECK(!dk);
                CHECK(!dv);
            }
            changed_k += dk;
            changed_v += dv;
        }
    }
    // Distinct random images make every vision row differ.
    CHECK(changed_k == cfg.n_patches());
    CHECK(changed_v == cfg.n_patches());
}

TEST_CASE("spliced next-token logits match a hand-assembled attention mix") {
    ModelConfig cfg = tiny_config();
    Rng rng(3);
    Params<double> p = init_params<double>(cfg, 53);
    MultimodalSequence tgt = make_seq<double>(cfg, rng, 5, 0);
    MultimodalSequence src = make_seq<double>(cfg, rng, 5, 0);
    PrefillResult<double> rt = prefill(p, tgt);
    PrefillResult<double> rs = prefill(p, src);
    auto trT = oracle_run(p, oracle_embed(p, tgt));
    auto trS = oracle_run(p, oracle_embed(p, src));
    int last = tgt.length() - 1, k = 1;

    SECTION("pair source") {
        KvCache<double> spliced = splice_swap(rt.cache, SwapSpec<double>{k, &rs.cache});
        Tensor64 got = replay_last(p, spliced, tgt.tokens.back());
        Mat<double> kr, vr;
        for (int u = 0; u <= last; ++u) {
            bool vision = u < cfg.n_patches();
            kr.push_back(vision ? trS.k[size_t(k)][size_t(u)] : trT.k[size_t(k)][size_t(u)]);
            vr.push_back(vision ? trS.v[size_t(k)][size_t(u)] : trT.v[size_t(k)][size_t(u)]);
        }
        std::vector<double> x = hand_layer_step(p, k, trT.xin[size_t(k)][size_t(last)], kr, vr);
        std::vector<double> logits = oracle_head(p, x);
        for (int j = 0; j < cfg.vocab_size; ++j)
            CHECK(got.data[size_t(j)] == Catch::Approx(logits[size_t(j)]).margin(1e-9));
    }

    SECTION("null source zeroes the vision rows") {
        KvCache<double> spliced = splice_swap(rt.cache, SwapSpec<double>{k, nullptr});
        for (int r : spliced.vision_rows(k))
            for (int j = 0; j < cfg.d_model; ++j) {
                CHECK(spliced.layers[size_t(k)].k[size_t(r) * size_t(cfg.d_model) + size_t(j)] == 0.0);
                CHECK(spliced.layers[size_t(k)].v[size_t(r) * size_t(cfg.d_model) + size_t(j)] == 0.0);
            }
        Tensor64 got = replay_last(p, spliced, tgt.tokens.back());
        Mat<double> kr, vr;
        std::vector<double> zero(size_t(cfg.d_model), 0.0);
        for (int u = 0; u <= last; ++u) {
            bool vision = u < cfg.n_patches();
            kr.push_back(vision ? zero : trT.k[size_t(k)][size_t(u)]);
            vr.push_back(vision ? zero : trT.v[size_t(k)][size_t(u)]);
        }
        std::vector<double> x = hand_layer_step(p, k, trT.xin[size_t(k)][size_t(last)], kr, vr);
        std::vector<double> logits = oracle_head(p, x);
        for (int j = 0; j < cfg.vocab_size; ++j)
            CHECK(got.data[size_t(j)] == Catch::Approx(logits[size_t(j)]).margin(1e-9));
    }
}

TEST_CASE("swap rejects mismatched caches and bad layers") {
    ModelConfig cfg = tiny_config();
    Rng rng(4);
    Params<float> p = init_params<float>(cfg, 54);
    MultimodalSequence seq = make_seq<float>(cfg, rng, 4, 0);
    PrefillResult<float> res = prefill(p, seq);

    CHECK_THROWS_AS(splice_swap(res.cache, SwapSpec<float>{-1, &res.cache}), RangeError);
    CHECK_THROWS_AS(splice_swap(res.cache, SwapSpec<float>{cfg.n_layers, &res.cache}), RangeError);

    MultimodalSequence longer = make_seq<float>(cfg, rng, 5, 0);
    PrefillResult<float> rl = prefill(p, longer);
    CHECK_THROWS_AS(splice_swap(res.cache, SwapSpec<float>{0, &rl.cache}), ContractError);

    ModelConfig other = cfg;
    other.n_heads = 4;
    Params<float> po = init_params<float>(other, 54);
    MultimodalSequence so = make_seq<float>(other, rng, 4, 0);
    PrefillResult<float> ro = prefill(po, so);
    CHECK_THROWS_AS(splice_swap(res.cache, SwapSpec<float>{0, &ro.cache}), ContractError);

    // A dropped target has no vision rows at the swap layer.
    PrefillResult<float> rd = prefill_with_drop(p, seq, DropSpec{1});
    CHECK_THROWS_AS(splice_swap(rd.cache, SwapSpec<float>{1, nullptr}), ContractError);
}

TEST_CASE("generate under a self-swap reproduces plain generation") {
    ModelConfig cfg = tiny_config();
    Rng rng(5);
    Params<float> p = init_params<float>(cfg, 55);
    MultimodalSequence seq = make_seq<float>(cfg, rng, 4, 0);
    std::vector<int> plain = generate(p, seq, 6, /*eos=*/cfg.vocab_size - 1);
    PrefillResult<float> res = prefill(p, seq);
    for (int k = 0; k < cfg.n_layers; ++k) {
        SwapSpec<float> spec{k, &res.cache};
        CHECK(generate_swapped(p, seq, spec, 6, cfg.vocab_size - 1) == plain);
    }
}

TEST_CASE("generate_swapped equals a manual decode loop over the spliced cache") {
    ModelConfig cfg = tiny_config();
    Rng rng(6);
    Params<float> p = init_params<float>(cfg, 56);
    MultimodalSequence tgt = make_seq<float>(cfg, rng, 4, 0);
    MultimodalSequence src = make_seq<float>(cfg, rng, 4, 0);
    PrefillResult<float> rs = prefill(p, src);
    SwapSpec<float> spec{0, &rs.cache};
    std::vector<int> got = generate_swapped(p, tgt, spec, 6, cfg.vocab_size - 1);

    PrefillResult<float> rt = prefill(p, tgt);
    KvCache<float> spliced = splice_swap(rt.cache, spec);
    Tensor32 logits = replay_last(p, spliced, tgt.tokens.back());
    std::vector<int> manual;
    for (int i = 0; i < 6; ++i) {
        int tok = argmax_token(logits);
        if (tok == cfg.vocab_size - 1) break;
        manual.push_back(tok);
        if (int(manual.size()) == 6) break;
        logits = decode_step(p, spliced, tok);
    }
    CHECK(got == manual);
}

TEST_CASE("dropping at the top layer is a bit-exact no-op") {
    ModelConfig cfg = tiny_config();
    Rng rng(7);
    Params<float> p = init_params<float>(cfg, 57);
    MultimodalSequence seq = make_seq<float>(cfg, rng, 5, 0);
    PrefillResult<float> plain = prefill(p, seq);
    PrefillResult<float> dropped = prefill_with_drop(p, seq, DropSpec{cfg.n_layers});
    CHECK(dropped.last_logits.data == plain.last_logits.data);
    for (int l = 0; l < cfg.n_layers; ++l) {
        CHECK(dropped.cache.layers[size_t(l)].k == plain.cache.layers[size_t(l)].k);
        CHECK(dropped.cache.layers[size_t(l)].v == plain.cache.layers[size_t(l)].v);
        CHECK(dropped.cache.layers[size_t(l)].pos == plain.cache.layers[size_t(l)].pos);
    }
}

TEST_CASE("dropping at layer zero equals a text-only forward with kept positions") {
    ModelConfig cfg = tiny_config();
    Rng rng(8);
    Params<float> p = init_params<float>(cfg, 58);
    MultimodalSequence seq = make_seq<float>(cfg, rng, 5, 0);
    PrefillResult<float> dropped = prefill_with_drop(p, seq, DropSpec{0});

    std::vector<int> text(seq.tokens.begin() + seq.span.len, seq.tokens.end());
    std::vector<int> pos;
    for (int i = seq.span.len; i < seq.length(); ++i) pos.push_back(i);
    auto rows = vfltest::oracle_layers(p, oracle_embed_tokens(p, text, pos), 0, cfg.n_layers);
    std::vector<float> logits = oracle_head(p, rows.back());
    for (int j = 0; j < cfg.vocab_size; ++j)
        CHECK(dropped.last_logits.data[size_t(j)] == Catch::Approx(logits[size_t(j)]).margin(1e-5));
}

TEST_CASE("intermediate drops match an oracle that prunes rows mid-stack") {
    ModelConfig cfg = tiny_config();
    Rng rng(9);
    Params<float> p = init_params<float>(cfg, 59);
    MultimodalSequence seq = make_seq<float>(cfg, rng, 5, 0);
    for (int k = 1; k < cfg.n_layers; ++k) {
        PrefillResult<float> dropped = prefill_with_drop(p, seq, DropSpec{k});
        auto rows = vfltest::oracle_layers(p, oracle_embed(p, seq), 0, k);
        rows.erase(rows.begin(), rows.begin() + seq.span.len);
        rows = vfltest::oracle_layers(p, std::move(rows), k, cfg.n_layers);
        std::vector<float> logits = oracle_head(p, rows.back());
        for (int j = 0; j < cfg.vocab_size; ++j)
            CHECK(dropped.last_logits.data[size_t(j)] ==
                  Catch::Approx(logits[size_t(j)]).margin(1e-5));
    }
}

TEST_CASE("dropped caches hold full rows below the cut and text rows above") {
    ModelConfig cfg = tiny_config();
    Rng rng(10);
    Params<float> p = init_params<float>(cfg, 60);
    MultimodalSequence seq = make_seq<float>(cfg, rng, 5, 0);
    int n_text = seq.length() - seq.span.len;
    for (int k = 0; k <= cfg.n_layers; ++k) {
        PrefillResult<float> res = prefill_with_drop(p, seq, DropSpec{k});
        for (int l = 0; l < cfg.n_layers; ++l) {
            int want = l < k ? seq.span.len + n_text : n_text;
            CHECK(res.cache.layers[size_t(l)].count() == want);
        }
        CHECK(res.cache.uniform() == (k == 0 || k == cfg.n_layers));
    }
}

TEST_CASE("rows visible under a lower drop are a subset of a higher drop") {
    ModelConfig cfg = tiny_config();
    Rng rng(11);
    Params<float> p = init_params<float>(cfg, 61);
    MultimodalSequence seq = make_seq<float>(cfg, rng, 4, 0);
    std::vector<PrefillResult<float>> res;
    for (int k = 0; k <= cfg.n_layers; ++k) res.push_back(prefill_with_drop(p, seq, DropSpec{k}));
    for (int k = 0; k < cfg.n_layers; ++k)
        for (int l = 0; l < cfg.n_layers; ++l) {
            std::set<int> lo(res[size_t(k)].cache.layers[size_t(l)].pos.begin(),
                             res[size_t(k)].cache.layers[size_t(l)].pos.end());
            std::set<int> hi(res[size_t(k) + 1].cache.layers[size_t(l)].pos.begin(),
                             res[size_t(k) + 1].cache.layers[size_t(l)].pos.end());
            for (int pos : lo) CHECK(hi.count(pos) == 1);
        }
}

TEST_CASE("drop layer bounds are enforced") {
    ModelConfig cfg = tiny_config();
    Rng rng(12);
    Params<float> p = init_params<float>(cfg, 62);
    MultimodalSequence seq = make_seq<float>(cfg, rng, 4, 1);
    CHECK_THROWS_AS(prefill_with_drop(p, seq, DropSpec{-1}), RangeError);
    CHECK_THROWS_AS(prefill_with_drop(p, seq, DropSpec{cfg.n_layers + 1}), RangeError);
    CHECK_THROWS_AS(logprob_dropped(p, seq, DropSpec{-1}), RangeError);
    CHECK_THROWS_AS(logprob_dropped(p, seq, DropSpec{cfg.n_layers + 1}), RangeError);
}

TEST_CASE("logprob under a top-layer drop equals the plain log-likelihood") {
    ModelConfig cfg = tiny_config();
    Rng rng(13);
    Params<float> p = init_params<float>(cfg, 63);
    MultimodalSequence seq = make_seq<float>(cfg, rng, 4, 3);
    CHECK(logprob_dropped(p, seq, DropSpec{cfg.n_layers}) == sequence_logprob(p, seq));
}

TEST_CASE("image-blind weights make the drop level irrelevant") {
    ModelConfig cfg = tiny_config();
    Rng rng(14);
    // Zero attention and feed-forward weights: every position's logits
    // depend only on its own embedding, so removing vision rows changes
    // nothing anywhere.
    Params<float> p = init_params<float>(cfg, 64);
    for (auto& l : p.layers) {
        for (float& v : l.wq.data) v = 0.0f;
        for (float& v : l.wk.data) v = 0.0f;
        for (float& v : l.wv.data) v = 0.0f;
        for (float& v : l.wo.data) v = 0.0f;
        for (float& v : l.w1.data) v = 0.0f;
        for (float& v : l.w2.data) v = 0.0f;
    }
    MultimodalSequence seq = make_seq<float>(cfg, rng, 4, 2);
    double base = logprob_dropped(p, seq, DropSpec{cfg.n_layers});
    for (int k = 0; k <= cfg.n_layers; ++k)
        CHECK(logprob_dropped(p, seq, DropSpec{k}) == base);
}

TEST_CASE("dropped log-likelihood matches the pruning oracle") {
    ModelConfig cfg = tiny_config();
    Rng rng(15);
    Params<double> p = init_params<double>(cfg, 65);
    MultimodalSequence seq = make_seq<double>(cfg, rng, 4, 3);
    int k = 1;
    auto rows = vfltest::oracle_layers(p, oracle_embed(p, seq), 0, k);
    rows.erase(rows.begin(), rows.begin() + seq.span.len);
    rows = vfltest::oracle_layers(p, std::move(rows), k, cfg.n_layers);
    Mat<double> logits;
    for (const auto& row : rows) logits.push_back(oracle_head(p, row));
    std::vector<int> text(seq.tokens.begin() + seq.span.len, seq.tokens.end());
    double expect =
        vfltest::oracle_answer_logprob(logits, text, seq.prompt_end - seq.span.len);
    CHECK(logprob_dropped(p, seq, DropSpec{k}) == Catch::Approx(expect).margin(1e-9));
}
