#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "vfl/model/kv_cache.hpp"
#include "vfl/model/params.hpp"
#include "vfl/model/sequence.hpp"
#include "vfl/numkit/ops.hpp"

namespace vfl {

// One epsilon everywhere a root-mean-square norm appears, so the training
// graph and the inference engine compute the same function.
inline constexpr double kRmsEps = 1e-5;

// Flattened patch rows, [n_patches x patch_dim]. Patch order is row-major
// over the grid; within a patch, pixels flatten row-major then channel.
template <typename R>
Tensor<R> patch_matrix(const ModelConfig& cfg, const Image& im) {
    if (im.h != cfg.image_size || im.w != cfg.image_size || im.c != cfg.channels)
        throw ContractError("image dimensions do not match the model config");
    int g = cfg.grid(), P = cfg.patch_size;
    Tensor<R> out({cfg.n_patches(), cfg.patch_dim()});
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx) {
            R* row = out.row_ptr(gy * g + gx);
            int idx = 0;
            for (int py = 0; py < P; ++py)
                for (int px = 0; px < P; ++px)
                    for (int ch = 0; ch < cfg.channels; ++ch)
                        row[idx++] = R(im.at(gy * P + py, gx * P + px, ch));
        }
    return out;
}

namespace detail {

// out[j] (+)= sum_t x[t] * W[t][j]; the j loop runs along contiguous rows.
template <typename R>
void rowmat(const R* __restrict x, const Tensor<R>& w, R* __restrict out, bool accumulate) {
    int din = w.shape[0], dout = w.shape[1];
    if (!accumulate)
        for (int j = 0; j < dout; ++j) out[j] = R(0);
    for (int t = 0; t < din; ++t) {
        const R xv = x[t];
        const R* __restrict wrow = w.row_ptr(t);
        for (int j = 0; j < dout; ++j) out[j] += xv * wrow[j];
    }
}

template <typename R>
void rmsnorm_row(const R* x, const Tensor<R>& gamma, R* out, int n) {
    double ss = 0.0;
    for (int j = 0; j < n; ++j) ss += double(x[j]) * double(x[j]);
    R inv = R(1.0 / std::sqrt(ss / double(n) + kRmsEps));
    for (int j = 0; j < n; ++j) out[j] = gamma.data[size_t(j)] * x[j] * inv;
}

// Runs one token through layers [0, layer_limit). In append mode the token's
// K/V rows are pushed into the cache before attention, so the token attends
// to itself through the cache exactly like every later query will. In replay
// mode the cache already holds this position's rows and is left untouched.
template <typename R>
void run_token(const Params<R>& p, KvCache<R>& cache, std::vector<R>& x, int pos, int layer_limit,
               bool append, Tensor<R>* logits_out) {
    const ModelConfig& cfg = p.cfg;
    int d = cfg.d_model, H = cfg.n_heads, hd = cfg.head_dim();
    R inv_scale = R(1.0 / std::sqrt(double(hd)));
    std::vector<R> h(static_cast<size_t>(d)), q(static_cast<size_t>(d)), k(static_cast<size_t>(d)), v(static_cast<size_t>(d)), o(static_cast<size_t>(d));
    std::vector<R> ff(static_cast<size_t>(cfg.d_ff));
    std::vector<double> scores;
    for (int l = 0; l < layer_limit; ++l) {
        const LayerParams<R>& lp = p.layers[size_t(l)];
        rmsnorm_row(x.data(), lp.norm1_g, h.data(), d);
        rowmat(h.data(), lp.wq, q.data(), false);
        rowmat(h.data(), lp.wk, k.data(), false);
        rowmat(h.data(), lp.wv, v.data(), false);
        if (append) cache.append(l, pos, k.data(), v.data());
        const auto& L = cache.layers[size_t(l)];
        int rows = L.count();
        if (rows == 0 || L.pos.back() > pos)
            throw ContractError("cache rows inconsistent with the queried position");
        scores.resize(size_t(rows));
        for (int hh = 0; hh < H; ++hh) {
            int off = hh * hd;
            double mx = -1e300;
            for (int r = 0; r < rows; ++r) {
                const R* krow = L.k.data() + size_t(r) * size_t(d) + off;
                double dot = 0.0;
                for (int c = 0; c < hd; ++c) dot += double(q[size_t(off + c)]) * double(krow[c]);
                dot *= double(inv_scale);
                scores[size_t(r)] = dot;
                mx = std::max(mx, dot);
            }
            double sum = 0.0;
            for (int r = 0; r < rows; ++r) {
                double e = std::exp(scores[size_t(r)] - mx);
                scores[size_t(r)] = e;
                sum += e;
            }
            double invs = 1.0 / sum;
            R* orow = o.data() + off;
            for (int c = 0; c < hd; ++c) orow[c] = R(0);
            for (int r = 0; r < rows; ++r) {
                R pr = R(scores[size_t(r)] * invs);
                const R* vrow = L.v.data() + size_t(r) * size_t(d) + off;
                for (int c = 0; c < hd; ++c) orow[c] += pr * vrow[c];
            }
        }
        rowmat(o.data(), lp.wo, x.data(), true);
        rmsnorm_row(x.data(), lp.norm2_g, h.data(), d);
        rowmat(h.data(), lp.w1, ff.data(), false);
        for (R& fv : ff) fv = fv > R(0) ? fv : R(0);
        rowmat(ff.data(), lp.w2, x.data(), true);
    }
    if (logits_out) {
        rmsnorm_row(x.data(), p.final_norm_g, h.data(), d);
        *logits_out = Tensor<R>({cfg.vocab_size});
        rowmat(h.data(), p.lm_head, logits_out->data.data(), false);
    }
}

}  // namespace detail

// Vision rows ready for the stream: projected patch plus that position's
// embedding. A zero image with a zero projection bias therefore embeds to
// the position rows alone.
template <typename R>
Tensor<R> embed_image(const Params<R>& p, const Image& im, int pos_offset = 0) {
    const ModelConfig& cfg = p.cfg;
    Tensor<R> patches = patch_matrix<R>(cfg, im);
    int n = cfg.n_patches(), d = cfg.d_model;
    if (pos_offset < 0 || pos_offset + n > cfg.max_seq) throw RangeError("vision span exceeds max_seq");
    Tensor<R> out({n, d});
    for (int i = 0; i < n; ++i) {
        R* row = out.row_ptr(i);
        detail::rowmat(patches.row_ptr(i), p.patch_w, row, false);
        const R* pe = p.pos_emb.row_ptr(pos_offset + i);
        for (int j = 0; j < d; ++j) row[j] += p.patch_b.data[size_t(j)] + pe[j];
    }
    return out;
}

template <typename R>
struct PrefillResult {
    KvCache<R> cache;
    Tensor<R> last_logits;  // logits for the position after the last input token
};

// Prefill loop from an arbitrary starting position against a caller-provided
// cache. Positions before from_pos must already be represented in the cache
// (or be deliberately absent, as after a vision drop). Vision positions run
// through layers [0, vision_layer_limit) only. When collect_at is given (an
// ascending position list), logits are recorded for those positions.
template <typename R>
void extend_prefill(const Params<R>& p, const MultimodalSequence& seq, KvCache<R>& cache,
                    int from_pos, int vision_layer_limit,
                    const std::vector<int>* collect_at = nullptr,
                    std::vector<Tensor<R>>* collected = nullptr, Tensor<R>* last_logits = nullptr) {
    const ModelConfig& cfg = p.cfg;
    seq.validate(cfg);
    Tensor<R> vis;
    if (seq.span.len > 0 && from_pos < seq.span.start + seq.span.len)
        vis = embed_image(p, seq.image, seq.span.start);
    int n = seq.length(), d = cfg.d_model;
    std::vector<R> x(static_cast<size_t>(d));
    size_t want_idx = 0;
    if (collect_at)
        while (want_idx < collect_at->size() && (*collect_at)[want_idx] < from_pos) ++want_idx;
    for (int i = from_pos; i < n; ++i) {
        bool is_vision = i >= seq.span.start && i < seq.span.start + seq.span.len;
        if (is_vision) {
            const R* row = vis.row_ptr(i - seq.span.start);
            std::copy(row, row + d, x.begin());
        } else {
            const R* te = p.tok_emb.row_ptr(seq.tokens[size_t(i)]);
            const R* pe = p.pos_emb.row_ptr(i);
            for (int j = 0; j < d; ++j) x[size_t(j)] = te[j] + pe[j];
        }
        bool want = collect_at && want_idx < collect_at->size() && (*collect_at)[want_idx] == i;
        bool last = i == n - 1;
        Tensor<R> logits;
        int limit = is_vision ? vision_layer_limit : cfg.n_layers;
        if (is_vision && (want || last)) throw ContractError("logits requested at a vision position");
        bool need = want || (last && last_logits != nullptr);
        detail::run_token(p, cache, x, i, limit, true, need ? &logits : nullptr);
        if (want) {
            collected->push_back(logits);
            ++want_idx;
        }
        if (last && last_logits) *last_logits = std::move(logits);
    }
    cache.seq_positions = n;
}

// Prefill core. Vision positions run through layers [0, vision_layer_limit)
// only; pass cfg.n_layers for ordinary prefill. When collect_at is given,
// logits are recorded for those positions (used for teacher-forced scoring).
template <typename R>
PrefillResult<R> prefill_engine(const Params<R>& p, const MultimodalSequence& seq, int vision_layer_limit,
                                const std::vector<int>* collect_at = nullptr,
                                std::vector<Tensor<R>>* collected = nullptr) {
    PrefillResult<R> res{KvCache<R>(p.cfg, seq.span), Tensor<R>()};
    extend_prefill(p, seq, res.cache, 0, vision_layer_limit, collect_at, collected,
                   &res.last_logits);
    return res;
}

template <typename R>
PrefillResult<R> prefill(const Params<R>& p, const MultimodalSequence& seq) {
    return prefill_engine(p, seq, p.cfg.n_layers);
}

// Appends one token and returns logits for the next position.
template <typename R>
Tensor<R> decode_step(const Params<R>& p, KvCache<R>& cache, int token) {
    if (token < 0 || token >= p.cfg.vocab_size) throw RangeError("token id out of vocabulary");
    int pos = cache.seq_positions;
    if (pos >= p.cfg.max_seq) throw CapacityError("cache is at max_seq capacity");
    int d = p.cfg.d_model;
    std::vector<R> x(static_cast<size_t>(d));
    const R* te = p.tok_emb.row_ptr(token);
    const R* pe = p.pos_emb.row_ptr(pos);
    for (int j = 0; j < d; ++j) x[size_t(j)] = te[j] + pe[j];
    Tensor<R> logits;
    detail::run_token(p, cache, x, pos, p.cfg.n_layers, true, &logits);
    cache.seq_positions = pos + 1;
    return logits;
}

// Recomputes the logits of the cache's final position without touching the
// cache. The position's own K/V stay whatever the cache holds, so after a
// splice the text rows keep their original representations.
template <typename R>
Tensor<R> replay_last(const Params<R>& p, const KvCache<R>& cache, int token) {
    if (cache.seq_positions == 0) throw ContractError("replay_last on an empty cache");
    int pos = cache.seq_positions - 1;
    int d = p.cfg.d_model;
    std::vector<R> x(static_cast<size_t>(d));
    const R* te = p.tok_emb.row_ptr(token);
    const R* pe = p.pos_emb.row_ptr(pos);
    for (int j = 0; j < d; ++j) x[size_t(j)] = te[j] + pe[j];
    Tensor<R> logits;
    detail::run_token(p, const_cast<KvCache<R>&>(cache), x, pos, p.cfg.n_layers, false, &logits);
    return logits;
}

template <typename R>
int argmax_token(const Tensor<R>& logits) {
    int best = 0;
    for (int j = 1; j < int(logits.numel()); ++j)
        if (logits.data[size_t(j)] > logits.data[size_t(best)]) best = j;
    return best;  // ties resolve to the lowest id
}

// Greedy continuation given the logits that precede it. Stops at eos (which
// is not returned) or after max_new tokens.
template <typename R>
std::vector<int> greedy_continue(const Params<R>& p, KvCache<R>& cache, Tensor<R> logits, int max_new,
                                 int eos_id) {
    std::vector<int> out;
    for (int i = 0; i < max_new; ++i) {
        int tok = argmax_token(logits);
        if (tok == eos_id) break;
        out.push_back(tok);
        if (i + 1 < max_new) logits = decode_step(p, cache, tok);
    }
    return out;
}

template <typename R>
std::vector<int> generate(const Params<R>& p, const MultimodalSequence& seq, int max_new, int eos_id) {
    if (seq.answer_len != 0) throw ContractError("generate expects a prompt-only sequence");
    PrefillResult<R> pre = prefill(p, seq);
    return greedy_continue(p, pre.cache, std::move(pre.last_logits), max_new, eos_id);
}

// The positions whose logits teacher-forced answer scoring needs: one per
// answer token, each predicting the next position.
inline std::vector<int> answer_logit_positions(const MultimodalSequence& seq) {
    if (seq.answer_len <= 0) throw ContractError("answer scoring needs an answer span");
    std::vector<int> collect;
    for (int i = seq.prompt_end - 1; i < seq.length() - 1; ++i) collect.push_back(i);
    return collect;
}

// Sum of log softmax(logits)[next token] over the collected answer positions.
template <typename R>
double answer_logprob_from_logits(const MultimodalSequence& seq, const std::vector<int>& collect,
                                  const std::vector<Tensor<R>>& logits) {
    if (collect.size() != logits.size()) throw ContractError("collected logit count mismatch");
    double total = 0.0;
    for (size_t idx = 0; idx < collect.size(); ++idx) {
        const Tensor<R>& lg = logits[idx];
        int target = seq.tokens[size_t(collect[idx] + 1)];
        double mx = double(lg.data[0]);
        for (int j = 1; j < int(lg.numel()); ++j) mx = std::max(mx, double(lg.data[size_t(j)]));
        double sum = 0.0;
        for (int j = 0; j < int(lg.numel()); ++j) sum += std::exp(double(lg.data[size_t(j)]) - mx);
        total += double(lg.data[size_t(target)]) - mx - std::log(sum);
    }
    return total;
}

// Teacher-forced log-likelihood of the answer span (natural log). Vision
// positions feed layers [0, vision_layer_limit) only; the default is the
// ordinary full pass.
template <typename R>
double sequence_logprob(const Params<R>& p, const MultimodalSequence& seq, int vision_layer_limit = -1) {
    if (vision_layer_limit < 0) vision_layer_limit = p.cfg.n_layers;
    std::vector<int> collect = answer_logit_positions(seq);
    std::vector<Tensor<R>> logits;
    prefill_engine(p, seq, vision_layer_limit, &collect, &logits);
    return answer_logprob_from_logits(seq, collect, logits);
}

}  // namespace vfl
