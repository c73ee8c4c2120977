#pragma once

#include <vector>

#include "vfl/model/infer.hpp"
#include "vfl/model/params.hpp"
#include "vfl/numkit/ops.hpp"

namespace vfl {

// Tape leaf ids for every weight tensor, in the canonical parameter order.
template <typename R>
struct GraphParamIds {
    int patch_w = -1, patch_b = -1, tok_emb = -1, pos_emb = -1;
    struct Layer {
        int wq, wk, wv, wo, w1, w2, g1, g2;
    };
    std::vector<Layer> layers;
    int final_g = -1, lm_head = -1;

    std::vector<int> ordered() const {
        std::vector<int> out{patch_w, patch_b, tok_emb, pos_emb};
        for (const Layer& l : layers)
            for (int id : {l.wq, l.wk, l.wv, l.wo, l.w1, l.w2, l.g1, l.g2}) out.push_back(id);
        out.push_back(final_g);
        out.push_back(lm_head);
        return out;
    }
};

// Optional low-rank residual factors spliced into the q/v projections of
// selected layers: y = x W + scale * (x A) B. Base ids of -1 mean the layer
// or projection is untouched.
struct LowRankIds {
    int aq = -1, bq = -1, ak = -1, bk = -1, av = -1, bv = -1, ao = -1, bo = -1;
};

struct LowRankGraph {
    double scale = 0.0;
    std::vector<LowRankIds> layers;  // empty, or one entry per model layer

    bool empty() const { return layers.empty(); }
};

template <typename R>
GraphParamIds<R> register_params(Tape<R>& tape, const Params<R>& p, bool requires_grad) {
    GraphParamIds<R> ids;
    ids.patch_w = tape.leaf(p.patch_w, requires_grad);
    ids.patch_b = tape.leaf(p.patch_b, requires_grad);
    ids.tok_emb = tape.leaf(p.tok_emb, requires_grad);
    ids.pos_emb = tape.leaf(p.pos_emb, requires_grad);
    for (const auto& l : p.layers) {
        typename GraphParamIds<R>::Layer L;
        L.wq = tape.leaf(l.wq, requires_grad);
        L.wk = tape.leaf(l.wk, requires_grad);
        L.wv = tape.leaf(l.wv, requires_grad);
        L.wo = tape.leaf(l.wo, requires_grad);
        L.w1 = tape.leaf(l.w1, requires_grad);
        L.w2 = tape.leaf(l.w2, requires_grad);
        L.g1 = tape.leaf(l.norm1_g, requires_grad);
        L.g2 = tape.leaf(l.norm2_g, requires_grad);
        ids.layers.push_back(L);
    }
    ids.final_g = tape.leaf(p.final_norm_g, requires_grad);
    ids.lm_head = tape.leaf(p.lm_head, requires_grad);
    return ids;
}

// Teacher-forced cross-entropy for one sequence: the mean over answer
// positions (trailing end-of-sequence token included) of -log p(target).
// Rows outside the answer span never reach the logits projection, which is
// exactly the loss mask.
template <typename R>
int sample_loss(Tape<R>& tape, const GraphParamIds<R>& ids, const ModelConfig& cfg,
                const MultimodalSequence& seq, const LowRankGraph& lora = {}) {
    seq.validate(cfg);
    if (seq.answer_len <= 0) throw ContractError("training sequence needs an answer span");
    int t_in = seq.length() - 1;  // the final token is never fed as input
    int nv = seq.span.len;

    int x;
    if (nv > 0) {
        int patches = tape.leaf(patch_matrix<R>(cfg, seq.image), false);
        int xv = tape.add_bias(tape.matmul(patches, ids.patch_w), ids.patch_b);
        xv = tape.add(xv, tape.slice_rows(ids.pos_emb, seq.span.start, seq.span.start + nv));
        if (t_in > nv) {
            std::vector<int> text_ids(seq.tokens.begin() + nv, seq.tokens.begin() + t_in);
            int xt = tape.add(tape.gather_rows(ids.tok_emb, text_ids),
                              tape.slice_rows(ids.pos_emb, nv, t_in));
            x = tape.concat_rows(xv, xt);
        } else {
            x = xv;
        }
    } else {
        std::vector<int> text_ids(seq.tokens.begin(), seq.tokens.begin() + t_in);
        x = tape.add(tape.gather_rows(ids.tok_emb, text_ids), tape.slice_rows(ids.pos_emb, 0, t_in));
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& L = ids.layers[size_t(l)];
        int h = tape.rms_norm(x, L.g1, kRmsEps);
        int q = tape.matmul(h, L.wq);
        int k = tape.matmul(h, L.wk);
        int v = tape.matmul(h, L.wv);
        if (!lora.empty()) {
            const LowRankIds& lr = lora.layers[size_t(l)];
            if (lr.aq >= 0) q = tape.add(q, tape.scale(tape.matmul(tape.matmul(h, lr.aq), lr.bq), lora.scale));
            if (lr.ak >= 0) k = tape.add(k, tape.scale(tape.matmul(tape.matmul(h, lr.ak), lr.bk), lora.scale));
            if (lr.av >= 0) v = tape.add(v, tape.scale(tape.matmul(tape.matmul(h, lr.av), lr.bv), lora.scale));
        }
        int a = tape.causal_attention(q, k, v, cfg.n_heads);
        int proj = tape.matmul(a, L.wo);
        if (!lora.empty()) {
            const LowRankIds& lr = lora.layers[size_t(l)];
            if (lr.ao >= 0)
                proj = tape.add(proj, tape.scale(tape.matmul(tape.matmul(a, lr.ao), lr.bo), lora.scale));
        }
        x = tape.add(x, proj);
        int h2 = tape.rms_norm(x, L.g2, kRmsEps);
        x = tape.add(x, tape.matmul(tape.relu(tape.matmul(h2, L.w1)), L.w2));
    }

    int first_pred = seq.prompt_end - 1;
    int pred = tape.slice_rows(x, first_pred, t_in);
    int logits = tape.matmul(tape.rms_norm(pred, ids.final_g, kRmsEps), ids.lm_head);
    std::vector<int> targets(seq.tokens.begin() + first_pred + 1, seq.tokens.end());
    return tape.cross_entropy_rows(logits, targets);
}

// Mean loss over a batch; samples combine in index order.
template <typename R>
int batch_loss(Tape<R>& tape, const GraphParamIds<R>& ids, const ModelConfig& cfg,
               const std::vector<MultimodalSequence>& batch, const LowRankGraph& lora = {}) {
    if (batch.empty()) throw ContractError("empty batch");
    int acc = sample_loss(tape, ids, cfg, batch[0], lora);
    for (size_t i = 1; i < batch.size(); ++i)
        acc = tape.add(acc, sample_loss(tape, ids, cfg, batch[i], lora));
    return tape.scale(acc, 1.0 / double(batch.size()));
}

}  // namespace vfl
