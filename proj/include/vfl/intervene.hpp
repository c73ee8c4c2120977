#pragma once

#include <algorithm>

#include "vfl/model/infer.hpp"

namespace vfl {

// Swap: replace the key/value rows of the vision span at exactly one layer
// with the rows of another prefilled cache. A missing source selects the
// null variant, which zeroes those rows instead. Text rows and every other
// layer keep their original contents, so only positions decoded afterwards
// see the mixed information.
template <typename R>
struct SwapSpec {
    int layer = 0;
    const KvCache<R>* source = nullptr;  // nullptr swaps in zero rows
};

// Drop: vision tokens run layers [0, from_layer) only. From that layer on
// they are absent from the residual stream and from the cache, while text
// tokens keep their original position ids. from_layer == n_layers is a
// no-op; from_layer == 0 removes vision entirely.
struct DropSpec {
    int from_layer = 0;
};

template <typename R>
KvCache<R> splice_swap(const KvCache<R>& target, const SwapSpec<R>& spec) {
    if (spec.layer < 0 || spec.layer >= target.cfg.n_layers)
        throw RangeError("swap layer out of range");
    if (spec.source) {
        if (!(spec.source->cfg == target.cfg))
            throw ContractError("swap caches built from different configs");
        if (!target.same_geometry(*spec.source))
            throw ContractError("swap caches cover different spans or positions");
    }
    KvCache<R> out = target;
    std::vector<int> rows = out.vision_rows(spec.layer);
    if (int(rows.size()) != target.span.len)
        throw ContractError("target cache is missing vision rows at the swap layer");
    const int d = target.cfg.d_model;
    auto& L = out.layers[size_t(spec.layer)];
    for (int r : rows) {
        R* k = L.k.data() + size_t(r) * size_t(d);
        R* v = L.v.data() + size_t(r) * size_t(d);
        if (spec.source) {
            const auto& S = spec.source->layers[size_t(spec.layer)];
            const R* sk = S.k.data() + size_t(r) * size_t(d);
            const R* sv = S.v.data() + size_t(r) * size_t(d);
            std::copy(sk, sk + d, k);
            std::copy(sv, sv + d, v);
        } else {
            std::fill(k, k + d, R(0));
            std::fill(v, v + d, R(0));
        }
    }
    return out;
}

// Greedy generation from a prompt-only sequence with the swap applied. The
// first answer token is produced by re-running the final prompt position
// against the spliced cache; later tokens attend to it like any decode.
template <typename R>
std::vector<int> generate_swapped(const Params<R>& p, const MultimodalSequence& seq,
                                  const SwapSpec<R>& spec, int max_new, int eos_id) {
    if (seq.answer_len != 0)
        throw ContractError("generation starts from a prompt-only sequence");
    PrefillResult<R> res = prefill(p, seq);
    KvCache<R> spliced = splice_swap(res.cache, spec);
    Tensor<R> logits = replay_last(p, spliced, seq.tokens.back());
    return greedy_continue(p, spliced, logits, max_new, eos_id);
}

template <typename R>
PrefillResult<R> prefill_with_drop(const Params<R>& p, const MultimodalSequence& seq,
                                   const DropSpec& spec) {
    if (spec.from_layer < 0 || spec.from_layer > p.cfg.n_layers)
        throw RangeError("drop layer out of range");
    return prefill_engine(p, seq, spec.from_layer);
}

template <typename R>
std::vector<int> generate_dropped(const Params<R>& p, const MultimodalSequence& seq,
                                  const DropSpec& spec, int max_new, int eos_id) {
    if (seq.answer_len != 0)
        throw ContractError("generation starts from a prompt-only sequence");
    PrefillResult<R> res = prefill_with_drop(p, seq, spec);
    return greedy_continue(p, res.cache, res.last_logits, max_new, eos_id);
}

// Teacher-forced answer log-likelihood with the drop applied throughout.
template <typename R>
double logprob_dropped(const Params<R>& p, const MultimodalSequence& seq, const DropSpec& spec) {
    if (spec.from_layer < 0 || spec.from_layer > p.cfg.n_layers)
        throw RangeError("drop layer out of range");
    return sequence_logprob(p, seq, spec.from_layer);
}

}  // namespace vfl
