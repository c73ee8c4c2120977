#pragma once

#include <algorithm>
#include <vector>

#include "vfl/model/params.hpp"
#include "vfl/rng.hpp"

namespace vfl {

// Low-rank adaptation of the attention projections. Only the layers named in
// layer_mask carry factors; the default adapts the query and value maps, and
// the other projections stay available behind config switches.
struct LoraConfig {
    int rank = 8;
    double alpha = 16.0;
    bool adapt_wq = true;
    bool adapt_wk = false;
    bool adapt_wv = true;
    bool adapt_wo = false;
    std::vector<int> layer_mask;  // ascending, deduplicated

    double scale() const { return alpha / double(rank); }

    void validate(const ModelConfig& cfg) const {
        if (rank <= 0) throw ContractError("lora rank must be positive");
        if (alpha <= 0) throw ContractError("lora alpha must be positive");
        for (size_t i = 0; i < layer_mask.size(); ++i) {
            if (layer_mask[i] < 0 || layer_mask[i] >= cfg.n_layers)
                throw RangeError("lora layer mask index out of range");
            if (i > 0 && layer_mask[i] <= layer_mask[i - 1])
                throw ContractError("lora layer mask must be strictly increasing");
        }
    }
};

// One factor pair: delta W = a * b with a [d x r], b [r x d].
template <typename R>
struct LoraPair {
    Tensor<R> a, b;

    bool present() const { return !a.data.empty(); }
};

template <typename R>
struct LoraAdapter {
    LoraConfig cfg;
    // Indexed by model layer; entries outside the mask stay empty.
    std::vector<LoraPair<R>> q, k, v, o;

    bool masked(int layer) const {
        return std::find(cfg.layer_mask.begin(), cfg.layer_mask.end(), layer) != cfg.layer_mask.end();
    }
};

// A starts small and random, B starts at zero, so a fresh adapter is an
// exact no-op on the logits.
template <typename R>
LoraAdapter<R> init_lora(const ModelConfig& mcfg, const LoraConfig& lcfg, uint64_t seed) {
    lcfg.validate(mcfg);
    LoraAdapter<R> ad;
    ad.cfg = lcfg;
    ad.q.resize(size_t(mcfg.n_layers));
    ad.k.resize(size_t(mcfg.n_layers));
    ad.v.resize(size_t(mcfg.n_layers));
    ad.o.resize(size_t(mcfg.n_layers));
    Rng rng(derive_seed(seed, 0x10aa));
    auto make_pair = [&](LoraPair<R>& p) {
        p.a = Tensor<R>({mcfg.d_model, lcfg.rank});
        for (R& x : p.a.data) x = R(rng.uniform(-0.05, 0.05));
        p.b = Tensor<R>({lcfg.rank, mcfg.d_model});
    };
    for (int l : lcfg.layer_mask) {
        if (lcfg.adapt_wq) make_pair(ad.q[size_t(l)]);
        if (lcfg.adapt_wk) make_pair(ad.k[size_t(l)]);
        if (lcfg.adapt_wv) make_pair(ad.v[size_t(l)]);
        if (lcfg.adapt_wo) make_pair(ad.o[size_t(l)]);
    }
    return ad;
}

// Materializes W + scale * A B for every adapted projection, leaving the
// base untouched. The merged weights drive the ordinary inference engine.
template <typename R>
Params<R> merge_lora(const Params<R>& base, const LoraAdapter<R>& ad) {
    ad.cfg.validate(base.cfg);
    Params<R> out = base;
    R s = R(ad.cfg.scale());
    auto apply = [&](Tensor<R>& w, const LoraPair<R>& p) {
        if (!p.present()) return;
        Tensor<R> delta = matmul(p.a, p.b);
        for (size_t i = 0; i < w.data.size(); ++i) w.data[i] += s * delta.data[i];
    };
    for (int l = 0; l < base.cfg.n_layers; ++l) {
        apply(out.layers[size_t(l)].wq, ad.q[size_t(l)]);
        apply(out.layers[size_t(l)].wk, ad.k[size_t(l)]);
        apply(out.layers[size_t(l)].wv, ad.v[size_t(l)]);
        apply(out.layers[size_t(l)].wo, ad.o[size_t(l)]);
    }
    return out;
}

// Base weights plus adapter, used where either plain or adapted models are
// accepted. Merging is explicit so hot inference paths stay branch-free.
template <typename R>
struct AdaptedModel {
    const Params<R>* base = nullptr;
    const LoraAdapter<R>* adapter = nullptr;
};

template <typename R>
AdaptedModel<R> attach_lora(const Params<R>& base, const LoraAdapter<R>& ad) {
    ad.cfg.validate(base.cfg);
    for (int l = 0; l < base.cfg.n_layers; ++l) {
        bool has = ad.q[size_t(l)].present() || ad.k[size_t(l)].present() ||
                   ad.v[size_t(l)].present() || ad.o[size_t(l)].present();
        if (has != ad.masked(l)) throw ContractError("adapter factors disagree with the layer mask");
    }
    return AdaptedModel<R>{&base, &ad};
}

}  // namespace vfl
