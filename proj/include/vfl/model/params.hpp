#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vfl/model/config.hpp"
#include "vfl/numkit/tensor.hpp"
#include "vfl/rng.hpp"

namespace vfl {

// All learnable weights. Attention and feed-forward maps act on row vectors
// (y = x W), so every matrix is stored [in x out].
template <typename R>
struct LayerParams {
    Tensor<R> wq, wk, wv, wo;  // [d_model x d_model]
    Tensor<R> w1, w2;          // [d_model x d_ff], [d_ff x d_model]
    Tensor<R> norm1_g, norm2_g;
};

template <typename R>
struct Params {
    ModelConfig cfg;
    Tensor<R> patch_w;  // [patch_dim x d_model]
    Tensor<R> patch_b;  // [d_model]
    Tensor<R> tok_emb;  // [vocab x d_model]
    Tensor<R> pos_emb;  // [max_seq x d_model]
    std::vector<LayerParams<R>> layers;
    Tensor<R> final_norm_g;  // [d_model]
    Tensor<R> lm_head;       // [d_model x vocab]

    // Canonical field walk; ordering here defines the optimizer's parameter
    // order. Checkpoints sort by name separately.
    void for_each(const std::function<void(const std::string&, Tensor<R>&)>& fn) {
        fn("patch_proj.w", patch_w);
        fn("patch_proj.b", patch_b);
        fn("tok_emb", tok_emb);
        fn("pos_emb", pos_emb);
        for (size_t l = 0; l < layers.size(); ++l) {
            std::string p = "layers." + std::to_string(l) + ".";
            fn(p + "wq", layers[l].wq);
            fn(p + "wk", layers[l].wk);
            fn(p + "wv", layers[l].wv);
            fn(p + "wo", layers[l].wo);
            fn(p + "ff.w1", layers[l].w1);
            fn(p + "ff.w2", layers[l].w2);
            fn(p + "norm1.g", layers[l].norm1_g);
            fn(p + "norm2.g", layers[l].norm2_g);
        }
        fn("final_norm.g", final_norm_g);
        fn("lm_head", lm_head);
    }

    void for_each(const std::function<void(const std::string&, const Tensor<R>&)>& fn) const {
        const_cast<Params*>(this)->for_each(
            [&](const std::string& n, Tensor<R>& t) { fn(n, t); });
    }

    int64_t param_count() const {
        int64_t n = 0;
        for_each([&](const std::string&, const Tensor<R>& t) { n += t.numel(); });
        return n;
    }

    template <typename R2>
    Params<R2> cast() const {
        Params<R2> out;
        out.cfg = cfg;
        out.patch_w = patch_w.template cast<R2>();
        out.patch_b = patch_b.template cast<R2>();
        out.tok_emb = tok_emb.template cast<R2>();
        out.pos_emb = pos_emb.template cast<R2>();
        for (const auto& l : layers) {
            LayerParams<R2> o;
            o.wq = l.wq.template cast<R2>();
            o.wk = l.wk.template cast<R2>();
            o.wv = l.wv.template cast<R2>();
            o.wo = l.wo.template cast<R2>();
            o.w1 = l.w1.template cast<R2>();
            o.w2 = l.w2.template cast<R2>();
            o.norm1_g = l.norm1_g.template cast<R2>();
            o.norm2_g = l.norm2_g.template cast<R2>();
            out.layers.push_back(std::move(o));
        }
        out.final_norm_g = final_norm_g.template cast<R2>();
        out.lm_head = lm_head.template cast<R2>();
        return out;
    }
};

// Seeded small-uniform init. Norm gains start at one, biases at zero.
template <typename R>
Params<R> init_params(const ModelConfig& cfg, uint64_t seed, double scale = 0.08) {
    cfg.validate();
    Params<R> p;
    p.cfg = cfg;
    Rng rng(derive_seed(seed, 0x9a7a));
    auto uni = [&](std::vector<int> shape) {
        Tensor<R> t(std::move(shape));
        for (R& v : t.data) v = R(rng.uniform(-scale, scale));
        return t;
    };
    auto ones = [&](int n) {
        Tensor<R> t({n});
        for (R& v : t.data) v = R(1);
        return t;
    };
    p.patch_w = uni({cfg.patch_dim(), cfg.d_model});
    p.patch_b = Tensor<R>({cfg.d_model});
    p.tok_emb = uni({cfg.vocab_size, cfg.d_model});
    p.pos_emb = uni({cfg.max_seq, cfg.d_model});
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerParams<R> lp;
        lp.wq = uni({cfg.d_model, cfg.d_model});
        lp.wk = uni({cfg.d_model, cfg.d_model});
        lp.wv = uni({cfg.d_model, cfg.d_model});
        lp.wo = uni({cfg.d_model, cfg.d_model});
        lp.w1 = uni({cfg.d_model, cfg.d_ff});
        lp.w2 = uni({cfg.d_ff, cfg.d_model});
        lp.norm1_g = ones(cfg.d_model);
        lp.norm2_g = ones(cfg.d_model);
        p.layers.push_back(std::move(lp));
    }
    p.final_norm_g = ones(cfg.d_model);
    p.lm_head = uni({cfg.d_model, cfg.vocab_size});
    return p;
}

}  // namespace vfl
