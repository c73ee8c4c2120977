#pragma once

#include <cmath>
#include <vector>

#include "vfl/numkit/tensor.hpp"

namespace vfl {

struct AdamHyper {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// First/second moment buffers, one pair per parameter tensor.
template <typename R>
struct AdamState {
    std::vector<Tensor<R>> m;
    std::vector<Tensor<R>> v;
    int64_t step = 0;

    void init(const std::vector<Tensor<R>*>& params) {
        m.clear();
        v.clear();
        for (const Tensor<R>* p : params) {
            m.emplace_back(p->shape);
            v.emplace_back(p->shape);
        }
        step = 0;
    }
};

// One bias-corrected Adam update over a parameter list. Order of the list is
// part of the contract: state buffers are positional.
template <typename R>
void adam_step(std::vector<Tensor<R>*>& params, const std::vector<const Tensor<R>*>& grads,
               AdamState<R>& state, const AdamHyper& h) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw ContractError("adam_step: parameter/gradient/state count mismatch");
    state.step += 1;
    double bc1 = 1.0 - std::pow(h.beta1, double(state.step));
    double bc2 = 1.0 - std::pow(h.beta2, double(state.step));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<R>& p = *params[pi];
        const Tensor<R>& g = *grads[pi];
        if (!p.same_shape(g) || !p.same_shape(state.m[pi]))
            throw ShapeError("adam_step: shape mismatch at parameter " + std::to_string(pi));
        R* __restrict pd = p.data.data();
        const R* __restrict gd = g.data.data();
        R* __restrict md = state.m[pi].data.data();
        R* __restrict vd = state.v[pi].data.data();
        size_t n = p.data.size();
        for (size_t i = 0; i < n; ++i) {
            double gi = double(gd[i]);
            double mi = h.beta1 * double(md[i]) + (1.0 - h.beta1) * gi;
            double vi = h.beta2 * double(vd[i]) + (1.0 - h.beta2) * gi * gi;
            md[i] = R(mi);
            vd[i] = R(vi);
            double mhat = mi / bc1;
            double vhat = vi / bc2;
            pd[i] = R(double(pd[i]) - h.lr * mhat / (std::sqrt(vhat) + h.eps));
        }
    }
}

}  // namespace vfl
