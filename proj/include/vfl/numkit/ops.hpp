#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "vfl/numkit/tensor.hpp"

namespace vfl {

// ---------------------------------------------------------------- kernels

// C += A*B (or C = A*B when accumulate is false). Row-major ikj loop order:
// the inner loop runs along contiguous rows of B and C and auto-vectorizes.
template <typename R>
void matmul_into(Tensor<R>& c, const Tensor<R>& a, const Tensor<R>& b, bool accumulate) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 tensors");
    int m = a.shape[0], k = a.shape[1], k2 = b.shape[0], n = b.shape[1];
    if (k != k2) throw ShapeError("matmul inner dimensions differ: " + shape_str(a) + " vs " + shape_str(b));
    if (c.shape != std::vector<int>{m, n}) throw ShapeError("matmul output shape mismatch");
    for (int i = 0; i < m; ++i) {
        R* __restrict crow = c.row_ptr(i);
        if (!accumulate)
            for (int j = 0; j < n; ++j) crow[j] = R(0);
        const R* arow = a.row_ptr(i);
        for (int t = 0; t < k; ++t) {
            const R av = arow[t];
            const R* __restrict brow = b.row_ptr(t);
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename R>
Tensor<R> matmul(const Tensor<R>& a, const Tensor<R>& b) {
    Tensor<R> c({a.dim(0), b.dim(1)});
    matmul_into(c, a, b, false);
    return c;
}

// C += A^T * B, with A given untransposed ([k x m]). Same vectorizable shape
// as the plain product, which is why backward never materializes A^T.
template <typename R>
void matmul_tn_into(Tensor<R>& c, const Tensor<R>& a, const Tensor<R>& b) {
    int k = a.shape[0], m = a.shape[1], n = b.shape[1];
    if (b.shape[0] != k) throw ShapeError("matmul_tn inner dimensions differ");
    if (c.shape != std::vector<int>{m, n}) throw ShapeError("matmul_tn output shape mismatch");
    for (int t = 0; t < k; ++t) {
        const R* arow = a.row_ptr(t);
        const R* __restrict brow = b.row_ptr(t);
        for (int i = 0; i < m; ++i) {
            const R av = arow[i];
            R* __restrict crow = c.row_ptr(i);
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename R>
Tensor<R> transpose(const Tensor<R>& a) {
    Tensor<R> t({a.dim(1), a.dim(0)});
    for (int i = 0; i < a.shape[0]; ++i)
        for (int j = 0; j < a.shape[1]; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

// Row-wise softmax with max subtraction; sums accumulate in double so rows
// stay normalized even for inputs around 1e4.
template <typename R>
Tensor<R> row_softmax(const Tensor<R>& x) {
    if (x.rank() != 2) throw ShapeError("row_softmax expects a rank-2 tensor");
    Tensor<R> y(x.shape);
    int m = x.shape[0], n = x.shape[1];
    if (n == 0) throw ShapeError("row_softmax on empty rows");
    for (int i = 0; i < m; ++i) {
        const R* xr = x.row_ptr(i);
        R* yr = y.row_ptr(i);
        double mx = double(xr[0]);
        for (int j = 1; j < n; ++j) mx = std::max(mx, double(xr[j]));
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            double e = std::exp(double(xr[j]) - mx);
            yr[j] = R(e);
            sum += e;
        }
        double inv = 1.0 / sum;
        for (int j = 0; j < n; ++j) yr[j] = R(double(yr[j]) * inv);
    }
    return y;
}

// y[i][j] = gamma[j] * x[i][j] / sqrt(mean(x[i]^2) + eps), per row.
template <typename R>
Tensor<R> rms_norm(const Tensor<R>& x, const Tensor<R>& gamma, R eps) {
    if (x.rank() != 2) throw ShapeError("rms_norm expects a rank-2 tensor");
    int m = x.shape[0], n = x.shape[1];
    if (gamma.numel() != n) throw ShapeError("rms_norm gamma length mismatch");
    Tensor<R> y(x.shape);
    for (int i = 0; i < m; ++i) {
        const R* xr = x.row_ptr(i);
        R* yr = y.row_ptr(i);
        double ss = 0.0;
        for (int j = 0; j < n; ++j) ss += double(xr[j]) * double(xr[j]);
        R inv = R(1.0 / std::sqrt(ss / double(n) + double(eps)));
        for (int j = 0; j < n; ++j) yr[j] = gamma.data[size_t(j)] * xr[j] * inv;
    }
    return y;
}

// ------------------------------------------------------------------- tape

// Reverse-mode autodiff at tensor granularity. Records a linear program of
// ops; backward walks it in reverse, replay re-executes it from the leaves.
// Recording is cheap enough that a fresh tape is built every training step.
template <typename R>
class Tape {
  public:
    enum class Op : uint8_t {
        Leaf,
        MatMul,
        Add,
        AddBias,
        Scale,
        Relu,
        RmsNorm,
        RowSoftmax,
        GatherRows,
        SliceRows,
        ConcatRows,
        CausalAttention,
        CrossEntropyRows,
        ReduceSum,
    };

    struct Node {
        Op op;
        std::array<int, 3> in{-1, -1, -1};
        int out = -1;
        int out2 = -1;          // secondary output (attention probs)
        double farg = 0.0;      // eps / scale factor
        std::vector<int> iargs; // gather ids, slice bounds, heads, targets
    };

    int leaf(Tensor<R> t, bool requires_grad = false) {
        int id = push(std::move(t), requires_grad);
        Node nd;
        nd.op = Op::Leaf;
        nd.out = id;
        nodes_.push_back(std::move(nd));
        return id;
    }

    const Tensor<R>& val(int id) const { return vals_[size_t(id)]; }
    size_t num_nodes() const { return nodes_.size(); }

    int matmul(int a, int b) {
        Node nd = make(Op::MatMul, a, b);
        return record(std::move(nd));
    }
    int add(int a, int b) {
        if (!vals_[size_t(a)].same_shape(vals_[size_t(b)])) throw ShapeError("add shape mismatch");
        Node nd = make(Op::Add, a, b);
        return record(std::move(nd));
    }
    int add_bias(int x, int b) {
        if (vals_[size_t(b)].numel() != vals_[size_t(x)].dim(1)) throw ShapeError("add_bias length mismatch");
        Node nd = make(Op::AddBias, x, b);
        return record(std::move(nd));
    }
    int scale(int x, double c) {
        Node nd = make(Op::Scale, x);
        nd.farg = c;
        return record(std::move(nd));
    }
    int relu(int x) { return record(make(Op::Relu, x)); }
    int rms_norm(int x, int gamma, double eps) {
        Node nd = make(Op::RmsNorm, x, gamma);
        nd.farg = eps;
        return record(std::move(nd));
    }
    int row_softmax(int x) { return record(make(Op::RowSoftmax, x)); }
    int gather_rows(int table, std::vector<int> ids) {
        const Tensor<R>& t = vals_[size_t(table)];
        if (t.rank() != 2) throw ShapeError("gather_rows expects a rank-2 table");
        for (int i : ids)
            if (i < 0 || i >= t.shape[0]) throw RangeError("gather_rows id out of range");
        Node nd = make(Op::GatherRows, table);
        nd.iargs = std::move(ids);
        return record(std::move(nd));
    }
    int slice_rows(int x, int r0, int r1) {
        const Tensor<R>& t = vals_[size_t(x)];
        if (t.rank() != 2 || r0 < 0 || r1 < r0 || r1 > t.shape[0]) throw RangeError("slice_rows bounds");
        Node nd = make(Op::SliceRows, x);
        nd.iargs = {r0, r1};
        return record(std::move(nd));
    }
    int concat_rows(int a, int b) {
        if (vals_[size_t(a)].dim(1) != vals_[size_t(b)].dim(1)) throw ShapeError("concat_rows width mismatch");
        Node nd = make(Op::ConcatRows, a, b);
        return record(std::move(nd));
    }
    int causal_attention(int q, int k, int v, int heads) {
        const Tensor<R>& qt = vals_[size_t(q)];
        if (!qt.same_shape(vals_[size_t(k)]) || !qt.same_shape(vals_[size_t(v)]))
            throw ShapeError("attention q/k/v shape mismatch");
        if (heads <= 0 || qt.dim(1) % heads != 0) throw ShapeError("attention head count must divide width");
        Node nd = make(Op::CausalAttention, q, k, v);
        nd.iargs = {heads};
        return record(std::move(nd));
    }
    int cross_entropy_rows(int logits, std::vector<int> targets) {
        const Tensor<R>& t = vals_[size_t(logits)];
        if (t.rank() != 2 || int(targets.size()) != t.shape[0])
            throw ShapeError("cross_entropy_rows expects one target per row");
        for (int c : targets)
            if (c < 0 || c >= t.shape[1]) throw RangeError("cross_entropy_rows target out of range");
        Node nd = make(Op::CrossEntropyRows, logits);
        nd.iargs = std::move(targets);
        return record(std::move(nd));
    }
    int reduce_sum(int x) { return record(make(Op::ReduceSum, x)); }

    // Fills gradient buffers for every value reachable from the loss. The
    // loss must be scalar.
    void backward(int loss) {
        if (vals_[size_t(loss)].numel() != 1) throw ContractError("backward expects a scalar loss");
        grads_.assign(vals_.size(), Tensor<R>());
        ensure_grad(loss);
        grads_[size_t(loss)].data[0] = R(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) backward_node(*it);
        // Parameters that never fed the loss still get a well-defined zero
        // gradient buffer.
        for (size_t i = 0; i < vals_.size(); ++i)
            if (needs_grad_[i] && grads_[i].data.empty()) ensure_grad(int(i));
    }

    const Tensor<R>& grad(int id) const {
        if (!needs_grad_[size_t(id)]) throw ContractError("grad requested for non-differentiable value");
        if (grads_.empty() || grads_[size_t(id)].data.empty())
            throw ContractError("grad requested before backward");
        return grads_[size_t(id)];
    }

    // Re-executes the recorded program from the leaf values and returns the
    // fresh value arena. Used to check that recorded graphs are replayable
    // bit-for-bit.
    std::vector<Tensor<R>> replay() const {
        std::vector<Tensor<R>> arena(vals_.size());
        for (const Node& nd : nodes_) {
            if (nd.op == Op::Leaf) {
                arena[size_t(nd.out)] = vals_[size_t(nd.out)];
            } else {
                Tensor<R> out2;
                arena[size_t(nd.out)] = execute(nd, arena, &out2);
                if (nd.out2 >= 0) arena[size_t(nd.out2)] = std::move(out2);
            }
        }
        return arena;
    }

  private:
    std::vector<Tensor<R>> vals_;
    std::vector<Tensor<R>> grads_;
    std::vector<uint8_t> needs_grad_;
    std::vector<Node> nodes_;

    int push(Tensor<R> t, bool ng) {
        vals_.push_back(std::move(t));
        needs_grad_.push_back(ng ? 1 : 0);
        return int(vals_.size()) - 1;
    }

    Node make(Op op, int a = -1, int b = -1, int c = -1) {
        Node nd;
        nd.op = op;
        nd.in = {a, b, c};
        return nd;
    }

    int record(Node nd) {
        bool ng = false;
        for (int i : nd.in)
            if (i >= 0) ng = ng || needs_grad_[size_t(i)] != 0;
        Tensor<R> out2;
        Tensor<R> out = execute(nd, vals_, &out2);
        nd.out = push(std::move(out), ng);
        if (nd.op == Op::CausalAttention) nd.out2 = push(std::move(out2), false);
        nodes_.push_back(nd);
        return nd.out;
    }

    void ensure_grad(int id) {
        Tensor<R>& g = grads_[size_t(id)];
        if (g.data.empty() && vals_[size_t(id)].numel() >= 0) g = Tensor<R>(vals_[size_t(id)].shape);
    }

    bool wants(int id) const { return id >= 0 && needs_grad_[size_t(id)]; }

    // Forward execution against an explicit arena so record and replay share
    // one code path (and therefore one accumulation order).
    Tensor<R> execute(const Node& nd, const std::vector<Tensor<R>>& arena, Tensor<R>* out2) const {
        auto& A = arena[size_t(nd.in[0])];
        switch (nd.op) {
            case Op::Leaf:
                return arena[size_t(nd.out)];
            case Op::MatMul:
                return vfl::matmul(A, arena[size_t(nd.in[1])]);
            case Op::Add: {
                Tensor<R> y = A;
                const Tensor<R>& B = arena[size_t(nd.in[1])];
                for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += B.data[i];
                return y;
            }
            case Op::AddBias: {
                Tensor<R> y = A;
                const Tensor<R>& B = arena[size_t(nd.in[1])];
                int m = y.shape[0], n = y.shape[1];
                for (int i = 0; i < m; ++i) {
                    R* row = y.row_ptr(i);
                    for (int j = 0; j < n; ++j) row[j] += B.data[size_t(j)];
                }
                return y;
            }
            case Op::Scale: {
                Tensor<R> y = A;
                for (R& v : y.data) v *= R(nd.farg);
                return y;
            }
            case Op::Relu: {
                Tensor<R> y = A;
                for (R& v : y.data) v = v > R(0) ? v : R(0);
                return y;
            }
            case Op::RmsNorm:
                return vfl::rms_norm(A, arena[size_t(nd.in[1])], R(nd.farg));
            case Op::RowSoftmax:
                return vfl::row_softmax(A);
            case Op::GatherRows: {
                Tensor<R> y({int(nd.iargs.size()), A.dim(1)});
                for (size_t i = 0; i < nd.iargs.size(); ++i) {
                    const R* src = A.row_ptr(nd.iargs[i]);
                    std::copy(src, src + A.dim(1), y.row_ptr(int(i)));
                }
                return y;
            }
            case Op::SliceRows: {
                int r0 = nd.iargs[0], r1 = nd.iargs[1];
                Tensor<R> y({r1 - r0, A.dim(1)});
                std::copy(A.row_ptr(r0), A.row_ptr(r0) + size_t(r1 - r0) * size_t(A.dim(1)), y.data.data());
                return y;
            }
            case Op::ConcatRows: {
                const Tensor<R>& B = arena[size_t(nd.in[1])];
                Tensor<R> y({A.dim(0) + B.dim(0), A.dim(1)});
                std::copy(A.data.begin(), A.data.end(), y.data.begin());
                std::copy(B.data.begin(), B.data.end(), y.data.begin() + A.data.size());
                return y;
            }
            case Op::CausalAttention:
                return attention_forward(A, arena[size_t(nd.in[1])], arena[size_t(nd.in[2])], nd.iargs[0], out2);
            case Op::CrossEntropyRows: {
                int m = A.shape[0], n = A.shape[1];
                double total = 0.0;
                for (int i = 0; i < m; ++i) {
                    const R* xr = A.row_ptr(i);
                    double mx = double(xr[0]);
                    for (int j = 1; j < n; ++j) mx = std::max(mx, double(xr[j]));
                    double sum = 0.0;
                    for (int j = 0; j < n; ++j) sum += std::exp(double(xr[j]) - mx);
                    total += mx + std::log(sum) - double(xr[nd.iargs[size_t(i)]]);
                }
                Tensor<R> y({1});
                y.data[0] = R(total / double(m));
                return y;
            }
            case Op::ReduceSum: {
                double s = 0.0;
                for (R v : A.data) s += double(v);
                Tensor<R> y({1});
                y.data[0] = R(s);
                return y;
            }
        }
        throw ContractError("unknown op");
    }

    static Tensor<R> attention_forward(const Tensor<R>& q, const Tensor<R>& k, const Tensor<R>& v,
                                       int heads, Tensor<R>* probs_out) {
        int T = q.shape[0], d = q.shape[1], hd = d / heads;
        R inv = R(1.0 / std::sqrt(double(hd)));
        Tensor<R> out({T, d});
        Tensor<R> probs({heads * T, T});
        std::vector<double> s(static_cast<size_t>(T));
        for (int h = 0; h < heads; ++h) {
            int off = h * hd;
            for (int t = 0; t < T; ++t) {
                double mx = -1e300;
                for (int u = 0; u <= t; ++u) {
                    const R* qa = q.row_ptr(t) + off;
                    const R* ka = k.row_ptr(u) + off;
                    double dot = 0.0;
                    for (int c = 0; c < hd; ++c) dot += double(qa[c]) * double(ka[c]);
                    s[size_t(u)] = dot * double(inv);
                    mx = std::max(mx, s[size_t(u)]);
                }
                double sum = 0.0;
                R* prow = probs.row_ptr(h * T + t);
                for (int u = 0; u <= t; ++u) {
                    double e = std::exp(s[size_t(u)] - mx);
                    prow[u] = R(e);
                    sum += e;
                }
                R invs = R(1.0 / sum);
                R* orow = out.row_ptr(t) + off;
                for (int c = 0; c < hd; ++c) orow[c] = R(0);
                for (int u = 0; u <= t; ++u) {
                    prow[u] *= invs;
                    const R p = prow[u];
                    const R* vrow = v.row_ptr(u) + off;
                    for (int c = 0; c < hd; ++c) orow[c] += p * vrow[c];
                }
            }
        }
        if (probs_out) *probs_out = std::move(probs);
        return out;
    }

    void backward_node(const Node& nd) {
        if (nd.op == Op::Leaf) return;
        const Tensor<R>& g = grads_[size_t(nd.out)];
        if (g.data.empty()) return;  // not reachable from the loss
        switch (nd.op) {
            case Op::MatMul: {
                const Tensor<R>& A = vals_[size_t(nd.in[0])];
                const Tensor<R>& B = vals_[size_t(nd.in[1])];
                if (wants(nd.in[0])) {
                    ensure_grad(nd.in[0]);
                    Tensor<R> bt = transpose(B);
                    matmul_into(grads_[size_t(nd.in[0])], g, bt, true);
                }
                if (wants(nd.in[1])) {
                    ensure_grad(nd.in[1]);
                    matmul_tn_into(grads_[size_t(nd.in[1])], A, g);
                }
                break;
            }
            case Op::Add:
                for (int s = 0; s < 2; ++s)
                    if (wants(nd.in[s])) {
                        ensure_grad(nd.in[s]);
                        Tensor<R>& gi = grads_[size_t(nd.in[s])];
                        for (size_t i = 0; i < gi.data.size(); ++i) gi.data[i] += g.data[i];
                    }
                break;
            case Op::AddBias: {
                if (wants(nd.in[0])) {
                    ensure_grad(nd.in[0]);
                    Tensor<R>& gi = grads_[size_t(nd.in[0])];
                    for (size_t i = 0; i < gi.data.size(); ++i) gi.data[i] += g.data[i];
                }
                if (wants(nd.in[1])) {
                    ensure_grad(nd.in[1]);
                    Tensor<R>& gb = grads_[size_t(nd.in[1])];
                    int m = g.shape[0], n = g.shape[1];
                    for (int i = 0; i < m; ++i) {
                        const R* row = g.row_ptr(i);
                        for (int j = 0; j < n; ++j) gb.data[size_t(j)] += row[j];
                    }
                }
                break;
            }
            case Op::Scale:
                if (wants(nd.in[0])) {
                    ensure_grad(nd.in[0]);
                    Tensor<R>& gi = grads_[size_t(nd.in[0])];
                    for (size_t i = 0; i < gi.data.size(); ++i) gi.data[i] += g.data[i] * R(nd.farg);
                }
                break;
            case Op::Relu:
                if (wants(nd.in[0])) {
                    ensure_grad(nd.in[0]);
                    const Tensor<R>& x = vals_[size_t(nd.in[0])];
                    Tensor<R>& gi = grads_[size_t(nd.in[0])];
                    for (size_t i = 0; i < gi.data.size(); ++i)
                        if (x.data[i] > R(0)) gi.data[i] += g.data[i];
                }
                break;
            case Op::RmsNorm: {
                const Tensor<R>& x = vals_[size_t(nd.in[0])];
                const Tensor<R>& gm = vals_[size_t(nd.in[1])];
                int m = x.shape[0], n = x.shape[1];
                bool wx = wants(nd.in[0]), wg = wants(nd.in[1]);
                if (wx) ensure_grad(nd.in[0]);
                if (wg) ensure_grad(nd.in[1]);
                for (int i = 0; i < m; ++i) {
                    const R* xr = x.row_ptr(i);
                    const R* gr = g.row_ptr(i);
                    double ss = 0.0;
                    for (int j = 0; j < n; ++j) ss += double(xr[j]) * double(xr[j]);
                    double r = std::sqrt(ss / double(n) + nd.farg);
                    double invr = 1.0 / r;
                    if (wx) {
                        double s = 0.0;
                        for (int j = 0; j < n; ++j)
                            s += double(gr[j]) * double(gm.data[size_t(j)]) * double(xr[j]);
                        double coef = s / (double(n) * r * r * r);
                        R* gx = grads_[size_t(nd.in[0])].row_ptr(i);
                        for (int j = 0; j < n; ++j)
                            gx[j] += R(double(gr[j]) * double(gm.data[size_t(j)]) * invr -
                                       double(xr[j]) * coef);
                    }
                    if (wg) {
                        Tensor<R>& gg = grads_[size_t(nd.in[1])];
                        for (int j = 0; j < n; ++j) gg.data[size_t(j)] += R(double(gr[j]) * double(xr[j]) * invr);
                    }
                }
                break;
            }
            case Op::RowSoftmax: {
                if (!wants(nd.in[0])) break;
                ensure_grad(nd.in[0]);
                const Tensor<R>& y = vals_[size_t(nd.out)];
                Tensor<R>& gx = grads_[size_t(nd.in[0])];
                int m = y.shape[0], n = y.shape[1];
                for (int i = 0; i < m; ++i) {
                    const R* yr = y.row_ptr(i);
                    const R* gr = g.row_ptr(i);
                    double s = 0.0;
                    for (int j = 0; j < n; ++j) s += double(gr[j]) * double(yr[j]);
                    R* gxr = gx.row_ptr(i);
                    for (int j = 0; j < n; ++j) gxr[j] += R(double(yr[j]) * (double(gr[j]) - s));
                }
                break;
            }
            case Op::GatherRows:
                if (wants(nd.in[0])) {
                    ensure_grad(nd.in[0]);
                    Tensor<R>& gt = grads_[size_t(nd.in[0])];
                    int n = gt.shape[1];
                    for (size_t i = 0; i < nd.iargs.size(); ++i) {
                        R* dst = gt.row_ptr(nd.iargs[i]);
                        const R* src = g.row_ptr(int(i));
                        for (int j = 0; j < n; ++j) dst[j] += src[j];
                    }
                }
                break;
            case Op::SliceRows:
                if (wants(nd.in[0])) {
                    ensure_grad(nd.in[0]);
                    Tensor<R>& gx = grads_[size_t(nd.in[0])];
                    int r0 = nd.iargs[0], n = gx.shape[1];
                    for (int i = 0; i < g.shape[0]; ++i) {
                        R* dst = gx.row_ptr(r0 + i);
                        const R* src = g.row_ptr(i);
                        for (int j = 0; j < n; ++j) dst[j] += src[j];
                    }
                }
                break;
            case Op::ConcatRows: {
                int ra = vals_[size_t(nd.in[0])].shape[0];
                int n = g.shape[1];
                if (wants(nd.in[0])) {
                    ensure_grad(nd.in[0]);
                    Tensor<R>& ga = grads_[size_t(nd.in[0])];
                    for (int i = 0; i < ra; ++i) {
                        R* dst = ga.row_ptr(i);
                        const R* src = g.row_ptr(i);
                        for (int j = 0; j < n; ++j) dst[j] += src[j];
                    }
                }
                if (wants(nd.in[1])) {
                    ensure_grad(nd.in[1]);
                    Tensor<R>& gb = grads_[size_t(nd.in[1])];
                    for (int i = 0; i < gb.shape[0]; ++i) {
                        R* dst = gb.row_ptr(i);
                        const R* src = g.row_ptr(ra + i);
                        for (int j = 0; j < n; ++j) dst[j] += src[j];
                    }
                }
                break;
            }
            case Op::CausalAttention:
                attention_backward(nd, g);
                break;
            case Op::CrossEntropyRows: {
                if (!wants(nd.in[0])) break;
                ensure_grad(nd.in[0]);
                const Tensor<R>& x = vals_[size_t(nd.in[0])];
                Tensor<R>& gx = grads_[size_t(nd.in[0])];
                int m = x.shape[0], n = x.shape[1];
                double go = double(g.data[0]) / double(m);
                for (int i = 0; i < m; ++i) {
                    const R* xr = x.row_ptr(i);
                    double mx = double(xr[0]);
                    for (int j = 1; j < n; ++j) mx = std::max(mx, double(xr[j]));
                    double sum = 0.0;
                    for (int j = 0; j < n; ++j) sum += std::exp(double(xr[j]) - mx);
                    double inv = 1.0 / sum;
                    R* gxr = gx.row_ptr(i);
                    for (int j = 0; j < n; ++j) {
                        double p = std::exp(double(xr[j]) - mx) * inv;
                        gxr[j] += R((p - (j == nd.iargs[size_t(i)] ? 1.0 : 0.0)) * go);
                    }
                }
                break;
            }
            case Op::ReduceSum:
                if (wants(nd.in[0])) {
                    ensure_grad(nd.in[0]);
                    Tensor<R>& gi = grads_[size_t(nd.in[0])];
                    for (R& v : gi.data) v += g.data[0];
                }
                break;
            case Op::Leaf:
                break;
        }
    }

    void attention_backward(const Node& nd, const Tensor<R>& g) {
        const Tensor<R>& q = vals_[size_t(nd.in[0])];
        const Tensor<R>& k = vals_[size_t(nd.in[1])];
        const Tensor<R>& v = vals_[size_t(nd.in[2])];
        const Tensor<R>& probs = vals_[size_t(nd.out2)];
        int T = q.shape[0], d = q.shape[1], heads = nd.iargs[0], hd = d / heads;
        R inv = R(1.0 / std::sqrt(double(hd)));
        bool wq = wants(nd.in[0]), wk = wants(nd.in[1]), wv = wants(nd.in[2]);
        if (wq) ensure_grad(nd.in[0]);
        if (wk) ensure_grad(nd.in[1]);
        if (wv) ensure_grad(nd.in[2]);
        std::vector<double> dp(static_cast<size_t>(T)), ds(static_cast<size_t>(T));
        for (int h = 0; h < heads; ++h) {
            int off = h * hd;
            for (int t = 0; t < T; ++t) {
                const R* prow = probs.row_ptr(h * T + t);
                const R* grow = g.row_ptr(t) + off;
                double sum_pd = 0.0;
                for (int u = 0; u <= t; ++u) {
                    const R* vrow = v.row_ptr(u) + off;
                    double acc = 0.0;
                    for (int c = 0; c < hd; ++c) acc += double(grow[c]) * double(vrow[c]);
                    dp[size_t(u)] = acc;
                    sum_pd += acc * double(prow[u]);
                }
                for (int u = 0; u <= t; ++u) ds[size_t(u)] = double(prow[u]) * (dp[size_t(u)] - sum_pd);
                for (int u = 0; u <= t; ++u) {
                    R dsv = R(ds[size_t(u)] * double(inv));
                    R p = prow[u];
                    if (wv) {
                        R* gv = grads_[size_t(nd.in[2])].row_ptr(u) + off;
                        for (int c = 0; c < hd; ++c) gv[c] += p * grow[c];
                    }
                    if (wq) {
                        R* gq = grads_[size_t(nd.in[0])].row_ptr(t) + off;
                        const R* krow = k.row_ptr(u) + off;
                        for (int c = 0; c < hd; ++c) gq[c] += dsv * krow[c];
                    }
                    if (wk) {
                        R* gk = grads_[size_t(nd.in[1])].row_ptr(u) + off;
                        const R* qrow = q.row_ptr(t) + off;
                        for (int c = 0; c < hd; ++c) gk[c] += dsv * qrow[c];
                    }
                }
            }
        }
    }
};

}  // namespace vfl
