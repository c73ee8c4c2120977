#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "vfl/errors.hpp"

namespace vfl {

// Dense row-major tensor. Rank is small (<= 3 in practice); shape checks are
// strict and throw ShapeError so mistakes surface at the call site instead of
// as silent garbage.
template <typename R>
struct Tensor {
    std::vector<int> shape;
    std::vector<R> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(size_t(numel_of(shape)), R(0));
    }
    Tensor(std::vector<int> s, std::vector<R> d) : shape(std::move(s)), data(std::move(d)) {
        if (int64_t(data.size()) != numel_of(shape)) throw ShapeError("tensor data/shape mismatch");
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw ShapeError("negative dimension");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return int64_t(data.size()); }
    int rank() const { return int(shape.size()); }

    int dim(int i) const {
        if (i < 0 || i >= rank()) throw ShapeError("dimension index out of range");
        return shape[size_t(i)];
    }

    // 2-D accessors; most of the library works in matrices.
    int rows() const { return rank() == 2 ? shape[0] : (rank() == 1 ? 1 : throw_rank()); }
    int cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : throw_rank()); }

    R& at(int r, int c) { return data[size_t(r) * size_t(cols()) + size_t(c)]; }
    R at(int r, int c) const { return data[size_t(r) * size_t(cols()) + size_t(c)]; }
    R& at(int i) { return data[size_t(i)]; }
    R at(int i) const { return data[size_t(i)]; }

    R* row_ptr(int r) { return data.data() + size_t(r) * size_t(cols()); }
    const R* row_ptr(int r) const { return data.data() + size_t(r) * size_t(cols()); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (R v : data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    template <typename R2>
    Tensor<R2> cast() const {
        Tensor<R2> t;
        t.shape = shape;
        t.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) t.data[i] = R2(data[i]);
        return t;
    }

  private:
    [[noreturn]] static int throw_rank() { throw ShapeError("expected rank-1 or rank-2 tensor"); }
};

template <typename R>
inline std::string shape_str(const Tensor<R>& t) {
    std::string s = "[";
    for (int i = 0; i < t.rank(); ++i) {
        if (i) s += "x";
        s += std::to_string(t.shape[size_t(i)]);
    }
    return s + "]";
}

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

}  // namespace vfl
