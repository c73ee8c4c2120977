#pragma once

#include <cstdint>
#include <vector>

namespace vfl {

// splitmix64 step; also used as a general-purpose mixer for seed derivation.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Derive an independent stream seed from a master seed and an index.
inline uint64_t derive_seed(uint64_t master, uint64_t index) {
    return mix64(master ^ mix64(index + 0x632be59bd9b4e019ULL));
}

// Small deterministic generator (xoshiro-free, splitmix64 core). The C++
// standard distributions are implementation-defined, so all mappings to
// floats and ranges are spelled out here to keep outputs portable.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Uniform integer in [0, n). Rejection-free modulo is fine here: n is
    // always tiny relative to 2^64, bias is unobservable.
    uint64_t next_below(uint64_t n) { return n ? next_u64() % n : 0; }

    // Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + int64_t(next_below(uint64_t(hi - lo + 1)));
    }

    bool next_bool() { return (next_u64() >> 63) != 0; }

    // In-place Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Pick k distinct indices from [0, n) without replacement.
    std::vector<int> sample_without_replacement(int n, int k) {
        std::vector<int> idx(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) idx[size_t(i)] = i;
        for (int i = 0; i < k; ++i) {
            int j = i + int(next_below(uint64_t(n - i)));
            std::swap(idx[size_t(i)], idx[size_t(j)]);
        }
        idx.resize(size_t(k));
        return idx;
    }

  private:
    uint64_t state_;
};

}  // namespace vfl
