#pragma once

#include <vector>

#include "vfl/model/config.hpp"
#include "vfl/model/sequence.hpp"

namespace vfl {

// Per-layer key/value rows, tagged with the sequence position they came
// from. Normally every layer holds the same positions; after a vision drop
// the layers at and above the drop point hold text rows only, which is why
// positions are tracked per layer.
template <typename R>
struct KvCache {
    struct Layer {
        std::vector<R> k, v;   // [count x d_model], row-major
        std::vector<int> pos;  // strictly increasing

        int count() const { return int(pos.size()); }
    };

    ModelConfig cfg;
    VisionSpan span;
    std::vector<Layer> layers;
    int seq_positions = 0;  // total sequence positions fed so far

    explicit KvCache(const ModelConfig& c, VisionSpan s = {}) : cfg(c), span(s) {
        layers.resize(size_t(c.n_layers));
    }

    void append(int layer, int position, const R* krow, const R* vrow) {
        Layer& L = layers[size_t(layer)];
        if (!L.pos.empty() && position <= L.pos.back())
            throw ContractError("cache positions must be appended in increasing order");
        L.pos.push_back(position);
        L.k.insert(L.k.end(), krow, krow + cfg.d_model);
        L.v.insert(L.v.end(), vrow, vrow + cfg.d_model);
    }

    // True when every layer caches the same positions (no drop applied).
    bool uniform() const {
        for (const Layer& L : layers)
            if (L.pos != layers[0].pos) return false;
        return true;
    }

    // Row indices of the vision span within one layer, empty if dropped.
    std::vector<int> vision_rows(int layer) const {
        std::vector<int> out;
        const Layer& L = layers[size_t(layer)];
        for (int i = 0; i < L.count(); ++i)
            if (L.pos[size_t(i)] >= span.start && L.pos[size_t(i)] < span.start + span.len)
                out.push_back(i);
        return out;
    }

    bool same_geometry(const KvCache& o) const {
        if (!(cfg == o.cfg) || span.start != o.span.start || span.len != o.span.len) return false;
        if (layers.size() != o.layers.size()) return false;
        for (size_t l = 0; l < layers.size(); ++l)
            if (layers[l].pos != o.layers[l].pos) return false;
        return true;
    }
};

}  // namespace vfl
