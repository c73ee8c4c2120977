#pragma once

#include <vector>

#include "vfl/model/config.hpp"

namespace vfl {

// Raster image, row-major [h][w][c], float intensities in [0, 1].
struct Image {
    int h = 0, w = 0, c = 0;
    std::vector<float> px;

    float at(int y, int x, int ch = 0) const { return px[size_t((y * w + x) * c + ch)]; }
    float& at(int y, int x, int ch = 0) { return px[size_t((y * w + x) * c + ch)]; }
};

inline Image blank_image(const ModelConfig& cfg) {
    Image im;
    im.h = cfg.image_size;
    im.w = cfg.image_size;
    im.c = cfg.channels;
    im.px.assign(size_t(im.h * im.w * im.c), 0.0f);
    return im;
}

struct VisionSpan {
    int start = 0;
    int len = 0;
};

// Joint input: a contiguous vision span (placeholder token ids backed by the
// image) followed by prompt text, optionally followed by answer tokens for
// teacher forcing. Position ids are the plain sequence indices.
struct MultimodalSequence {
    std::vector<int> tokens;  // placeholders for the vision span included
    VisionSpan span;
    Image image;       // ignored when span.len == 0
    int prompt_end = 0;  // tokens [span end, prompt_end) are the prompt
    int answer_len = 0;  // tokens [prompt_end, prompt_end + answer_len) are the answer

    int length() const { return int(tokens.size()); }

    void validate(const ModelConfig& cfg) const {
        if (span.start != 0) throw ContractError("vision span must lead the sequence");
        if (span.len != 0 && span.len != cfg.n_patches())
            throw ContractError("vision span length must match the patch count");
        if (span.len != 0 && (image.h != cfg.image_size || image.w != cfg.image_size || image.c != cfg.channels))
            throw ContractError("image dimensions do not match the model config");
        if (prompt_end < span.start + span.len || prompt_end > length())
            throw ContractError("prompt_end out of range");
        if (prompt_end == span.start + span.len) throw ContractError("prompt must be non-empty");
        if (answer_len < 0 || prompt_end + answer_len != length())
            throw ContractError("answer span must cover the sequence tail");
        if (length() > cfg.max_seq) throw CapacityError("sequence exceeds max_seq");
        for (int t : tokens)
            if (t < 0 || t >= cfg.vocab_size) throw RangeError("token id out of vocabulary");
    }
};

}  // namespace vfl
