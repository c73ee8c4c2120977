#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "vfl/errors.hpp"
#include "vfl/iohelp.hpp"

namespace vfl {

// Architecture description for the toy multimodal decoder. Images enter as a
// grid of square patches; each patch row is linearly projected straight into
// the token stream, so patch count fixes the vision span length.
struct ModelConfig {
    int n_layers = 8;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = 72;
    int image_size = 32;  // square images
    int channels = 1;
    int patch_size = 8;
    int max_seq = 128;

    int grid() const { return image_size / patch_size; }
    int n_patches() const { return grid() * grid(); }
    int patch_dim() const { return patch_size * patch_size * channels; }
    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || d_ff <= 0 || vocab_size <= 0 ||
            image_size <= 0 || channels <= 0 || patch_size <= 0 || max_seq <= 0)
            throw ContractError("model config fields must be positive");
        if (d_model % n_heads != 0) throw ContractError("d_model must be divisible by n_heads");
        if (image_size % patch_size != 0) throw ContractError("image_size must be divisible by patch_size");
        if (n_patches() >= max_seq) throw ContractError("vision span does not fit in max_seq");
    }

    bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"channels", c.channels},     {"d_ff", c.d_ff},
                          {"d_model", c.d_model},       {"image_size", c.image_size},
                          {"max_seq", c.max_seq},       {"n_heads", c.n_heads},
                          {"n_layers", c.n_layers},     {"patch_size", c.patch_size},
                          {"vocab_size", c.vocab_size}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.channels = j.at("channels").get<int>();
        c.d_ff = j.at("d_ff").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.image_size = j.at("image_size").get<int>();
        c.max_seq = j.at("max_seq").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.n_layers = j.at("n_layers").get<int>();
        c.patch_size = j.at("patch_size").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad model config json: ") + e.what());
    }
    c.validate();
    return c;
}

// Stable fingerprint of a config, quoted in every report and manifest.
inline std::string config_hash(const ModelConfig& c) {
    std::string s = config_to_json(c).dump();
    return hex64(fnv1a64(s.data(), s.size()));
}

}  // namespace vfl
