#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vfl/iohelp.hpp"
#include "vfl/model/params.hpp"
#include "vfl/train/lora.hpp"

namespace vfl {

inline constexpr char kCkptMagic[9] = "VFLCKPT1";

// Container layout: 8-byte magic, u32 JSON length, UTF-8 JSON header, then
// tensor records sorted by name. Each record is u32 name length, the name,
// u32 rank, u32 dims, and raw little-endian 32-bit floats. Adapters reuse
// the container with an "adapter" object in the JSON header.
namespace detail {

inline void write_tensor_record(std::string& out, const std::string& name, const Tensor32& t) {
    put_u32(out, uint32_t(name.size()));
    out += name;
    put_u32(out, uint32_t(t.rank()));
    for (int d : t.shape) put_u32(out, uint32_t(d));
    static_assert(sizeof(float) == 4);
    const char* raw = reinterpret_cast<const char*>(t.data.data());
    out.append(raw, t.data.size() * 4);
}

inline std::string serialize(const nlohmann::json& header, const std::map<std::string, const Tensor32*>& tensors) {
    std::string out(kCkptMagic, 8);
    std::string js = header.dump();
    put_u32(out, uint32_t(js.size()));
    out += js;
    for (const auto& [name, t] : tensors) write_tensor_record(out, name, *t);
    return out;
}

struct RawCheckpoint {
    nlohmann::json header;
    std::map<std::string, Tensor32> tensors;
};

inline RawCheckpoint parse(const std::string& blob, const std::string& what) {
    if (blob.size() < 12 || blob.compare(0, 8, kCkptMagic, 8) != 0)
        throw FormatError(what + ": bad magic");
    size_t off = 8;
    uint32_t jlen = get_u32(blob, off);
    if (off + jlen > blob.size()) throw FormatError(what + ": truncated header");
    RawCheckpoint raw;
    try {
        raw.header = nlohmann::json::parse(blob.substr(off, jlen));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(what + ": invalid header json: " + e.what());
    }
    off += jlen;
    while (off < blob.size()) {
        uint32_t nlen = get_u32(blob, off);
        if (off + nlen > blob.size()) throw FormatError(what + ": truncated tensor name");
        std::string name = blob.substr(off, nlen);
        off += nlen;
        uint32_t rank = get_u32(blob, off);
        if (rank > 4) throw FormatError(what + ": implausible tensor rank");
        std::vector<int> shape;
        int64_t numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            uint32_t d = get_u32(blob, off);
            shape.push_back(int(d));
            numel *= d;
        }
        if (off + size_t(numel) * 4 > blob.size()) throw FormatError(what + ": truncated tensor data");
        Tensor32 t(shape);
        std::memcpy(t.data.data(), blob.data() + off, size_t(numel) * 4);
        off += size_t(numel) * 4;
        if (!raw.tensors.emplace(std::move(name), std::move(t)).second)
            throw FormatError(what + ": duplicate tensor name");
    }
    return raw;
}

inline Tensor32 take_tensor(detail::RawCheckpoint& raw, const std::string& name,
                            const std::vector<int>& shape, const std::string& what) {
    auto it = raw.tensors.find(name);
    if (it == raw.tensors.end()) throw FormatError(what + ": missing tensor " + name);
    if (it->second.shape != shape) throw FormatError(what + ": unexpected shape for " + name);
    return std::move(it->second);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Params<float>& p) {
    std::map<std::string, const Tensor32*> sorted;
    p.for_each([&](const std::string& name, const Tensor32& t) { sorted[name] = &t; });
    write_file(path, detail::serialize(config_to_json(p.cfg), sorted));
}

inline Params<float> load_checkpoint(const std::string& path) {
    detail::RawCheckpoint raw = detail::parse(read_file(path), path);
    if (raw.header.contains("adapter")) throw FormatError(path + ": expected a model checkpoint, found an adapter");
    ModelConfig cfg = config_from_json(raw.header);
    Params<float> p = init_params<float>(cfg, 0);
    p.for_each([&](const std::string& name, Tensor32& t) {
        t = detail::take_tensor(raw, name, t.shape, path);
    });
    return p;
}

inline void save_adapter(const std::string& path, const ModelConfig& mcfg, const LoraAdapter<float>& ad) {
    nlohmann::json header = config_to_json(mcfg);
    header["adapter"] = nlohmann::json{{"alpha", ad.cfg.alpha},
                                       {"adapt_wk", ad.cfg.adapt_wk},
                                       {"adapt_wo", ad.cfg.adapt_wo},
                                       {"adapt_wq", ad.cfg.adapt_wq},
                                       {"adapt_wv", ad.cfg.adapt_wv},
                                       {"layer_mask", ad.cfg.layer_mask},
                                       {"rank", ad.cfg.rank}};
    std::map<std::string, const Tensor32*> sorted;
    auto add = [&](const char* proj, int layer, const LoraPair<float>& pr) {
        if (!pr.present()) return;
        std::string base = "lora." + std::to_string(layer) + "." + proj;
        sorted[base + ".a"] = &pr.a;
        sorted[base + ".b"] = &pr.b;
    };
    for (int l = 0; l < mcfg.n_layers; ++l) {
        add("wq", l, ad.q[size_t(l)]);
        add("wk", l, ad.k[size_t(l)]);
        add("wv", l, ad.v[size_t(l)]);
        add("wo", l, ad.o[size_t(l)]);
    }
    write_file(path, detail::serialize(header, sorted));
}

struct LoadedAdapter {
    ModelConfig cfg;
    LoraAdapter<float> adapter;
};

inline LoadedAdapter load_adapter(const std::string& path) {
    detail::RawCheckpoint raw = detail::parse(read_file(path), path);
    if (!raw.header.contains("adapter")) throw FormatError(path + ": not an adapter checkpoint");
    LoadedAdapter out;
    out.cfg = config_from_json(raw.header);
    const nlohmann::json& aj = raw.header["adapter"];
    try {
        out.adapter.cfg.rank = aj.at("rank").get<int>();
        out.adapter.cfg.alpha = aj.at("alpha").get<double>();
        out.adapter.cfg.adapt_wq = aj.at("adapt_wq").get<bool>();
        out.adapter.cfg.adapt_wk = aj.at("adapt_wk").get<bool>();
        out.adapter.cfg.adapt_wv = aj.at("adapt_wv").get<bool>();
        out.adapter.cfg.adapt_wo = aj.at("adapt_wo").get<bool>();
        out.adapter.cfg.layer_mask = aj.at("layer_mask").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": invalid adapter header: " + e.what());
    }
    out.adapter.cfg.validate(out.cfg);
    int L = out.cfg.n_layers, d = out.cfg.d_model, r = out.adapter.cfg.rank;
    out.adapter.q.resize(size_t(L));
    out.adapter.k.resize(size_t(L));
    out.adapter.v.resize(size_t(L));
    out.adapter.o.resize(size_t(L));
    auto take = [&](const char* proj, int layer, LoraPair<float>& pr) {
        std::string base = "lora." + std::to_string(layer) + "." + proj;
        pr.a = detail::take_tensor(raw, base + ".a", {d, r}, path);
        pr.b = detail::take_tensor(raw, base + ".b", {r, d}, path);
    };
    for (int l : out.adapter.cfg.layer_mask) {
        if (out.adapter.cfg.adapt_wq) take("wq", l, out.adapter.q[size_t(l)]);
        if (out.adapter.cfg.adapt_wk) take("wk", l, out.adapter.k[size_t(l)]);
        if (out.adapter.cfg.adapt_wv) take("wv", l, out.adapter.v[size_t(l)]);
        if (out.adapter.cfg.adapt_wo) take("wo", l, out.adapter.o[size_t(l)]);
    }
    return out;
}

// True when the file holds an adapter rather than full model weights.
inline bool checkpoint_is_adapter(const std::string& path) {
    detail::RawCheckpoint raw = detail::parse(read_file(path), path);
    return raw.header.contains("adapter");
}

}  // namespace vfl
