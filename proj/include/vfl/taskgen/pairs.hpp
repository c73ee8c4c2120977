#pragma once

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vfl/iohelp.hpp"
#include "vfl/model/config.hpp"
#include "vfl/model/sequence.hpp"
#include "vfl/rng.hpp"
#include "vfl/taskgen/canvas.hpp"
#include "vfl/taskgen/tokenizer.hpp"
#include "vfl/taskgen/words.hpp"

namespace vfl {

enum class Task { Ocr, Grounding, Counting, Recognition };

inline constexpr Task kAllTasks[] = {Task::Ocr, Task::Grounding, Task::Counting,
                                     Task::Recognition};

inline const char* task_name(Task t) {
    switch (t) {
        case Task::Ocr: return "ocr";
        case Task::Grounding: return "grounding";
        case Task::Counting: return "counting";
        case Task::Recognition: return "recognition";
    }
    throw ContractError("unknown task");
}

inline Task task_from_name(const std::string& name) {
    for (Task t : kAllTasks)
        if (name == task_name(t)) return t;
    throw ContractError("unknown task name: " + name);
}

// One probing pair: two canvases that differ only in the probed attribute,
// with the prompt and both ground-truth answers. Metadata records what was
// drawn so scanning oracles can re-derive the truths from pixels.
struct PairedSample {
    Task task = Task::Ocr;
    Image target, source;
    std::string prompt;
    std::string target_truth, source_truth;

    std::string target_word, source_word;         // ocr
    int target_cell = -1, source_cell = -1;       // grounding, recognition
    std::vector<int> target_cells, source_cells;  // counting
    std::string kind;                             // recognition
};

namespace detail {

inline void flip_roles(PairedSample& s, Rng& rng, bool enabled) {
    if (!enabled || !rng.next_bool()) return;
    std::swap(s.target, s.source);
    std::swap(s.target_truth, s.source_truth);
    std::swap(s.target_word, s.source_word);
    std::swap(s.target_cell, s.source_cell);
    std::swap(s.target_cells, s.source_cells);
}

}  // namespace detail

inline int ocr_row0(const ModelConfig& cfg) { return cfg.image_size / 4; }
inline constexpr int kOcrCol0 = 1;

inline PairedSample render_ocr_pair(const ModelConfig& cfg, uint64_t seed, bool role_flip = false) {
    Rng rng(seed);
    int a = int(rng.next_below(uint64_t(kWordCount)));
    int b = int(rng.next_below(uint64_t(kWordCount - 1)));
    if (b >= a) ++b;
    PairedSample s;
    s.task = Task::Ocr;
    s.prompt = "what is written";
    s.target_word = kWords[a];
    s.source_word = kWords[b];
    s.target_truth = s.target_word;
    s.source_truth = s.source_word;
    s.target = blank_image(cfg);
    s.source = blank_image(cfg);
    draw_word(s.target, ocr_row0(cfg), kOcrCol0, s.target_word);
    draw_word(s.source, ocr_row0(cfg), kOcrCol0, s.source_word);
    detail::flip_roles(s, rng, role_flip);
    return s;
}

inline std::string cell_box_string(const ModelConfig& cfg, int cell) {
    int g = cfg.grid();
    int gy = cell / g, gx = cell % g;
    char buf[48];
    std::snprintf(buf, sizeof buf, "%d,%d,%d,%d", gx, gy, gx, gy);
    return buf;
}

inline PairedSample render_grounding_pair(const ModelConfig& cfg, uint64_t seed,
                                          bool role_flip = false) {
    Rng rng(seed);
    int cells = cfg.grid() * cfg.grid();
    int a = int(rng.next_below(uint64_t(cells)));
    int b = int(rng.next_below(uint64_t(cells - 1)));
    if (b >= a) ++b;
    PairedSample s;
    s.task = Task::Grounding;
    s.prompt = "where is the square";
    s.target_cell = a;
    s.source_cell = b;
    s.target_truth = cell_box_string(cfg, a);
    s.source_truth = cell_box_string(cfg, b);
    s.target = blank_image(cfg);
    s.source = blank_image(cfg);
    fill_cell(s.target, cfg.patch_size, a / cfg.grid(), a % cfg.grid());
    fill_cell(s.source, cfg.patch_size, b / cfg.grid(), b % cfg.grid());
    detail::flip_roles(s, rng, role_flip);
    return s;
}

// Non-adjacent distinct grid cells (4-neighborhood), sorted. Cells are kept
// apart so every drawn square stays its own connected component and a
// component-counting oracle recovers the intended count.
inline std::vector<int> sample_cells(int grid, int count, Rng& rng) {
    if (count > grid * grid) throw GenerationError("cell count exceeds grid capacity");
    std::vector<int> order(size_t(grid) * size_t(grid));
    std::iota(order.begin(), order.end(), 0);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        rng.shuffle(order);
        std::vector<int> picked;
        for (int cell : order) {
            bool ok = true;
            for (int q : picked) {
                int dy = std::abs(cell / grid - q / grid), dx = std::abs(cell % grid - q % grid);
                if (dy + dx == 1) {
                    ok = false;
                    break;
                }
            }
            if (ok) {
                picked.push_back(cell);
                if (int(picked.size()) == count) {
                    std::sort(picked.begin(), picked.end());
                    return picked;
                }
            }
        }
    }
    throw GenerationError("could not place that many non-adjacent cells");
}

inline PairedSample render_count_pair(const ModelConfig& cfg, uint64_t seed,
                                      bool role_flip = false) {
    Rng rng(seed);
    int n = 1 + int(rng.next_below(6));
    int m = 1 + int(rng.next_below(5));
    if (m >= n) ++m;
    PairedSample s;
    s.task = Task::Counting;
    s.prompt = "how many squares";
    s.target_cells = sample_cells(cfg.grid(), n, rng);
    s.source_cells = sample_cells(cfg.grid(), m, rng);
    s.target_truth = std::to_string(n);
    s.source_truth = std::to_string(m);
    s.target = blank_image(cfg);
    s.source = blank_image(cfg);
    for (int cell : s.target_cells)
        fill_cell(s.target, cfg.patch_size, cell / cfg.grid(), cell % cfg.grid());
    for (int cell : s.source_cells)
        fill_cell(s.source, cfg.patch_size, cell / cfg.grid(), cell % cfg.grid());
    detail::flip_roles(s, rng, role_flip);
    return s;
}

struct ObjectKind {
    const char* name;
    uint8_t rows[8];
};

inline constexpr ObjectKind kObjectKinds[] = {
    {"box", {0b11111111, 0b10000001, 0b10000001, 0b10000001, 0b10000001, 0b10000001, 0b10000001,
             0b11111111}},
    {"ring", {0b00111100, 0b01000010, 0b10000001, 0b10000001, 0b10000001, 0b10000001, 0b01000010,
              0b00111100}},
    {"plus", {0b00011000, 0b00011000, 0b00011000, 0b11111111, 0b11111111, 0b00011000, 0b00011000,
              0b00011000}},
    {"dot", {0b00000000, 0b00000000, 0b00111100, 0b00111100, 0b00111100, 0b00111100, 0b00000000,
             0b00000000}},
};

inline PairedSample render_recognition_pair(const ModelConfig& cfg, uint64_t seed,
                                            bool role_flip = false) {
    if (cfg.patch_size < 8) throw GenerationError("object patterns need cells of at least 8 pixels");
    Rng rng(seed);
    const ObjectKind& kind = kObjectKinds[rng.next_below(std::size(kObjectKinds))];
    int cell = int(rng.next_below(uint64_t(cfg.grid() * cfg.grid())));
    PairedSample s;
    s.task = Task::Recognition;
    s.prompt = std::string("is there a ") + kind.name;
    s.kind = kind.name;
    s.target_cell = cell;
    s.target_truth = "yes";
    s.source_truth = "no";
    s.target = blank_image(cfg);
    s.source = blank_image(cfg);
    draw_pattern8(s.target, (cell / cfg.grid()) * cfg.patch_size,
                  (cell % cfg.grid()) * cfg.patch_size, kind.rows);
    detail::flip_roles(s, rng, role_flip);
    return s;
}

inline PairedSample render_pair(Task task, const ModelConfig& cfg, uint64_t seed,
                                bool role_flip = false) {
    switch (task) {
        case Task::Ocr: return render_ocr_pair(cfg, seed, role_flip);
        case Task::Grounding: return render_grounding_pair(cfg, seed, role_flip);
        case Task::Counting: return render_count_pair(cfg, seed, role_flip);
        case Task::Recognition: return render_recognition_pair(cfg, seed, role_flip);
    }
    throw ContractError("unknown task");
}

// Upper bound on answer length in tokens, including the closing EOS.
inline int answer_budget(Task task, const ModelConfig& cfg) {
    switch (task) {
        case Task::Ocr: return 5 + 1;
        case Task::Grounding: return 4 * int(std::to_string(cfg.grid() - 1).size()) + 3 + 1;
        case Task::Counting: return 1 + 1;
        case Task::Recognition: return 3 + 1;
    }
    throw ContractError("unknown task");
}

// [IMG x N_v][prompt][answer EOS]; an empty answer builds a prompt-only
// sequence for generation.
inline MultimodalSequence sample_sequence(const ModelConfig& cfg, const Image& im,
                                          const std::string& prompt, const std::string& answer) {
    MultimodalSequence seq;
    seq.image = im;
    seq.span.start = 0;
    seq.span.len = cfg.n_patches();
    seq.tokens.assign(size_t(seq.span.len), kImgId);
    std::vector<int> pr = encode(prompt);
    seq.tokens.insert(seq.tokens.end(), pr.begin(), pr.end());
    seq.prompt_end = int(seq.tokens.size());
    if (!answer.empty()) {
        std::vector<int> an = encode(answer);
        seq.tokens.insert(seq.tokens.end(), an.begin(), an.end());
        seq.tokens.push_back(kEosId);
        seq.answer_len = int(an.size()) + 1;
    }
    seq.validate(cfg);
    return seq;
}

struct DatasetItem {
    std::string id;
    PairedSample sample;
};

inline std::vector<DatasetItem> make_dataset(Task task, const ModelConfig& cfg, uint64_t seed,
                                             int count, bool role_flip = false) {
    if (count < 0) throw ContractError("dataset size must be non-negative");
    std::vector<DatasetItem> items;
    items.reserve(size_t(count));
    for (int i = 0; i < count; ++i) {
        char id[64];
        std::snprintf(id, sizeof id, "%s-%06d", task_name(task), i);
        items.push_back({id, render_pair(task, cfg, derive_seed(seed, uint64_t(i)), role_flip)});
    }
    return items;
}

inline std::string pack_image(const Image& im) {
    std::string raw;
    raw.reserve(im.px.size() * 4);
    for (float v : im.px) put_f32(raw, v);
    return base64_encode(raw.data(), raw.size());
}

inline Image unpack_image(const ModelConfig& cfg, const std::string& b64) {
    std::vector<unsigned char> bytes = base64_decode(b64);
    std::string raw(bytes.begin(), bytes.end());
    Image im = blank_image(cfg);
    if (raw.size() != im.px.size() * 4) throw FormatError("pixel payload has the wrong size");
    size_t off = 0;
    for (float& v : im.px) v = get_f32(raw, off);
    return im;
}

inline nlohmann::json sample_to_json(const std::string& id, const PairedSample& s) {
    nlohmann::json meta;
    switch (s.task) {
        case Task::Ocr:
            meta = {{"target_word", s.target_word}, {"source_word", s.source_word}};
            break;
        case Task::Grounding:
            meta = {{"target_cell", s.target_cell}, {"source_cell", s.source_cell}};
            break;
        case Task::Counting:
            meta = {{"target_cells", s.target_cells}, {"source_cells", s.source_cells}};
            break;
        case Task::Recognition:
            meta = {{"kind", s.kind}, {"target_cell", s.target_cell}};
            break;
    }
    return {{"id", id},
            {"task", task_name(s.task)},
            {"prompt", s.prompt},
            {"target_truth", s.target_truth},
            {"source_truth", s.source_truth},
            {"target_px", pack_image(s.target)},
            {"source_px", pack_image(s.source)},
            {"meta", meta}};
}

inline DatasetItem sample_from_json(const ModelConfig& cfg, const nlohmann::json& j) {
    try {
        DatasetItem item;
        item.id = j.at("id").get<std::string>();
        PairedSample& s = item.sample;
        s.task = task_from_name(j.at("task").get<std::string>());
        s.prompt = j.at("prompt").get<std::string>();
        s.target_truth = j.at("target_truth").get<std::string>();
        s.source_truth = j.at("source_truth").get<std::string>();
        s.target = unpack_image(cfg, j.at("target_px").get<std::string>());
        s.source = unpack_image(cfg, j.at("source_px").get<std::string>());
        const nlohmann::json& meta = j.at("meta");
        switch (s.task) {
            case Task::Ocr:
                s.target_word = meta.at("target_word").get<std::string>();
                s.source_word = meta.at("source_word").get<std::string>();
                break;
            case Task::Grounding:
                s.target_cell = meta.at("target_cell").get<int>();
                s.source_cell = meta.at("source_cell").get<int>();
                break;
            case Task::Counting:
                s.target_cells = meta.at("target_cells").get<std::vector<int>>();
                s.source_cells = meta.at("source_cells").get<std::vector<int>>();
                break;
            case Task::Recognition:
                s.kind = meta.at("kind").get<std::string>();
                s.target_cell = meta.at("target_cell").get<int>();
                break;
        }
        return item;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed dataset record: ") + e.what());
    }
}

inline std::string dataset_to_jsonl(const std::vector<DatasetItem>& items) {
    std::string out;
    for (const DatasetItem& item : items) {
        out += sample_to_json(item.id, item.sample).dump();
        out += '\n';
    }
    return out;
}

inline std::vector<DatasetItem> dataset_from_jsonl(const ModelConfig& cfg,
                                                   const std::string& text) {
    std::vector<DatasetItem> items;
    size_t start = 0;
    while (start < text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        if (end > start) {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(text.substr(start, end - start));
            } catch (const nlohmann::json::exception& e) {
                throw FormatError(std::string("bad dataset line: ") + e.what());
            }
            items.push_back(sample_from_json(cfg, j));
        }
        start = end + 1;
    }
    return items;
}

}  // namespace vfl
