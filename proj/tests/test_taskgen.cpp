#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <string>
#include <vector>

#include "vfl/taskgen/pairs.hpp"

using namespace vfl;

namespace {

bool lit(const Image& im, int y, int x) { return im.at(y, x, 0) > 0.5f; }

// Reads the rendered word back out of the pixels by matching each glyph
// slot against the font table.
std::string scan_word(const ModelConfig& cfg, const Image& im) {
    int r0 = ocr_row0(cfg);
    std::string out;
    for (int slot = 0;; ++slot) {
        int c0 = kOcrCol0 + kGlyphPitch * slot;
        if (c0 + kGlyphW > im.w) break;
        uint8_t rows[kGlyphH] = {};
        bool any = false;
        for (int r = 0; r < kGlyphH; ++r)
            for (int c = 0; c < kGlyphW; ++c)
                if (lit(im, r0 + r, c0 + c)) {
                    rows[r] |= uint8_t(1u << (kGlyphW - 1 - c));
                    any = true;
                }
        if (!any) break;
        int match = -1;
        for (int g = 0; g < 26; ++g) {
            bool same = true;
            for (int r = 0; r < kGlyphH; ++r) same &= rows[r] == kGlyphs[g][r];
            if (same) {
                match = g;
                break;
            }
        }
        REQUIRE(match >= 0);
        out.push_back(char('a' + match));
    }
    return out;
}

// Extent of all lit pixels as an inclusive grid-cell box, "x1,y1,x2,y2".
std::string scan_box(const ModelConfig& cfg, const Image& im) {
    int x1 = im.w, y1 = im.h, x2 = -1, y2 = -1;
    for (int y = 0; y < im.h; ++y)
        for (int x = 0; x < im.w; ++x)
            if (lit(im, y, x)) {
                x1 = std::min(x1, x);
                y1 = std::min(y1, y);
                x2 = std::max(x2, x);
                y2 = std::max(y2, y);
            }
    REQUIRE(x2 >= 0);
    int P = cfg.patch_size;
    char buf[48];
    std::snprintf(buf, sizeof buf, "%d,%d,%d,%d", x1 / P, y1 / P, x2 / P, y2 / P);
    return buf;
}

// 4-connected components over lit pixels.
int scan_components(const Image& im) {
    std::vector<int> mark(size_t(im.h) * size_t(im.w), 0);
    int n = 0;
    for (int y = 0; y < im.h; ++y)
        for (int x = 0; x < im.w; ++x) {
            if (!lit(im, y, x) || mark[size_t(y) * size_t(im.w) + size_t(x)]) continue;
            ++n;
            std::vector<std::pair<int, int>> stack{{y, x}};
            while (!stack.empty()) {
                auto [cy, cx] = stack.back();
                stack.pop_back();
                if (cy < 0 || cy >= im.h || cx < 0 || cx >= im.w) continue;
                if (!lit(im, cy, cx) || mark[size_t(cy) * size_t(im.w) + size_t(cx)]) continue;
                mark[size_t(cy) * size_t(im.w) + size_t(cx)] = n;
                stack.push_back({cy + 1, cx});
                stack.push_back({cy - 1, cx});
                stack.push_back({cy, cx + 1});
                stack.push_back({cy, cx - 1});
            }
        }
    return n;
}

bool same_pixels(const Image& a, const Image& b) { return a.px == b.px; }

std::vector<std::pair<int, int>> diff_pixels(const Image& a, const Image& b) {
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y < a.h; ++y)
        for (int x = 0; x < a.w; ++x)
            for (int ch = 0; ch < a.c; ++ch)
                if (a.at(y, x, ch) != b.at(y, x, ch)) {
                    out.push_back({y, x});
                    break;
                }
    return out;
}

bool in_cell(const ModelConfig& cfg, int cell, int y, int x) {
    int P = cfg.patch_size, g = cfg.grid();
    int gy = cell / g, gx = cell % g;
    return y >= gy * P && y < (gy + 1) * P && x >= gx * P && x < (gx + 1) * P;
}

}  // namespace

TEST_CASE("tokenizer round-trips every vocabulary character") {
    std::string all = "abcdefghijklmnopqrstuvwxyz0123456789 ,";
    CHECK(decode(encode(all)) == all);
    CHECK(decode(encode("cat")) == "cat");
    CHECK(encode("").empty());
}

TEST_CASE("tokenizer matches the fixed id table") {
    CHECK(encode("3,1,4,2") == std::vector<int>{29, 37, 27, 37, 30, 37, 28});
    CHECK(encode("a") == std::vector<int>{0});
    CHECK(encode("z") == std::vector<int>{25});
    CHECK(encode("0") == std::vector<int>{26});
    CHECK(encode("9") == std::vector<int>{35});
    CHECK(encode(" ") == std::vector<int>{36});
}

TEST_CASE("tokenizer rejects characters outside the vocabulary") {
    CHECK_THROWS_AS(encode("Cat"), ContractError);
    CHECK_THROWS_AS(encode("dog!"), ContractError);
    CHECK_THROWS_AS(encode("a\nb"), ContractError);
}

TEST_CASE("special and reserved ids decode to the placeholder") {
    CHECK(token_char(kBosId) == '?');
    CHECK(token_char(kEosId) == '?');
    CHECK(token_char(kPadId) == '?');
    CHECK(token_char(kImgId) == '?');
    CHECK(token_char(kFirstReservedId) == '?');
    CHECK(token_char(kVocabSize - 1) == '?');
}

TEST_CASE("vocabulary constants line up with the default model config") {
    CHECK(kVocabSize == ModelConfig{}.vocab_size);
    CHECK(kImgId == kFirstReservedId - 1);
    std::set<int> ids;
    for (char c : std::string("abcdefghijklmnopqrstuvwxyz0123456789 ,")) ids.insert(char_token(c));
    ids.insert({kBosId, kEosId, kPadId, kImgId});
    CHECK(int(ids.size()) == kFirstReservedId);
    CHECK(*ids.rbegin() == kFirstReservedId - 1);
}

TEST_CASE("word list is large, lowercase, short, and duplicate-free") {
    CHECK(kWordCount >= 100);
    std::set<std::string> seen;
    for (int i = 0; i < kWordCount; ++i) {
        std::string w = kWords[i];
        CHECK(w.size() >= 3);
        CHECK(w.size() <= 5);
        for (char c : w) CHECK((c >= 'a' && c <= 'z'));
        seen.insert(w);
    }
    CHECK(int(seen.size()) == kWordCount);
}

TEST_CASE("font has a distinct non-empty 5-bit glyph per letter") {
    std::set<std::vector<uint8_t>> shapes;
    for (int g = 0; g < 26; ++g) {
        std::vector<uint8_t> rows(kGlyphs[g], kGlyphs[g] + kGlyphH);
        bool any = false;
        for (uint8_t r : rows) {
            CHECK(r < (1u << kGlyphW));
            any |= r != 0;
        }
        CHECK(any);
        shapes.insert(rows);
    }
    CHECK(shapes.size() == 26);
    CHECK_THROWS_AS(glyph('A'), RangeError);
    CHECK_THROWS_AS(glyph('!'), RangeError);
}

TEST_CASE("generators are pure functions of the seed") {
    ModelConfig cfg;
    for (Task t : kAllTasks) {
        for (uint64_t seed : {0ull, 7ull, 123456789ull}) {
            PairedSample a = render_pair(t, cfg, seed);
            PairedSample b = render_pair(t, cfg, seed);
            CHECK(same_pixels(a.target, b.target));
            CHECK(same_pixels(a.source, b.source));
            CHECK(a.prompt == b.prompt);
            CHECK(a.target_truth == b.target_truth);
            CHECK(a.source_truth == b.source_truth);
        }
    }
}

TEST_CASE("every pair keeps its truths distinct and pixels in range") {
    ModelConfig cfg;
    for (Task t : kAllTasks)
        for (uint64_t seed = 0; seed < 50; ++seed) {
            PairedSample s = render_pair(t, cfg, seed);
            CHECK(s.target_truth != s.source_truth);
            for (float v : s.target.px) CHECK((v >= 0.0f && v <= 1.0f));
            for (float v : s.source.px) CHECK((v >= 0.0f && v <= 1.0f));
        }
}

TEST_CASE("rendered words are recoverable by glyph matching") {
    ModelConfig cfg;
    for (uint64_t seed = 0; seed < 50; ++seed) {
        PairedSample s = render_ocr_pair(cfg, seed);
        CHECK(scan_word(cfg, s.target) == s.target_truth);
        CHECK(scan_word(cfg, s.source) == s.source_truth);
        CHECK(s.target_word != s.source_word);
    }
}

TEST_CASE("ocr pairs differ only inside the glyph band") {
    ModelConfig cfg;
    int r0 = ocr_row0(cfg);
    for (uint64_t seed = 0; seed < 20; ++seed) {
        PairedSample s = render_ocr_pair(cfg, seed);
        for (auto [y, x] : diff_pixels(s.target, s.source)) {
            CHECK(y >= r0);
            CHECK(y < r0 + kGlyphH);
            CHECK(x >= kOcrCol0);
            CHECK(x < kOcrCol0 + 5 * kGlyphPitch - 1);
        }
    }
}

TEST_CASE("grounding truths equal the scanned pixel extent") {
    ModelConfig cfg;
    for (uint64_t seed = 0; seed < 50; ++seed) {
        PairedSample s = render_grounding_pair(cfg, seed);
        CHECK(scan_box(cfg, s.target) == s.target_truth);
        CHECK(scan_box(cfg, s.source) == s.source_truth);
        CHECK(s.target_cell != s.source_cell);
        for (auto [y, x] : diff_pixels(s.target, s.source)) {
            bool inside = in_cell(cfg, s.target_cell, y, x) || in_cell(cfg, s.source_cell, y, x);
            CHECK(inside);
        }
    }
}

TEST_CASE("counting truths equal the connected-component count") {
    ModelConfig cfg;
    for (uint64_t seed = 0; seed < 50; ++seed) {
        PairedSample s = render_count_pair(cfg, seed);
        CHECK(scan_components(s.target) == std::stoi(s.target_truth));
        CHECK(scan_components(s.source) == std::stoi(s.source_truth));
        CHECK(s.target_truth != s.source_truth);
        std::set<int> cells(s.target_cells.begin(), s.target_cells.end());
        CHECK(cells.size() == s.target_cells.size());
        for (auto [y, x] : diff_pixels(s.target, s.source)) {
            bool inside = false;
            for (int cell : s.target_cells) inside |= in_cell(cfg, cell, y, x);
            for (int cell : s.source_cells) inside |= in_cell(cfg, cell, y, x);
            CHECK(inside);
        }
    }
}

TEST_CASE("recognition contrasts a drawn object with a blank canvas") {
    ModelConfig cfg;
    std::set<std::string> kinds;
    for (uint64_t seed = 0; seed < 50; ++seed) {
        PairedSample s = render_recognition_pair(cfg, seed);
        CHECK(image_blank(s.source));
        CHECK_FALSE(image_blank(s.target));
        CHECK(s.target_truth == "yes");
        CHECK(s.source_truth == "no");
        CHECK(s.prompt == "is there a " + s.kind);
        kinds.insert(s.kind);
        for (auto [y, x] : diff_pixels(s.target, s.source))
            CHECK(in_cell(cfg, s.target_cell, y, x));
    }
    CHECK(kinds.size() == std::size(kObjectKinds));
}

TEST_CASE("role flip swaps the pair for some seeds and is deterministic") {
    ModelConfig cfg;
    int flipped = 0, straight = 0;
    for (uint64_t seed = 0; seed < 64; ++seed) {
        PairedSample plain = render_ocr_pair(cfg, seed, false);
        PairedSample maybe = render_ocr_pair(cfg, seed, true);
        PairedSample again = render_ocr_pair(cfg, seed, true);
        CHECK(same_pixels(maybe.target, again.target));
        CHECK(maybe.target_truth == again.target_truth);
        if (maybe.target_truth == plain.target_truth) {
            CHECK(same_pixels(maybe.target, plain.target));
            ++straight;
        } else {
            CHECK(maybe.target_truth == plain.source_truth);
            CHECK(same_pixels(maybe.target, plain.source));
            CHECK(same_pixels(maybe.source, plain.target));
            ++flipped;
        }
    }
    CHECK(flipped > 0);
    CHECK(straight > 0);
}

TEST_CASE("cell sampling enforces capacity and spacing") {
    Rng rng(5);
    CHECK_THROWS_AS(sample_cells(2, 5, rng), GenerationError);
    CHECK_THROWS_AS(sample_cells(2, 3, rng), GenerationError);  // 2x2 grid fits 2 spaced cells
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<int> cells = sample_cells(4, 6, rng);
        CHECK(cells.size() == 6);
        CHECK(std::is_sorted(cells.begin(), cells.end()));
        for (size_t i = 0; i < cells.size(); ++i)
            for (size_t j = i + 1; j < cells.size(); ++j) {
                int dy = std::abs(cells[i] / 4 - cells[j] / 4);
                int dx = std::abs(cells[i] % 4 - cells[j] % 4);
                CHECK(dy + dx >= 2);
            }
    }
}

TEST_CASE("undersized canvases fail loudly") {
    ModelConfig small;
    small.image_size = 16;
    small.patch_size = 8;
    CHECK_THROWS_AS(render_ocr_pair(small, 1), GenerationError);

    ModelConfig finegrain;
    finegrain.image_size = 16;
    finegrain.patch_size = 4;
    CHECK_THROWS_AS(render_recognition_pair(finegrain, 1), GenerationError);
}

TEST_CASE("sequence builder lays out image, prompt, and answer spans") {
    ModelConfig cfg;
    PairedSample s = render_ocr_pair(cfg, 3);
    MultimodalSequence full = sample_sequence(cfg, s.target, s.prompt, s.target_truth);
    for (int i = 0; i < cfg.n_patches(); ++i) CHECK(full.tokens[size_t(i)] == kImgId);
    CHECK(full.prompt_end == cfg.n_patches() + int(s.prompt.size()));
    CHECK(full.answer_len == int(s.target_truth.size()) + 1);
    CHECK(full.tokens.back() == kEosId);
    std::vector<int> prompt_ids(full.tokens.begin() + cfg.n_patches(),
                                full.tokens.begin() + full.prompt_end);
    CHECK(decode(prompt_ids) == s.prompt);

    MultimodalSequence bare = sample_sequence(cfg, s.target, s.prompt, "");
    CHECK(bare.answer_len == 0);
    CHECK(bare.length() == bare.prompt_end);
}

TEST_CASE("answer budget covers every truth the generators emit") {
    ModelConfig cfg;
    for (Task t : kAllTasks)
        for (uint64_t seed = 0; seed < 30; ++seed) {
            PairedSample s = render_pair(t, cfg, seed);
            CHECK(int(s.target_truth.size()) + 1 <= answer_budget(t, cfg));
            CHECK(int(s.source_truth.size()) + 1 <= answer_budget(t, cfg));
        }
}

TEST_CASE("dataset ids are stable and the jsonl round trip is lossless") {
    ModelConfig cfg;
    std::vector<DatasetItem> items;
    for (Task t : kAllTasks) {
        std::vector<DatasetItem> part = make_dataset(t, cfg, 99, 2);
        items.insert(items.end(), part.begin(), part.end());
    }
    CHECK(items[0].id == "ocr-000000");
    CHECK(items[3].id == "grounding-000001");

    std::string text = dataset_to_jsonl(items);
    CHECK(std::count(text.begin(), text.end(), '\n') == int(items.size()));
    std::vector<DatasetItem> back = dataset_from_jsonl(cfg, text);
    REQUIRE(back.size() == items.size());
    for (size_t i = 0; i < items.size(); ++i) {
        CHECK(back[i].id == items[i].id);
        CHECK(back[i].sample.task == items[i].sample.task);
        CHECK(back[i].sample.prompt == items[i].sample.prompt);
        CHECK(back[i].sample.target_truth == items[i].sample.target_truth);
        CHECK(back[i].sample.source_truth == items[i].sample.source_truth);
        CHECK(same_pixels(back[i].sample.target, items[i].sample.target));
        CHECK(same_pixels(back[i].sample.source, items[i].sample.source));
        CHECK(back[i].sample.target_cells == items[i].sample.target_cells);
        CHECK(back[i].sample.kind == items[i].sample.kind);
    }
    CHECK_THROWS_AS(dataset_from_jsonl(cfg, "{not json}\n"), FormatError);
    CHECK_THROWS_AS(dataset_from_jsonl(cfg, "{\"id\":\"x\"}\n"), FormatError);
}
