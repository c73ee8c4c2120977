#pragma once

#include <string>

#include "vfl/model/sequence.hpp"
#include "vfl/taskgen/font.hpp"

namespace vfl {

inline void draw_glyph(Image& im, int row0, int col0, char c, float value = 1.0f) {
    if (row0 < 0 || col0 < 0 || row0 + kGlyphH > im.h || col0 + kGlyphW > im.w)
        throw GenerationError("glyph does not fit on the canvas");
    const uint8_t* rows = glyph(c);
    for (int r = 0; r < kGlyphH; ++r)
        for (int cbit = 0; cbit < kGlyphW; ++cbit)
            if (rows[r] >> (kGlyphW - 1 - cbit) & 1)
                for (int ch = 0; ch < im.c; ++ch) im.at(row0 + r, col0 + cbit, ch) = value;
}

inline void draw_word(Image& im, int row0, int col0, const std::string& word) {
    if (word.empty()) throw GenerationError("cannot draw an empty word");
    int width = kGlyphPitch * int(word.size()) - 1;
    if (col0 + width > im.w) throw GenerationError("word is too wide for the canvas");
    for (size_t i = 0; i < word.size(); ++i)
        draw_glyph(im, row0, col0 + kGlyphPitch * int(i), word[i]);
}

// Fills one grid cell of the patch lattice with a constant value.
inline void fill_cell(Image& im, int patch, int gy, int gx, float value = 1.0f) {
    for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x)
            for (int ch = 0; ch < im.c; ++ch) im.at(gy * patch + y, gx * patch + x, ch) = value;
}

inline void draw_pattern8(Image& im, int y0, int x0, const uint8_t rows[8], float value = 1.0f) {
    if (y0 < 0 || x0 < 0 || y0 + 8 > im.h || x0 + 8 > im.w)
        throw GenerationError("pattern does not fit on the canvas");
    for (int r = 0; r < 8; ++r)
        for (int cbit = 0; cbit < 8; ++cbit)
            if (rows[r] >> (7 - cbit) & 1)
                for (int ch = 0; ch < im.c; ++ch) im.at(y0 + r, x0 + cbit, ch) = value;
}

inline bool image_blank(const Image& im) {
    for (float v : im.px)
        if (v != 0.0f) return false;
    return true;
}

}  // namespace vfl
