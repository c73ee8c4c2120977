#pragma once

#include <optional>
#include <string>

#include "vfl/errors.hpp"
#include "vfl/taskgen/pairs.hpp"

namespace vfl {

// Inclusive rectangle in grid-cell coordinates.
struct Box {
    int x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

inline double iou(const Box& a, const Box& b) {
    if (a.x1 > a.x2 || a.y1 > a.y2 || b.x1 > b.x2 || b.y1 > b.y2)
        throw ContractError("malformed box");
    int iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1) + 1;
    int ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1) + 1;
    int inter = std::max(0, iw) * std::max(0, ih);
    int area_a = (a.x2 - a.x1 + 1) * (a.y2 - a.y1 + 1);
    int area_b = (b.x2 - b.x1 + 1) * (b.y2 - b.y1 + 1);
    return double(inter) / double(area_a + area_b - inter);
}

// Strict "x1,y1,x2,y2" of non-negative integers with x1<=x2, y1<=y2;
// anything else is not a box.
inline std::optional<Box> parse_box(const std::string& s) {
    int vals[4];
    size_t pos = 0;
    for (int i = 0; i < 4; ++i) {
        if (i > 0) {
            if (pos >= s.size() || s[pos] != ',') return std::nullopt;
            ++pos;
        }
        if (pos >= s.size() || s[pos] < '0' || s[pos] > '9') return std::nullopt;
        long v = 0;
        while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') {
            v = v * 10 + (s[pos] - '0');
            if (v > 1000000) return std::nullopt;
            ++pos;
        }
        vals[i] = int(v);
    }
    if (pos != s.size()) return std::nullopt;
    Box b{vals[0], vals[1], vals[2], vals[3]};
    if (b.x1 > b.x2 || b.y1 > b.y2) return std::nullopt;
    return b;
}

inline std::optional<int> parse_int(const std::string& s) {
    if (s.empty()) return std::nullopt;
    long v = 0;
    for (char c : s) {
        if (c < '0' || c > '9') return std::nullopt;
        v = v * 10 + (c - '0');
        if (v > 1000000) return std::nullopt;
    }
    return int(v);
}

// Whether a decoded model output counts as a correct answer. Everything is
// exact string match except grounding, which accepts any box overlapping
// the truth with IoU above 0.5.
inline bool answer_correct(Task task, const std::string& output, const std::string& truth) {
    if (task != Task::Grounding) return output == truth;
    std::optional<Box> got = parse_box(output);
    std::optional<Box> want = parse_box(truth);
    if (!want) throw ContractError("grounding truth is not a box: " + truth);
    return got && iou(*got, *want) > 0.5;
}

}  // namespace vfl
