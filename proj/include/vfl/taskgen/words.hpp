#pragma once

#include <iterator>

namespace vfl {

// Lowercase 3-5 letter rendering vocabulary. Order is fixed; generators
// index into it with seeded draws, so edits here change generated data.
inline constexpr const char* kWords[] = {
    "cat",   "dog",   "sun",   "map",   "key",   "box",   "car",   "pen",
    "hat",   "cup",   "bed",   "fox",   "owl",   "ant",   "bee",   "jar",
    "net",   "pot",   "rug",   "saw",   "tie",   "van",   "zip",   "arm",
    "ear",   "eye",   "leg",   "toe",   "air",   "ice",   "mud",   "oak",
    "fig",   "hen",   "ram",   "cow",   "pig",   "bat",   "elk",   "fly",
    "gem",   "ink",   "joy",   "kit",   "log",   "moon",  "nest",  "opal",
    "pear",  "quip",  "rose",  "star",  "tree",  "urn",   "vine",  "wolf",
    "yarn",  "zinc",  "bird",  "coin",  "desk",  "echo",  "fern",  "gate",
    "hill",  "iron",  "jade",  "kite",  "lake",  "mint",  "nail",  "oven",
    "park",  "quay",  "rain",  "sand",  "tent",  "unit",  "vase",  "wind",
    "xray",  "yolk",  "zero",  "apple", "bread", "cloud", "dance", "eagle",
    "flame", "grape", "house", "igloo", "jelly", "knife", "lemon", "mango",
    "night", "ocean", "piano", "queen", "river", "stone", "tiger", "umbra",
    "viola", "whale", "xenon", "yacht", "zebra", "amber", "brick", "cedar",
    "delta", "ember", "frost", "globe", "honey", "ivory", "jewel", "koala",
};

inline constexpr int kWordCount = int(std::size(kWords));
static_assert(kWordCount >= 100);

}  // namespace vfl
