#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vfl/intervene.hpp"
#include "vfl/parallel.hpp"
#include "vfl/taskgen/pairs.hpp"

namespace vfl {

// Per-sample record of how the answer likelihood responds to vision depth:
// logp[i] is the teacher-forced answer log-likelihood with vision visible to
// layers [0, ks[i]), and r[i-1] the likelihood ratio across consecutive
// configured depths. k_star is the depth whose ratio is largest.
struct RelevanceProfile {
    std::string id;
    std::vector<int> ks;
    std::vector<double> logp;
    std::vector<double> r;  // r[i-1] = exp(logp[i] - logp[i-1])
    int k_star = 0;
    double logp_full = 0.0;  // logp at the largest configured depth
};

// Likelihood ratio of the answer with vision through layer k versus k-1.
template <typename R>
double relevance_ratio(const Params<R>& p, const MultimodalSequence& seq, int k) {
    if (k < 1 || k > p.cfg.n_layers) throw RangeError("relevance ratio depth out of range");
    double hi = logprob_dropped(p, seq, DropSpec{k});
    double lo = logprob_dropped(p, seq, DropSpec{k - 1});
    return std::exp(hi - lo);
}

struct ProfileOptions {
    std::vector<int> ks;  // empty: every depth 0..L
    int jobs = 1;
};

inline int dominant_layer(const RelevanceProfile& prof) {
    if (prof.r.empty()) throw ContractError("profile has no ratios");
    size_t best = 0;
    for (size_t i = 1; i < prof.r.size(); ++i)
        if (prof.r[i] > prof.r[best]) best = i;  // ties keep the smallest depth
    return prof.ks[best + 1];
}

namespace detail {

// Teacher-forced answer log-likelihood at one drop depth, reusing the vision
// K/V rows of a full prefill. Vision rows never attend to text, so the full
// cache's rows at layers below k are exactly what a drop-at-k prefill would
// compute; only the text positions are re-run.
template <typename R>
double logprob_with_vision_reuse(const Params<R>& p, const MultimodalSequence& seq,
                                 const KvCache<R>& full, int k,
                                 const std::vector<int>& collect) {
    const VisionSpan& span = seq.span;
    KvCache<R> cache(p.cfg, span);
    int d = p.cfg.d_model;
    for (int layer = 0; layer < std::min(k, p.cfg.n_layers); ++layer) {
        const auto& L = full.layers[size_t(layer)];
        for (int r = 0; r < span.len; ++r)
            cache.append(layer, span.start + r, &L.k[size_t(r * d)], &L.v[size_t(r * d)]);
    }
    std::vector<Tensor<R>> logits;
    extend_prefill(p, seq, cache, span.start + span.len, k, &collect, &logits);
    return answer_logprob_from_logits(seq, collect, logits);
}

}  // namespace detail

template <typename R>
std::vector<RelevanceProfile> profile_dataset(const Params<R>& p,
                                              const std::vector<DatasetItem>& items,
                                              const ProfileOptions& opt = {}) {
    std::vector<int> ks = opt.ks;
    if (ks.empty())
        for (int k = 0; k <= p.cfg.n_layers; ++k) ks.push_back(k);
    if (ks.size() < 2) throw ContractError("profiling needs at least two depths");
    for (size_t i = 0; i < ks.size(); ++i) {
        if (ks[i] < 0 || ks[i] > p.cfg.n_layers) throw RangeError("profile depth out of range");
        if (i > 0 && ks[i] <= ks[i - 1])
            throw ContractError("profile depths must be strictly increasing");
    }

    std::vector<RelevanceProfile> profiles(items.size());
    parallel_for(int(items.size()), opt.jobs, [&](int idx) {
        const DatasetItem& item = items[size_t(idx)];
        try {
            const PairedSample& s = item.sample;
            MultimodalSequence seq = sample_sequence(p.cfg, s.target, s.prompt, s.target_truth);
            std::vector<int> collect = answer_logit_positions(seq);

            // One full prefill serves double duty: it scores the deepest
            // depth and its vision rows seed every shallower one.
            std::vector<Tensor<R>> full_logits;
            PrefillResult<R> full = prefill_engine(p, seq, p.cfg.n_layers, &collect, &full_logits);
            double logp_L = answer_logprob_from_logits(seq, collect, full_logits);

            RelevanceProfile prof;
            prof.id = item.id;
            prof.ks = ks;
            for (int k : ks) {
                if (k == p.cfg.n_layers && seq.span.start == 0)
                    prof.logp.push_back(logp_L);
                else if (seq.span.start == 0)
                    prof.logp.push_back(
                        detail::logprob_with_vision_reuse(p, seq, full.cache, k, collect));
                else
                    prof.logp.push_back(logprob_dropped(p, seq, DropSpec{k}));
            }
            for (size_t i = 1; i < ks.size(); ++i)
                prof.r.push_back(std::exp(prof.logp[i] - prof.logp[i - 1]));
            prof.k_star = dominant_layer(prof);
            prof.logp_full = prof.logp.back();
            profiles[size_t(idx)] = std::move(prof);
        } catch (const std::exception& e) {
            throw ContractError("sample " + item.id + ": " + e.what());
        }
    });
    return profiles;
}

struct SelectionGroup {
    int k_star = 0;
    int size = 0;      // profiles with this dominant depth
    int selected = 0;  // how many the budget granted
};

struct Selection {
    int budget = 0;
    uint64_t seed = 0;
    std::vector<SelectionGroup> groups;  // ascending k_star
    std::vector<std::string> ids;        // sorted
};

// Budgeted, stratified pick: equal shares per dominant-depth group (remainder
// to the largest groups, then smallest k*), then within each group a uniform
// draw per terminal-likelihood quartile.
inline Selection partition_and_sample(const std::vector<RelevanceProfile>& profiles, int budget,
                                      uint64_t seed) {
    if (budget < 0) throw ContractError("budget must be non-negative");
    if (budget > int(profiles.size()))
        throw ContractError("budget exceeds the profiled sample count");

    std::map<int, std::vector<const RelevanceProfile*>> groups;
    for (const RelevanceProfile& prof : profiles) groups[prof.k_star].push_back(&prof);

    // Water-fill the budget: equal shares per round, capacity-capped, with
    // per-round remainders going to the largest groups (smallest k* breaks
    // ties). Terminates because every round either places the full quotient
    // or ends on the remainder pass.
    std::map<int, int> alloc;
    for (const auto& g : groups) alloc[g.first] = 0;
    int remaining = budget;
    while (remaining > 0) {
        std::vector<int> eligible;
        for (const auto& g : groups)
            if (alloc[g.first] < int(g.second.size())) eligible.push_back(g.first);
        int q = remaining / int(eligible.size());
        int rem = remaining % int(eligible.size());
        if (q == 0) {
            std::sort(eligible.begin(), eligible.end(), [&](int a, int b) {
                if (groups[a].size() != groups[b].size()) return groups[a].size() > groups[b].size();
                return a < b;
            });
            for (int i = 0; i < rem; ++i) ++alloc[eligible[size_t(i)]];
            remaining = 0;
        } else {
            for (int g : eligible) {
                int take = std::min(q, int(groups[g].size()) - alloc[g]);
                alloc[g] += take;
                remaining -= take;
            }
        }
    }

    Selection sel;
    sel.budget = budget;
    sel.seed = seed;
    for (auto& [k_star, members] : groups) {
        int want = alloc[k_star];
        sel.groups.push_back(SelectionGroup{k_star, int(members.size()), want});

        // Stratify by terminal likelihood, ids as the deterministic tiebreak.
        std::sort(members.begin(), members.end(),
                  [](const RelevanceProfile* a, const RelevanceProfile* b) {
                      if (a->logp_full != b->logp_full) return a->logp_full < b->logp_full;
                      return a->id < b->id;
                  });
        int m = int(members.size());
        int n_strata = std::min(4, m);
        std::vector<std::pair<int, int>> strata;  // [begin, end) index ranges
        for (int s = 0; s < n_strata; ++s)
            strata.emplace_back(s * m / n_strata, (s + 1) * m / n_strata);

        // The group's quota spreads over strata by the same water-fill rule.
        std::vector<int> stratum_take(size_t(n_strata), 0);
        int left = want;
        while (left > 0) {
            std::vector<int> open;
            for (int s = 0; s < n_strata; ++s)
                if (stratum_take[size_t(s)] < strata[size_t(s)].second - strata[size_t(s)].first)
                    open.push_back(s);
            int q = left / int(open.size());
            int rem = left % int(open.size());
            if (q == 0) {
                std::sort(open.begin(), open.end(), [&](int a, int b) {
                    int ca = strata[size_t(a)].second - strata[size_t(a)].first;
                    int cb = strata[size_t(b)].second - strata[size_t(b)].first;
                    if (ca != cb) return ca > cb;
                    return a < b;
                });
                for (int i = 0; i < rem; ++i) ++stratum_take[size_t(open[size_t(i)])];
                left = 0;
            } else {
                for (int s : open) {
                    int cap = strata[size_t(s)].second - strata[size_t(s)].first;
                    int take = std::min(q, cap - stratum_take[size_t(s)]);
                    stratum_take[size_t(s)] += take;
                    left -= take;
                }
            }
        }

        Rng rng(derive_seed(seed, uint64_t(k_star)));
        for (int s = 0; s < n_strata; ++s) {
            auto [b, e] = strata[size_t(s)];
            std::vector<int> order;
            for (int i = b; i < e; ++i) order.push_back(i);
            for (int i = 0; i < stratum_take[size_t(s)]; ++i) {
                int j = i + int(rng.next_below(uint64_t(order.size() - size_t(i))));
                std::swap(order[size_t(i)], order[size_t(j)]);
                sel.ids.push_back(members[size_t(order[size_t(i)])]->id);
            }
        }
    }
    std::sort(sel.ids.begin(), sel.ids.end());
    return sel;
}

inline std::string profiles_jsonl(const std::vector<RelevanceProfile>& profiles) {
    std::string out;
    for (const RelevanceProfile& prof : profiles) {
        nlohmann::json j{{"id", prof.id},
                         {"logp", prof.logp},
                         {"r", prof.r},
                         {"k_star", prof.k_star},
                         {"logp_full", prof.logp_full}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

inline std::string selection_ids_txt(const Selection& sel) {
    std::string out;
    for (const std::string& id : sel.ids) {
        out += id;
        out += '\n';
    }
    return out;
}

inline nlohmann::json selection_manifest(const Selection& sel) {
    nlohmann::json groups = nlohmann::json::array();
    for (const SelectionGroup& g : sel.groups)
        groups.push_back(
            nlohmann::json{{"k_star", g.k_star}, {"size", g.size}, {"selected", g.selected}});
    return nlohmann::json{{"budget", sel.budget}, {"seed", sel.seed}, {"groups", groups}};
}

}  // namespace vfl
