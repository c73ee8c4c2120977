#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vfl/intervene.hpp"
#include "vfl/metrics.hpp"
#include "vfl/parallel.hpp"

namespace vfl {

// Whether a swapped output counts as "changed" relative to the unswapped one.
// Each task has its own rule: OCR flags any textual change, counting compares
// parsed integers, recognition flags a flip to "no", grounding flags outputs
// that land on the source image's box. Unparseable swapped outputs never
// count as changed for the parsing tasks.
inline bool score_change(Task task, const std::string& baseline_out,
                         const std::string& swapped_out, const PairedSample& sample) {
    switch (task) {
        case Task::Ocr:
            return baseline_out != swapped_out;
        case Task::Counting: {
            std::optional<int> b = parse_int(baseline_out);
            std::optional<int> s = parse_int(swapped_out);
            return b.has_value() && s.has_value() && *b != *s;
        }
        case Task::Recognition:
            return swapped_out == "no";
        case Task::Grounding: {
            std::optional<Box> truth = parse_box(sample.source_truth);
            if (!truth) throw ContractError("grounding truth is not a box: " + sample.source_truth);
            std::optional<Box> pred = parse_box(swapped_out);
            return pred.has_value() && iou(*pred, *truth) > 0.5;
        }
    }
    throw ContractError("unknown task");
}

struct ChangeRateRow {
    int layer = 0;  // -1 marks the no-swap baseline row
    int n = 0;
    int changed = 0;
    int parse_failures = 0;
    double rate = 0.0;  // percent
};

struct ChangeRateReport {
    Task task = Task::Ocr;
    bool null_source = false;  // true: spliced rows are zeros, not a pair image
    uint64_t seed = 0;         // data seed, echoed for reproducibility
    std::string config_hash;
    ChangeRateRow baseline;
    std::vector<ChangeRateRow> rows;
};

struct SwapSweepOptions {
    std::vector<int> layers;
    bool null_source = false;
    int jobs = 1;
    uint64_t seed = 0;
};

struct DropRow {
    int k = 0;
    int n = 0;
    int correct = 0;
    double accuracy = 0.0;  // percent
};

struct DropSweepReport {
    std::vector<Task> tasks;  // sorted, deduplicated
    uint64_t seed = 0;
    std::string config_hash;
    std::vector<DropRow> rows;
};

namespace detail {

inline ChangeRateRow make_rate_row(int layer, int n, int changed, int parse_failures) {
    ChangeRateRow row{layer, n, changed, parse_failures, 0.0};
    row.rate = 100.0 * double(changed) / double(n);
    return row;
}

inline bool output_parses(Task task, const std::string& out) {
    if (task == Task::Counting) return parse_int(out).has_value();
    if (task == Task::Grounding) return parse_box(out).has_value();
    return true;
}

}  // namespace detail

inline ChangeRateReport change_rate_sweep(const Params<float>& p,
                                          const std::vector<PairedSample>& samples,
                                          const SwapSweepOptions& opt) {
    if (samples.empty()) throw ContractError("change rate sweep needs at least one sample");
    if (opt.layers.empty()) throw ContractError("change rate sweep needs at least one layer");
    Task task = samples[0].task;
    for (const PairedSample& s : samples)
        if (s.task != task) throw ContractError("change rate sweep samples must share one task");
    for (int k : opt.layers)
        if (k < 0 || k >= p.cfg.n_layers) throw RangeError("swap layer out of range");

    int n = int(samples.size());
    int nl = int(opt.layers.size());
    // Per sample: [0] baseline repeat, [1..nl] one output per swept layer.
    std::vector<std::vector<std::string>> outs(static_cast<size_t>(n));
    std::vector<std::string> base(static_cast<size_t>(n));
    parallel_for(n, opt.jobs, [&](int i) {
        const PairedSample& s = samples[size_t(i)];
        MultimodalSequence tgt = sample_sequence(p.cfg, s.target, s.prompt, "");
        int budget = answer_budget(task, p.cfg);
        base[size_t(i)] = decode(generate(p, tgt, budget, kEosId));
        std::vector<std::string>& row = outs[size_t(i)];
        row.resize(size_t(nl) + 1);
        row[0] = decode(generate(p, tgt, budget, kEosId));
        std::optional<PrefillResult<float>> src;
        if (!opt.null_source) src = prefill(p, sample_sequence(p.cfg, s.source, s.prompt, ""));
        for (int j = 0; j < nl; ++j) {
            SwapSpec<float> spec{opt.layers[size_t(j)], opt.null_source ? nullptr : &src->cache};
            row[size_t(j) + 1] = decode(generate_swapped(p, tgt, spec, budget, kEosId));
        }
    });

    ChangeRateReport rep;
    rep.task = task;
    rep.null_source = opt.null_source;
    rep.seed = opt.seed;
    rep.config_hash = config_hash(p.cfg);
    int base_changed = 0, base_fail = 0;
    for (int i = 0; i < n; ++i) {
        // The control row repeats generation with no intervention; anything
        // other than a byte-identical output would be a determinism bug.
        base_changed += outs[size_t(i)][0] != base[size_t(i)];
        base_fail += !detail::output_parses(task, outs[size_t(i)][0]);
    }
    rep.baseline = detail::make_rate_row(-1, n, base_changed, base_fail);
    for (int j = 0; j < nl; ++j) {
        int changed = 0, fail = 0;
        for (int i = 0; i < n; ++i) {
            const std::string& out = outs[size_t(i)][size_t(j) + 1];
            changed += score_change(task, base[size_t(i)], out, samples[size_t(i)]);
            fail += !detail::output_parses(task, out);
        }
        rep.rows.push_back(detail::make_rate_row(opt.layers[size_t(j)], n, changed, fail));
    }
    return rep;
}

inline DropSweepReport drop_sweep(const Params<float>& p, const std::vector<PairedSample>& samples,
                                  const std::vector<int>& k_list, int jobs = 1, uint64_t seed = 0) {
    if (samples.empty()) throw ContractError("drop sweep needs at least one sample");
    if (k_list.empty()) throw ContractError("drop sweep needs at least one drop point");
    for (size_t j = 0; j < k_list.size(); ++j) {
        if (k_list[j] < 0 || k_list[j] > p.cfg.n_layers) throw RangeError("drop point out of range");
        if (j > 0 && k_list[j] <= k_list[j - 1])
            throw ContractError("drop points must be strictly increasing");
    }

    int n = int(samples.size());
    int nk = int(k_list.size());
    std::vector<std::vector<bool>> correct(static_cast<size_t>(n));
    parallel_for(n, jobs, [&](int i) {
        const PairedSample& s = samples[size_t(i)];
        MultimodalSequence tgt = sample_sequence(p.cfg, s.target, s.prompt, "");
        int budget = answer_budget(s.task, p.cfg);
        std::vector<bool>& row = correct[size_t(i)];
        row.resize(size_t(nk));
        for (int j = 0; j < nk; ++j) {
            DropSpec spec{k_list[size_t(j)]};
            std::string out = decode(generate_dropped(p, tgt, spec, budget, kEosId));
            row[size_t(j)] = answer_correct(s.task, out, s.target_truth);
        }
    });

    DropSweepReport rep;
    rep.seed = seed;
    rep.config_hash = config_hash(p.cfg);
    std::set<Task> tasks;
    for (const PairedSample& s : samples) tasks.insert(s.task);
    rep.tasks.assign(tasks.begin(), tasks.end());
    for (int j = 0; j < nk; ++j) {
        DropRow row{k_list[size_t(j)], n, 0, 0.0};
        for (int i = 0; i < n; ++i) row.correct += correct[size_t(i)][size_t(j)];
        row.accuracy = 100.0 * double(row.correct) / double(n);
        rep.rows.push_back(row);
    }
    return rep;
}

// Layers whose change rate clears the threshold, in ascending order. This is
// the bridge from probe reports to a fine-tune layer mask.
inline std::vector<int> derive_mask_from_report(const ChangeRateReport& rep,
                                                double threshold = 5.0) {
    std::vector<int> mask;
    for (const ChangeRateRow& row : rep.rows)
        if (row.rate > threshold) mask.push_back(row.layer);
    std::sort(mask.begin(), mask.end());
    mask.erase(std::unique(mask.begin(), mask.end()), mask.end());
    return mask;
}

inline nlohmann::json report_to_json(const ChangeRateReport& rep) {
    auto row_json = [](const ChangeRateRow& r) {
        return nlohmann::json{{"layer", r.layer},
                              {"n", r.n},
                              {"changed", r.changed},
                              {"parse_failures", r.parse_failures},
                              {"rate", r.rate}};
    };
    nlohmann::json rows = nlohmann::json::array();
    for (const ChangeRateRow& r : rep.rows) rows.push_back(row_json(r));
    return nlohmann::json{{"kind", "change_rate"},
                          {"task", task_name(rep.task)},
                          {"swap_source", rep.null_source ? "null" : "pair"},
                          {"layer_indexing", "0-based"},
                          {"config_hash", rep.config_hash},
                          {"seed", rep.seed},
                          {"baseline", row_json(rep.baseline)},
                          {"rows", rows}};
}

inline nlohmann::json report_to_json(const DropSweepReport& rep) {
    nlohmann::json tasks = nlohmann::json::array();
    for (Task t : rep.tasks) tasks.push_back(task_name(t));
    nlohmann::json rows = nlohmann::json::array();
    for (const DropRow& r : rep.rows)
        rows.push_back(nlohmann::json{
            {"k", r.k}, {"n", r.n}, {"correct", r.correct}, {"accuracy", r.accuracy}});
    return nlohmann::json{{"kind", "drop_sweep"},
                          {"tasks", tasks},
                          {"layer_indexing", "0-based"},
                          {"config_hash", rep.config_hash},
                          {"seed", rep.seed},
                          {"rows", rows}};
}

inline std::string report_csv(const ChangeRateReport& rep) {
    std::string out = "task,layer,n,changed,rate\n";
    auto line = [&](const ChangeRateRow& r) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%.4f\n", task_name(rep.task), r.layer, r.n,
                      r.changed, r.rate);
        out += buf;
    };
    line(rep.baseline);  // layer -1
    for (const ChangeRateRow& r : rep.rows) line(r);
    return out;
}

inline std::string report_csv(const DropSweepReport& rep) {
    std::string tasks;
    for (Task t : rep.tasks) {
        if (!tasks.empty()) tasks += '+';
        tasks += task_name(t);
    }
    std::string out = "task,layer,n,correct,accuracy\n";
    for (const DropRow& r : rep.rows) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%.4f\n", tasks.c_str(), r.k, r.n, r.correct,
                      r.accuracy);
        out += buf;
    }
    return out;
}

namespace detail {

// Minimal static line chart: one polyline over a percent axis.
inline std::string line_chart_svg(const std::string& title, const std::string& xlabel,
                                  const std::vector<int>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size() || xs.empty()) throw ContractError("chart needs matched x/y data");
    const double w = 640, h = 400, ml = 56, mr = 16, mt = 40, mb = 48;
    double x0 = double(xs.front()), x1 = double(xs.back());
    double span = x1 > x0 ? x1 - x0 : 1.0;
    auto px = [&](double x) { return ml + (x - x0) / span * (w - ml - mr); };
    auto py = [&](double y) { return mt + (100.0 - y) / 100.0 * (h - mt - mb); };
    char buf[256];
    std::string s;
    std::snprintf(buf, sizeof buf,
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" "
                  "viewBox=\"0 0 %.0f %.0f\">\n",
                  w, h, w, h);
    s += buf;
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"24\" font-family=\"monospace\" font-size=\"14\" "
                  "text-anchor=\"middle\">%s</text>\n",
                  w / 2, title.c_str());
    s += buf;
    for (int tick = 0; tick <= 100; tick += 25) {
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#ddd\"/>\n"
                      "<text x=\"%.1f\" y=\"%.1f\" font-family=\"monospace\" font-size=\"11\" "
                      "text-anchor=\"end\">%d</text>\n",
                      ml, py(tick), w - mr, py(tick), ml - 6, py(tick) + 4, tick);
        s += buf;
    }
    for (size_t i = 0; i < xs.size(); ++i) {
        std::snprintf(buf, sizeof buf,
                      "<text x=\"%.1f\" y=\"%.1f\" font-family=\"monospace\" font-size=\"11\" "
                      "text-anchor=\"middle\">%d</text>\n",
                      px(double(xs[i])), h - mb + 18, xs[i]);
        s += buf;
    }
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-family=\"monospace\" font-size=\"12\" "
                  "text-anchor=\"middle\">%s</text>\n",
                  (ml + w - mr) / 2, h - 12, xlabel.c_str());
    s += buf;
    s += "<polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"2\" points=\"";
    for (size_t i = 0; i < xs.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%s%.1f,%.1f", i ? " " : "", px(double(xs[i])), py(ys[i]));
        s += buf;
    }
    s += "\"/>\n";
    for (size_t i = 0; i < xs.size(); ++i) {
        std::snprintf(buf, sizeof buf, "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"3\" fill=\"#1f6fb2\"/>\n",
                      px(double(xs[i])), py(ys[i]));
        s += buf;
    }
    s += "</svg>\n";
    return s;
}

}  // namespace detail

inline std::string report_svg(const ChangeRateReport& rep) {
    std::vector<int> xs;
    std::vector<double> ys;
    for (const ChangeRateRow& r : rep.rows) {
        xs.push_back(r.layer);
        ys.push_back(r.rate);
    }
    std::string title = std::string("change rate % by swap layer (") + task_name(rep.task) + ")";
    return detail::line_chart_svg(title, "swap layer", xs, ys);
}

inline std::string report_svg(const DropSweepReport& rep) {
    std::vector<int> xs;
    std::vector<double> ys;
    for (const DropRow& r : rep.rows) {
        xs.push_back(r.k);
        ys.push_back(r.accuracy);
    }
    return detail::line_chart_svg("accuracy % by drop point", "drop point k", xs, ys);
}

}  // namespace vfl
