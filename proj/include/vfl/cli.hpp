#pragma once

#include <chrono>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vfl/harness.hpp"
#include "vfl/model/checkpoint.hpp"
#include "vfl/select.hpp"
#include "vfl/train/train.hpp"

namespace vfl::cli {

inline constexpr const char* kAppVersion = "0.1.0";

namespace detail {

inline std::string config_token(const std::string& key, const nlohmann::json& v) {
    std::string val;
    if (v.is_string()) {
        val = v.get<std::string>();
    } else if (v.is_boolean()) {
        val = v.get<bool>() ? "true" : "false";
    } else if (v.is_array()) {
        for (size_t i = 0; i < v.size(); ++i) {
            if (i) val += ',';
            val += v[i].is_string() ? v[i].get<std::string>() : v[i].dump();
        }
    } else if (v.is_object() || v.is_null()) {
        throw FormatError("config values must be scalars or arrays: " + key);
    } else {
        val = v.dump();
    }
    return "--" + key + "=" + val;
}

// Config files are flat JSON objects keyed by long option name. Values are
// appended to argv as --key=value tokens, skipping keys the command line
// already sets, so explicit flags always win.
inline std::vector<std::string> apply_config_file(std::vector<std::string> args) {
    std::string path;
    for (size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            path = args[i + 1];
            break;
        }
        if (args[i].rfind("--config=", 0) == 0) {
            path = args[i].substr(9);
            break;
        }
    }
    if (path.empty()) return args;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad config json: " + std::string(e.what()));
    }
    if (!j.is_object()) throw FormatError("config json must be an object");
    for (const auto& [key, value] : j.items()) {
        bool given = false;
        for (const std::string& a : args)
            if (a == "--" + key || a.rfind("--" + key + "=", 0) == 0) {
                given = true;
                break;
            }
        if (!given) args.push_back(config_token(key, value));
    }
    return args;
}

inline std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    size_t start = 0;
    while (start <= s.size()) {
        size_t comma = s.find(',', start);
        std::string tok = s.substr(start, comma == std::string::npos ? comma : comma - start);
        size_t used = 0;
        int v = 0;
        try {
            v = std::stoi(tok, &used);
        } catch (const std::exception&) {
            throw ContractError("bad integer list: " + s);
        }
        if (used != tok.size()) throw ContractError("bad integer list: " + s);
        out.push_back(v);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

inline std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    size_t start = 0;
    while (start <= s.size()) {
        size_t comma = s.find(',', start);
        std::string tok = s.substr(start, comma == std::string::npos ? comma : comma - start);
        size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(tok, &used);
        } catch (const std::exception&) {
            throw ContractError("bad number list: " + s);
        }
        if (used != tok.size()) throw ContractError("bad number list: " + s);
        out.push_back(v);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

// "all" expands against the checkpoint's depth; anything else is a strictly
// formatted comma list. last_valid is L-1 for swap layers, L for drop points.
inline std::vector<int> expand_layer_list(const std::string& s, int last_valid) {
    if (s == "all") {
        std::vector<int> out;
        for (int k = 0; k <= last_valid; ++k) out.push_back(k);
        return out;
    }
    return parse_int_list(s);
}

// Exact task names plus unique prefixes, so "count" reads as counting.
inline Task parse_task(const std::string& s) {
    for (Task t : kAllTasks)
        if (s == task_name(t)) return t;
    std::vector<Task> hits;
    for (Task t : kAllTasks)
        if (!s.empty() && std::string(task_name(t)).rfind(s, 0) == 0) hits.push_back(t);
    if (hits.size() == 1) return hits[0];
    throw ContractError("unknown task name: " + s);
}

inline std::vector<Task> parse_task_list(const std::string& s) {
    if (s == "all") return {std::begin(kAllTasks), std::end(kAllTasks)};
    std::vector<Task> out;
    size_t start = 0;
    while (start <= s.size()) {
        size_t comma = s.find(',', start);
        out.push_back(parse_task(s.substr(start, comma == std::string::npos ? comma : comma - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

inline std::vector<PairedSample> render_samples(Task t, const ModelConfig& cfg, int n,
                                                uint64_t seed, uint64_t stream) {
    if (n < 1) throw ContractError("sample count must be at least 1");
    std::vector<PairedSample> out;
    out.reserve(size_t(n));
    for (int i = 0; i < n; ++i)
        out.push_back(render_pair(t, cfg, derive_seed(seed, stream + uint64_t(i))));
    return out;
}

template <typename Report>
void write_report(const std::string& path, const Report& rep) {
    std::string out;
    if (path.ends_with(".json"))
        out = report_to_json(rep).dump(2) + "\n";
    else if (path.ends_with(".csv"))
        out = report_csv(rep);
    else if (path.ends_with(".svg"))
        out = report_svg(rep);
    else
        throw ContractError("report path must end in .json, .csv, or .svg: " + path);
    write_file(path, out);
}

inline std::vector<int> mask_from_report_file(const std::string& path, double threshold) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad report json: " + std::string(e.what()));
    }
    if (j.value("kind", "") != "change_rate")
        throw FormatError("not a change-rate report: " + path);
    ChangeRateReport rep;
    try {
        for (const auto& row : j.at("rows")) {
            ChangeRateRow r;
            r.layer = row.at("layer").get<int>();
            r.rate = row.at("rate").get<double>();
            rep.rows.push_back(r);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad report json: " + std::string(e.what()));
    }
    return derive_mask_from_report(rep, threshold);
}

inline void apply_targets(LoraConfig& lora, const std::string& s) {
    lora.adapt_wq = lora.adapt_wk = lora.adapt_wv = lora.adapt_wo = false;
    size_t start = 0;
    while (start <= s.size()) {
        size_t comma = s.find(',', start);
        std::string tok = s.substr(start, comma == std::string::npos ? comma : comma - start);
        if (tok == "q")
            lora.adapt_wq = true;
        else if (tok == "k")
            lora.adapt_wk = true;
        else if (tok == "v")
            lora.adapt_wv = true;
        else if (tok == "o")
            lora.adapt_wo = true;
        else
            throw ContractError("adapter targets must come from q,k,v,o: " + s);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
}

inline ModelConfig model_config_from_file(const std::string& path) {
    if (path.empty()) return ModelConfig{};
    try {
        return config_from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad model config json: " + std::string(e.what()));
    }
}

inline void write_manifest(const std::string& out_path, const std::vector<std::string>& argv,
                           const nlohmann::json& resolved, double wall_s) {
    std::string cfg = resolved.dump();
    nlohmann::json j{{"argv", argv},
                     {"config", resolved},
                     {"config_hash", hex64(fnv1a64(cfg.data(), cfg.size()))},
                     {"wall_time_s", wall_s},
                     {"versions", nlohmann::json{{"app", kAppVersion}}}};
    write_file(out_path + ".manifest.json", j.dump(2) + "\n");
}

// Runs one subcommand action, then records the manifest beside its output.
template <typename Fn>
void timed_run(const std::string& out_path, const std::vector<std::string>& argv, Fn&& action) {
    auto t0 = std::chrono::steady_clock::now();
    nlohmann::json resolved = action();
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(out_path, argv, resolved, wall);
}

}  // namespace detail

inline int run(int argc, const char* const* argv) {
    std::vector<std::string> argvv(argv, argv + argc);
    CLI::App app{"layer-resolved vision intervention workbench", "vfl"};
    app.require_subcommand(1);
    std::string config_path;

    auto add_sub = [&](const std::string& name, const std::string& desc) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->add_option("--config", config_path,
                        "flat json object of flag defaults; argv wins on conflict");
        return sub;
    };

    // gen-data
    auto* gen = add_sub("gen-data", "render a paired-sample dataset to jsonl");
    std::string gen_task = "ocr", gen_out, gen_model;
    int gen_count = 100;
    uint64_t gen_seed = 0;
    bool gen_flip = false;
    gen->add_option("--task", gen_task, "task name");
    gen->add_option("--count", gen_count, "samples to render");
    gen->add_option("--seed", gen_seed, "master seed");
    gen->add_flag("--role-flip", gen_flip, "randomly exchange target and source roles");
    gen->add_option("--model", gen_model, "model config json file (defaults otherwise)");
    gen->add_option("--out", gen_out, "output jsonl path")->required();
    gen->callback([&] {
        detail::timed_run(gen_out, argvv, [&]() -> nlohmann::json {
            ModelConfig cfg = detail::model_config_from_file(gen_model);
            Task task = detail::parse_task(gen_task);
            std::vector<DatasetItem> items = make_dataset(task, cfg, gen_seed, gen_count, gen_flip);
            write_file(gen_out, dataset_to_jsonl(items));
            return {{"task", task_name(task)}, {"count", gen_count},   {"seed", gen_seed},
                    {"role_flip", gen_flip},   {"model", config_to_json(cfg)}, {"out", gen_out}};
        });
    });

    // train
    auto* tr = add_sub("train", "train the base model and save a checkpoint");
    std::string tr_out, tr_metrics, tr_model, tr_mix = "0.25,0.25,0.25,0.25";
    TrainConfig tr_cfg;
    tr->add_option("--steps", tr_cfg.steps, "optimizer steps");
    tr->add_option("--batch", tr_cfg.batch, "sequences per step");
    tr->add_option("--lr", tr_cfg.adam.lr, "peak learning rate");
    tr->add_option("--warmup", tr_cfg.warmup, "linear warmup steps");
    tr->add_option("--seed", tr_cfg.seed, "master seed");
    tr->add_option("--eval-every", tr_cfg.eval_every, "steps between held-out evals");
    tr->add_option("--eval-samples", tr_cfg.eval_samples, "held-out samples per task per eval");
    tr->add_option("--mix", tr_mix, "task mix weights: ocr,grounding,counting,recognition");
    tr->add_option("--model", tr_model, "model config json file (defaults otherwise)");
    tr->add_option("--metrics", tr_metrics, "also write an eval metrics csv here");
    tr->add_option("--out", tr_out, "checkpoint path")->required();
    tr->callback([&] {
        detail::timed_run(tr_out, argvv, [&]() -> nlohmann::json {
            ModelConfig mcfg = detail::model_config_from_file(tr_model);
            std::vector<double> mix = detail::parse_double_list(tr_mix);
            if (mix.size() != 4) throw ContractError("task mix needs exactly four weights");
            std::copy(mix.begin(), mix.end(), tr_cfg.task_mix.begin());
            TrainResult res = train_base(mcfg, tr_cfg);
            save_checkpoint(tr_out, res.params);
            if (!tr_metrics.empty()) write_file(tr_metrics, metrics_csv(res.evals));
            return {{"steps", tr_cfg.steps},
                    {"batch", tr_cfg.batch},
                    {"lr", tr_cfg.adam.lr},
                    {"warmup", tr_cfg.warmup},
                    {"seed", tr_cfg.seed},
                    {"eval_every", tr_cfg.eval_every},
                    {"eval_samples", tr_cfg.eval_samples},
                    {"mix", tr_cfg.task_mix},
                    {"model", config_to_json(mcfg)},
                    {"metrics", tr_metrics},
                    {"out", tr_out}};
        });
    });

    // probe-swap
    auto* ps = add_sub("probe-swap", "sweep cache swaps across layers and report change rates");
    std::string ps_ckpt, ps_task = "ocr", ps_layers = "all", ps_source = "pair", ps_out;
    int ps_samples = 200, ps_jobs = 1;
    uint64_t ps_seed = 0;
    ps->add_option("--ckpt", ps_ckpt, "model checkpoint")->required();
    ps->add_option("--task", ps_task, "task name");
    ps->add_option("--samples", ps_samples, "paired samples to render");
    ps->add_option("--layers", ps_layers, "comma list of layers, or all");
    ps->add_option("--swap-source", ps_source, "pair: the paired image's cache; null: zero rows")
        ->check(CLI::IsMember({"pair", "null"}));
    ps->add_option("--seed", ps_seed, "sample rendering seed");
    ps->add_option("--jobs", ps_jobs, "worker threads");
    ps->add_option("--out", ps_out, "report path (.json, .csv, or .svg)")->required();
    ps->callback([&] {
        detail::timed_run(ps_out, argvv, [&]() -> nlohmann::json {
            Params<float> p = load_checkpoint(ps_ckpt);
            Task task = detail::parse_task(ps_task);
            SwapSweepOptions opt;
            opt.layers = detail::expand_layer_list(ps_layers, p.cfg.n_layers - 1);
            opt.null_source = ps_source == "null";
            opt.jobs = ps_jobs;
            opt.seed = ps_seed;
            std::vector<PairedSample> samples =
                detail::render_samples(task, p.cfg, ps_samples, ps_seed, 0);
            detail::write_report(ps_out, change_rate_sweep(p, samples, opt));
            return {{"ckpt", ps_ckpt},          {"task", task_name(task)},
                    {"samples", ps_samples},    {"layers", opt.layers},
                    {"swap_source", ps_source}, {"seed", ps_seed},
                    {"jobs", ps_jobs},          {"out", ps_out}};
        });
    });

    // probe-drop
    auto* pd = add_sub("probe-drop", "sweep vision dropping across depths and report accuracy");
    std::string pd_ckpt, pd_task = "all", pd_at = "all", pd_out;
    int pd_samples = 200, pd_jobs = 1;
    uint64_t pd_seed = 0;
    pd->add_option("--ckpt", pd_ckpt, "model checkpoint")->required();
    pd->add_option("--task", pd_task, "comma list of task names, or all");
    pd->add_option("--samples", pd_samples, "samples per task");
    pd->add_option("--drop-at", pd_at, "comma list of drop depths, or all (0..L)");
    pd->add_option("--seed", pd_seed, "sample rendering seed");
    pd->add_option("--jobs", pd_jobs, "worker threads");
    pd->add_option("--out", pd_out, "report path (.json, .csv, or .svg)")->required();
    pd->callback([&] {
        detail::timed_run(pd_out, argvv, [&]() -> nlohmann::json {
            Params<float> p = load_checkpoint(pd_ckpt);
            std::vector<Task> tasks = detail::parse_task_list(pd_task);
            std::vector<int> ks = detail::expand_layer_list(pd_at, p.cfg.n_layers);
            std::vector<PairedSample> samples;
            for (size_t ti = 0; ti < tasks.size(); ++ti) {
                std::vector<PairedSample> part = detail::render_samples(
                    tasks[ti], p.cfg, pd_samples, pd_seed, uint64_t(ti) * uint64_t(pd_samples));
                samples.insert(samples.end(), part.begin(), part.end());
            }
            detail::write_report(pd_out, drop_sweep(p, samples, ks, pd_jobs, pd_seed));
            nlohmann::json names = nlohmann::json::array();
            for (Task t : tasks) names.push_back(task_name(t));
            return {{"ckpt", pd_ckpt}, {"task", names},  {"samples", pd_samples},
                    {"drop_at", ks},   {"seed", pd_seed}, {"jobs", pd_jobs},
                    {"out", pd_out}};
        });
    });

    // select
    auto* se = add_sub("select", "profile relevance ratios and draw a budgeted subset");
    std::string se_ckpt, se_data, se_ks = "all", se_out, se_profiles;
    int se_budget = 0, se_jobs = 1;
    uint64_t se_seed = 0;
    se->add_option("--ckpt", se_ckpt, "model checkpoint")->required();
    se->add_option("--data", se_data, "dataset jsonl from gen-data")->required();
    se->add_option("--budget", se_budget, "ids to select")->required();
    se->add_option("--ks", se_ks, "comma list of profile depths, or all (0..L)");
    se->add_option("--seed", se_seed, "sampling seed");
    se->add_option("--jobs", se_jobs, "worker threads");
    se->add_option("--profiles", se_profiles, "also write per-sample profiles jsonl here");
    se->add_option("--out", se_out, "selected id list path")->required();
    se->callback([&] {
        detail::timed_run(se_out, argvv, [&]() -> nlohmann::json {
            Params<float> p = load_checkpoint(se_ckpt);
            std::vector<DatasetItem> items = dataset_from_jsonl(p.cfg, read_file(se_data));
            ProfileOptions opt;
            if (se_ks != "all") opt.ks = detail::parse_int_list(se_ks);
            opt.jobs = se_jobs;
            std::vector<RelevanceProfile> profiles = profile_dataset(p, items, opt);
            if (!se_profiles.empty()) write_file(se_profiles, profiles_jsonl(profiles));
            Selection sel = partition_and_sample(profiles, se_budget, se_seed);
            write_file(se_out, selection_ids_txt(sel));
            write_file(se_out + ".selection.json", selection_manifest(sel).dump(2) + "\n");
            return {{"ckpt", se_ckpt},   {"data", se_data}, {"budget", se_budget},
                    {"ks", opt.ks},      {"seed", se_seed}, {"jobs", se_jobs},
                    {"profiles", se_profiles}, {"out", se_out}};
        });
    });

    // eval
    auto* ev = add_sub("eval", "greedy held-out accuracy per task");
    std::string ev_ckpt, ev_task = "all", ev_out;
    int ev_samples = 200;
    uint64_t ev_seed = 0;
    ev->add_option("--ckpt", ev_ckpt, "model checkpoint")->required();
    ev->add_option("--task", ev_task, "comma list of task names, or all");
    ev->add_option("--samples", ev_samples, "samples per task");
    ev->add_option("--seed", ev_seed, "eval sample seed");
    ev->add_option("--out", ev_out, "result json path")->required();
    ev->callback([&] {
        detail::timed_run(ev_out, argvv, [&]() -> nlohmann::json {
            Params<float> p = load_checkpoint(ev_ckpt);
            std::vector<Task> tasks = detail::parse_task_list(ev_task);
            nlohmann::json acc;
            for (Task t : tasks)
                acc[task_name(t)] = evaluate_accuracy(p, t, ev_samples, ev_seed);
            nlohmann::json result{{"kind", "eval"},
                                  {"samples", ev_samples},
                                  {"seed", ev_seed},
                                  {"config_hash", config_hash(p.cfg)},
                                  {"accuracy", acc}};
            write_file(ev_out, result.dump(2) + "\n");
            nlohmann::json names = nlohmann::json::array();
            for (Task t : tasks) names.push_back(task_name(t));
            return {{"ckpt", ev_ckpt}, {"task", names}, {"samples", ev_samples},
                    {"seed", ev_seed}, {"out", ev_out}};
        });
    });

    // finetune-lora
    auto* ft = add_sub("finetune-lora", "fit low-rank adapters on a layer mask");
    std::string ft_ckpt, ft_mask, ft_report, ft_targets = "q,v", ft_task = "counting";
    std::string ft_out, ft_merged;
    double ft_threshold = 5.0;
    LoraConfig ft_lora;
    FinetuneConfig ft_cfg;
    ft->add_option("--ckpt", ft_ckpt, "base model checkpoint")->required();
    auto* mask_opt = ft->add_option("--mask", ft_mask, "comma list of layers to adapt");
    auto* report_opt =
        ft->add_option("--mask-from-report", ft_report, "derive the mask from a change-rate report");
    mask_opt->excludes(report_opt);
    ft->add_option("--threshold", ft_threshold, "change-rate percent above which a layer is masked");
    ft->add_option("--rank", ft_lora.rank, "adapter rank");
    ft->add_option("--alpha", ft_lora.alpha, "adapter scale numerator");
    ft->add_option("--targets", ft_targets, "comma list from q,k,v,o");
    ft->add_option("--steps", ft_cfg.steps, "optimizer steps");
    ft->add_option("--batch", ft_cfg.batch, "sequences per step");
    ft->add_option("--lr", ft_cfg.adam.lr, "peak learning rate");
    ft->add_option("--warmup", ft_cfg.warmup, "linear warmup steps");
    ft->add_option("--seed", ft_cfg.seed, "master seed");
    ft->add_option("--task", ft_task, "task to fine-tune on");
    ft->add_option("--merged", ft_merged, "also save the merged full checkpoint here");
    ft->add_option("--out", ft_out, "adapter checkpoint path")->required();
    ft->callback([&] {
        detail::timed_run(ft_out, argvv, [&]() -> nlohmann::json {
            Params<float> p = load_checkpoint(ft_ckpt);
            if (ft_mask.empty() == ft_report.empty())
                throw ContractError("exactly one of --mask and --mask-from-report is required");
            ft_lora.layer_mask = ft_mask.empty()
                                     ? detail::mask_from_report_file(ft_report, ft_threshold)
                                     : detail::parse_int_list(ft_mask);
            detail::apply_targets(ft_lora, ft_targets);
            ft_cfg.task = detail::parse_task(ft_task);
            LoraAdapter<float> ad = finetune_lora(p, ft_lora, ft_cfg);
            save_adapter(ft_out, p.cfg, ad);
            if (!ft_merged.empty()) save_checkpoint(ft_merged, merge_lora(p, ad));
            return {{"ckpt", ft_ckpt},
                    {"mask", ft_lora.layer_mask},
                    {"threshold", ft_threshold},
                    {"rank", ft_lora.rank},
                    {"alpha", ft_lora.alpha},
                    {"targets", ft_targets},
                    {"steps", ft_cfg.steps},
                    {"batch", ft_cfg.batch},
                    {"lr", ft_cfg.adam.lr},
                    {"warmup", ft_cfg.warmup},
                    {"seed", ft_cfg.seed},
                    {"task", task_name(ft_cfg.task)},
                    {"merged", ft_merged},
                    {"out", ft_out}};
        });
    });

    try {
        std::vector<std::string> args =
            detail::apply_config_file({argvv.begin() + 1, argvv.end()});
        std::vector<const char*> cargv;
        cargv.push_back(argvv[0].c_str());
        for (const std::string& a : args) cargv.push_back(a.c_str());
        app.parse(int(cargv.size()), cargv.data());
        return 0;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help() << std::flush;
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

inline int run(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.push_back("vfl");
    for (const std::string& a : args) argv.push_back(a.c_str());
    return run(int(argv.size()), argv.data());
}

}  // namespace vfl::cli
