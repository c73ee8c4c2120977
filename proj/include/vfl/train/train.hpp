#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "vfl/metrics.hpp"
#include "vfl/model/graph.hpp"
#include "vfl/model/infer.hpp"
#include "vfl/numkit/adam.hpp"
#include "vfl/rng.hpp"
#include "vfl/taskgen/pairs.hpp"
#include "vfl/train/lora.hpp"

namespace vfl {

// Seed-stream tags keep initialization, per-step batches, and held-out
// evaluation data disjoint under one master seed.
inline constexpr uint64_t kSeedInit = uint64_t(1) << 40;
inline constexpr uint64_t kSeedEval = uint64_t(1) << 41;

struct TrainConfig {
    int steps = 5000;
    int batch = 32;
    AdamHyper adam;  // lr 3e-4
    int warmup = 200;
    uint64_t seed = 42;
    std::array<double, 4> task_mix{0.25, 0.25, 0.25, 0.25};
    int eval_every = 500;
    int eval_samples = 50;  // held-out samples per task at each eval

    void validate() const {
        if (steps < 1) throw ContractError("steps must be at least 1");
        if (batch < 1) throw ContractError("batch must be at least 1");
        if (warmup < 0) throw ContractError("warmup must be non-negative");
        if (eval_every < 1) throw ContractError("eval_every must be at least 1");
        if (eval_samples < 0) throw ContractError("eval_samples must be non-negative");
        double sum = 0.0;
        for (double w : task_mix) {
            if (w < 0) throw ContractError("task mix weights must be non-negative");
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-9) throw ContractError("task mix weights must sum to 1");
    }
};

struct EvalPoint {
    int step = 0;
    double loss = 0.0;                       // mean over the window ending here
    std::array<double, 4> accuracy{};        // percent, indexed like kAllTasks
};

struct TrainResult {
    Params<float> params;
    std::vector<EvalPoint> evals;
};

namespace detail {

inline Task pick_task(const std::array<double, 4>& mix, Rng& rng) {
    double u = rng.next_double(), acc = 0.0;
    for (int t = 0; t < 4; ++t) {
        acc += mix[size_t(t)];
        if (u < acc) return kAllTasks[t];
    }
    return kAllTasks[3];
}

// One training batch: fresh pairs, a coin per pair choosing which side the
// model learns to describe.
inline std::vector<MultimodalSequence> make_batch(const ModelConfig& cfg,
                                                  const std::array<double, 4>& mix, int batch,
                                                  Rng& rng) {
    std::vector<MultimodalSequence> out;
    out.reserve(size_t(batch));
    for (int i = 0; i < batch; ++i) {
        Task t = pick_task(mix, rng);
        PairedSample s = render_pair(t, cfg, rng.next_u64());
        bool use_source = rng.next_bool();
        const Image& im = use_source ? s.source : s.target;
        const std::string& truth = use_source ? s.source_truth : s.target_truth;
        out.push_back(sample_sequence(cfg, im, s.prompt, truth));
    }
    return out;
}

}  // namespace detail

// Held-out greedy-decoding accuracy (percent) on freshly generated samples.
inline double evaluate_accuracy(const Params<float>& p, Task task, int n, uint64_t master_seed) {
    if (n < 1) throw ContractError("evaluation needs at least one sample");
    uint64_t base = derive_seed(master_seed, kSeedEval + uint64_t(int(task)));
    int correct = 0;
    for (int i = 0; i < n; ++i) {
        PairedSample s = render_pair(task, p.cfg, derive_seed(base, uint64_t(i)));
        MultimodalSequence prompt = sample_sequence(p.cfg, s.target, s.prompt, "");
        std::vector<int> toks = generate(p, prompt, answer_budget(task, p.cfg), kEosId);
        correct += answer_correct(task, decode(toks), s.target_truth);
    }
    return 100.0 * double(correct) / double(n);
}

inline std::array<double, 4> evaluate_all_tasks(const Params<float>& p, int n,
                                                uint64_t master_seed) {
    std::array<double, 4> acc{};
    for (int t = 0; t < 4; ++t) acc[size_t(t)] = evaluate_accuracy(p, kAllTasks[t], n, master_seed);
    return acc;
}

inline TrainResult train_base(const ModelConfig& mcfg, const TrainConfig& tcfg) {
    mcfg.validate();
    tcfg.validate();
    TrainResult res{init_params<float>(mcfg, derive_seed(tcfg.seed, kSeedInit)), {}};

    std::vector<Tensor32*> tensors;
    res.params.for_each([&](const std::string&, Tensor32& t) { tensors.push_back(&t); });
    AdamState<float> opt;
    opt.init(tensors);

    double window_loss = 0.0;
    int window_n = 0;
    for (int step = 0; step < tcfg.steps; ++step) {
        Rng rng(derive_seed(tcfg.seed, uint64_t(step)));
        std::vector<MultimodalSequence> batch =
            detail::make_batch(mcfg, tcfg.task_mix, tcfg.batch, rng);

        Tape<float> tape;
        GraphParamIds<float> ids = register_params(tape, res.params, true);
        int loss = batch_loss(tape, ids, mcfg, batch);
        double loss_val = double(tape.val(loss).data[0]);
        if (!std::isfinite(loss_val))
            throw DivergenceError("loss is not finite at step " + std::to_string(step));
        tape.backward(loss);

        std::vector<int> id_list = ids.ordered();
        std::vector<const Tensor32*> grads;
        grads.reserve(id_list.size());
        for (int id : id_list) grads.push_back(&tape.grad(id));

        AdamHyper h = tcfg.adam;
        if (tcfg.warmup > 0)
            h.lr *= std::min(1.0, double(step + 1) / double(tcfg.warmup));
        adam_step(tensors, grads, opt, h);

        window_loss += loss_val;
        ++window_n;
        bool at_eval = (step + 1) % tcfg.eval_every == 0 || step + 1 == tcfg.steps;
        if (at_eval) {
            EvalPoint pt;
            pt.step = step + 1;
            pt.loss = window_loss / double(window_n);
            if (tcfg.eval_samples > 0)
                pt.accuracy = evaluate_all_tasks(res.params, tcfg.eval_samples, tcfg.seed);
            res.evals.push_back(pt);
            window_loss = 0.0;
            window_n = 0;
        }
    }
    return res;
}

inline std::string metrics_csv(const std::vector<EvalPoint>& evals) {
    std::string out = "step,loss,ocr,grounding,counting,recognition\n";
    for (const EvalPoint& e : evals) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%d,%.6f,%.2f,%.2f,%.2f,%.2f\n", e.step, e.loss,
                      e.accuracy[0], e.accuracy[1], e.accuracy[2], e.accuracy[3]);
        out += buf;
    }
    return out;
}

struct FinetuneConfig {
    int steps = 300;
    int batch = 16;
    AdamHyper adam{1e-3, 0.9, 0.999, 1e-8};
    int warmup = 0;
    uint64_t seed = 7;
    Task task = Task::Counting;

    void validate() const {
        if (steps < 1) throw ContractError("steps must be at least 1");
        if (batch < 1) throw ContractError("batch must be at least 1");
        if (warmup < 0) throw ContractError("warmup must be non-negative");
    }
};

// Gradient flow is restricted by construction: base weights enter the tape
// as no-grad leaves, only the adapter factors are registered trainable.
inline LoraAdapter<float> finetune_lora(const Params<float>& base, const LoraConfig& lcfg,
                                        const FinetuneConfig& fcfg) {
    base.cfg.validate();
    lcfg.validate(base.cfg);
    fcfg.validate();
    LoraAdapter<float> ad = init_lora<float>(base.cfg, lcfg, derive_seed(fcfg.seed, kSeedInit));

    std::vector<Tensor32*> tensors;
    for (int l : lcfg.layer_mask) {
        auto push = [&](LoraPair<float>& p) {
            if (!p.present()) return;
            tensors.push_back(&p.a);
            tensors.push_back(&p.b);
        };
        push(ad.q[size_t(l)]);
        push(ad.k[size_t(l)]);
        push(ad.v[size_t(l)]);
        push(ad.o[size_t(l)]);
    }
    if (tensors.empty()) return ad;  // empty mask: nothing to train
    AdamState<float> opt;
    opt.init(tensors);

    std::array<double, 4> mix{};
    mix[size_t(int(fcfg.task))] = 1.0;

    for (int step = 0; step < fcfg.steps; ++step) {
        Rng rng(derive_seed(fcfg.seed, uint64_t(step)));
        std::vector<MultimodalSequence> batch =
            detail::make_batch(base.cfg, mix, fcfg.batch, rng);

        Tape<float> tape;
        GraphParamIds<float> ids = register_params(tape, base, false);
        LowRankGraph lg;
        lg.scale = lcfg.scale();
        lg.layers.resize(size_t(base.cfg.n_layers));
        std::vector<int> grad_ids;
        for (int l : lcfg.layer_mask) {
            LowRankIds& lr = lg.layers[size_t(l)];
            auto reg = [&](LoraPair<float>& p, int& a_id, int& b_id) {
                if (!p.present()) return;
                a_id = tape.leaf(p.a, true);
                b_id = tape.leaf(p.b, true);
                grad_ids.push_back(a_id);
                grad_ids.push_back(b_id);
            };
            reg(ad.q[size_t(l)], lr.aq, lr.bq);
            reg(ad.k[size_t(l)], lr.ak, lr.bk);
            reg(ad.v[size_t(l)], lr.av, lr.bv);
            reg(ad.o[size_t(l)], lr.ao, lr.bo);
        }

        int loss = batch_loss(tape, ids, base.cfg, batch, lg);
        double loss_val = double(tape.val(loss).data[0]);
        if (!std::isfinite(loss_val))
            throw DivergenceError("loss is not finite at fine-tune step " + std::to_string(step));
        tape.backward(loss);

        std::vector<const Tensor32*> grads;
        grads.reserve(grad_ids.size());
        for (int id : grad_ids) grads.push_back(&tape.grad(id));

        AdamHyper h = fcfg.adam;
        if (fcfg.warmup > 0) h.lr *= std::min(1.0, double(step + 1) / double(fcfg.warmup));
        adam_step(tensors, grads, opt, h);
    }
    return ad;
}

}  // namespace vfl
