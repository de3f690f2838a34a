#include "mtladapt/latency.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "mtladapt/rng.hpp"

namespace mtladapt {

const char* const kLatencyCsvHeader = "kind,batch,median_us,p10_us,p90_us,reps,d,blocks";

namespace {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

double percentile(std::vector<double> sorted, double p) {
    const std::size_t idx = static_cast<std::size_t>(
        std::llround(p / 100.0 * static_cast<double>(sorted.size() - 1)));
    return sorted[idx];
}

Tensor random_input(std::size_t batch, std::size_t seq, std::size_t d, std::mt19937_64& rng) {
    Tensor x = Tensor::zeros({batch, seq, d});
    for (auto& v : x.values()) v = gaussian_double(rng);
    return x;
}

std::vector<std::size_t> mixed_tasks(std::size_t batch, std::size_t num_tasks, std::mt19937_64& rng) {
    std::vector<std::size_t> ids(batch);
    for (auto& t : ids) t = uniform_index(rng, num_tasks);
    return ids;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) {
        worst = std::max(worst, std::abs(av[i] - bv[i]));
    }
    return worst;
}

}  // namespace

std::string latency_csv_row(const LatencyRecord& r) {
    return r.kind + "," + std::to_string(r.batch) + "," + format_double(r.median_us) + "," +
           format_double(r.p10_us) + "," + format_double(r.p90_us) + "," + std::to_string(r.reps) +
           "," + std::to_string(r.d) + "," + std::to_string(r.blocks);
}

BenchConfig default_bench_config() {
    BenchConfig cfg;
    cfg.model.d_model = 256;
    cfg.model.d_ff = 256;
    cfg.model.blocks = 4;
    cfg.model.seq_len = 4;
    cfg.model.num_tasks = 4;
    cfg.model.input_packing = InputPacking::Reshape;
    cfg.model.input_dim = cfg.model.seq_len * cfg.model.d_model;
    cfg.model.causal_attention = true;

    cfg.lora.kind = AdapterKind::LoRA;
    cfg.lora.rank = 8;
    cfg.lora.alpha = 16;

    cfg.mtl.kind = AdapterKind::MTL_LoRA;
    cfg.mtl.rank = 8;
    cfg.mtl.alpha = 16;
    cfg.mtl.n_up = 3;
    cfg.mtl.temperature = 0.8;

    cfg.moe.kind = AdapterKind::MoELoRA;
    cfg.moe.rank = 16;
    cfg.moe.alpha = 32;
    cfg.moe.num_experts = 8;
    cfg.moe.task_embed_dim = 64;
    return cfg;
}

void BenchConfig::validate() const {
    if (reps < 30) {
        throw std::invalid_argument("bench config: reps must be >= 30, got " + std::to_string(reps));
    }
    if (batch_sizes.empty() || kinds.empty()) {
        throw std::invalid_argument("bench config: kinds and batch_sizes must be nonempty");
    }
    for (const auto& kind : kinds) {
        if (kind != "base" && kind != "lora_merged" && kind != "mtl_lora" && kind != "moe_lora") {
            throw std::invalid_argument("bench config: unknown kind '" + kind + "'");
        }
    }
    model.validate();
}

std::vector<LatencyRecord> bench_forward(const BenchConfig& config) {
    config.validate();
    const ModelConfig& mc = config.model;

    Model base(mc, std::nullopt, config.seed);
    Model lora_model(mc, config.lora, config.seed);
    Model mtl_model(mc, config.mtl, config.seed);
    Model moe_model(mc, config.moe, config.seed);

    std::mt19937_64 rng(config.seed ^ 0xbadc0ffeULL);
    // gate 1: freshly constructed adapters leave every variant equal to base
    {
        NoGradGuard no_grad;
        Tensor x = random_input(4, mc.seq_len, mc.d_model, rng);
        auto ids = mixed_tasks(4, mc.num_tasks, rng);
        const Tensor ref = base.forward(x, ids);
        for (Model* m : {&lora_model, &mtl_model, &moe_model}) {
            if (max_abs_diff(m->forward(x, ids), ref) > config.correctness_tol) {
                throw std::runtime_error("latency gate: fresh adapter output differs from base");
            }
        }
    }

    lora_model.randomize_adapters(config.seed + 1);
    mtl_model.randomize_adapters(config.seed + 2);
    moe_model.randomize_adapters(config.seed + 3);
    Model merged = lora_model.merged_clone();

    // gate 2: each timed path matches its reference path on random weights
    {
        NoGradGuard no_grad;
        Tensor x = random_input(6, mc.seq_len, mc.d_model, rng);
        auto ids = mixed_tasks(6, mc.num_tasks, rng);
        if (max_abs_diff(merged.forward(x, ids), lora_model.forward(x, ids)) > config.correctness_tol) {
            throw std::runtime_error("latency gate: merged LoRA differs from unmerged forward");
        }
        for (Model* m : {&mtl_model, &moe_model}) {
            const Tensor fast = m->forward(x, ids);
            m->set_reference_path(true);
            const Tensor slow = m->forward(x, ids);
            m->set_reference_path(false);
            if (max_abs_diff(fast, slow) > config.correctness_tol) {
                throw std::runtime_error("latency gate: grouped path differs from per-sample loop");
            }
        }
    }

    auto pick = [&](const std::string& kind) -> Model& {
        if (kind == "base") return base;
        if (kind == "lora_merged") return merged;
        if (kind == "mtl_lora") return mtl_model;
        return moe_model;
    };

    std::vector<LatencyRecord> records;
    for (const std::string& kind : config.kinds) {
        Model& model = pick(kind);
        for (std::size_t batch : config.batch_sizes) {
            std::mt19937_64 input_rng(config.seed ^ (batch * 1315423911ULL));
            Tensor x = random_input(batch, mc.seq_len, mc.d_model, input_rng);
            auto ids = mixed_tasks(batch, mc.num_tasks, input_rng);
            NoGradGuard no_grad;
            for (std::size_t w = 0; w < config.warmup; ++w) {
                model.forward(x, ids);
            }
            std::vector<double> times_us;
            times_us.reserve(config.reps);
            for (std::size_t rep = 0; rep < config.reps; ++rep) {
                const auto t0 = std::chrono::steady_clock::now();
                model.forward(x, ids);
                const auto t1 = std::chrono::steady_clock::now();
                times_us.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
            }
            std::sort(times_us.begin(), times_us.end());
            LatencyRecord rec;
            rec.kind = kind;
            rec.batch = batch;
            rec.median_us = percentile(times_us, 50.0);
            rec.p10_us = percentile(times_us, 10.0);
            rec.p90_us = percentile(times_us, 90.0);
            rec.reps = config.reps;
            rec.d = mc.d_model;
            rec.blocks = mc.blocks;
            records.push_back(std::move(rec));
        }
    }
    return records;
}

}  // namespace mtladapt
