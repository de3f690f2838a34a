#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtladapt/adapters.hpp"
#include "mtladapt/model.hpp"

namespace mtladapt {

struct LatencyRecord {
    std::string kind;
    std::size_t batch = 0;
    double median_us = 0.0;
    double p10_us = 0.0;
    double p90_us = 0.0;
    std::size_t reps = 0;
    std::size_t d = 0;
    std::size_t blocks = 0;
};

extern const char* const kLatencyCsvHeader;  // kind,batch,median_us,p10_us,p90_us,reps,d,blocks
std::string latency_csv_row(const LatencyRecord& r);

struct BenchConfig {
    ModelConfig model;  // reference toy model set in default_bench_config()
    std::vector<std::string> kinds = {"base", "lora_merged", "mtl_lora", "moe_lora"};
    std::vector<std::size_t> batch_sizes = {1, 8, 32};
    std::size_t reps = 100;
    std::size_t warmup = 10;
    std::uint64_t seed = 0;
    double correctness_tol = 1e-10;
    AdapterConfig lora;  // merged for timing
    AdapterConfig mtl;
    AdapterConfig moe;

    void validate() const;
};

BenchConfig default_bench_config();

// Wall-clock single-threaded forward timing per (kind, batch size), after a
// correctness gate: fresh adapters must match the base model output, and each
// task-conditioned fast path must match its per-sample reference loop.
std::vector<LatencyRecord> bench_forward(const BenchConfig& config);

}  // namespace mtladapt
