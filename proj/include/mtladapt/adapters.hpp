#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mtladapt/tensor.hpp"

namespace mtladapt {

enum class AdapterKind { LoRA, MTL_LoRA, MultiLoRA, MoELoRA };

const char* adapter_kind_name(AdapterKind kind);
std::optional<AdapterKind> adapter_kind_from_name(const std::string& name);

// Description of one adapter family. `validate(d, k)` checks it against the
// dimensions of the matrix it will be attached to.
struct AdapterConfig {
    AdapterKind kind = AdapterKind::LoRA;
    std::size_t rank = 8;
    double alpha = 16.0;
    std::size_t n_up = 3;             // MTL-LoRA: number of up-projections
    double temperature = 0.8;         // MTL-LoRA routing softmax
    std::size_t num_tasks = 1;
    std::size_t num_experts = 8;      // MoELoRA
    std::size_t task_embed_dim = 64;  // MoELoRA
    std::size_t num_lora_modules = 3; // MultiLoRA
    bool freeze_lambda_identity = false;
    bool uniform_weights = false;

    double scale() const { return alpha / static_cast<double>(rank); }
    void validate() const;
    void validate(std::size_t d, std::size_t k) const;
};

struct NamedParam {
    std::string name;
    Tensor tensor;
};

// --- layer types -------------------------------------------------------------

// h = x·Wᵀ + (α/r)·x·Aᵀ·Bᵀ
struct LoRALayer {
    Tensor A;  // [r, k], Kaiming-uniform
    Tensor B;  // [d, r], zero
    double scale = 1.0;

    static LoRALayer init(std::size_t d, std::size_t k, const AdapterConfig& cfg, std::mt19937_64& rng);
    std::vector<NamedParam> parameters() const;
};

// h_t = x·Wᵀ + (α/r)·Σ_i softmax(w_t/τ)_i · x·Aᵀ·Λ_tᵀ·(B^i)ᵀ
struct MTLLoRALayer {
    Tensor A;                    // [r, k]
    std::vector<Tensor> B;       // n × [d, r], zero
    std::vector<Tensor> Lambda;  // T × [r, r], identity
    Tensor w_table;              // [T, n], zero
    double tau = 1.0;
    double scale = 1.0;
    bool freeze_lambda = false;
    bool uniform_weights = false;

    static MTLLoRALayer init(std::size_t d, std::size_t k, const AdapterConfig& cfg, std::mt19937_64& rng);
    std::vector<NamedParam> parameters() const;
    std::size_t num_tasks() const { return Lambda.size(); }
    std::size_t n_up() const { return B.size(); }
};

// h = x·Wᵀ + Σ_m mix_m·(α/r)·x·A_mᵀ·B_mᵀ
struct MultiLoRALayer {
    std::vector<LoRALayer> modules;
    Tensor mix;  // [M], ones

    static MultiLoRALayer init(std::size_t d, std::size_t k, const AdapterConfig& cfg, std::mt19937_64& rng);
    std::vector<NamedParam> parameters() const;
};

// h_t = x·Wᵀ + (α/r)·Σ_e softmax(emb_t·gate)_e · x·A_eᵀ·B_eᵀ, per-expert rank r/E
struct MoELoRALayer {
    std::vector<Tensor> expert_A;  // E × [r/E, k]
    std::vector<Tensor> expert_B;  // E × [d, r/E], zero
    Tensor task_embeddings;        // [T, ted]; may be shared across layers
    Tensor gate;                   // [ted, E], zero -> uniform gate
    double scale = 1.0;

    // `shared_embeddings`: pass the model-wide table; if undefined a fresh one is created.
    static MoELoRALayer init(std::size_t d, std::size_t k, const AdapterConfig& cfg, std::mt19937_64& rng,
                             Tensor shared_embeddings = Tensor());
    std::vector<NamedParam> parameters() const;
    std::size_t num_experts() const { return expert_A.size(); }
};

// --- forward paths -----------------------------------------------------------

// branch-only outputs (the ΔW·x term, before adding the frozen path)
Tensor lora_branch(const Tensor& x, const LoRALayer& layer);
Tensor mtl_lora_branch(const Tensor& x, const std::vector<std::size_t>& task_ids, const MTLLoRALayer& layer);
Tensor multi_lora_branch(const Tensor& x, const MultiLoRALayer& layer);
Tensor moe_lora_branch(const Tensor& x, const std::vector<std::size_t>& task_ids, const MoELoRALayer& layer);

// reference per-sample-loop paths (oracles for the grouped implementations)
Tensor mtl_lora_branch_loop(const Tensor& x, const std::vector<std::size_t>& task_ids, const MTLLoRALayer& layer);
Tensor moe_lora_branch_loop(const Tensor& x, const std::vector<std::size_t>& task_ids, const MoELoRALayer& layer);

// full adapted forwards: x [batch, k], W [d, k] frozen, result [batch, d]
Tensor lora_forward(const Tensor& x, const Tensor& W, const LoRALayer& layer);
Tensor mtl_lora_forward(const Tensor& x, const std::vector<std::size_t>& task_ids, const Tensor& W,
                        const MTLLoRALayer& layer);
Tensor multi_lora_forward(const Tensor& x, const Tensor& W, const MultiLoRALayer& layer);
Tensor moe_lora_forward(const Tensor& x, const std::vector<std::size_t>& task_ids, const Tensor& W,
                        const MoELoRALayer& layer);

// merge / unmerge: W' = W ± (α/r)·B·A (detached result)
Tensor lora_merge(const Tensor& W, const LoRALayer& layer);
Tensor lora_unmerge(const Tensor& W, const LoRALayer& layer);
Tensor multi_lora_merge(const Tensor& W, const MultiLoRALayer& layer);

// routing weights for one task (probability simplex)
Tensor mtl_routing_weights(const MTLLoRALayer& layer, std::size_t task);
Tensor moe_gate_weights(const MoELoRALayer& layer, std::size_t task);

// --- parameter accounting ------------------------------------------------------

struct CountDims {
    std::size_t d = 0;
    std::size_t k = 0;
    std::size_t matrices_per_block = 4;  // Q, K, V, O
    std::size_t blocks = 1;
    double base_param_count = 0.0;
    std::size_t heads_params = 0;
};

struct TrainableCount {
    std::size_t count = 0;
    double percent = 0.0;
};

// Analytic trainable-parameter count for `matrices_per_block × blocks` adapted
// matrices plus any global parameters (MoELoRA task embeddings, head params).
TrainableCount count_trainable(const AdapterConfig& cfg, const CountDims& dims);

}  // namespace mtladapt
