#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mtladapt/adapters.hpp"
#include "mtladapt/tensor.hpp"

namespace mtladapt {

enum class Activation { Gelu, Relu };
enum class InputPacking { Reshape, SignedPositions };

// Matrices an adapter can attach to. Q/K/V/O are the attention projections,
// FfnDown/FfnUp the feed-forward pair (enabled together via "ffn").
enum class MatrixSlot { Q, K, V, O, FfnDown, FfnUp };

const char* matrix_slot_name(MatrixSlot slot);
std::optional<MatrixSlot> matrix_slot_from_name(const std::string& name);

struct ModelConfig {
    std::size_t d_model = 32;
    std::size_t d_ff = 64;
    std::size_t blocks = 2;
    std::size_t seq_len = 1;
    std::size_t num_tasks = 1;
    std::vector<std::size_t> classes_per_task;  // defaults to 2 per task when empty
    std::vector<MatrixSlot> injection = {MatrixSlot::Q, MatrixSlot::K, MatrixSlot::V, MatrixSlot::O};
    Activation activation = Activation::Gelu;
    bool causal_attention = false;  // decoder-style mask
    bool final_layer_norm = true;
    InputPacking input_packing = InputPacking::Reshape;
    std::size_t input_dim = 0;  // raw feature width; 0 -> seq_len * d_model
    double base_init_std = 0.02;

    std::size_t effective_input_dim() const;
    std::size_t classes(std::size_t task) const;
    void validate() const;
};

using AdapterSlotLayer =
    std::variant<std::monostate, LoRALayer, MTLLoRALayer, MultiLoRALayer, MoELoRALayer>;

struct BlockWeights {
    Tensor w_q, w_k, w_v, w_o;  // [d, d] frozen
    Tensor w_down;              // [d, f] frozen
    Tensor w_up;                // [f, d] frozen
    AdapterSlotLayer adapter_q, adapter_k, adapter_v, adapter_o, adapter_down, adapter_up;

    AdapterSlotLayer& slot(MatrixSlot which);
    const AdapterSlotLayer& slot(MatrixSlot which) const;
};

struct TaskHead {
    Tensor weight;  // [d, C_t]
    Tensor bias;    // [C_t]
    std::size_t task = 0;
};

// Which adapter branch to capture during a forward pass (feature extraction).
struct BranchCapture {
    std::size_t block = 0;
    MatrixSlot matrix = MatrixSlot::O;
    bool include_base = false;
    Tensor captured;  // [rows, d] after the pass
};

// Toy decoder stack: pre-norm blocks of single-head attention + FFN with
// residuals, frozen base weights, optional adapter on each projection, and
// per-task classification heads over mean-pooled sequence output.
class Model {
public:
    Model(ModelConfig config, std::optional<AdapterConfig> adapter, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    const std::optional<AdapterConfig>& adapter_config() const { return adapter_config_; }
    std::vector<BlockWeights>& blocks() { return blocks_; }
    const std::vector<BlockWeights>& blocks() const { return blocks_; }
    std::vector<TaskHead>& heads() { return heads_; }

    // [B, S, d] -> [B, S, d]
    Tensor forward(const Tensor& x3, const std::vector<std::size_t>& task_ids,
                   BranchCapture* capture = nullptr) const;
    // mean pool over positions -> [B, d]
    Tensor pooled_forward(const Tensor& x3, const std::vector<std::size_t>& task_ids,
                          BranchCapture* capture = nullptr) const;
    // logits for a batch; requires every task head to have the same class count
    Tensor classify(const Tensor& pooled, const std::vector<std::size_t>& task_ids) const;
    // mean cross-entropy over a mixed-task batch via per-task heads
    Tensor classification_loss(const Tensor& pooled, const std::vector<std::size_t>& task_ids,
                               const std::vector<std::size_t>& labels) const;
    // argmax-correct counts per task: {correct, total} pairs
    std::vector<std::pair<std::size_t, std::size_t>> accuracy_by_task(
        const Tensor& pooled, const std::vector<std::size_t>& task_ids,
        const std::vector<std::size_t>& labels) const;

    // raw feature vectors [B, input_dim] -> packed [B, S, d]
    Tensor pack_inputs(const Tensor& vectors) const;

    Tensor attention_forward(const Tensor& x3, const BlockWeights& block,
                             const std::vector<std::size_t>& task_ids,
                             BranchCapture* capture = nullptr) const;
    Tensor ffn_forward(const Tensor& x3, const BlockWeights& block,
                       const std::vector<std::size_t>& task_ids,
                       BranchCapture* capture = nullptr) const;
    Tensor block_forward(const Tensor& x3, const BlockWeights& block,
                         const std::vector<std::size_t>& task_ids,
                         BranchCapture* capture = nullptr) const;

    // adapter + head parameters, deterministic (block, matrix, name) order,
    // shared tensors (MoE task embeddings) listed once
    std::vector<NamedParam> trainable_parameters() const;
    std::vector<NamedParam> frozen_parameters() const;

    // per-sample-loop adapter branches instead of the task-grouped path
    // (reference implementation for correctness gates)
    void set_reference_path(bool v) { reference_path_ = v; }
    bool reference_path() const { return reference_path_; }

    // randomize adapter parameters (benchmarks need non-degenerate weights)
    void randomize_adapters(std::uint64_t seed, double stddev = 0.05);

    // copy with LoRA / MultiLoRA weights folded into the frozen matrices and
    // the adapters removed; throws for task-conditioned adapters
    Model merged_clone() const;

    Tensor moe_shared_embeddings() const { return moe_embeddings_; }

private:
    Tensor project(const Tensor& x2, const Tensor& W, bool transposed_use,
                   const AdapterSlotLayer& slot, const std::vector<std::size_t>& row_tasks,
                   std::size_t block_index, MatrixSlot which, BranchCapture* capture) const;

    ModelConfig config_;
    std::optional<AdapterConfig> adapter_config_;
    std::vector<BlockWeights> blocks_;
    std::vector<TaskHead> heads_;
    Tensor sign_pack_;       // [S, d] +-1 pattern for SignedPositions packing
    Tensor moe_embeddings_;  // shared across layers when MoELoRA is attached
    bool reference_path_ = false;
};

}  // namespace mtladapt
