#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mtladapt/adapters.hpp"
#include "mtladapt/data.hpp"
#include "mtladapt/model.hpp"

namespace mtladapt {

enum class Scheduler { LinearDecay };

struct AblationConfig {
    bool freeze_lambda_identity = false;
    bool uniform_weights = false;
    std::optional<double> tau_override;
};

struct TrainConfig {
    double learning_rate = 3e-4;
    std::size_t epochs = 3;
    std::size_t batch_size = 8;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double warmup_ratio = 0.03;
    Scheduler scheduler = Scheduler::LinearDecay;
    std::uint64_t seed = 0;
    AblationConfig ablation;
    std::optional<AdapterConfig> adapter;
    ModelConfig model;

    void validate() const;
    // adapter config with ablation switches folded in
    std::optional<AdapterConfig> effective_adapter() const;
};

struct OptimizerState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::size_t step = 0;
};

// Adam with decoupled weight decay over a fixed parameter list.
class AdamWOptimizer {
public:
    AdamWOptimizer(std::vector<NamedParam> params, double beta1, double beta2,
                   double weight_decay, double eps = 1e-8);

    void step(double lr);
    void zero_grad();

    const std::vector<NamedParam>& params() const { return params_; }
    const OptimizerState& state() const { return state_; }

private:
    std::vector<NamedParam> params_;
    OptimizerState state_;
    double beta1_, beta2_, weight_decay_, eps_;
};

// linear warmup to base_lr over warmup_ratio*total_steps, then linear decay to 0
double lr_schedule(std::size_t step, std::size_t total_steps, double warmup_ratio, double base_lr);

struct MetricsRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    std::size_t task = 0;
    std::string split = "train";
    double loss = 0.0;
    double accuracy = 0.0;
    double lr = 0.0;
};

extern const char* const kMetricsCsvHeader;  // step,epoch,task,split,loss,accuracy,lr
std::string metrics_csv_row(const MetricsRecord& r);

struct TaskEval {
    double loss = 0.0;
    double accuracy = 0.0;
    std::size_t count = 0;
};

// full-dataset per-task loss/accuracy under no-grad
std::vector<TaskEval> evaluate(const Model& model, const MultiTaskDataset& data,
                               std::size_t batch_size = 256);

struct TrainResult {
    Model model;
    std::vector<MetricsRecord> metrics;
    std::size_t steps = 0;
};

// Joint multi-task training: uniformly shuffled sample-level batches, loss via
// per-task heads, AdamW over adapter + head parameters only. Deterministic for
// a fixed (config, dataset, seed).
TrainResult train(const TrainConfig& config, const MultiTaskDataset& train_set,
                  const MultiTaskDataset* eval_set = nullptr);

struct GradientAuditEntry {
    std::string name;
    double max_rel_err = 0.0;
};

struct GradientAuditReport {
    std::vector<GradientAuditEntry> entries;
    double max_rel_err = 0.0;
    double frozen_grad_max_abs = 0.0;  // must stay 0 in adapter-training mode
};

// Compares every trainable parameter's backward gradient against central
// finite differences of the batch loss.
GradientAuditReport gradient_audit(Model& model, const Tensor& x3,
                                   const std::vector<std::size_t>& task_ids,
                                   const std::vector<std::size_t>& labels, double eps = 1e-5);

}  // namespace mtladapt
