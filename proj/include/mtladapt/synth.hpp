#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtladapt/data.hpp"
#include "mtladapt/model.hpp"

namespace mtladapt {

// Synthetic multi-task family: inputs from a shared standard Gaussian, labels
// from argmax of a per-task blend of a shared map S and task maps M_t.
struct SyntheticTaskFamily {
    std::size_t num_tasks = 2;
    std::size_t dim = 32;
    std::size_t classes = 2;
    double conflict = 1.0;
    std::uint64_t seed = 0;
    Tensor shared_map;              // [classes, dim]
    std::vector<Tensor> task_maps;  // T x [classes, dim]

    // effective labeling map for one task: (1-conflict)*S + conflict*M_t
    Tensor rule(std::size_t task) const;
};

struct ConflictDataset {
    SyntheticTaskFamily family;
    MultiTaskDataset train;
    MultiTaskDataset test;
};

ConflictDataset gen_conflict_tasks(std::size_t num_tasks, std::size_t dim, std::size_t classes,
                                   std::size_t n_train_per_task, std::size_t n_test_per_task,
                                   double conflict, std::uint64_t seed);

// --- adapter-branch feature extraction -----------------------------------------

struct FeatureSelector {
    std::size_t block = 0;  // ignored when last_block is true
    bool last_block = true;
    MatrixSlot matrix = MatrixSlot::O;
    bool include_base = false;  // branch-only by default (pre-residual)
};

struct FeatureTable {
    std::vector<std::size_t> task_ids;
    std::vector<std::size_t> sample_ids;
    Tensor features;  // [N, d], per-sample mean over positions of the branch output
};

FeatureTable extract_features(const Model& model, const MultiTaskDataset& data,
                              const FeatureSelector& selector, std::size_t batch_size = 256);

// CSV: task_id,sample_id,f_0..f_{d-1}
std::string feature_csv_header(std::size_t dim);
void write_feature_csv(const FeatureTable& table, const std::string& path);

// --- task-differentiation probe ---------------------------------------------------

struct ProbeReport {
    std::vector<double> per_task_f1;
    double macro_f1 = 0.0;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
};

// Linear one-vs-rest logistic probe predicting the task id from features.
// 4:6 train/test split, L2 regularization matched to C = 1.
ProbeReport linear_probe(const FeatureTable& features, std::uint64_t split_seed);

std::string probe_report_json(const ProbeReport& report);

}  // namespace mtladapt
