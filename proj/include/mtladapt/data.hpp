#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtladapt/tensor.hpp"

namespace mtladapt {

// Flat multi-task classification data: one feature vector per sample, tagged
// with a task id and a class label within that task.
struct MultiTaskDataset {
    Tensor inputs;  // [N, dim]
    std::vector<std::size_t> task_ids;
    std::vector<std::size_t> labels;

    std::size_t size() const { return task_ids.size(); }
    std::size_t dim() const { return inputs.defined() ? inputs.dim(1) : 0; }

    void validate(std::size_t num_tasks) const {
        if (!inputs.defined() || inputs.rank() != 2 || size() == 0) {
            throw std::invalid_argument("dataset: empty or malformed inputs");
        }
        if (task_ids.size() != inputs.dim(0) || labels.size() != inputs.dim(0)) {
            throw std::invalid_argument("dataset: inputs, task_ids, labels sizes differ");
        }
        for (std::size_t t : task_ids) {
            if (t >= num_tasks) {
                throw std::out_of_range("dataset: task id " + std::to_string(t) +
                                        " out of range [0, " + std::to_string(num_tasks) + ")");
            }
        }
    }
};

}  // namespace mtladapt
