#include "mtladapt/model.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "mtladapt/rng.hpp"

namespace mtladapt {

namespace {

constexpr MatrixSlot kAllSlots[] = {MatrixSlot::Q, MatrixSlot::K, MatrixSlot::V,
                                    MatrixSlot::O, MatrixSlot::FfnDown, MatrixSlot::FfnUp};

Tensor frozen_gaussian(Shape shape, double stddev, std::mt19937_64& rng) {
    Tensor t = Tensor::zeros(std::move(shape), false);
    for (auto& v : t.values()) {
        v = gaussian_double(rng, 0.0, stddev);
    }
    return t;
}

bool injected(const ModelConfig& cfg, MatrixSlot slot) {
    for (MatrixSlot s : cfg.injection) {
        if (s == slot) return true;
        if (s == MatrixSlot::FfnDown && slot == MatrixSlot::FfnUp) return true;
    }
    return false;
}

std::vector<std::size_t> expand_to_rows(const std::vector<std::size_t>& task_ids, std::size_t seq) {
    std::vector<std::size_t> rows;
    rows.reserve(task_ids.size() * seq);
    for (std::size_t t : task_ids) {
        for (std::size_t s = 0; s < seq; ++s) rows.push_back(t);
    }
    return rows;
}

struct BranchVisitor {
    const Tensor& x2;
    const std::vector<std::size_t>& row_tasks;
    bool reference;

    Tensor operator()(const std::monostate&) const { return Tensor(); }
    Tensor operator()(const LoRALayer& l) const { return lora_branch(x2, l); }
    Tensor operator()(const MTLLoRALayer& l) const {
        return reference ? mtl_lora_branch_loop(x2, row_tasks, l) : mtl_lora_branch(x2, row_tasks, l);
    }
    Tensor operator()(const MultiLoRALayer& l) const { return multi_lora_branch(x2, l); }
    Tensor operator()(const MoELoRALayer& l) const {
        return reference ? moe_lora_branch_loop(x2, row_tasks, l) : moe_lora_branch(x2, row_tasks, l);
    }
};

}  // namespace

const char* matrix_slot_name(MatrixSlot slot) {
    switch (slot) {
        case MatrixSlot::Q: return "q";
        case MatrixSlot::K: return "k";
        case MatrixSlot::V: return "v";
        case MatrixSlot::O: return "o";
        case MatrixSlot::FfnDown: return "ffn_down";
        case MatrixSlot::FfnUp: return "ffn_up";
    }
    return "?";
}

std::optional<MatrixSlot> matrix_slot_from_name(const std::string& name) {
    if (name == "q") return MatrixSlot::Q;
    if (name == "k") return MatrixSlot::K;
    if (name == "v") return MatrixSlot::V;
    if (name == "o") return MatrixSlot::O;
    if (name == "ffn" || name == "ffn_down") return MatrixSlot::FfnDown;
    if (name == "ffn_up") return MatrixSlot::FfnUp;
    return std::nullopt;
}

AdapterSlotLayer& BlockWeights::slot(MatrixSlot which) {
    switch (which) {
        case MatrixSlot::Q: return adapter_q;
        case MatrixSlot::K: return adapter_k;
        case MatrixSlot::V: return adapter_v;
        case MatrixSlot::O: return adapter_o;
        case MatrixSlot::FfnDown: return adapter_down;
        case MatrixSlot::FfnUp: return adapter_up;
    }
    return adapter_q;
}

const AdapterSlotLayer& BlockWeights::slot(MatrixSlot which) const {
    return const_cast<BlockWeights*>(this)->slot(which);
}

std::size_t ModelConfig::effective_input_dim() const {
    if (input_dim != 0) return input_dim;
    return input_packing == InputPacking::SignedPositions ? d_model : seq_len * d_model;
}

std::size_t ModelConfig::classes(std::size_t task) const {
    if (classes_per_task.empty()) return 2;
    return classes_per_task.at(task);
}

void ModelConfig::validate() const {
    if (d_model < 1 || d_ff < 1 || blocks < 1 || seq_len < 1 || num_tasks < 1) {
        throw std::invalid_argument("model config: d, f, blocks, seq_len, num_tasks must be >= 1");
    }
    if (!classes_per_task.empty() && classes_per_task.size() != num_tasks) {
        throw std::invalid_argument("model config: classes_per_task size " +
                                    std::to_string(classes_per_task.size()) + " != num_tasks " +
                                    std::to_string(num_tasks));
    }
    for (std::size_t c : classes_per_task) {
        if (c < 2) {
            throw std::invalid_argument("model config: every task needs >= 2 classes");
        }
    }
    if (input_packing == InputPacking::Reshape) {
        if (effective_input_dim() != seq_len * d_model) {
            throw std::invalid_argument("model config: reshape packing needs input_dim == seq_len * d_model");
        }
    } else {
        if (effective_input_dim() != d_model) {
            throw std::invalid_argument("model config: signed packing needs input_dim == d_model");
        }
        if (seq_len % 2 != 0) {
            throw std::invalid_argument("model config: signed packing needs an even seq_len");
        }
    }
}

Model::Model(ModelConfig config, std::optional<AdapterConfig> adapter, std::uint64_t seed)
    : config_(std::move(config)), adapter_config_(std::move(adapter)) {
    config_.validate();
    if (adapter_config_) {
        AdapterConfig& a = *adapter_config_;
        a.num_tasks = config_.num_tasks;
        a.validate();
    }
    std::mt19937_64 rng(seed);
    const std::size_t d = config_.d_model, f = config_.d_ff;

    // frozen base first so it is identical across adapter choices for a seed
    blocks_.resize(config_.blocks);
    for (auto& blk : blocks_) {
        blk.w_q = frozen_gaussian({d, d}, config_.base_init_std, rng);
        blk.w_k = frozen_gaussian({d, d}, config_.base_init_std, rng);
        blk.w_v = frozen_gaussian({d, d}, config_.base_init_std, rng);
        blk.w_o = frozen_gaussian({d, d}, config_.base_init_std, rng);
        blk.w_down = frozen_gaussian({d, f}, config_.base_init_std, rng);
        blk.w_up = frozen_gaussian({f, d}, config_.base_init_std, rng);
    }

    if (config_.input_packing == InputPacking::SignedPositions) {
        // per channel: balanced +-1 pattern over positions, so mean pooling of
        // raw tokens cancels exactly
        const std::size_t s = config_.seq_len;
        sign_pack_ = Tensor::full({s, d}, 1.0);
        for (std::size_t c = 0; c < d; ++c) {
            std::vector<std::size_t> order(s);
            for (std::size_t i = 0; i < s; ++i) order[i] = i;
            shuffle_indices(order, rng);
            for (std::size_t i = 0; i < s / 2; ++i) {
                sign_pack_(order[i], c) = -1.0;
            }
        }
    }

    heads_.reserve(config_.num_tasks);
    for (std::size_t t = 0; t < config_.num_tasks; ++t) {
        TaskHead head;
        head.task = t;
        head.weight = frozen_gaussian({d, config_.classes(t)}, config_.base_init_std, rng);
        head.weight.set_requires_grad(true);
        head.bias = Tensor::zeros({config_.classes(t)}, true);
        heads_.push_back(std::move(head));
    }

    if (adapter_config_) {
        const AdapterConfig& a = *adapter_config_;
        if (a.kind == AdapterKind::MoELoRA) {
            moe_embeddings_ = Tensor::zeros({a.num_tasks, a.task_embed_dim}, true);
            for (auto& v : moe_embeddings_.values()) {
                v = gaussian_double(rng);
            }
        }
        for (auto& blk : blocks_) {
            for (MatrixSlot slot : kAllSlots) {
                if (!injected(config_, slot)) continue;
                std::size_t out_dim = d, in_dim = d;
                if (slot == MatrixSlot::FfnDown) {
                    out_dim = f;
                } else if (slot == MatrixSlot::FfnUp) {
                    in_dim = f;
                }
                switch (a.kind) {
                    case AdapterKind::LoRA:
                        blk.slot(slot) = LoRALayer::init(out_dim, in_dim, a, rng);
                        break;
                    case AdapterKind::MTL_LoRA:
                        blk.slot(slot) = MTLLoRALayer::init(out_dim, in_dim, a, rng);
                        break;
                    case AdapterKind::MultiLoRA:
                        blk.slot(slot) = MultiLoRALayer::init(out_dim, in_dim, a, rng);
                        break;
                    case AdapterKind::MoELoRA:
                        blk.slot(slot) = MoELoRALayer::init(out_dim, in_dim, a, rng, moe_embeddings_);
                        break;
                }
            }
        }
    }
}

Tensor Model::project(const Tensor& x2, const Tensor& W, bool transposed_use,
                      const AdapterSlotLayer& slot, const std::vector<std::size_t>& row_tasks,
                      std::size_t block_index, MatrixSlot which, BranchCapture* capture) const {
    Tensor base = transposed_use ? matmul_nt(x2, W) : matmul(x2, W);
    Tensor branch = std::visit(BranchVisitor{x2, row_tasks, reference_path_}, slot);
    const bool capture_here = capture && capture->block == block_index && capture->matrix == which;
    if (!branch.defined()) {
        if (capture_here) {
            capture->captured = capture->include_base ? base : Tensor::zeros(base.shape());
        }
        return base;
    }
    if (capture_here) {
        capture->captured = capture->include_base ? add(base, branch) : branch;
    }
    return add(base, branch);
}

Tensor Model::attention_forward(const Tensor& x3, const BlockWeights& block,
                                const std::vector<std::size_t>& task_ids,
                                BranchCapture* capture) const {
    const std::size_t bsz = x3.dim(0), s = x3.dim(1), d = x3.dim(2);
    const std::size_t block_index = static_cast<std::size_t>(&block - blocks_.data());
    const auto row_tasks = expand_to_rows(task_ids, s);
    const Tensor x2 = reshape(x3, {bsz * s, d});
    const Tensor q3 = reshape(project(x2, block.w_q, true, block.adapter_q, row_tasks, block_index,
                                      MatrixSlot::Q, capture),
                              {bsz, s, d});
    const Tensor k3 = reshape(project(x2, block.w_k, true, block.adapter_k, row_tasks, block_index,
                                      MatrixSlot::K, capture),
                              {bsz, s, d});
    const Tensor v3 = reshape(project(x2, block.w_v, true, block.adapter_v, row_tasks, block_index,
                                      MatrixSlot::V, capture),
                              {bsz, s, d});
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<Tensor> attended;
    attended.reserve(bsz);
    for (std::size_t b = 0; b < bsz; ++b) {
        const Tensor q = select_batch(q3, b);
        const Tensor k = select_batch(k3, b);
        const Tensor v = select_batch(v3, b);
        const Tensor scores = scalar_mul(matmul_nt(q, k), inv_sqrt_d);
        const Tensor probs = softmax_rows(scores, config_.causal_attention);
        attended.push_back(matmul(probs, v));
    }
    const Tensor att2 = reshape(stack_batch(attended), {bsz * s, d});
    return reshape(project(att2, block.w_o, true, block.adapter_o, row_tasks, block_index,
                           MatrixSlot::O, capture),
                   {bsz, s, d});
}

Tensor Model::ffn_forward(const Tensor& x3, const BlockWeights& block,
                          const std::vector<std::size_t>& task_ids, BranchCapture* capture) const {
    const std::size_t bsz = x3.dim(0), s = x3.dim(1), d = x3.dim(2);
    const std::size_t block_index = static_cast<std::size_t>(&block - blocks_.data());
    const auto row_tasks = expand_to_rows(task_ids, s);
    const Tensor x2 = reshape(x3, {bsz * s, d});
    Tensor hidden = project(x2, block.w_down, false, block.adapter_down, row_tasks, block_index,
                            MatrixSlot::FfnDown, capture);
    hidden = config_.activation == Activation::Gelu ? gelu(hidden) : relu(hidden);
    const Tensor out = project(hidden, block.w_up, false, block.adapter_up, row_tasks, block_index,
                               MatrixSlot::FfnUp, capture);
    return reshape(out, {bsz, s, d});
}

Tensor Model::block_forward(const Tensor& x3, const BlockWeights& block,
                            const std::vector<std::size_t>& task_ids, BranchCapture* capture) const {
    const Tensor after_attention =
        add(x3, attention_forward(layer_norm_rows(x3), block, task_ids, capture));
    return add(after_attention,
               ffn_forward(layer_norm_rows(after_attention), block, task_ids, capture));
}

Tensor Model::forward(const Tensor& x3, const std::vector<std::size_t>& task_ids,
                      BranchCapture* capture) const {
    if (x3.rank() != 3 || x3.dim(1) != config_.seq_len || x3.dim(2) != config_.d_model) {
        throw std::invalid_argument("model forward: expected [batch x " +
                                    std::to_string(config_.seq_len) + " x " +
                                    std::to_string(config_.d_model) + "], got " +
                                    shape_to_string(x3.shape()));
    }
    if (task_ids.size() != x3.dim(0)) {
        throw std::invalid_argument("model forward: " + std::to_string(task_ids.size()) +
                                    " task ids for batch of " + std::to_string(x3.dim(0)));
    }
    for (std::size_t t : task_ids) {
        if (t >= config_.num_tasks) {
            throw std::out_of_range("task id " + std::to_string(t) + " out of range [0, " +
                                    std::to_string(config_.num_tasks) + ")");
        }
    }
    Tensor h = x3;
    for (const auto& block : blocks_) {
        h = block_forward(h, block, task_ids, capture);
    }
    if (config_.final_layer_norm) {
        h = layer_norm_rows(h);
    }
    return h;
}

Tensor Model::pooled_forward(const Tensor& x3, const std::vector<std::size_t>& task_ids,
                             BranchCapture* capture) const {
    return mean_over_seq(forward(x3, task_ids, capture));
}

Tensor Model::classify(const Tensor& pooled, const std::vector<std::size_t>& task_ids) const {
    const std::size_t batch = pooled.dim(0);
    const std::size_t classes = config_.classes(0);
    for (std::size_t t = 0; t < config_.num_tasks; ++t) {
        if (config_.classes(t) != classes) {
            throw std::invalid_argument("classify: mixed class counts; use classification_loss");
        }
    }
    std::vector<std::vector<std::size_t>> groups(config_.num_tasks);
    for (std::size_t i = 0; i < task_ids.size(); ++i) {
        if (task_ids[i] >= config_.num_tasks) {
            throw std::out_of_range("task id " + std::to_string(task_ids[i]) + " out of range [0, " +
                                    std::to_string(config_.num_tasks) + ")");
        }
        groups[task_ids[i]].push_back(i);
    }
    std::vector<Tensor> parts;
    std::vector<std::vector<std::size_t>> indices;
    for (std::size_t t = 0; t < groups.size(); ++t) {
        if (groups[t].empty()) continue;
        const Tensor sub = gather_rows(pooled, groups[t]);
        parts.push_back(add_row_broadcast(matmul(sub, heads_[t].weight), heads_[t].bias));
        indices.push_back(groups[t]);
    }
    if (parts.empty()) {
        return Tensor::zeros({batch, classes});
    }
    return scatter_rows(parts, indices, batch);
}

Tensor Model::classification_loss(const Tensor& pooled, const std::vector<std::size_t>& task_ids,
                                  const std::vector<std::size_t>& labels) const {
    const std::size_t batch = pooled.dim(0);
    if (labels.size() != batch || task_ids.size() != batch) {
        throw std::invalid_argument("classification_loss: batch, task id, and label counts differ");
    }
    std::vector<std::vector<std::size_t>> groups(config_.num_tasks);
    for (std::size_t i = 0; i < batch; ++i) {
        if (task_ids[i] >= config_.num_tasks) {
            throw std::out_of_range("task id " + std::to_string(task_ids[i]) + " out of range [0, " +
                                    std::to_string(config_.num_tasks) + ")");
        }
        groups[task_ids[i]].push_back(i);
    }
    Tensor total;
    for (std::size_t t = 0; t < groups.size(); ++t) {
        if (groups[t].empty()) continue;
        const Tensor sub = gather_rows(pooled, groups[t]);
        const Tensor logits = add_row_broadcast(matmul(sub, heads_[t].weight), heads_[t].bias);
        std::vector<std::size_t> group_labels;
        group_labels.reserve(groups[t].size());
        for (std::size_t i : groups[t]) group_labels.push_back(labels[i]);
        const double weight = static_cast<double>(groups[t].size()) / static_cast<double>(batch);
        const Tensor term = scalar_mul(cross_entropy(logits, group_labels), weight);
        total = total.defined() ? add(total, term) : term;
    }
    if (!total.defined()) {
        throw std::invalid_argument("classification_loss: empty batch");
    }
    return total;
}

std::vector<std::pair<std::size_t, std::size_t>> Model::accuracy_by_task(
    const Tensor& pooled, const std::vector<std::size_t>& task_ids,
    const std::vector<std::size_t>& labels) const {
    NoGradGuard no_grad;
    std::vector<std::pair<std::size_t, std::size_t>> result(config_.num_tasks, {0, 0});
    std::vector<std::vector<std::size_t>> groups(config_.num_tasks);
    for (std::size_t i = 0; i < task_ids.size(); ++i) {
        groups[task_ids[i]].push_back(i);
    }
    for (std::size_t t = 0; t < groups.size(); ++t) {
        if (groups[t].empty()) continue;
        const Tensor sub = gather_rows(pooled, groups[t]);
        const Tensor logits = add_row_broadcast(matmul(sub, heads_[t].weight), heads_[t].bias);
        const std::size_t classes = logits.dim(1);
        for (std::size_t r = 0; r < groups[t].size(); ++r) {
            std::size_t argmax = 0;
            for (std::size_t c = 1; c < classes; ++c) {
                if (logits(r, c) > logits(r, argmax)) argmax = c;
            }
            result[t].second += 1;
            if (argmax == labels[groups[t][r]]) result[t].first += 1;
        }
    }
    return result;
}

Tensor Model::pack_inputs(const Tensor& vectors) const {
    if (vectors.rank() != 2 || vectors.dim(1) != config_.effective_input_dim()) {
        throw std::invalid_argument("pack_inputs: expected [batch x " +
                                    std::to_string(config_.effective_input_dim()) + "], got " +
                                    shape_to_string(vectors.shape()));
    }
    const std::size_t batch = vectors.dim(0), s = config_.seq_len, d = config_.d_model;
    if (config_.input_packing == InputPacking::Reshape) {
        Tensor out = Tensor::zeros({batch, s, d});
        std::copy(vectors.values().begin(), vectors.values().end(), out.values().begin());
        return out;
    }
    Tensor out = Tensor::zeros({batch, s, d});
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t p = 0; p < s; ++p) {
            for (std::size_t c = 0; c < d; ++c) {
                out(b, p, c) = vectors(b, c) * sign_pack_(p, c);
            }
        }
    }
    return out;
}

namespace {

struct ParamsVisitor {
    std::vector<NamedParam> operator()(const std::monostate&) const { return {}; }
    template <typename L>
    std::vector<NamedParam> operator()(const L& layer) const {
        return layer.parameters();
    }
};

}  // namespace

std::vector<NamedParam> Model::trainable_parameters() const {
    std::vector<NamedParam> out;
    std::unordered_set<const detail::TensorNode*> seen;
    for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
        for (MatrixSlot slot : kAllSlots) {
            const auto params = std::visit(ParamsVisitor{}, blocks_[bi].slot(slot));
            for (const auto& p : params) {
                if (!seen.insert(p.tensor.node().get()).second) continue;
                out.push_back({"block" + std::to_string(bi) + "." + matrix_slot_name(slot) + "." + p.name,
                               p.tensor});
            }
        }
    }
    for (std::size_t t = 0; t < heads_.size(); ++t) {
        out.push_back({"head." + std::to_string(t) + ".weight", heads_[t].weight});
        out.push_back({"head." + std::to_string(t) + ".bias", heads_[t].bias});
    }
    return out;
}

std::vector<NamedParam> Model::frozen_parameters() const {
    std::vector<NamedParam> out;
    for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
        const std::string prefix = "block" + std::to_string(bi) + ".";
        out.push_back({prefix + "w_q", blocks_[bi].w_q});
        out.push_back({prefix + "w_k", blocks_[bi].w_k});
        out.push_back({prefix + "w_v", blocks_[bi].w_v});
        out.push_back({prefix + "w_o", blocks_[bi].w_o});
        out.push_back({prefix + "w_down", blocks_[bi].w_down});
        out.push_back({prefix + "w_up", blocks_[bi].w_up});
    }
    return out;
}

void Model::randomize_adapters(std::uint64_t seed, double stddev) {
    std::mt19937_64 rng(seed);
    for (auto& blk : blocks_) {
        for (MatrixSlot slot : kAllSlots) {
            for (auto& p : std::visit(ParamsVisitor{}, blk.slot(slot))) {
                for (auto& v : p.tensor.values()) {
                    v = gaussian_double(rng, 0.0, stddev);
                }
            }
        }
    }
}

Model Model::merged_clone() const {
    if (adapter_config_ && adapter_config_->kind != AdapterKind::LoRA &&
        adapter_config_->kind != AdapterKind::MultiLoRA) {
        throw std::invalid_argument("merged_clone: only task-agnostic adapters (LoRA, MultiLoRA) merge");
    }
    Model out(config_, std::nullopt, 0);
    for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
        const BlockWeights& src = blocks_[bi];
        BlockWeights& dst = out.blocks_[bi];
        for (MatrixSlot slot : kAllSlots) {
            const Tensor* w = nullptr;
            Tensor* target = nullptr;
            switch (slot) {
                case MatrixSlot::Q: w = &src.w_q; target = &dst.w_q; break;
                case MatrixSlot::K: w = &src.w_k; target = &dst.w_k; break;
                case MatrixSlot::V: w = &src.w_v; target = &dst.w_v; break;
                case MatrixSlot::O: w = &src.w_o; target = &dst.w_o; break;
                case MatrixSlot::FfnDown: w = &src.w_down; target = &dst.w_down; break;
                case MatrixSlot::FfnUp: w = &src.w_up; target = &dst.w_up; break;
            }
            const AdapterSlotLayer& layer = src.slot(slot);
            if (const auto* lora = std::get_if<LoRALayer>(&layer)) {
                // FFN matrices are used untransposed; their adapters were built
                // against the transposed view, so merge in that view
                if (slot == MatrixSlot::FfnDown || slot == MatrixSlot::FfnUp) {
                    *target = transpose(lora_merge(transpose(*w), *lora)).detach_copy();
                } else {
                    *target = lora_merge(*w, *lora);
                }
            } else if (const auto* multi = std::get_if<MultiLoRALayer>(&layer)) {
                if (slot == MatrixSlot::FfnDown || slot == MatrixSlot::FfnUp) {
                    *target = transpose(multi_lora_merge(transpose(*w), *multi)).detach_copy();
                } else {
                    *target = multi_lora_merge(*w, *multi);
                }
            } else {
                *target = w->detach_copy();
            }
            target->set_requires_grad(false);
        }
    }
    for (std::size_t t = 0; t < heads_.size(); ++t) {
        out.heads_[t].weight = heads_[t].weight.detach_copy().set_requires_grad(true);
        out.heads_[t].bias = heads_[t].bias.detach_copy().set_requires_grad(true);
    }
    if (config_.input_packing == InputPacking::SignedPositions) {
        out.sign_pack_ = sign_pack_.detach_copy();
    }
    return out;
}

}  // namespace mtladapt
