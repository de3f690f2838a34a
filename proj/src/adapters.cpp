#include "mtladapt/adapters.hpp"

#include <cmath>
#include <stdexcept>

#include "mtladapt/rng.hpp"

namespace mtladapt {

namespace {

Tensor kaiming_uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    // fan_in = cols (input dimension), bound sqrt(6 / fan_in)
    const double bound = std::sqrt(6.0 / static_cast<double>(cols));
    Tensor t = Tensor::zeros({rows, cols}, true);
    auto v = t.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = uniform_double(rng, -bound, bound);
    }
    return t;
}

void check_task_ids(const std::vector<std::size_t>& task_ids, std::size_t batch, std::size_t num_tasks) {
    if (task_ids.size() != batch) {
        throw std::invalid_argument("adapter forward: " + std::to_string(task_ids.size()) +
                                    " task ids for batch of " + std::to_string(batch));
    }
    for (std::size_t t : task_ids) {
        if (t >= num_tasks) {
            throw std::out_of_range("task id " + std::to_string(t) + " out of range [0, " +
                                    std::to_string(num_tasks) + ")");
        }
    }
}

// deterministic (task id, then row order) grouping of batch rows
std::vector<std::vector<std::size_t>> group_by_task(const std::vector<std::size_t>& task_ids,
                                                    std::size_t num_tasks) {
    std::vector<std::vector<std::size_t>> groups(num_tasks);
    for (std::size_t i = 0; i < task_ids.size(); ++i) {
        groups[task_ids[i]].push_back(i);
    }
    return groups;
}

}  // namespace

const char* adapter_kind_name(AdapterKind kind) {
    switch (kind) {
        case AdapterKind::LoRA: return "lora";
        case AdapterKind::MTL_LoRA: return "mtl_lora";
        case AdapterKind::MultiLoRA: return "multi_lora";
        case AdapterKind::MoELoRA: return "moe_lora";
    }
    return "?";
}

std::optional<AdapterKind> adapter_kind_from_name(const std::string& name) {
    if (name == "lora") return AdapterKind::LoRA;
    if (name == "mtl_lora") return AdapterKind::MTL_LoRA;
    if (name == "multi_lora") return AdapterKind::MultiLoRA;
    if (name == "moe_lora") return AdapterKind::MoELoRA;
    return std::nullopt;
}

void AdapterConfig::validate() const {
    if (rank < 1) {
        throw std::invalid_argument("adapter config: rank must be >= 1");
    }
    if (!(alpha > 0.0)) {
        throw std::invalid_argument("adapter config: alpha must be positive");
    }
    if (num_tasks < 1) {
        throw std::invalid_argument("adapter config: num_tasks must be >= 1");
    }
    if (kind == AdapterKind::MTL_LoRA) {
        if (n_up < 1) {
            throw std::invalid_argument("adapter config: n_up must be >= 1");
        }
        if (!(temperature > 0.0)) {
            throw std::invalid_argument("adapter config: temperature must be positive, got " +
                                        std::to_string(temperature));
        }
    }
    if (kind == AdapterKind::MultiLoRA && num_lora_modules < 1) {
        throw std::invalid_argument("adapter config: num_lora_modules must be >= 1");
    }
    if (kind == AdapterKind::MoELoRA) {
        if (num_experts < 1 || task_embed_dim < 1) {
            throw std::invalid_argument("adapter config: num_experts and task_embed_dim must be >= 1");
        }
        if (rank % num_experts != 0) {
            throw std::invalid_argument("adapter config: rank " + std::to_string(rank) +
                                        " not divisible by num_experts " + std::to_string(num_experts));
        }
    }
}

void AdapterConfig::validate(std::size_t d, std::size_t k) const {
    validate();
    if (rank >= std::min(d, k)) {
        throw std::invalid_argument("adapter config: rank " + std::to_string(rank) +
                                    " must be < min(d, k) = " + std::to_string(std::min(d, k)));
    }
}

// --- init ----------------------------------------------------------------------

LoRALayer LoRALayer::init(std::size_t d, std::size_t k, const AdapterConfig& cfg, std::mt19937_64& rng) {
    cfg.validate(d, k);
    LoRALayer layer;
    layer.A = kaiming_uniform(cfg.rank, k, rng);
    layer.B = Tensor::zeros({d, cfg.rank}, true);
    layer.scale = cfg.scale();
    return layer;
}

std::vector<NamedParam> LoRALayer::parameters() const {
    return {{"A", A}, {"B", B}};
}

MTLLoRALayer MTLLoRALayer::init(std::size_t d, std::size_t k, const AdapterConfig& cfg, std::mt19937_64& rng) {
    cfg.validate(d, k);
    MTLLoRALayer layer;
    layer.A = kaiming_uniform(cfg.rank, k, rng);
    layer.B.reserve(cfg.n_up);
    for (std::size_t i = 0; i < cfg.n_up; ++i) {
        layer.B.push_back(Tensor::zeros({d, cfg.rank}, true));
    }
    layer.Lambda.reserve(cfg.num_tasks);
    for (std::size_t t = 0; t < cfg.num_tasks; ++t) {
        layer.Lambda.push_back(Tensor::identity(cfg.rank, !cfg.freeze_lambda_identity));
    }
    layer.w_table = Tensor::zeros({cfg.num_tasks, cfg.n_up}, !cfg.uniform_weights);
    layer.tau = cfg.temperature;
    layer.scale = cfg.scale();
    layer.freeze_lambda = cfg.freeze_lambda_identity;
    layer.uniform_weights = cfg.uniform_weights;
    return layer;
}

std::vector<NamedParam> MTLLoRALayer::parameters() const {
    std::vector<NamedParam> out;
    out.push_back({"A", A});
    for (std::size_t i = 0; i < B.size(); ++i) {
        out.push_back({"B." + std::to_string(i), B[i]});
    }
    if (!freeze_lambda) {
        for (std::size_t t = 0; t < Lambda.size(); ++t) {
            out.push_back({"Lambda." + std::to_string(t), Lambda[t]});
        }
    }
    if (!uniform_weights) {
        out.push_back({"w_table", w_table});
    }
    return out;
}

MultiLoRALayer MultiLoRALayer::init(std::size_t d, std::size_t k, const AdapterConfig& cfg, std::mt19937_64& rng) {
    cfg.validate(d, k);
    MultiLoRALayer layer;
    layer.modules.reserve(cfg.num_lora_modules);
    for (std::size_t m = 0; m < cfg.num_lora_modules; ++m) {
        LoRALayer mod;
        mod.A = kaiming_uniform(cfg.rank, k, rng);
        mod.B = Tensor::zeros({d, cfg.rank}, true);
        mod.scale = cfg.scale();
        layer.modules.push_back(std::move(mod));
    }
    layer.mix = Tensor::full({cfg.num_lora_modules}, 1.0, true);
    return layer;
}

std::vector<NamedParam> MultiLoRALayer::parameters() const {
    std::vector<NamedParam> out;
    for (std::size_t m = 0; m < modules.size(); ++m) {
        out.push_back({"module." + std::to_string(m) + ".A", modules[m].A});
        out.push_back({"module." + std::to_string(m) + ".B", modules[m].B});
    }
    out.push_back({"mix", mix});
    return out;
}

MoELoRALayer MoELoRALayer::init(std::size_t d, std::size_t k, const AdapterConfig& cfg, std::mt19937_64& rng,
                                Tensor shared_embeddings) {
    cfg.validate(d, k);
    MoELoRALayer layer;
    const std::size_t per_expert = cfg.rank / cfg.num_experts;
    layer.expert_A.reserve(cfg.num_experts);
    layer.expert_B.reserve(cfg.num_experts);
    for (std::size_t e = 0; e < cfg.num_experts; ++e) {
        layer.expert_A.push_back(kaiming_uniform(per_expert, k, rng));
        layer.expert_B.push_back(Tensor::zeros({d, per_expert}, true));
    }
    if (shared_embeddings.defined()) {
        if (shared_embeddings.shape() != Shape{cfg.num_tasks, cfg.task_embed_dim}) {
            throw std::invalid_argument("moe init: shared embeddings shape " +
                                        shape_to_string(shared_embeddings.shape()) + " expected [" +
                                        std::to_string(cfg.num_tasks) + "x" +
                                        std::to_string(cfg.task_embed_dim) + "]");
        }
        layer.task_embeddings = shared_embeddings;
    } else {
        layer.task_embeddings = Tensor::zeros({cfg.num_tasks, cfg.task_embed_dim}, true);
        auto v = layer.task_embeddings.values();
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = gaussian_double(rng);
        }
    }
    layer.gate = Tensor::zeros({cfg.task_embed_dim, cfg.num_experts}, true);
    layer.scale = cfg.scale();
    return layer;
}

std::vector<NamedParam> MoELoRALayer::parameters() const {
    std::vector<NamedParam> out;
    for (std::size_t e = 0; e < expert_A.size(); ++e) {
        out.push_back({"expert." + std::to_string(e) + ".A", expert_A[e]});
        out.push_back({"expert." + std::to_string(e) + ".B", expert_B[e]});
    }
    out.push_back({"gate", gate});
    out.push_back({"task_embeddings", task_embeddings});
    return out;
}

// --- forwards -----------------------------------------------------------------------

Tensor lora_branch(const Tensor& x, const LoRALayer& layer) {
    return scalar_mul(matmul_nt(matmul_nt(x, layer.A), layer.B), layer.scale);
}

Tensor lora_forward(const Tensor& x, const Tensor& W, const LoRALayer& layer) {
    return add(matmul_nt(x, W), lora_branch(x, layer));
}

Tensor lora_merge(const Tensor& W, const LoRALayer& layer) {
    NoGradGuard no_grad;
    return add(W.detach_copy(), scalar_mul(matmul(layer.B, layer.A), layer.scale)).detach_copy();
}

Tensor lora_unmerge(const Tensor& W, const LoRALayer& layer) {
    NoGradGuard no_grad;
    return sub(W.detach_copy(), scalar_mul(matmul(layer.B, layer.A), layer.scale)).detach_copy();
}

Tensor multi_lora_merge(const Tensor& W, const MultiLoRALayer& layer) {
    NoGradGuard no_grad;
    Tensor merged = W.detach_copy();
    for (std::size_t m = 0; m < layer.modules.size(); ++m) {
        const LoRALayer& mod = layer.modules[m];
        merged = add(merged, scalar_mul(matmul(mod.B, mod.A), mod.scale * layer.mix(m))).detach_copy();
    }
    return merged;
}

Tensor mtl_routing_weights(const MTLLoRALayer& layer, std::size_t task) {
    if (task >= layer.num_tasks()) {
        throw std::out_of_range("task id " + std::to_string(task) + " out of range [0, " +
                                std::to_string(layer.num_tasks()) + ")");
    }
    if (layer.uniform_weights) {
        return Tensor::full({layer.n_up()}, 1.0 / static_cast<double>(layer.n_up()));
    }
    return softmax_with_temperature(row(layer.w_table, task), layer.tau);
}

namespace {

// mixed up-projection for one task group: sum_i s_i · v·(B^i)ᵀ
Tensor mtl_mix_up(const Tensor& v, const MTLLoRALayer& layer, std::size_t task) {
    std::vector<Tensor> parts;
    parts.reserve(layer.n_up());
    for (std::size_t i = 0; i < layer.n_up(); ++i) {
        parts.push_back(matmul_nt(v, layer.B[i]));
    }
    if (parts.size() == 1) {
        return parts[0];  // softmax over one logit is exactly 1
    }
    return weighted_sum(parts, mtl_routing_weights(layer, task));
}

}  // namespace

Tensor mtl_lora_branch(const Tensor& x, const std::vector<std::size_t>& task_ids, const MTLLoRALayer& layer) {
    check_task_ids(task_ids, x.dim(0), layer.num_tasks());
    if (!(layer.tau > 0.0)) {
        throw std::invalid_argument("mtl_lora: temperature must be positive, got " + std::to_string(layer.tau));
    }
    const std::size_t n_rows = x.dim(0);
    const std::size_t d = layer.B[0].dim(0);
    const Tensor u = matmul_nt(x, layer.A);  // [N, r], shared down-projection
    auto groups = group_by_task(task_ids, layer.num_tasks());
    std::vector<Tensor> outputs;
    std::vector<std::vector<std::size_t>> indices;
    for (std::size_t t = 0; t < groups.size(); ++t) {
        if (groups[t].empty()) continue;
        const Tensor ut = gather_rows(u, groups[t]);
        const Tensor vt = matmul_nt(ut, layer.Lambda[t]);
        outputs.push_back(mtl_mix_up(vt, layer, t));
        indices.push_back(groups[t]);
    }
    if (outputs.empty()) {
        return Tensor::zeros({n_rows, d});
    }
    return scalar_mul(scatter_rows(outputs, indices, n_rows), layer.scale);
}

Tensor mtl_lora_branch_loop(const Tensor& x, const std::vector<std::size_t>& task_ids, const MTLLoRALayer& layer) {
    check_task_ids(task_ids, x.dim(0), layer.num_tasks());
    const std::size_t n_rows = x.dim(0);
    std::vector<Tensor> outputs;
    std::vector<std::vector<std::size_t>> indices;
    for (std::size_t i = 0; i < n_rows; ++i) {
        const std::size_t t = task_ids[i];
        const Tensor xi = gather_rows(x, {i});
        const Tensor vi = matmul_nt(matmul_nt(xi, layer.A), layer.Lambda[t]);
        outputs.push_back(mtl_mix_up(vi, layer, t));
        indices.push_back({i});
    }
    return scalar_mul(scatter_rows(outputs, indices, n_rows), layer.scale);
}

Tensor mtl_lora_forward(const Tensor& x, const std::vector<std::size_t>& task_ids, const Tensor& W,
                        const MTLLoRALayer& layer) {
    return add(matmul_nt(x, W), mtl_lora_branch(x, task_ids, layer));
}

Tensor multi_lora_branch(const Tensor& x, const MultiLoRALayer& layer) {
    std::vector<Tensor> parts;
    parts.reserve(layer.modules.size());
    for (const LoRALayer& mod : layer.modules) {
        parts.push_back(lora_branch(x, mod));
    }
    return weighted_sum(parts, layer.mix);
}

Tensor multi_lora_forward(const Tensor& x, const Tensor& W, const MultiLoRALayer& layer) {
    return add(matmul_nt(x, W), multi_lora_branch(x, layer));
}

Tensor moe_gate_weights(const MoELoRALayer& layer, std::size_t task) {
    if (task >= layer.task_embeddings.dim(0)) {
        throw std::out_of_range("task id " + std::to_string(task) + " out of range [0, " +
                                std::to_string(layer.task_embeddings.dim(0)) + ")");
    }
    const Tensor emb = reshape(row(layer.task_embeddings, task), {std::size_t(1), layer.task_embeddings.dim(1)});
    const Tensor logits = reshape(matmul(emb, layer.gate), {layer.gate.dim(1)});
    return softmax_with_temperature(logits, 1.0);
}

namespace {

// deliberate expert-level loop: one small gemm pair per expert
Tensor moe_group_branch(const Tensor& xt, const MoELoRALayer& layer, std::size_t task) {
    std::vector<Tensor> parts;
    parts.reserve(layer.num_experts());
    for (std::size_t e = 0; e < layer.num_experts(); ++e) {
        parts.push_back(matmul_nt(matmul_nt(xt, layer.expert_A[e]), layer.expert_B[e]));
    }
    if (parts.size() == 1) {
        return parts[0];
    }
    return weighted_sum(parts, moe_gate_weights(layer, task));
}

}  // namespace

Tensor moe_lora_branch(const Tensor& x, const std::vector<std::size_t>& task_ids, const MoELoRALayer& layer) {
    const std::size_t num_tasks = layer.task_embeddings.dim(0);
    check_task_ids(task_ids, x.dim(0), num_tasks);
    const std::size_t n_rows = x.dim(0);
    const std::size_t d = layer.expert_B[0].dim(0);
    auto groups = group_by_task(task_ids, num_tasks);
    std::vector<Tensor> outputs;
    std::vector<std::vector<std::size_t>> indices;
    for (std::size_t t = 0; t < groups.size(); ++t) {
        if (groups[t].empty()) continue;
        const Tensor xt = gather_rows(x, groups[t]);
        outputs.push_back(moe_group_branch(xt, layer, t));
        indices.push_back(groups[t]);
    }
    if (outputs.empty()) {
        return Tensor::zeros({n_rows, d});
    }
    return scalar_mul(scatter_rows(outputs, indices, n_rows), layer.scale);
}

Tensor moe_lora_branch_loop(const Tensor& x, const std::vector<std::size_t>& task_ids, const MoELoRALayer& layer) {
    const std::size_t num_tasks = layer.task_embeddings.dim(0);
    check_task_ids(task_ids, x.dim(0), num_tasks);
    const std::size_t n_rows = x.dim(0);
    std::vector<Tensor> outputs;
    std::vector<std::vector<std::size_t>> indices;
    for (std::size_t i = 0; i < n_rows; ++i) {
        const Tensor xi = gather_rows(x, {i});
        outputs.push_back(moe_group_branch(xi, layer, task_ids[i]));
        indices.push_back({i});
    }
    return scalar_mul(scatter_rows(outputs, indices, n_rows), layer.scale);
}

Tensor moe_lora_forward(const Tensor& x, const std::vector<std::size_t>& task_ids, const Tensor& W,
                        const MoELoRALayer& layer) {
    return add(matmul_nt(x, W), moe_lora_branch(x, task_ids, layer));
}

// --- parameter accounting -----------------------------------------------------------

TrainableCount count_trainable(const AdapterConfig& cfg, const CountDims& dims) {
    cfg.validate();
    if (dims.d == 0 || dims.k == 0 || dims.matrices_per_block == 0 || dims.blocks == 0) {
        throw std::invalid_argument("count_trainable: dimensions must be positive");
    }
    const std::size_t d = dims.d, k = dims.k, r = cfg.rank;
    std::size_t per_matrix = 0;
    std::size_t global_params = 0;
    switch (cfg.kind) {
        case AdapterKind::LoRA:
            per_matrix = r * (d + k);
            break;
        case AdapterKind::MTL_LoRA: {
            per_matrix = r * k + cfg.n_up * d * r + cfg.num_tasks * r * r + cfg.num_tasks * cfg.n_up;
            break;
        }
        case AdapterKind::MultiLoRA:
            per_matrix = cfg.num_lora_modules * r * (d + k) + cfg.num_lora_modules;
            break;
        case AdapterKind::MoELoRA:
            per_matrix = r * (d + k) + cfg.task_embed_dim * cfg.num_experts;
            global_params = cfg.num_tasks * cfg.task_embed_dim;
            break;
    }
    TrainableCount out;
    out.count = per_matrix * dims.matrices_per_block * dims.blocks + global_params + dims.heads_params;
    if (dims.base_param_count > 0.0) {
        out.percent = 100.0 * static_cast<double>(out.count) / dims.base_param_count;
    }
    return out;
}

}  // namespace mtladapt
