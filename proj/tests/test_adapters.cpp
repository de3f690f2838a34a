#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mtladapt/adapters.hpp"
#include "mtladapt/rng.hpp"
#include "mtladapt/tensor.hpp"
#include "test_helpers.hpp"

using namespace mtladapt;
using mtltest::bitwise_equal;
using mtltest::grad_rel_err;
using mtltest::max_abs_diff;
using mtltest::random_tensor;

namespace {

void randomize(Tensor t, std::mt19937_64& rng, double stddev = 0.5) {
    for (auto& v : t.values()) {
        v = gaussian_double(rng, 0.0, stddev);
    }
}

void randomize_mtl(MTLLoRALayer& layer, std::mt19937_64& rng) {
    for (auto& b : layer.B) randomize(b, rng);
    for (auto& l : layer.Lambda) randomize(l, rng);
    randomize(layer.w_table, rng);
}

void randomize_moe(MoELoRALayer& layer, std::mt19937_64& rng) {
    for (auto& b : layer.expert_B) randomize(b, rng);
    randomize(layer.gate, rng);
}

std::vector<std::size_t> random_task_ids(std::size_t n, std::size_t num_tasks, std::mt19937_64& rng) {
    std::vector<std::size_t> ids(n);
    for (auto& t : ids) t = uniform_index(rng, num_tasks);
    return ids;
}

}  // namespace

TEST_CASE("lora_forward zero-init identity and hand example") {
    std::mt19937_64 rng(1);
    AdapterConfig cfg;
    cfg.rank = 2;
    cfg.alpha = 7.0;
    LoRALayer layer = LoRALayer::init(6, 5, cfg, rng);
    for (double v : layer.B.values()) CHECK(v == 0.0);
    const double bound = std::sqrt(6.0 / 5.0);
    for (double v : layer.A.values()) {
        CHECK(std::abs(v) <= bound);
    }

    Tensor W = random_tensor({6, 5}, rng);
    Tensor x = random_tensor({3, 5}, rng);
    CHECK(bitwise_equal(lora_forward(x, W, layer), matmul_nt(x, W)));

    // k=d=2, r=1, alpha=r: W=I, A=[[1,0]], B=[[1],[0]], x=[1,0] -> h=[2,0]
    LoRALayer hand;
    hand.A = Tensor::from_values({1, 2}, {1, 0});
    hand.B = Tensor::from_values({2, 1}, {1, 0});
    hand.scale = 1.0;
    Tensor h = lora_forward(Tensor::from_values({1, 2}, {1, 0}), Tensor::identity(2), hand);
    CHECK(h(0, 0) == 2.0);
    CHECK(h(0, 1) == 0.0);
}

TEST_CASE("lora_merge equivalence, hand value, and unmerge round trip") {
    std::mt19937_64 rng(2);
    AdapterConfig cfg;
    cfg.rank = 3;
    cfg.alpha = 6.0;
    LoRALayer layer = LoRALayer::init(8, 7, cfg, rng);
    Tensor W = random_tensor({8, 7}, rng);

    CHECK(bitwise_equal(lora_merge(W, layer), W));  // B = 0

    randomize(layer.B, rng);
    Tensor merged = lora_merge(W, layer);
    Tensor x = random_tensor({4, 7}, rng);
    Tensor adapted = lora_forward(x, W, layer);
    Tensor plain = matmul_nt(x, merged);
    for (std::size_t i = 0; i < adapted.size(); ++i) {
        const double denom = std::max(1.0, std::abs(adapted.values()[i]));
        CHECK(std::abs(adapted.values()[i] - plain.values()[i]) / denom < 1e-10);
    }

    Tensor round_trip = lora_merge(lora_unmerge(merged, layer), layer);
    CHECK(max_abs_diff(round_trip, merged) < 1e-12);

    LoRALayer hand;
    hand.A = Tensor::from_values({1, 2}, {1, 0});
    hand.B = Tensor::from_values({2, 1}, {1, 0});
    hand.scale = 1.0;
    Tensor hand_merged = lora_merge(Tensor::identity(2), hand);
    CHECK(hand_merged(0, 0) == 2.0);
    CHECK(hand_merged(0, 1) == 0.0);
    CHECK(hand_merged(1, 0) == 0.0);
    CHECK(hand_merged(1, 1) == 1.0);
}

TEST_CASE("mtl_lora_forward zero-init identity for all tasks") {
    std::mt19937_64 rng(3);
    AdapterConfig cfg;
    cfg.kind = AdapterKind::MTL_LoRA;
    cfg.rank = 2;
    cfg.alpha = 4.0;
    cfg.n_up = 3;
    cfg.temperature = 0.5;
    cfg.num_tasks = 4;
    MTLLoRALayer layer = MTLLoRALayer::init(6, 6, cfg, rng);
    for (const auto& b : layer.B) {
        for (double v : b.values()) CHECK(v == 0.0);
    }
    for (const auto& l : layer.Lambda) {
        CHECK(bitwise_equal(l, Tensor::identity(2)));
    }

    Tensor W = random_tensor({6, 6}, rng);
    Tensor x = random_tensor({8, 6}, rng);
    auto ids = random_task_ids(8, 4, rng);
    CHECK(bitwise_equal(mtl_lora_forward(x, ids, W, layer), matmul_nt(x, W)));
}

TEST_CASE("mtl_lora_forward hand example") {
    // d=k=2, r=1, n=2, alpha=r: weights (0.5, 0.5), branch = 0.5*[2,0] + 0.5*[0,2]
    MTLLoRALayer layer;
    layer.A = Tensor::from_values({1, 2}, {1, 0});
    layer.B = {Tensor::from_values({2, 1}, {1, 0}), Tensor::from_values({2, 1}, {0, 1})};
    layer.Lambda = {Tensor::from_values({1, 1}, {2})};
    layer.w_table = Tensor::zeros({1, 2});
    layer.tau = 1.0;
    layer.scale = 1.0;
    Tensor h = mtl_lora_forward(Tensor::from_values({1, 2}, {1, 0}), {0}, Tensor::identity(2), layer);
    CHECK(h(0, 0) == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(h(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("mtl_lora with n=1 and frozen identity Lambda reduces to lora") {
    std::mt19937_64 rng(4);
    AdapterConfig mtl_cfg;
    mtl_cfg.kind = AdapterKind::MTL_LoRA;
    mtl_cfg.rank = 3;
    mtl_cfg.alpha = 12.0;
    mtl_cfg.n_up = 1;
    mtl_cfg.num_tasks = 3;
    mtl_cfg.freeze_lambda_identity = true;
    MTLLoRALayer mtl = MTLLoRALayer::init(7, 9, mtl_cfg, rng);
    randomize(mtl.B[0], rng);

    LoRALayer lora;
    lora.A = mtl.A;
    lora.B = mtl.B[0];
    lora.scale = mtl.scale;  // matched alpha

    Tensor W = random_tensor({7, 9}, rng);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor x = random_tensor({6, 9}, rng);
        auto ids = random_task_ids(6, 3, rng);
        CHECK(max_abs_diff(mtl_lora_forward(x, ids, W, mtl), lora_forward(x, W, lora)) < 1e-12);
    }
}

TEST_CASE("mtl_lora grouped path equals per-sample loop on mixed batches (50 seeds)") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        std::mt19937_64 rng(7000 + seed);
        AdapterConfig cfg;
        cfg.kind = AdapterKind::MTL_LoRA;
        cfg.rank = 2;
        cfg.alpha = 4.0;
        cfg.n_up = 1 + seed % 4;
        cfg.temperature = 0.2 + 0.1 * static_cast<double>(seed % 9);
        cfg.num_tasks = 2 + seed % 4;
        const std::size_t d = 5 + seed % 3, k = 4 + seed % 4;
        MTLLoRALayer layer = MTLLoRALayer::init(d, k, cfg, rng);
        randomize_mtl(layer, rng);
        const std::size_t batch = 1 + seed % 12;
        Tensor x = random_tensor({batch, k}, rng);
        auto ids = random_task_ids(batch, cfg.num_tasks, rng);
        Tensor grouped = mtl_lora_branch(x, ids, layer);
        Tensor looped = mtl_lora_branch_loop(x, ids, layer);
        CHECK(max_abs_diff(grouped, looped) < 1e-12);
    }
}

TEST_CASE("mtl_lora errors: bad task id and bad temperature") {
    std::mt19937_64 rng(5);
    AdapterConfig cfg;
    cfg.kind = AdapterKind::MTL_LoRA;
    cfg.rank = 2;
    cfg.num_tasks = 2;
    MTLLoRALayer layer = MTLLoRALayer::init(6, 6, cfg, rng);
    Tensor W = random_tensor({6, 6}, rng);
    Tensor x = random_tensor({2, 6}, rng);
    CHECK_THROWS_AS(mtl_lora_forward(x, {0, 2}, W, layer), std::out_of_range);

    layer.tau = 0.0;
    CHECK_THROWS_AS(mtl_lora_forward(x, {0, 1}, W, layer), std::invalid_argument);

    AdapterConfig bad = cfg;
    bad.temperature = -0.5;
    CHECK_THROWS_AS(MTLLoRALayer::init(6, 6, bad, rng), std::invalid_argument);
}

TEST_CASE("multi_lora: zero init, degenerate ensemble, sum of branches") {
    std::mt19937_64 rng(6);
    AdapterConfig cfg;
    cfg.kind = AdapterKind::MultiLoRA;
    cfg.rank = 2;
    cfg.alpha = 4.0;
    cfg.num_lora_modules = 3;
    MultiLoRALayer layer = MultiLoRALayer::init(5, 5, cfg, rng);
    for (double v : layer.mix.values()) CHECK(v == 1.0);

    Tensor W = random_tensor({5, 5}, rng);
    Tensor x = random_tensor({4, 5}, rng);
    CHECK(bitwise_equal(multi_lora_forward(x, W, layer), matmul_nt(x, W)));

    AdapterConfig single = cfg;
    single.num_lora_modules = 1;
    MultiLoRALayer one = MultiLoRALayer::init(5, 5, single, rng);
    randomize(one.modules[0].B, rng);
    CHECK(max_abs_diff(multi_lora_forward(x, W, one), lora_forward(x, W, one.modules[0])) < 1e-15);

    // two hand modules: branch sums
    MultiLoRALayer two;
    LoRALayer m0, m1;
    m0.A = Tensor::from_values({1, 2}, {1, 0});
    m0.B = Tensor::from_values({2, 1}, {1, 0});
    m0.scale = 1.0;
    m1.A = Tensor::from_values({1, 2}, {0, 1});
    m1.B = Tensor::from_values({2, 1}, {0, 3});
    m1.scale = 1.0;
    two.modules = {m0, m1};
    two.mix = Tensor::from_values({2}, {1, 1});
    Tensor h = multi_lora_forward(Tensor::from_values({1, 2}, {1, 1}), Tensor::identity(2), two);
    // base [1,1]; branch0 = [1,0]; branch1 = [0,3]
    CHECK(h(0, 0) == 2.0);
    CHECK(h(0, 1) == 4.0);
}

TEST_CASE("multi_lora merge equivalence") {
    std::mt19937_64 rng(61);
    AdapterConfig cfg;
    cfg.kind = AdapterKind::MultiLoRA;
    cfg.rank = 2;
    cfg.alpha = 8.0;
    cfg.num_lora_modules = 3;
    MultiLoRALayer layer = MultiLoRALayer::init(6, 6, cfg, rng);
    for (auto& mod : layer.modules) randomize(mod.B, rng);
    randomize(layer.mix, rng, 1.0);
    Tensor W = random_tensor({6, 6}, rng);
    Tensor merged = multi_lora_merge(W, layer);
    Tensor x = random_tensor({5, 6}, rng);
    Tensor adapted = multi_lora_forward(x, W, layer);
    Tensor plain = matmul_nt(x, merged);
    for (std::size_t i = 0; i < adapted.size(); ++i) {
        const double denom = std::max(1.0, std::abs(adapted.values()[i]));
        CHECK(std::abs(adapted.values()[i] - plain.values()[i]) / denom < 1e-10);
    }
}

TEST_CASE("moe_lora: zero init, single expert degeneracy, uniform gate average") {
    std::mt19937_64 rng(8);
    AdapterConfig cfg;
    cfg.kind = AdapterKind::MoELoRA;
    cfg.rank = 4;
    cfg.alpha = 8.0;
    cfg.num_experts = 2;
    cfg.task_embed_dim = 3;
    cfg.num_tasks = 2;
    MoELoRALayer layer = MoELoRALayer::init(6, 6, cfg, rng);

    Tensor W = random_tensor({6, 6}, rng);
    Tensor x = random_tensor({5, 6}, rng);
    auto ids = random_task_ids(5, 2, rng);
    CHECK(bitwise_equal(moe_lora_forward(x, ids, W, layer), matmul_nt(x, W)));

    // E=1: equals lora_forward of the single expert (same total-rank scale)
    AdapterConfig one = cfg;
    one.num_experts = 1;
    MoELoRALayer single = MoELoRALayer::init(6, 6, one, rng);
    randomize(single.expert_B[0], rng);
    LoRALayer as_lora;
    as_lora.A = single.expert_A[0];
    as_lora.B = single.expert_B[0];
    as_lora.scale = single.scale;
    CHECK(max_abs_diff(moe_lora_forward(x, ids, W, single), lora_forward(x, W, as_lora)) < 1e-12);

    // E=2 with zero gate -> logits (0,0) -> average of the two expert branches
    randomize(layer.expert_B[0], rng);
    randomize(layer.expert_B[1], rng);
    LoRALayer e0{layer.expert_A[0], layer.expert_B[0], layer.scale};
    LoRALayer e1{layer.expert_A[1], layer.expert_B[1], layer.scale};
    Tensor expected = add(matmul_nt(x, W),
                          scalar_mul(add(lora_branch(x, e0), lora_branch(x, e1)), 0.5));
    CHECK(max_abs_diff(moe_lora_forward(x, ids, W, layer), expected) < 1e-12);

    AdapterConfig bad = cfg;
    bad.rank = 5;  // not divisible by E=2
    CHECK_THROWS_AS(MoELoRALayer::init(6, 6, bad, rng), std::invalid_argument);
}

TEST_CASE("moe grouped path equals per-sample loop") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(9100 + seed);
        AdapterConfig cfg;
        cfg.kind = AdapterKind::MoELoRA;
        cfg.rank = 4;
        cfg.num_experts = 2;
        cfg.task_embed_dim = 4;
        cfg.num_tasks = 3;
        MoELoRALayer layer = MoELoRALayer::init(6, 5, cfg, rng);
        randomize_moe(layer, rng);
        Tensor x = random_tensor({7, 5}, rng);
        auto ids = random_task_ids(7, 3, rng);
        CHECK(max_abs_diff(moe_lora_branch(x, ids, layer), moe_lora_branch_loop(x, ids, layer)) < 1e-12);
    }
}

TEST_CASE("routing weights form a probability simplex") {
    std::mt19937_64 rng(10);
    AdapterConfig cfg;
    cfg.kind = AdapterKind::MTL_LoRA;
    cfg.rank = 2;
    cfg.n_up = 4;
    cfg.temperature = 0.3;
    cfg.num_tasks = 5;
    MTLLoRALayer layer = MTLLoRALayer::init(6, 6, cfg, rng);
    randomize(layer.w_table, rng, 2.0);
    for (std::size_t t = 0; t < 5; ++t) {
        Tensor w = mtl_routing_weights(layer, t);
        double total = 0.0;
        for (double v : w.values()) {
            CHECK(v >= 0.0);
            total += v;
        }
        CHECK(std::abs(total - 1.0) < 1e-12);
    }

    AdapterConfig moe_cfg;
    moe_cfg.kind = AdapterKind::MoELoRA;
    moe_cfg.rank = 8;
    moe_cfg.num_experts = 4;
    moe_cfg.task_embed_dim = 5;
    moe_cfg.num_tasks = 3;
    MoELoRALayer moe = MoELoRALayer::init(10, 10, moe_cfg, rng);
    randomize_moe(moe, rng);
    for (std::size_t t = 0; t < 3; ++t) {
        Tensor g = moe_gate_weights(moe, t);
        double total = 0.0;
        for (double v : g.values()) {
            CHECK(v >= 0.0);
            total += v;
        }
        CHECK(std::abs(total - 1.0) < 1e-12);
    }
}

TEST_CASE("temperature limits: sharp, flat, argmax invariant") {
    MTLLoRALayer layer;
    layer.A = Tensor::zeros({2, 6});
    layer.B = {Tensor::zeros({6, 2}), Tensor::zeros({6, 2}), Tensor::zeros({6, 2})};
    layer.Lambda = {Tensor::identity(2)};
    layer.w_table = Tensor::from_values({1, 3}, {0.2, 0.0, 0.1});
    layer.scale = 1.0;

    layer.tau = 0.01;
    Tensor sharp = mtl_routing_weights(layer, 0);
    CHECK(sharp(0) > 0.999);

    layer.tau = 100.0;
    Tensor flat = mtl_routing_weights(layer, 0);
    double mx = flat(0), mn = flat(0);
    for (double v : flat.values()) {
        mx = std::max(mx, v);
        mn = std::min(mn, v);
    }
    CHECK(mx - mn < 1e-3);

    std::size_t reference_argmax = 0;
    for (double tau : {0.01, 0.1, 0.8, 1.0, 10.0, 100.0}) {
        layer.tau = tau;
        Tensor w = mtl_routing_weights(layer, 0);
        std::size_t argmax = 0;
        for (std::size_t i = 1; i < w.size(); ++i) {
            if (w(i) > w(argmax)) argmax = i;
        }
        if (tau == 0.01) {
            reference_argmax = argmax;
        }
        CHECK(argmax == reference_argmax);
    }
}

TEST_CASE("adapter gradients match finite differences on toy dims") {
    // d=k=6, r=2, n=2, T=3; every trainable parameter class
    const std::size_t d = 6, k = 6;
    std::mt19937_64 rng(77);
    Tensor W = random_tensor({d, k}, rng);
    Tensor x = random_tensor({5, k}, rng);
    const std::vector<std::size_t> ids = {0, 1, 2, 1, 0};

    auto check_params = [&](std::vector<NamedParam> params, const std::function<Tensor()>& loss_fn) {
        for (auto& p : params) {
            for (auto& np : params) np.tensor.zero_grad();
            backward(loss_fn());
            Tensor analytic = Tensor::from_values(p.tensor.shape(),
                                                  {p.tensor.grad().begin(), p.tensor.grad().end()});
            Tensor fd = finite_diff_grad(
                [&](const Tensor&) { return loss_fn().scalar(); }, p.tensor, 1e-5);
            INFO("param ", p.name);
            CHECK(grad_rel_err(analytic, fd) < 1e-5);
        }
    };

    SUBCASE("mtl_lora") {
        AdapterConfig cfg;
        cfg.kind = AdapterKind::MTL_LoRA;
        cfg.rank = 2;
        cfg.alpha = 4.0;
        cfg.n_up = 2;
        cfg.temperature = 0.7;
        cfg.num_tasks = 3;
        MTLLoRALayer layer = MTLLoRALayer::init(d, k, cfg, rng);
        randomize_mtl(layer, rng);
        check_params(layer.parameters(), [&]() { return mean(gelu(mtl_lora_forward(x, ids, W, layer))); });
    }
    SUBCASE("lora") {
        AdapterConfig cfg;
        cfg.rank = 2;
        cfg.alpha = 4.0;
        LoRALayer layer = LoRALayer::init(d, k, cfg, rng);
        randomize(layer.B, rng);
        check_params(layer.parameters(), [&]() { return mean(gelu(lora_forward(x, W, layer))); });
    }
    SUBCASE("multi_lora") {
        AdapterConfig cfg;
        cfg.kind = AdapterKind::MultiLoRA;
        cfg.rank = 2;
        cfg.alpha = 4.0;
        cfg.num_lora_modules = 2;
        MultiLoRALayer layer = MultiLoRALayer::init(d, k, cfg, rng);
        for (auto& mod : layer.modules) randomize(mod.B, rng);
        randomize(layer.mix, rng, 1.0);
        check_params(layer.parameters(), [&]() { return mean(gelu(multi_lora_forward(x, W, layer))); });
    }
    SUBCASE("moe_lora") {
        AdapterConfig cfg;
        cfg.kind = AdapterKind::MoELoRA;
        cfg.rank = 2;
        cfg.alpha = 4.0;
        cfg.num_experts = 2;
        cfg.task_embed_dim = 4;
        cfg.num_tasks = 3;
        MoELoRALayer layer = MoELoRALayer::init(d, k, cfg, rng);
        randomize_moe(layer, rng);
        check_params(layer.parameters(), [&]() { return mean(gelu(moe_lora_forward(x, ids, W, layer))); });
    }
}

TEST_CASE("count_trainable reproduces reported budgets") {
    CountDims dims;
    dims.d = 4096;
    dims.k = 4096;
    dims.matrices_per_block = 4;
    dims.blocks = 32;
    dims.base_param_count = 6.74e9;

    AdapterConfig mtl;
    mtl.kind = AdapterKind::MTL_LoRA;
    mtl.rank = 8;
    mtl.alpha = 16;
    mtl.n_up = 3;
    mtl.num_tasks = 8;
    auto mtl_count = count_trainable(mtl, dims);
    CHECK(mtl_count.count == 16845824);
    CHECK(std::abs(mtl_count.percent - 0.25) < 0.03);

    AdapterConfig lora;
    lora.kind = AdapterKind::LoRA;
    lora.rank = 8;
    auto lora_count = count_trainable(lora, dims);
    CHECK(lora_count.count == 8388608);
    CHECK(std::abs(lora_count.percent - 0.12) < 0.02);

    AdapterConfig multi;
    multi.kind = AdapterKind::MultiLoRA;
    multi.rank = 8;
    multi.num_lora_modules = 3;
    auto multi_count = count_trainable(multi, dims);
    CHECK(multi_count.count == 25166208);
    CHECK(std::abs(multi_count.percent - 0.38) < 0.05);

    AdapterConfig moe;
    moe.kind = AdapterKind::MoELoRA;
    moe.rank = 16;
    moe.num_experts = 8;
    moe.task_embed_dim = 64;
    moe.num_tasks = 8;
    auto moe_count = count_trainable(moe, dims);
    CHECK(std::abs(moe_count.percent - 0.25) < 0.03);

    AdapterConfig invalid;
    invalid.rank = 0;
    CHECK_THROWS_AS(count_trainable(invalid, dims), std::invalid_argument);
}

TEST_CASE("count_trainable is additive over blocks and matrices") {
    for (AdapterKind kind : {AdapterKind::LoRA, AdapterKind::MTL_LoRA, AdapterKind::MultiLoRA,
                             AdapterKind::MoELoRA}) {
        AdapterConfig cfg;
        cfg.kind = kind;
        cfg.rank = 4;
        cfg.num_experts = 2;
        cfg.task_embed_dim = 8;
        cfg.num_tasks = 3;
        CountDims unit{16, 16, 1, 1, 0.0, 0};
        CountDims many{16, 16, 4, 5, 0.0, 0};
        const std::size_t global = kind == AdapterKind::MoELoRA ? cfg.num_tasks * cfg.task_embed_dim : 0;
        const std::size_t per_matrix = count_trainable(cfg, unit).count - global;
        CHECK(count_trainable(cfg, many).count == per_matrix * 20 + global);
    }
}

TEST_CASE("analytic count matches a constructed layer's parameter elements") {
    std::mt19937_64 rng(13);
    const std::size_t d = 10, k = 8;
    CountDims dims{d, k, 1, 1, 0.0, 0};

    AdapterConfig mtl;
    mtl.kind = AdapterKind::MTL_LoRA;
    mtl.rank = 3;
    mtl.n_up = 2;
    mtl.num_tasks = 4;
    MTLLoRALayer layer = MTLLoRALayer::init(d, k, mtl, rng);
    std::size_t actual = 0;
    for (const auto& p : layer.parameters()) actual += p.tensor.size();
    CHECK(actual == count_trainable(mtl, dims).count);

    AdapterConfig moe;
    moe.kind = AdapterKind::MoELoRA;
    moe.rank = 4;
    moe.num_experts = 2;
    moe.task_embed_dim = 6;
    moe.num_tasks = 3;
    MoELoRALayer moe_layer = MoELoRALayer::init(d, k, moe, rng);
    actual = 0;
    for (const auto& p : moe_layer.parameters()) actual += p.tensor.size();
    CHECK(actual == count_trainable(moe, dims).count);
}

TEST_CASE("ablation flags control trainability") {
    std::mt19937_64 rng(14);
    AdapterConfig cfg;
    cfg.kind = AdapterKind::MTL_LoRA;
    cfg.rank = 2;
    cfg.n_up = 3;
    cfg.num_tasks = 2;
    cfg.freeze_lambda_identity = true;
    MTLLoRALayer layer = MTLLoRALayer::init(6, 6, cfg, rng);
    for (const auto& p : layer.parameters()) {
        CHECK(p.name.find("Lambda") == std::string::npos);
    }
    CHECK_FALSE(layer.Lambda[0].requires_grad());

    AdapterConfig uw = cfg;
    uw.freeze_lambda_identity = false;
    uw.uniform_weights = true;
    MTLLoRALayer uniform = MTLLoRALayer::init(6, 6, uw, rng);
    for (const auto& p : uniform.parameters()) {
        CHECK(p.name != "w_table");
    }
    Tensor w = mtl_routing_weights(uniform, 0);
    for (double v : w.values()) {
        CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    }
}
