#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mtladapt {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

namespace detail {

// One node of the compute graph. Produced tensors keep shared ownership of
// their inputs so the graph stays alive until the last handle is dropped.
struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // same length as values, zero until backward
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;  // reads own grad, accumulates into parents
};

}  // namespace detail

// Dense row-major f64 tensor with reverse-mode autodiff. Value-semantic
// handle over a shared graph node; copies alias the same storage.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor identity(std::size_t n, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;
    std::size_t dim(std::size_t i) const { return shape().at(i); }

    std::span<double> values();
    std::span<const double> values() const;
    std::span<double> grad();
    std::span<const double> grad() const;

    double& operator()(std::size_t i);
    double& operator()(std::size_t i, std::size_t j);
    double& operator()(std::size_t i, std::size_t j, std::size_t k);
    double operator()(std::size_t i) const;
    double operator()(std::size_t i, std::size_t j) const;
    double operator()(std::size_t i, std::size_t j, std::size_t k) const;

    // value of a 1-element tensor
    double scalar() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool v);

    void zero_grad();
    void fill(double v);

    // deep copy of values only; detached leaf
    Tensor detach_copy() const;

    const char* op() const;

    std::shared_ptr<detail::TensorNode> node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// Scoped switch that disables graph recording (inference / oracle evaluation).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// --- core ops -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]·[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]·[n,k]ᵀ
Tensor transpose(const Tensor& a);                   // rank-2

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scalar_mul(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor mean(const Tensor& a);  // scalar
Tensor sum(const Tensor& a);   // scalar

// out_i = exp(v_i/tau) / sum_j exp(v_j/tau), stabilized by max subtraction
Tensor softmax_with_temperature(const Tensor& v, double tau);
// row-wise softmax of a rank-2 tensor (temperature 1); causal restricts row i
// to columns 0..i (decoder-style mask), masked entries get probability 0
Tensor softmax_rows(const Tensor& m, bool causal = false);
// normalize over the last dimension: (x - mu) / sqrt(var + eps)
Tensor layer_norm_rows(const Tensor& x, double eps = 1e-5);

// mean negative log-softmax of the true class over the batch
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);

// --- shape / indexing ops ---------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor select_batch(const Tensor& x3, std::size_t b);         // [B,S,D] -> [S,D]
Tensor stack_batch(const std::vector<Tensor>& mats);          // inverse of select_batch
Tensor gather_rows(const Tensor& x2, const std::vector<std::size_t>& rows);
// assemble [n_rows, cols] from row groups; uncovered rows stay zero
Tensor scatter_rows(const std::vector<Tensor>& groups,
                    const std::vector<std::vector<std::size_t>>& indices,
                    std::size_t n_rows);
Tensor row(const Tensor& m, std::size_t i);   // rank-2 -> rank-1 view of row i
Tensor mean_over_seq(const Tensor& x3);       // [B,S,D] -> [B,D]
Tensor add_row_broadcast(const Tensor& x2, const Tensor& bias);
// sum_i w_i * xs_i for same-shaped tensors, w rank-1 of matching length
Tensor weighted_sum(const std::vector<Tensor>& xs, const Tensor& w);

// --- autodiff ----------------------------------------------------------------

// Reverse pass from a scalar loss; accumulates into .grad of every reachable
// tensor that requires grad. Grads add across calls; zero explicitly.
void backward(const Tensor& loss);

// Central-difference gradient oracle: (f(x+eps e_i) - f(x-eps e_i)) / (2 eps).
// Restores x afterwards. f must not retain references into x.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, Tensor& x, double eps);

// --- raw gemm kernels (used by ops and by the latency benchmark) -------------

namespace detail {
void gemm_nn_acc(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n);
void gemm_nt_acc(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n);  // c[m,n] += a[m,k]·b[n,k]ᵀ
void gemm_tn_acc(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n);  // c[k,n] += a[m,k]ᵀ·b[m,n]
}  // namespace detail

}  // namespace mtladapt
