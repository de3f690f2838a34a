#include "mtladapt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace mtladapt {

namespace {

thread_local bool g_grad_enabled = true;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

void validate_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > 3) {
        throw std::invalid_argument("tensor shape must have rank 1..3, got " + shape_to_string(shape));
    }
    for (std::size_t d : shape) {
        if (d == 0) {
            throw std::invalid_argument("tensor shape has zero dimension: " + shape_to_string(shape));
        }
    }
}

std::shared_ptr<detail::TensorNode> make_leaf(Shape shape, bool requires_grad) {
    validate_shape(shape);
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    const std::size_t n = shape_numel(node->shape);
    node->values.assign(n, 0.0);
    node->grad.assign(n, 0.0);
    node->requires_grad = requires_grad;
    return node;
}

// Derived node; records parents and the backward rule only when recording is
// on and at least one input requires grad.
Tensor make_op(const char* op, Shape shape, const std::vector<Tensor>& inputs,
               std::function<void(detail::TensorNode&)> backward_fn) {
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    const std::size_t n = shape_numel(node->shape);
    node->values.assign(n, 0.0);
    node->grad.assign(n, 0.0);
    node->op = op;
    bool needs = false;
    for (const Tensor& t : inputs) {
        needs = needs || t.requires_grad();
    }
    if (needs && g_grad_enabled) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (const Tensor& t : inputs) {
            node->parents.push_back(t.node());
        }
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch: " + shape_to_string(a.shape()) +
                                    " vs " + shape_to_string(b.shape()));
    }
}

void check_rank(const char* op, const Tensor& t, std::size_t rank) {
    if (t.rank() != rank) {
        throw std::invalid_argument(std::string(op) + ": expected rank-" + std::to_string(rank) +
                                    " tensor, got " + shape_to_string(t.shape()));
    }
}

// elementwise op with backward dy/dx supplied per entry
template <typename Fwd, typename Bwd>
Tensor unary_elementwise(const char* op, const Tensor& a, Fwd fwd, Bwd dydx) {
    Tensor out = make_op(op, a.shape(), {a}, [a, dydx](detail::TensorNode& node) {
        if (!a.requires_grad()) return;
        auto ag = a.node()->grad.data();
        const auto av = a.node()->values.data();
        for (std::size_t i = 0; i < node.grad.size(); ++i) {
            ag[i] += node.grad[i] * dydx(av[i]);
        }
    });
    const auto av = a.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < av.size(); ++i) {
        ov[i] = fwd(av[i]);
    }
    return out;
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// --- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return Tensor(make_leaf(std::move(shape), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t(make_leaf(std::move(shape), requires_grad));
    std::fill(t.node_->values.begin(), t.node_->values.end(), value);
    return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
    Tensor t(make_leaf(std::move(shape), requires_grad));
    if (values.size() != t.size()) {
        throw std::invalid_argument("from_values: " + std::to_string(values.size()) +
                                    " values for shape " + shape_to_string(t.shape()));
    }
    t.node_->values = std::move(values);
    return t;
}

Tensor Tensor::identity(std::size_t n, bool requires_grad) {
    Tensor t = zeros({n, n}, requires_grad);
    for (std::size_t i = 0; i < n; ++i) {
        t(i, i) = 1.0;
    }
    return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->values.size(); }

std::span<double> Tensor::values() { return node_->values; }
std::span<const double> Tensor::values() const { return node_->values; }
std::span<double> Tensor::grad() { return node_->grad; }
std::span<const double> Tensor::grad() const { return node_->grad; }

double& Tensor::operator()(std::size_t i) { return node_->values[i]; }
double& Tensor::operator()(std::size_t i, std::size_t j) {
    return node_->values[i * node_->shape[1] + j];
}
double& Tensor::operator()(std::size_t i, std::size_t j, std::size_t k) {
    return node_->values[(i * node_->shape[1] + j) * node_->shape[2] + k];
}
double Tensor::operator()(std::size_t i) const { return node_->values[i]; }
double Tensor::operator()(std::size_t i, std::size_t j) const {
    return node_->values[i * node_->shape[1] + j];
}
double Tensor::operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return node_->values[(i * node_->shape[1] + j) * node_->shape[2] + k];
}

double Tensor::scalar() const {
    if (size() != 1) {
        throw std::invalid_argument("scalar(): tensor has shape " + shape_to_string(shape()));
    }
    return node_->values[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
}

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

void Tensor::fill(double v) { std::fill(node_->values.begin(), node_->values.end(), v); }

Tensor Tensor::detach_copy() const {
    Tensor t(make_leaf(node_->shape, false));
    t.node_->values = node_->values;
    return t;
}

const char* Tensor::op() const { return node_->op; }

// --- grad mode ----------------------------------------------------------------

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// --- gemm kernels ---------------------------------------------------------------

namespace detail {

void gemm_nn_acc(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            const double av = arow[t];
            const double* brow = b + t * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

void gemm_nt_acc(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) {
                acc += arow[t] * brow[t];
            }
            crow[j] += acc;
        }
    }
}

void gemm_tn_acc(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t t = 0; t < m; ++t) {
        const double* arow = a + t * k;
        const double* brow = b + t * n;
        for (std::size_t i = 0; i < k; ++i) {
            const double av = arow[i];
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

}  // namespace detail

// --- matmul ---------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank("matmul", a, 2);
    check_rank("matmul", b, 2);
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw std::invalid_argument("matmul: inner dimensions differ: " + shape_to_string(a.shape()) +
                                    " vs " + shape_to_string(b.shape()));
    }
    Tensor out = make_op("matmul", {m, n}, {a, b}, [a, b, m, k, n](detail::TensorNode& node) {
        if (a.requires_grad()) {
            detail::gemm_nt_acc(node.grad.data(), b.node()->values.data(), a.node()->grad.data(), m, n, k);
        }
        if (b.requires_grad()) {
            detail::gemm_tn_acc(a.node()->values.data(), node.grad.data(), b.node()->grad.data(), m, k, n);
        }
    });
    detail::gemm_nn_acc(a.values().data(), b.values().data(), out.values().data(), m, k, n);
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    check_rank("matmul_nt", a, 2);
    check_rank("matmul_nt", b, 2);
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) {
        throw std::invalid_argument("matmul_nt: inner dimensions differ: " + shape_to_string(a.shape()) +
                                    " vs " + shape_to_string(b.shape()) + " (transposed)");
    }
    Tensor out = make_op("matmul_nt", {m, n}, {a, b}, [a, b, m, k, n](detail::TensorNode& node) {
        if (a.requires_grad()) {
            detail::gemm_nn_acc(node.grad.data(), b.node()->values.data(), a.node()->grad.data(), m, n, k);
        }
        if (b.requires_grad()) {
            detail::gemm_tn_acc(node.grad.data(), a.node()->values.data(), b.node()->grad.data(), m, n, k);
        }
    });
    detail::gemm_nt_acc(a.values().data(), b.values().data(), out.values().data(), m, k, n);
    return out;
}

Tensor transpose(const Tensor& a) {
    check_rank("transpose", a, 2);
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out = make_op("transpose", {n, m}, {a}, [a, m, n](detail::TensorNode& node) {
        if (!a.requires_grad()) return;
        auto ag = a.node()->grad.data();
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
                ag[j * n + i] += node.grad[i * m + j];
            }
        }
    });
    const auto av = a.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            ov[j * m + i] = av[i * n + j];
        }
    }
    return out;
}

// --- elementwise ------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    Tensor out = make_op("add", a.shape(), {a, b}, [a, b](detail::TensorNode& node) {
        if (a.requires_grad()) {
            auto ag = a.node()->grad.data();
            for (std::size_t i = 0; i < node.grad.size(); ++i) ag[i] += node.grad[i];
        }
        if (b.requires_grad()) {
            auto bg = b.node()->grad.data();
            for (std::size_t i = 0; i < node.grad.size(); ++i) bg[i] += node.grad[i];
        }
    });
    const auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    Tensor out = make_op("sub", a.shape(), {a, b}, [a, b](detail::TensorNode& node) {
        if (a.requires_grad()) {
            auto ag = a.node()->grad.data();
            for (std::size_t i = 0; i < node.grad.size(); ++i) ag[i] += node.grad[i];
        }
        if (b.requires_grad()) {
            auto bg = b.node()->grad.data();
            for (std::size_t i = 0; i < node.grad.size(); ++i) bg[i] -= node.grad[i];
        }
    });
    const auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    Tensor out = make_op("mul", a.shape(), {a, b}, [a, b](detail::TensorNode& node) {
        if (a.requires_grad()) {
            auto ag = a.node()->grad.data();
            const auto bv = b.node()->values.data();
            for (std::size_t i = 0; i < node.grad.size(); ++i) ag[i] += node.grad[i] * bv[i];
        }
        if (b.requires_grad()) {
            auto bg = b.node()->grad.data();
            const auto av = a.node()->values.data();
            for (std::size_t i = 0; i < node.grad.size(); ++i) bg[i] += node.grad[i] * av[i];
        }
    });
    const auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    return out;
}

Tensor scalar_mul(const Tensor& a, double c) {
    return unary_elementwise("scalar_mul", a,
                             [c](double x) { return c * x; },
                             [c](double) { return c; });
}

Tensor relu(const Tensor& a) {
    return unary_elementwise("relu", a,
                             [](double x) { return x > 0.0 ? x : 0.0; },
                             [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
    return unary_elementwise("gelu", a,
                             [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
                             [](double x) {
                                 const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                                 const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                                 return cdf + x * pdf;
                             });
}

Tensor log(const Tensor& a) {
    return unary_elementwise("log", a,
                             [](double x) { return std::log(x); },
                             [](double x) { return 1.0 / x; });
}

Tensor exp(const Tensor& a) {
    return unary_elementwise("exp", a,
                             [](double x) { return std::exp(x); },
                             [](double x) { return std::exp(x); });
}

Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.size());
    Tensor out = make_op("mean", {1}, {a}, [a, inv](detail::TensorNode& node) {
        if (!a.requires_grad()) return;
        const double g = node.grad[0] * inv;
        auto ag = a.node()->grad.data();
        for (std::size_t i = 0; i < a.size(); ++i) ag[i] += g;
    });
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    out(0) = acc * inv;
    return out;
}

Tensor sum(const Tensor& a) {
    Tensor out = make_op("sum", {1}, {a}, [a](detail::TensorNode& node) {
        if (!a.requires_grad()) return;
        const double g = node.grad[0];
        auto ag = a.node()->grad.data();
        for (std::size_t i = 0; i < a.size(); ++i) ag[i] += g;
    });
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    out(0) = acc;
    return out;
}

// --- softmax family ------------------------------------------------------------------

Tensor softmax_with_temperature(const Tensor& v, double tau) {
    check_rank("softmax_with_temperature", v, 1);
    if (!(tau > 0.0)) {
        throw std::invalid_argument("softmax_with_temperature: temperature must be positive, got " +
                                    std::to_string(tau));
    }
    const std::size_t n = v.size();
    Tensor out = make_op("softmax_t", {n}, {v}, [v, tau, n](detail::TensorNode& node) {
        if (!v.requires_grad()) return;
        const double* s = node.values.data();
        const double* g = node.grad.data();
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += g[i] * s[i];
        auto vg = v.node()->grad.data();
        for (std::size_t i = 0; i < n; ++i) {
            vg[i] += s[i] * (g[i] - dot) / tau;
        }
    });
    const auto vv = v.values();
    auto ov = out.values();
    double mx = vv[0];
    for (double x : vv) mx = std::max(mx, x);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ov[i] = std::exp((vv[i] - mx) / tau);
        z += ov[i];
    }
    for (std::size_t i = 0; i < n; ++i) ov[i] /= z;
    return out;
}

Tensor softmax_rows(const Tensor& m, bool causal) {
    check_rank("softmax_rows", m, 2);
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    Tensor out = make_op("softmax_rows", m.shape(), {m}, [m, rows, cols](detail::TensorNode& node) {
        if (!m.requires_grad()) return;
        // masked entries carry s=0, so the same jacobian covers both variants
        auto mg = m.node()->grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* s = node.values.data() + r * cols;
            const double* g = node.grad.data() + r * cols;
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) dot += g[j] * s[j];
            double* row_g = mg + r * cols;
            for (std::size_t j = 0; j < cols; ++j) {
                row_g[j] += s[j] * (g[j] - dot);
            }
        }
    });
    const auto mv = m.values();
    auto ov = out.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = mv.data() + r * cols;
        double* y = ov.data() + r * cols;
        const std::size_t limit = causal ? std::min(r + 1, cols) : cols;
        double mx = x[0];
        for (std::size_t j = 1; j < limit; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < limit; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (std::size_t j = 0; j < limit; ++j) y[j] /= z;
        for (std::size_t j = limit; j < cols; ++j) y[j] = 0.0;
    }
    return out;
}

Tensor layer_norm_rows(const Tensor& x, double eps) {
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.size() / cols;
    // saved for backward: normalized values and 1/std per row
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    Tensor out = make_op("layer_norm", x.shape(), {x}, [x, xhat, inv_std, rows, cols](detail::TensorNode& node) {
        if (!x.requires_grad()) return;
        auto xg = x.node()->grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* g = node.grad.data() + r * cols;
            const double* xh = xhat->data() + r * cols;
            const double is = (*inv_std)[r];
            double g_mean = 0.0, gx_mean = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
                g_mean += g[j];
                gx_mean += g[j] * xh[j];
            }
            g_mean /= static_cast<double>(cols);
            gx_mean /= static_cast<double>(cols);
            double* row_g = xg + r * cols;
            for (std::size_t j = 0; j < cols; ++j) {
                row_g[j] += is * (g[j] - g_mean - xh[j] * gx_mean);
            }
        }
    });
    const auto xv = x.values();
    auto ov = out.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * cols;
        double mu = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mu += in[j];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double d = in[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        double* y = ov.data() + r * cols;
        double* xh = xhat->data() + r * cols;
        for (std::size_t j = 0; j < cols; ++j) {
            xh[j] = (in[j] - mu) * is;
            y[j] = xh[j];
        }
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
    check_rank("cross_entropy", logits, 2);
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    if (labels.size() != batch) {
        throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for batch of " + std::to_string(batch));
    }
    for (std::size_t i = 0; i < batch; ++i) {
        if (labels[i] >= classes) {
            throw std::out_of_range("cross_entropy: label " + std::to_string(labels[i]) +
                                    " out of range [0, " + std::to_string(classes) + ")");
        }
    }
    auto probs = std::make_shared<std::vector<double>>(logits.size());
    Tensor out = make_op("cross_entropy", {1}, {logits},
                         [logits, labels, probs, batch, classes](detail::TensorNode& node) {
        if (!logits.requires_grad()) return;
        const double g = node.grad[0] / static_cast<double>(batch);
        auto lg = logits.node()->grad.data();
        for (std::size_t i = 0; i < batch; ++i) {
            const double* p = probs->data() + i * classes;
            double* row = lg + i * classes;
            for (std::size_t j = 0; j < classes; ++j) {
                row[j] += g * (p[j] - (j == labels[i] ? 1.0 : 0.0));
            }
        }
    });
    const auto lv = logits.values();
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
        const double* x = lv.data() + i * classes;
        double* p = probs->data() + i * classes;
        double mx = x[0];
        for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < classes; ++j) {
            p[j] = std::exp(x[j] - mx);
            z += p[j];
        }
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < classes; ++j) p[j] /= z;
        total += lse - x[labels[i]];
    }
    out(0) = total / static_cast<double>(batch);
    return out;
}

// --- shape / indexing --------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
    validate_shape(shape);
    if (shape_numel(shape) != x.size()) {
        throw std::invalid_argument("reshape: cannot view " + shape_to_string(x.shape()) +
                                    " as " + shape_to_string(shape));
    }
    Tensor out = make_op("reshape", std::move(shape), {x}, [x](detail::TensorNode& node) {
        if (!x.requires_grad()) return;
        auto xg = x.node()->grad.data();
        for (std::size_t i = 0; i < node.grad.size(); ++i) xg[i] += node.grad[i];
    });
    std::copy(x.values().begin(), x.values().end(), out.values().begin());
    return out;
}

Tensor select_batch(const Tensor& x3, std::size_t b) {
    check_rank("select_batch", x3, 3);
    if (b >= x3.dim(0)) {
        throw std::out_of_range("select_batch: index " + std::to_string(b) + " out of " +
                                std::to_string(x3.dim(0)));
    }
    const std::size_t s = x3.dim(1), d = x3.dim(2);
    const std::size_t offset = b * s * d;
    Tensor out = make_op("select_batch", {s, d}, {x3}, [x3, offset](detail::TensorNode& node) {
        if (!x3.requires_grad()) return;
        auto xg = x3.node()->grad.data() + offset;
        for (std::size_t i = 0; i < node.grad.size(); ++i) xg[i] += node.grad[i];
    });
    std::copy(x3.values().begin() + static_cast<std::ptrdiff_t>(offset),
              x3.values().begin() + static_cast<std::ptrdiff_t>(offset + s * d),
              out.values().begin());
    return out;
}

Tensor stack_batch(const std::vector<Tensor>& mats) {
    if (mats.empty()) {
        throw std::invalid_argument("stack_batch: empty input");
    }
    for (const Tensor& m : mats) {
        check_rank("stack_batch", m, 2);
        check_same_shape("stack_batch", mats.front(), m);
    }
    const std::size_t bsz = mats.size(), s = mats[0].dim(0), d = mats[0].dim(1);
    Tensor out = make_op("stack_batch", {bsz, s, d}, mats, [mats, s, d](detail::TensorNode& node) {
        const std::size_t block = s * d;
        for (std::size_t b = 0; b < mats.size(); ++b) {
            if (!mats[b].requires_grad()) continue;
            auto mg = mats[b].node()->grad.data();
            const double* g = node.grad.data() + b * block;
            for (std::size_t i = 0; i < block; ++i) mg[i] += g[i];
        }
    });
    auto ov = out.values();
    for (std::size_t b = 0; b < bsz; ++b) {
        std::copy(mats[b].values().begin(), mats[b].values().end(), ov.begin() + static_cast<std::ptrdiff_t>(b * s * d));
    }
    return out;
}

Tensor gather_rows(const Tensor& x2, const std::vector<std::size_t>& rows) {
    check_rank("gather_rows", x2, 2);
    const std::size_t cols = x2.dim(1);
    for (std::size_t r : rows) {
        if (r >= x2.dim(0)) {
            throw std::out_of_range("gather_rows: row " + std::to_string(r) + " out of " +
                                    std::to_string(x2.dim(0)));
        }
    }
    Tensor out = make_op("gather_rows", {rows.size(), cols}, {x2}, [x2, rows, cols](detail::TensorNode& node) {
        if (!x2.requires_grad()) return;
        auto xg = x2.node()->grad.data();
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const double* g = node.grad.data() + i * cols;
            double* dst = xg + rows[i] * cols;
            for (std::size_t j = 0; j < cols; ++j) dst[j] += g[j];
        }
    });
    const auto xv = x2.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy(xv.begin() + static_cast<std::ptrdiff_t>(rows[i] * cols),
                  xv.begin() + static_cast<std::ptrdiff_t>((rows[i] + 1) * cols),
                  ov.begin() + static_cast<std::ptrdiff_t>(i * cols));
    }
    return out;
}

Tensor scatter_rows(const std::vector<Tensor>& groups,
                    const std::vector<std::vector<std::size_t>>& indices,
                    std::size_t n_rows) {
    if (groups.size() != indices.size()) {
        throw std::invalid_argument("scatter_rows: " + std::to_string(groups.size()) + " groups vs " +
                                    std::to_string(indices.size()) + " index lists");
    }
    if (groups.empty()) {
        throw std::invalid_argument("scatter_rows: empty input");
    }
    const std::size_t cols = groups[0].dim(1);
    for (std::size_t g = 0; g < groups.size(); ++g) {
        check_rank("scatter_rows", groups[g], 2);
        if (groups[g].dim(1) != cols || groups[g].dim(0) != indices[g].size()) {
            throw std::invalid_argument("scatter_rows: group " + std::to_string(g) + " shape " +
                                        shape_to_string(groups[g].shape()) + " does not match " +
                                        std::to_string(indices[g].size()) + " indices");
        }
        for (std::size_t r : indices[g]) {
            if (r >= n_rows) {
                throw std::out_of_range("scatter_rows: target row " + std::to_string(r) + " out of " +
                                        std::to_string(n_rows));
            }
        }
    }
    Tensor out = make_op("scatter_rows", {n_rows, cols}, groups, [groups, indices, cols](detail::TensorNode& node) {
        for (std::size_t g = 0; g < groups.size(); ++g) {
            if (!groups[g].requires_grad()) continue;
            auto gg = groups[g].node()->grad.data();
            for (std::size_t i = 0; i < indices[g].size(); ++i) {
                const double* src = node.grad.data() + indices[g][i] * cols;
                double* dst = gg + i * cols;
                for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j];
            }
        }
    });
    auto ov = out.values();
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto gv = groups[g].values();
        for (std::size_t i = 0; i < indices[g].size(); ++i) {
            double* dst = ov.data() + indices[g][i] * cols;
            const double* src = gv.data() + i * cols;
            for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j];
        }
    }
    return out;
}

Tensor row(const Tensor& m, std::size_t i) {
    check_rank("row", m, 2);
    if (i >= m.dim(0)) {
        throw std::out_of_range("row: index " + std::to_string(i) + " out of " + std::to_string(m.dim(0)));
    }
    const std::size_t cols = m.dim(1);
    Tensor out = make_op("row", {cols}, {m}, [m, i, cols](detail::TensorNode& node) {
        if (!m.requires_grad()) return;
        auto mg = m.node()->grad.data() + i * cols;
        for (std::size_t j = 0; j < cols; ++j) mg[j] += node.grad[j];
    });
    const auto mv = m.values();
    std::copy(mv.begin() + static_cast<std::ptrdiff_t>(i * cols),
              mv.begin() + static_cast<std::ptrdiff_t>((i + 1) * cols), out.values().begin());
    return out;
}

Tensor mean_over_seq(const Tensor& x3) {
    check_rank("mean_over_seq", x3, 3);
    const std::size_t bsz = x3.dim(0), s = x3.dim(1), d = x3.dim(2);
    const double inv = 1.0 / static_cast<double>(s);
    Tensor out = make_op("mean_over_seq", {bsz, d}, {x3}, [x3, bsz, s, d, inv](detail::TensorNode& node) {
        if (!x3.requires_grad()) return;
        auto xg = x3.node()->grad.data();
        for (std::size_t b = 0; b < bsz; ++b) {
            const double* g = node.grad.data() + b * d;
            for (std::size_t p = 0; p < s; ++p) {
                double* dst = xg + (b * s + p) * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += g[j] * inv;
            }
        }
    });
    const auto xv = x3.values();
    auto ov = out.values();
    for (std::size_t b = 0; b < bsz; ++b) {
        double* o = ov.data() + b * d;
        for (std::size_t p = 0; p < s; ++p) {
            const double* src = xv.data() + (b * s + p) * d;
            for (std::size_t j = 0; j < d; ++j) o[j] += src[j] * inv;
        }
    }
    return out;
}

Tensor add_row_broadcast(const Tensor& x2, const Tensor& bias) {
    check_rank("add_row_broadcast", x2, 2);
    check_rank("add_row_broadcast", bias, 1);
    const std::size_t rows = x2.dim(0), cols = x2.dim(1);
    if (bias.size() != cols) {
        throw std::invalid_argument("add_row_broadcast: bias " + shape_to_string(bias.shape()) +
                                    " vs columns of " + shape_to_string(x2.shape()));
    }
    Tensor out = make_op("add_row_broadcast", x2.shape(), {x2, bias}, [x2, bias, rows, cols](detail::TensorNode& node) {
        if (x2.requires_grad()) {
            auto xg = x2.node()->grad.data();
            for (std::size_t i = 0; i < node.grad.size(); ++i) xg[i] += node.grad[i];
        }
        if (bias.requires_grad()) {
            auto bg = bias.node()->grad.data();
            for (std::size_t i = 0; i < rows; ++i) {
                const double* g = node.grad.data() + i * cols;
                for (std::size_t j = 0; j < cols; ++j) bg[j] += g[j];
            }
        }
    });
    const auto xv = x2.values(), bv = bias.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            ov[i * cols + j] = xv[i * cols + j] + bv[j];
        }
    }
    return out;
}

Tensor weighted_sum(const std::vector<Tensor>& xs, const Tensor& w) {
    if (xs.empty()) {
        throw std::invalid_argument("weighted_sum: empty input");
    }
    check_rank("weighted_sum", w, 1);
    if (w.size() != xs.size()) {
        throw std::invalid_argument("weighted_sum: " + std::to_string(xs.size()) + " tensors vs " +
                                    std::to_string(w.size()) + " weights");
    }
    for (const Tensor& x : xs) {
        check_same_shape("weighted_sum", xs.front(), x);
    }
    std::vector<Tensor> inputs = xs;
    inputs.push_back(w);
    Tensor out = make_op("weighted_sum", xs[0].shape(), inputs, [xs, w](detail::TensorNode& node) {
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const double wi = w.node()->values[i];
            if (xs[i].requires_grad()) {
                auto xg = xs[i].node()->grad.data();
                for (std::size_t j = 0; j < node.grad.size(); ++j) xg[j] += wi * node.grad[j];
            }
            if (w.requires_grad()) {
                const auto xv = xs[i].node()->values.data();
                double acc = 0.0;
                for (std::size_t j = 0; j < node.grad.size(); ++j) acc += node.grad[j] * xv[j];
                w.node()->grad[i] += acc;
            }
        }
    });
    auto ov = out.values();
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double wi = w(i);
        const auto xv = xs[i].values();
        for (std::size_t j = 0; j < ov.size(); ++j) ov[j] += wi * xv[j];
    }
    return out;
}

// --- backward ------------------------------------------------------------------------

void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got " + shape_to_string(loss.shape()));
    }
    auto root = loss.node();
    if (!root->requires_grad) {
        root->grad[0] += 1.0;
        return;
    }
    // iterative post-order DFS -> topological order
    std::vector<detail::TensorNode*> order;
    std::unordered_set<detail::TensorNode*> visited;
    struct Frame {
        detail::TensorNode* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({root.get(), 0});
    visited.insert(root.get());
    while (!stack.empty()) {
        Frame& top = stack.back();
        if (top.next_parent < top.node->parents.size()) {
            detail::TensorNode* p = top.node->parents[top.next_parent++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(top.node);
            stack.pop_back();
        }
    }
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) {
            (*it)->backward_fn(**it);
        }
    }
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, Tensor& x, double eps) {
    if (!(eps > 0.0)) {
        throw std::invalid_argument("finite_diff_grad: eps must be positive, got " + std::to_string(eps));
    }
    NoGradGuard no_grad;
    Tensor g = Tensor::zeros(x.shape());
    auto xv = x.values();
    auto gv = g.values();
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double saved = xv[i];
        xv[i] = saved + eps;
        const double f_plus = f(x);
        xv[i] = saved - eps;
        const double f_minus = f(x);
        xv[i] = saved;
        gv[i] = (f_plus - f_minus) / (2.0 * eps);
    }
    return g;
}

}  // namespace mtladapt
