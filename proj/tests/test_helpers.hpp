#pragma once

#include <random>

#include "mtladapt/rng.hpp"
#include "mtladapt/tensor.hpp"

namespace mtltest {

inline mtladapt::Tensor random_tensor(mtladapt::Shape shape, std::mt19937_64& rng,
                                      bool requires_grad = false, double stddev = 1.0) {
    auto t = mtladapt::Tensor::zeros(std::move(shape), requires_grad);
    for (auto& v : t.values()) {
        v = mtladapt::gaussian_double(rng, 0.0, stddev);
    }
    return t;
}

// normalized gradient-check error: |a - b| / max(1, |a|, |b|)
inline double grad_rel_err(const mtladapt::Tensor& analytic, const mtladapt::Tensor& numeric) {
    double worst = 0.0;
    auto a = analytic.values();
    auto b = numeric.values();
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

inline double max_abs_diff(const mtladapt::Tensor& a, const mtladapt::Tensor& b) {
    double worst = 0.0;
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) {
        worst = std::max(worst, std::abs(av[i] - bv[i]));
    }
    return worst;
}

inline bool bitwise_equal(const mtladapt::Tensor& a, const mtladapt::Tensor& b) {
    auto av = a.values();
    auto bv = b.values();
    if (av.size() != bv.size()) return false;
    for (std::size_t i = 0; i < av.size(); ++i) {
        if (av[i] != bv[i]) return false;
    }
    return true;
}

}  // namespace mtltest
