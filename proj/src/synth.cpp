#include "mtladapt/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "mtladapt/rng.hpp"

namespace mtladapt {

namespace {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

Tensor gaussian_tensor(Shape shape, std::mt19937_64& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.values()) {
        v = gaussian_double(rng);
    }
    return t;
}

double sigmoid(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace

Tensor SyntheticTaskFamily::rule(std::size_t task) const {
    Tensor r = Tensor::zeros({classes, dim});
    const auto s = shared_map.values();
    const auto m = task_maps.at(task).values();
    auto out = r.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = (1.0 - conflict) * s[i] + conflict * m[i];
    }
    return r;
}

ConflictDataset gen_conflict_tasks(std::size_t num_tasks, std::size_t dim, std::size_t classes,
                                   std::size_t n_train_per_task, std::size_t n_test_per_task,
                                   double conflict, std::uint64_t seed) {
    if (num_tasks < 2) {
        throw std::invalid_argument("gen_conflict_tasks: need at least 2 tasks");
    }
    if (dim < 1 || classes < 2 || n_train_per_task < 1) {
        throw std::invalid_argument("gen_conflict_tasks: degenerate dimensions");
    }
    if (conflict < 0.0 || conflict > 1.0) {
        throw std::invalid_argument("gen_conflict_tasks: conflict must be in [0, 1], got " +
                                    std::to_string(conflict));
    }
    std::mt19937_64 rng(seed);
    ConflictDataset out;
    out.family.num_tasks = num_tasks;
    out.family.dim = dim;
    out.family.classes = classes;
    out.family.conflict = conflict;
    out.family.seed = seed;
    out.family.shared_map = gaussian_tensor({classes, dim}, rng);
    out.family.task_maps.reserve(num_tasks);
    for (std::size_t t = 0; t < num_tasks; ++t) {
        out.family.task_maps.push_back(gaussian_tensor({classes, dim}, rng));
    }

    const std::size_t n_train = num_tasks * n_train_per_task;
    const std::size_t n_test = num_tasks * n_test_per_task;
    out.train.inputs = Tensor::zeros({n_train, dim});
    out.test.inputs = n_test > 0 ? Tensor::zeros({n_test, dim}) : Tensor();
    std::size_t train_row = 0, test_row = 0;
    for (std::size_t t = 0; t < num_tasks; ++t) {
        const Tensor rule = out.family.rule(t);
        for (std::size_t i = 0; i < n_train_per_task + n_test_per_task; ++i) {
            std::vector<double> x(dim);
            for (auto& v : x) v = gaussian_double(rng);
            std::size_t label = 0;
            double best = -1e300;
            for (std::size_t c = 0; c < classes; ++c) {
                double score = 0.0;
                for (std::size_t j = 0; j < dim; ++j) score += rule(c, j) * x[j];
                if (score > best) {
                    best = score;
                    label = c;
                }
            }
            if (i < n_train_per_task) {
                std::copy(x.begin(), x.end(), out.train.inputs.values().begin() +
                                                  static_cast<std::ptrdiff_t>(train_row * dim));
                out.train.task_ids.push_back(t);
                out.train.labels.push_back(label);
                ++train_row;
            } else {
                std::copy(x.begin(), x.end(), out.test.inputs.values().begin() +
                                                  static_cast<std::ptrdiff_t>(test_row * dim));
                out.test.task_ids.push_back(t);
                out.test.labels.push_back(label);
                ++test_row;
            }
        }
    }
    return out;
}

FeatureTable extract_features(const Model& model, const MultiTaskDataset& data,
                              const FeatureSelector& selector, std::size_t batch_size) {
    const std::size_t block =
        selector.last_block ? model.config().blocks - 1 : selector.block;
    if (block >= model.config().blocks) {
        throw std::invalid_argument("extract_features: block " + std::to_string(block) +
                                    " out of range");
    }
    const bool has_adapter =
        !std::holds_alternative<std::monostate>(model.blocks()[block].slot(selector.matrix));
    if (!has_adapter) {
        throw std::invalid_argument(std::string("extract_features: no adapter attached to ") +
                                    matrix_slot_name(selector.matrix) + " of block " +
                                    std::to_string(block));
    }
    NoGradGuard no_grad;
    const std::size_t n = data.size();
    const std::size_t s = model.config().seq_len;
    FeatureTable table;
    std::size_t feature_dim = 0;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t stop = std::min(n, start + batch_size);
        std::vector<std::size_t> idx(stop - start);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
        Tensor xb = gather_rows(data.inputs, idx);
        std::vector<std::size_t> tb(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) tb[i] = data.task_ids[idx[i]];
        BranchCapture capture;
        capture.block = block;
        capture.matrix = selector.matrix;
        capture.include_base = selector.include_base;
        model.forward(model.pack_inputs(xb), tb, &capture);
        if (!capture.captured.defined()) {
            throw std::runtime_error("extract_features: capture did not run");
        }
        const std::size_t d_out = capture.captured.dim(1);
        if (!table.features.defined()) {
            feature_dim = d_out;
            table.features = Tensor::zeros({n, feature_dim});
        }
        // per-sample mean over the sample's positions
        for (std::size_t i = 0; i < idx.size(); ++i) {
            double* dst = table.features.values().data() + (start + i) * feature_dim;
            for (std::size_t p = 0; p < s; ++p) {
                const double* src = capture.captured.values().data() + (i * s + p) * d_out;
                for (std::size_t j = 0; j < feature_dim; ++j) {
                    dst[j] += src[j] / static_cast<double>(s);
                }
            }
            table.task_ids.push_back(tb[i]);
            table.sample_ids.push_back(start + i);
        }
    }
    return table;
}

std::string feature_csv_header(std::size_t dim) {
    std::string h = "task_id,sample_id";
    for (std::size_t j = 0; j < dim; ++j) {
        h += ",f_" + std::to_string(j);
    }
    return h;
}

void write_feature_csv(const FeatureTable& table, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot open " + path + " for writing");
    }
    const std::size_t dim = table.features.dim(1);
    out << feature_csv_header(dim) << "\n";
    for (std::size_t i = 0; i < table.task_ids.size(); ++i) {
        out << table.task_ids[i] << "," << table.sample_ids[i];
        for (std::size_t j = 0; j < dim; ++j) {
            out << "," << format_double(table.features(i, j));
        }
        out << "\n";
    }
}

ProbeReport linear_probe(const FeatureTable& features, std::uint64_t split_seed) {
    const std::size_t n = features.task_ids.size();
    if (n == 0) {
        throw std::invalid_argument("linear_probe: empty feature table");
    }
    std::size_t num_tasks = 0;
    for (std::size_t t : features.task_ids) num_tasks = std::max(num_tasks, t + 1);
    {
        std::vector<bool> present(num_tasks, false);
        std::size_t distinct = 0;
        for (std::size_t t : features.task_ids) {
            if (!present[t]) {
                present[t] = true;
                ++distinct;
            }
        }
        if (distinct < 2) {
            throw std::invalid_argument("linear_probe: need at least 2 tasks present");
        }
    }
    const std::size_t dim = features.features.dim(1);

    // 4:6 split
    std::mt19937_64 rng(split_seed);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    shuffle_indices(order, rng);
    const std::size_t n_train = std::max<std::size_t>(1, (n * 4) / 10);
    const std::size_t n_test = n - n_train;

    // standardize with train statistics
    std::vector<double> mean(dim, 0.0), scale(dim, 0.0);
    for (std::size_t i = 0; i < n_train; ++i) {
        for (std::size_t j = 0; j < dim; ++j) mean[j] += features.features(order[i], j);
    }
    for (std::size_t j = 0; j < dim; ++j) mean[j] /= static_cast<double>(n_train);
    for (std::size_t i = 0; i < n_train; ++i) {
        for (std::size_t j = 0; j < dim; ++j) {
            const double d = features.features(order[i], j) - mean[j];
            scale[j] += d * d;
        }
    }
    for (std::size_t j = 0; j < dim; ++j) {
        scale[j] = std::sqrt(scale[j] / static_cast<double>(n_train));
        scale[j] = scale[j] > 1e-12 ? 1.0 / scale[j] : 0.0;
    }
    auto standardized = [&](std::size_t row, std::size_t j) {
        return (features.features(row, j) - mean[j]) * scale[j];
    };

    // one-vs-rest logistic classifiers, L2 matched to C = 1
    const double lambda = 1.0 / static_cast<double>(n_train);
    std::vector<std::vector<double>> weights(num_tasks, std::vector<double>(dim, 0.0));
    std::vector<double> biases(num_tasks, 0.0);
    const std::size_t iters = 400;
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, lr = 0.1;
    for (std::size_t cls = 0; cls < num_tasks; ++cls) {
        auto& w = weights[cls];
        double& b = biases[cls];
        std::vector<double> mw(dim, 0.0), vw(dim, 0.0);
        double mb = 0.0, vb = 0.0;
        for (std::size_t it = 1; it <= iters; ++it) {
            std::vector<double> gw(dim, 0.0);
            double gb = 0.0;
            for (std::size_t i = 0; i < n_train; ++i) {
                const std::size_t row = order[i];
                double z = b;
                for (std::size_t j = 0; j < dim; ++j) z += w[j] * standardized(row, j);
                const double err = sigmoid(z) - (features.task_ids[row] == cls ? 1.0 : 0.0);
                for (std::size_t j = 0; j < dim; ++j) gw[j] += err * standardized(row, j);
                gb += err;
            }
            const double inv_n = 1.0 / static_cast<double>(n_train);
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(it));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(it));
            for (std::size_t j = 0; j < dim; ++j) {
                const double g = gw[j] * inv_n + lambda * w[j];
                mw[j] = beta1 * mw[j] + (1.0 - beta1) * g;
                vw[j] = beta2 * vw[j] + (1.0 - beta2) * g * g;
                w[j] -= lr * (mw[j] / bc1) / (std::sqrt(vw[j] / bc2) + eps);
            }
            const double g = gb * inv_n;
            mb = beta1 * mb + (1.0 - beta1) * g;
            vb = beta2 * vb + (1.0 - beta2) * g * g;
            b -= lr * (mb / bc1) / (std::sqrt(vb / bc2) + eps);
        }
    }

    // macro-F1 on the held-out 60%
    std::vector<std::size_t> tp(num_tasks, 0), fp(num_tasks, 0), fn(num_tasks, 0);
    for (std::size_t i = n_train; i < n; ++i) {
        const std::size_t row = order[i];
        std::size_t best = 0;
        double best_score = -1e300;
        for (std::size_t cls = 0; cls < num_tasks; ++cls) {
            double z = biases[cls];
            for (std::size_t j = 0; j < dim; ++j) z += weights[cls][j] * standardized(row, j);
            if (z > best_score) {
                best_score = z;
                best = cls;
            }
        }
        const std::size_t truth = features.task_ids[row];
        if (best == truth) {
            tp[truth] += 1;
        } else {
            fp[best] += 1;
            fn[truth] += 1;
        }
    }
    ProbeReport report;
    report.n_train = n_train;
    report.n_test = n_test;
    report.per_task_f1.resize(num_tasks, 0.0);
    double total = 0.0;
    for (std::size_t t = 0; t < num_tasks; ++t) {
        const double denom = static_cast<double>(2 * tp[t] + fp[t] + fn[t]);
        report.per_task_f1[t] = denom > 0.0 ? 2.0 * static_cast<double>(tp[t]) / denom : 0.0;
        total += report.per_task_f1[t];
    }
    report.macro_f1 = total / static_cast<double>(num_tasks);
    return report;
}

std::string probe_report_json(const ProbeReport& report) {
    nlohmann::json j;
    j["per_task_f1"] = report.per_task_f1;
    j["macro_f1"] = report.macro_f1;
    j["n_train"] = report.n_train;
    j["n_test"] = report.n_test;
    return j.dump(2);
}

}  // namespace mtladapt
