#include "mtladapt/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "mtladapt/rng.hpp"

namespace mtladapt {

const char* const kMetricsCsvHeader = "step,epoch,task,split,loss,accuracy,lr";

namespace {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::string metrics_csv_row(const MetricsRecord& r) {
    return std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + std::to_string(r.task) +
           "," + r.split + "," + format_double(r.loss) + "," + format_double(r.accuracy) + "," +
           format_double(r.lr);
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) {
        throw std::invalid_argument("train config: learning_rate must be positive");
    }
    if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) {
        throw std::invalid_argument("train config: warmup_ratio must be in [0, 1)");
    }
    if (batch_size < 1) {
        throw std::invalid_argument("train config: batch_size must be >= 1");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
        throw std::invalid_argument("train config: betas must be in [0, 1)");
    }
    model.validate();
    if (adapter) {
        effective_adapter()->validate();
    }
}

std::optional<AdapterConfig> TrainConfig::effective_adapter() const {
    if (!adapter) return std::nullopt;
    AdapterConfig a = *adapter;
    a.num_tasks = model.num_tasks;
    if (ablation.freeze_lambda_identity) a.freeze_lambda_identity = true;
    if (ablation.uniform_weights) a.uniform_weights = true;
    if (ablation.tau_override) a.temperature = *ablation.tau_override;
    return a;
}

AdamWOptimizer::AdamWOptimizer(std::vector<NamedParam> params, double beta1, double beta2,
                               double weight_decay, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {
    state_.m.reserve(params_.size());
    state_.v.reserve(params_.size());
    for (const auto& p : params_) {
        state_.m.emplace_back(p.tensor.size(), 0.0);
        state_.v.emplace_back(p.tensor.size(), 0.0);
    }
}

void AdamWOptimizer::step(double lr) {
    state_.step += 1;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(state_.step));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(state_.step));
    for (std::size_t p = 0; p < params_.size(); ++p) {
        auto theta = params_[p].tensor.values();
        auto grad = params_[p].tensor.grad();
        auto& m = state_.m[p];
        auto& v = state_.v[p];
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double g = grad[i];
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            theta[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps_) + weight_decay_ * theta[i]);
        }
    }
}

void AdamWOptimizer::zero_grad() {
    for (auto& p : params_) {
        p.tensor.zero_grad();
    }
}

double lr_schedule(std::size_t step, std::size_t total_steps, double warmup_ratio, double base_lr) {
    if (total_steps == 0) return 0.0;
    if (step > total_steps) {
        throw std::invalid_argument("lr_schedule: step " + std::to_string(step) + " > total " +
                                    std::to_string(total_steps));
    }
    const double warmup_steps = warmup_ratio * static_cast<double>(total_steps);
    const double s = static_cast<double>(step);
    if (warmup_steps > 0.0 && s < warmup_steps) {
        return base_lr * s / warmup_steps;
    }
    const double denom = static_cast<double>(total_steps) - warmup_steps;
    if (denom <= 0.0) return 0.0;
    return base_lr * (static_cast<double>(total_steps) - s) / denom;
}

std::vector<TaskEval> evaluate(const Model& model, const MultiTaskDataset& data,
                               std::size_t batch_size) {
    NoGradGuard no_grad;
    const std::size_t num_tasks = model.config().num_tasks;
    std::vector<TaskEval> per_task(num_tasks);
    std::vector<double> loss_sum(num_tasks, 0.0);
    std::vector<std::size_t> correct(num_tasks, 0), counts(num_tasks, 0);
    const std::size_t n = data.size();
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t stop = std::min(n, start + batch_size);
        std::vector<std::size_t> idx(stop - start);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
        Tensor xb = gather_rows(data.inputs, idx);
        std::vector<std::size_t> tb(idx.size()), yb(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            tb[i] = data.task_ids[idx[i]];
            yb[i] = data.labels[idx[i]];
        }
        const Tensor pooled = model.pooled_forward(model.pack_inputs(xb), tb);
        // per-task loss: group and measure separately
        std::vector<std::vector<std::size_t>> groups(num_tasks);
        for (std::size_t i = 0; i < tb.size(); ++i) groups[tb[i]].push_back(i);
        for (std::size_t t = 0; t < num_tasks; ++t) {
            if (groups[t].empty()) continue;
            std::vector<std::size_t> only_t(groups[t].size(), t);
            Tensor sub = gather_rows(pooled, groups[t]);
            std::vector<std::size_t> sub_labels;
            sub_labels.reserve(groups[t].size());
            for (std::size_t i : groups[t]) sub_labels.push_back(yb[i]);
            const Tensor loss = model.classification_loss(sub, only_t, sub_labels);
            loss_sum[t] += loss.scalar() * static_cast<double>(groups[t].size());
            auto acc = model.accuracy_by_task(sub, only_t, sub_labels);
            correct[t] += acc[t].first;
            counts[t] += acc[t].second;
        }
    }
    for (std::size_t t = 0; t < num_tasks; ++t) {
        per_task[t].count = counts[t];
        if (counts[t] > 0) {
            per_task[t].loss = loss_sum[t] / static_cast<double>(counts[t]);
            per_task[t].accuracy = static_cast<double>(correct[t]) / static_cast<double>(counts[t]);
        }
    }
    return per_task;
}

TrainResult train(const TrainConfig& config, const MultiTaskDataset& train_set,
                  const MultiTaskDataset* eval_set) {
    config.validate();
    train_set.validate(config.model.num_tasks);
    if (eval_set) {
        eval_set->validate(config.model.num_tasks);
    }

    Model model(config.model, config.effective_adapter(), config.seed);
    AdamWOptimizer opt(model.trainable_parameters(), config.beta1, config.beta2, config.weight_decay);

    const std::size_t n = train_set.size();
    const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = steps_per_epoch * config.epochs;

    std::mt19937_64 shuffle_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    TrainResult result{std::move(model), {}, 0};
    std::size_t global_step = 0;
    double last_lr = 0.0;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_indices(order, shuffle_rng);
        for (std::size_t start = 0; start < n; start += config.batch_size) {
            const std::size_t stop = std::min(n, start + config.batch_size);
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(stop));
            Tensor xb = gather_rows(train_set.inputs, idx);
            std::vector<std::size_t> tb(idx.size()), yb(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i) {
                tb[i] = train_set.task_ids[idx[i]];
                yb[i] = train_set.labels[idx[i]];
            }
            const double lr_t = lr_schedule(global_step, total_steps, config.warmup_ratio,
                                            config.learning_rate);
            opt.zero_grad();
            const Tensor pooled = result.model.pooled_forward(result.model.pack_inputs(xb), tb);
            const Tensor loss = result.model.classification_loss(pooled, tb, yb);
            backward(loss);
            opt.step(lr_t);
            last_lr = lr_t;
            global_step += 1;
        }
        const auto train_eval = evaluate(result.model, train_set);
        for (std::size_t t = 0; t < train_eval.size(); ++t) {
            result.metrics.push_back({global_step, epoch, t, "train", train_eval[t].loss,
                                      train_eval[t].accuracy, last_lr});
        }
        if (eval_set) {
            const auto test_eval = evaluate(result.model, *eval_set);
            for (std::size_t t = 0; t < test_eval.size(); ++t) {
                result.metrics.push_back({global_step, epoch, t, "test", test_eval[t].loss,
                                          test_eval[t].accuracy, last_lr});
            }
        }
    }
    result.steps = global_step;
    return result;
}

GradientAuditReport gradient_audit(Model& model, const Tensor& x3,
                                   const std::vector<std::size_t>& task_ids,
                                   const std::vector<std::size_t>& labels, double eps) {
    auto params = model.trainable_parameters();
    auto loss_graph = [&]() {
        return model.classification_loss(model.pooled_forward(x3, task_ids), task_ids, labels);
    };
    for (auto& p : params) p.tensor.zero_grad();
    for (auto& p : model.frozen_parameters()) p.tensor.zero_grad();
    backward(loss_graph());

    GradientAuditReport report;
    for (auto& p : model.frozen_parameters()) {
        for (double g : p.tensor.grad()) {
            report.frozen_grad_max_abs = std::max(report.frozen_grad_max_abs, std::abs(g));
        }
    }
    for (auto& p : params) {
        Tensor analytic = Tensor::from_values(p.tensor.shape(),
                                              {p.tensor.grad().begin(), p.tensor.grad().end()});
        Tensor fd = finite_diff_grad(
            [&](const Tensor&) {
                NoGradGuard no_grad;
                return loss_graph().scalar();
            },
            p.tensor, eps);
        double worst = 0.0;
        auto a = analytic.values();
        auto b = fd.values();
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double denom = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
            worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
        }
        report.entries.push_back({p.name, worst});
        report.max_rel_err = std::max(report.max_rel_err, worst);
    }
    return report;
}

}  // namespace mtladapt
