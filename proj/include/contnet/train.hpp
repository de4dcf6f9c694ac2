#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "contnet/config.hpp"
#include "contnet/contnet.hpp"
#include "contnet/dataset.hpp"
#include "contnet/errors.hpp"
#include "contnet/params.hpp"
#include "contnet/tensor.hpp"

namespace contnet {

// 0.5 * base * (1 + cos(pi * step / total))
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr) {
    if (step < 0 || step > total_steps || total_steps < 1) {
        throw ValueError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                         std::to_string(total_steps) + "]");
    }
    return 0.5 * base_lr *
           (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) /
                           static_cast<double>(total_steps)));
}

// Cross-entropy against (1 - eps) one-hot + eps/K uniform, averaged over the
// batch.
template <typename T>
Tensor<T> label_smoothing_ce(const Tensor<T>& logits, const std::vector<std::uint16_t>& labels,
                             double eps) {
    if (logits.rank() != 2) throw ShapeError("loss: logits must be [N, K], got " + shape_str(logits.shape()));
    const std::int64_t n = logits.shape()[0], k = logits.shape()[1];
    if (static_cast<std::int64_t>(labels.size()) != n) {
        throw ShapeError("loss: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(n));
    }
    std::vector<T> target(static_cast<std::size_t>(n * k), static_cast<T>(eps / static_cast<double>(k)));
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t l = labels[static_cast<std::size_t>(i)];
        if (l >= k) throw ValueError("loss: label " + std::to_string(l) + " out of range");
        target[static_cast<std::size_t>(i * k + l)] += static_cast<T>(1.0 - eps);
    }
    auto t = Tensor<T>::from_values({n, k}, std::move(target));
    auto lsm = log_softmax(logits, 1);
    return scale(sum(mul(lsm, t)), static_cast<T>(-1.0 / static_cast<double>(n)));
}

// ---------------------------------------------------------------------------
// Optimizers with per-group learning rates (conv vs ste) and decoupled weight
// decay applied to weight-kind parameters only.
// ---------------------------------------------------------------------------

template <typename T>
class Optimizer {
public:
    Optimizer(ParameterStore<T>& params, TrainConfig cfg, std::int64_t total_steps)
        : params_(params), cfg_(std::move(cfg)), total_steps_(total_steps) {
        cfg_.validate();
        slot1_.resize(params_.size());
        slot2_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const std::size_t n = params_.entries()[i].tensor.values().size();
            slot1_[i].assign(n, T(0));
            if (cfg_.optimizer == "adamw") slot2_[i].assign(n, T(0));
        }
    }

    double group_lr(ParamGroup group, std::int64_t step) const {
        const double base = group == ParamGroup::Conv ? cfg_.lr_conv : cfg_.lr_ste;
        if (cfg_.schedule == "cosine") return cosine_lr(step, total_steps_, base);
        return base;
    }

    // Applies one update from the accumulated gradients and zeroes them.
    void step(std::int64_t step_index) {
        ++adam_t_;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& e = params_.entries()[i];
            auto& theta = e.tensor.values();
            if (!e.tensor.has_grad()) {
                throw ContractError("optimizer: parameter '" + e.name + "' has no gradient");
            }
            const auto& g = e.tensor.grad();
            const double lr = group_lr(e.group, step_index);
            const bool decay = e.kind == ParamKind::Weight && cfg_.weight_decay > 0;
            if (cfg_.optimizer == "sgd") {
                auto& v = slot1_[i];
                for (std::size_t j = 0; j < theta.size(); ++j) {
                    v[j] = static_cast<T>(cfg_.momentum) * v[j] + g[j];
                    theta[j] -= static_cast<T>(lr) * v[j];
                    if (decay) theta[j] -= static_cast<T>(lr * cfg_.weight_decay) * theta[j];
                }
            } else {
                auto& mo = slot1_[i];
                auto& ve = slot2_[i];
                const double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;
                const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam_t_));
                const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam_t_));
                for (std::size_t j = 0; j < theta.size(); ++j) {
                    mo[j] = static_cast<T>(b1) * mo[j] + static_cast<T>(1.0 - b1) * g[j];
                    ve[j] = static_cast<T>(b2) * ve[j] + static_cast<T>(1.0 - b2) * g[j] * g[j];
                    const double mhat = static_cast<double>(mo[j]) / c1;
                    const double vhat = static_cast<double>(ve[j]) / c2;
                    theta[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + adam_eps));
                    if (decay) theta[j] -= static_cast<T>(lr * cfg_.weight_decay) * theta[j];
                }
            }
        }
        params_.zero_grad();
    }

private:
    ParameterStore<T>& params_;
    TrainConfig cfg_;
    std::int64_t total_steps_;
    std::int64_t adam_t_ = 0;
    std::vector<std::vector<T>> slot1_;  // sgd velocity / adam first moment
    std::vector<std::vector<T>> slot2_;  // adam second moment
};

// ---------------------------------------------------------------------------
// Training and evaluation.
// ---------------------------------------------------------------------------

template <typename T>
double evaluate(Model<T>& m, const Dataset<T>& data, std::int64_t batch_size = 32) {
    NoGradGuard no_grad;
    m.infer_mode();
    const std::int64_t n = data.count();
    const auto& shape = data.images.shape();
    const std::int64_t sample = shape[1] * shape[2] * shape[3];
    std::int64_t hits = 0;
    for (std::int64_t at = 0; at < n; at += batch_size) {
        const std::int64_t b = std::min(batch_size, n - at);
        std::vector<T> v(data.images.values().begin() + at * sample,
                         data.images.values().begin() + (at + b) * sample);
        auto x = Tensor<T>::from_values({b, shape[1], shape[2], shape[3]}, std::move(v));
        auto logits = m.forward(x);
        const std::int64_t k = logits.shape()[1];
        for (std::int64_t i = 0; i < b; ++i) {
            std::int64_t best = 0;
            for (std::int64_t j = 1; j < k; ++j) {
                if (logits.values()[static_cast<std::size_t>(i * k + j)] >
                    logits.values()[static_cast<std::size_t>(i * k + best)]) {
                    best = j;
                }
            }
            if (best == data.labels[static_cast<std::size_t>(at + i)]) ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

struct TrainHistory {
    std::vector<double> step_loss;       // one entry per optimizer step
    std::vector<double> epoch_accuracy;  // train-set accuracy after each epoch
    double final_accuracy = 0.0;
};

template <typename T>
TrainHistory train(Model<T>& m, const Dataset<T>& data, const TrainConfig& cfg) {
    cfg.validate();
    const std::int64_t n = data.count();
    const std::int64_t batch = std::min<std::int64_t>(cfg.batch_size, n);
    const std::int64_t steps_per_epoch = (n + batch - 1) / batch;
    const std::int64_t total_steps =
        cfg.steps > 0 ? cfg.steps : cfg.epochs * steps_per_epoch;
    Optimizer<T> opt(m.params, cfg, total_steps);
    Rng shuffle_rng(cfg.seed);
    const auto& shape = data.images.shape();
    const std::int64_t sample = shape[1] * shape[2] * shape[3];

    TrainHistory history;
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    std::int64_t step = 0, cursor = 0;
    auto reshuffle = [&] {
        for (std::int64_t i = n - 1; i > 0; --i) {
            const std::int64_t j = static_cast<std::int64_t>(shuffle_rng.below(static_cast<std::uint64_t>(i + 1)));
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }
        cursor = 0;
    };
    reshuffle();
    m.train_mode();
    while (step < total_steps) {
        if (cursor >= n) {
            history.epoch_accuracy.push_back(evaluate(m, data));
            m.train_mode();
            reshuffle();
        }
        const std::int64_t b = std::min(batch, n - cursor);
        std::vector<T> v(static_cast<std::size_t>(b * sample));
        std::vector<std::uint16_t> labels(static_cast<std::size_t>(b));
        for (std::int64_t i = 0; i < b; ++i) {
            const std::int64_t src = order[static_cast<std::size_t>(cursor + i)];
            std::copy(data.images.values().begin() + src * sample,
                      data.images.values().begin() + (src + 1) * sample, v.begin() + i * sample);
            labels[static_cast<std::size_t>(i)] = data.labels[static_cast<std::size_t>(src)];
        }
        cursor += b;
        auto x = Tensor<T>::from_values({b, shape[1], shape[2], shape[3]}, std::move(v));
        auto logits = m.forward(x);
        auto loss = label_smoothing_ce(logits, labels, cfg.label_smooth_eps);
        const double loss_value = static_cast<double>(loss.item());
        if (!std::isfinite(loss_value)) {
            throw ValueError("train: non-finite loss " + std::to_string(loss_value) + " at step " +
                             std::to_string(step));
        }
        history.step_loss.push_back(loss_value);
        backward(loss);
        opt.step(step);
        ++step;
    }
    history.final_accuracy = evaluate(m, data);
    history.epoch_accuracy.push_back(history.final_accuracy);
    m.infer_mode();
    return history;
}

}  // namespace contnet
