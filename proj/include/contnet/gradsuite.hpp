#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "contnet/contnet.hpp"
#include "contnet/nn_ops.hpp"
#include "contnet/patching.hpp"
#include "contnet/rng.hpp"
#include "contnet/tensor.hpp"
#include "contnet/train.hpp"
#include "contnet/transformer.hpp"

namespace contnet {

// 64-bit finite-difference verification battery: one entry per primitive
// operation plus a tiny end-to-end network. Everything runs in double; the
// reported number is the worst relative error of the entry.

struct GradCheckEntry {
    std::string name;
    double max_rel_error;
};

namespace detail {

inline Tensor<double> rand_t(Shape shape, Rng& rng, double scale = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
    for (auto& x : v) x = rng.uniform(-scale, scale);
    return Tensor<double>::from_values(std::move(shape), std::move(v));
}

// keeps relu/max inputs away from their kinks
inline Tensor<double> rand_margin(Shape shape, Rng& rng) {
    auto t = rand_t(std::move(shape), rng);
    for (auto& x : t.values()) x += (x >= 0 ? 0.25 : -0.25);
    return t;
}

}  // namespace detail

// Tiny four-stage network: widths <= 16, patches <= 4, 32x32 input.
inline ModelConfig gradcheck_model_config() {
    ModelConfig cfg;
    const std::int64_t d[4] = {4, 8, 8, 16};
    const std::int64_t heads[4] = {1, 2, 2, 4};
    for (std::size_t i = 0; i < 4; ++i) {
        cfg.stages[i].d = d[i];
        cfg.stages[i].d_ffn = 2 * d[i];
        cfg.stages[i].heads = heads[i];
        cfg.stages[i].blocks = 1;
        cfg.stages[i].patch_schedule = {{2, 4}};
    }
    cfg.num_classes = 2;
    cfg.input_size = 32;
    return cfg;
}

inline std::vector<GradCheckEntry> run_gradient_suite(std::uint64_t seed,
                                                      const ModelConfig* net_cfg = nullptr) {
    std::vector<GradCheckEntry> results;
    Rng rng(seed);
    auto record = [&](const std::string& name, double err) {
        results.push_back({name, err});
    };

    {
        auto a = detail::rand_t({3, 4}, rng);
        auto b = detail::rand_t({4, 2}, rng);
        auto f = [&] { return sum(matmul(a, b)); };
        record("matmul.a", grad_check(f, a));
        record("matmul.b", grad_check(f, b));
    }
    {
        auto a = detail::rand_t({2, 3, 4}, rng);
        auto b = detail::rand_t({2, 4, 3}, rng);
        auto f = [&] { return sum(mul(matmul(a, b), matmul(a, b))); };
        record("matmul.batched", grad_check(f, a));
    }
    {
        auto x = detail::rand_t({2, 3, 4}, rng);
        auto b = detail::rand_t({4}, rng);
        auto f = [&] { return sum(mul(add(x, b), add(x, b))); };
        record("add.broadcast", std::max(grad_check(f, x), grad_check(f, b)));
    }
    {
        auto x = detail::rand_t({3, 5}, rng);
        auto y = detail::rand_t({3, 5}, rng);
        auto f = [&] { return sum(mul(x, y)); };
        record("mul", std::max(grad_check(f, x), grad_check(f, y)));
    }
    {
        auto x = detail::rand_margin({3, 5}, rng);
        auto w = detail::rand_t({3, 5}, rng);
        auto f = [&] { return sum(mul(relu(x), w)); };
        record("relu", grad_check(f, x));
    }
    {
        auto x = detail::rand_t({2, 4, 3}, rng, 2.0);
        auto w = detail::rand_t({2, 4, 3}, rng);
        auto fs = [&] { return sum(mul(softmax(x, 1), w)); };
        record("softmax", grad_check(fs, x));
        auto fl = [&] { return sum(mul(log_softmax(x, 2), w)); };
        record("log_softmax", grad_check(fl, x));
    }
    {
        auto x = detail::rand_t({4, 6}, rng);
        auto g = detail::rand_t({6}, rng);
        auto b = detail::rand_t({6}, rng);
        auto w = detail::rand_t({4, 6}, rng);
        auto f = [&] { return sum(mul(layer_norm(x, g, b), w)); };
        record("layer_norm", std::max({grad_check(f, x), grad_check(f, g), grad_check(f, b)}));
    }
    {
        auto x = detail::rand_t({2, 8}, rng);
        auto f = [&] {
            auto t = transpose_last2(reshape(x, {2, 2, 4}));
            auto joined = concat_last<double>({slice_last(t, 0, 1), slice_last(t, 1, 1)});
            return sum(mul(joined, joined));
        };
        record("reshape/slice/concat/transpose", grad_check(f, x));
    }
    {
        auto x = detail::rand_t({2, 4, 5, 5}, rng);
        Conv2dParams<double> p;
        p.weight = detail::rand_t({4, 2, 3, 3}, rng);
        p.bias = detail::rand_t({4}, rng);
        p.stride = 2;
        p.padding = 1;
        p.groups = 2;
        auto w = detail::rand_t({2, 4, 3, 3}, rng);
        auto f = [&] { return sum(mul(conv2d(x, p), w)); };
        record("conv2d.x", grad_check(f, x));
        record("conv2d.weight", grad_check(f, p.weight));
        record("conv2d.bias", grad_check(f, *p.bias));
    }
    {
        auto x = detail::rand_margin({1, 2, 5, 5}, rng);
        auto w = detail::rand_t({1, 2, 3, 3}, rng);
        auto fmax = [&] { return sum(mul(pool2d(x, PoolKind::Max, 3, 2, 1), w)); };
        auto favg = [&] { return sum(mul(pool2d(x, PoolKind::Avg, 3, 2, 1), w)); };
        record("pool2d.max", grad_check(fmax, x));
        record("pool2d.avg", grad_check(favg, x));
    }
    {
        auto x = detail::rand_t({2, 3, 4, 4}, rng);
        auto w = detail::rand_t({2, 3}, rng);
        auto f = [&] { return sum(mul(global_avg_pool(x), w)); };
        record("global_avg_pool", grad_check(f, x));
    }
    {
        auto x = detail::rand_t({2, 2, 3, 3}, rng);
        auto s = BatchNormState<double>::make(2);
        s.gain.values() = {1.2, 0.8};
        s.bias.values() = {0.1, -0.3};
        auto w = detail::rand_t({2, 2, 3, 3}, rng);
        auto ftrain = [&] { return sum(mul(batch_norm(x, s, NormMode::Train), w)); };
        record("batch_norm.train",
               std::max({grad_check(ftrain, x), grad_check(ftrain, s.gain), grad_check(ftrain, s.bias)}));
        auto finfer = [&] { return sum(mul(batch_norm(x, s, NormMode::Infer), w)); };
        record("batch_norm.infer", grad_check(finfer, x));
    }
    {
        auto x = detail::rand_t({3, 4}, rng);
        auto w = detail::rand_t({4, 2}, rng);
        auto b = detail::rand_t({2}, rng);
        auto f = [&] {
            auto y = linear(x, w, std::optional<Tensor<double>>(b));
            return sum(mul(y, y));
        };
        record("linear", std::max({grad_check(f, x), grad_check(f, w), grad_check(f, b)}));
    }
    {
        auto x = detail::rand_t({1, 2, 4, 4}, rng);
        auto w = detail::rand_t({1, 2, 4, 4}, rng);
        auto f = [&] {
            auto g = split_patches(x, 2);
            return sum(mul(merge_patches(g), w));
        };
        record("split/merge_patches", grad_check(f, x));
    }
    {
        auto row = detail::rand_t({3, 2}, rng);
        auto col = detail::rand_t({3, 2}, rng);
        auto f = [&] {
            auto t = pe_table_2d(row, col);
            return sum(mul(t, t));
        };
        record("pe_table_2d", std::max(grad_check(f, row), grad_check(f, col)));
    }
    {
        auto q = detail::rand_t({2, 4, 3}, rng);
        auto table = detail::rand_t({7, 3}, rng);
        auto f = [&] {
            auto lg = relative_logits(q, table);
            return sum(mul(lg, lg));
        };
        record("relative_logits", std::max(grad_check(f, q), grad_check(f, table)));
    }
    {
        const std::int64_t l = 4, c = 4;
        auto x = detail::rand_t({l, c}, rng);
        auto p = STEParams<double>::make_zero(c, c, 8, 2);
        Rng wrng(seed ^ 0x5741u);
        for (auto* t : {&p.w_q, &p.w_k, &p.w_v, &p.w_mhsa, &p.w1, &p.w2}) {
            for (auto& v : t->values()) v = wrng.uniform(-0.5, 0.5);
        }
        p.pe.kind = PeKind::Learnable1d;
        p.pe.table = detail::rand_t({l, c}, wrng, 0.3);
        auto w = detail::rand_t({l, c}, rng);
        auto f = [&] { return sum(mul(ste_forward(x, p), w)); };
        record("ste.x", grad_check(f, x));
        record("ste.wq", grad_check(f, p.w_q));
        record("ste.w1", grad_check(f, p.w1));
        record("ste.pe", grad_check(f, p.pe.table));
    }
    {
        // end-to-end: label-smoothed loss of a tiny four-stage network
        ModelConfig cfg = net_cfg ? *net_cfg : gradcheck_model_config();
        auto m = build_network<double>(cfg, seed);
        // the head initializes to zero, which would cut gradient flow into the
        // body and make the checks below vacuous
        for (auto& v : m.head_weight.values()) v = rng.uniform(-0.2, 0.2);
        m.train_mode();
        auto x = detail::rand_t({2, 3, cfg.input_size, cfg.input_size}, rng);
        std::vector<std::uint16_t> labels = {0, 1};
        // the ln K offset of the loss otherwise dominates the rounding of the
        // central differences against the 1e-8 denominator floor
        auto f = [&] {
            return scale(label_smoothing_ce(m.forward(x), labels, 0.1), 1e-3);
        };
        auto check_param = [&](const std::string& label, const std::string& suffix) {
            for (auto& e : m.params.entries()) {
                if (e.name.size() >= suffix.size() &&
                    e.name.compare(e.name.size() - suffix.size(), suffix.size(), suffix) == 0) {
                    record(label, grad_check(f, e.tensor));
                    return;
                }
            }
        };
        check_param("network.stem.weight", "stem.weight");
        check_param("network.ste.wq", ".ste1.wq");
        check_param("network.pe", "s1.b0.ste1.pe.row");
        check_param("network.pe", "s1.b0.ste1.pe.table");
        check_param("network.bn.gain", "s2.b0.conv0.bn.gain");
        check_param("network.head.weight", "head.weight");
        record("network.input", grad_check(f, x));
    }
    return results;
}

inline double worst_error(const std::vector<GradCheckEntry>& entries) {
    double worst = 0;
    for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
    return worst;
}

}  // namespace contnet
