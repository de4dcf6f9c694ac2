#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "contnet/errors.hpp"
#include "contnet/nn_ops.hpp"
#include "contnet/params.hpp"
#include "contnet/patching.hpp"
#include "contnet/rng.hpp"
#include "contnet/tensor.hpp"
#include "contnet/transformer.hpp"

namespace contnet {

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

struct StageSpec {
    std::int64_t d = 0;      // embedding width (= channel count of the stage)
    std::int64_t d_ffn = 0;  // FFN hidden width
    std::int64_t heads = 1;
    std::int64_t blocks = 1;
    // requested (first STE, second STE) patch sizes per block; clamped to the
    // stage map at build time
    std::vector<std::pair<std::int64_t, std::int64_t>> patch_schedule;
};

struct ModelConfig {
    std::string variant = "custom";
    std::array<StageSpec, 4> stages;
    std::int64_t stem_width = 0;  // 0: follow stage-1 width
    std::int64_t num_classes = 1000;
    std::int64_t input_size = 224;  // canonical square input the model is sized for
    PeKind pe_kind = PeKind::Learnable2d;
    PePlacement pe_placement = PePlacement::PatchWise;
    std::int64_t conv_groups = 1;  // groups of the block convolutions
    bool depthwise = false;        // depthwise-separable block convolutions
    bool strict_paper = false;     // bare convs, linear FFN: the literal equations

    std::int64_t stem_out() const { return stem_width > 0 ? stem_width : stages[0].d; }

    // map side length seen by stage index (0-based)
    std::int64_t stage_map(std::size_t stage) const {
        return input_size / (4LL << stage);
    }

    // the last conv of stage i feeds stage i+1; the final stage widens by 2x
    std::int64_t stage_out(std::size_t stage) const {
        return stage < 3 ? stages[stage + 1].d : 2 * stages[3].d;
    }

    std::int64_t head_width() const { return stage_out(3); }

    std::pair<std::int64_t, std::int64_t> patch_pair(std::size_t stage, std::int64_t block) const {
        const auto& sched = stages[stage].patch_schedule;
        if (sched.empty()) return {7, 14};
        if (static_cast<std::int64_t>(sched.size()) == stages[stage].blocks) {
            return sched[static_cast<std::size_t>(block)];
        }
        return sched[0];
    }

    void validate() const {
        if (input_size < 32 || input_size % 32 != 0) {
            throw ValueError("config: input size " + std::to_string(input_size) +
                             " must be a positive multiple of 32");
        }
        for (std::size_t i = 0; i < 4; ++i) {
            const auto& s = stages[i];
            if (s.d < 1 || s.d_ffn < 1 || s.blocks < 1) {
                throw ValueError("config: stage " + std::to_string(i + 1) + " has empty extents");
            }
            if (s.heads < 1 || s.d % s.heads != 0) {
                throw ValueError("config: stage " + std::to_string(i + 1) + " width " +
                                 std::to_string(s.d) + " not divisible by heads " +
                                 std::to_string(s.heads));
            }
            if (!s.patch_schedule.empty() &&
                static_cast<std::int64_t>(s.patch_schedule.size()) != 1 &&
                static_cast<std::int64_t>(s.patch_schedule.size()) != s.blocks) {
                throw ValueError("config: stage " + std::to_string(i + 1) +
                                 " patch schedule must list one pair or one per block");
            }
            const std::int64_t map = stage_map(i);
            for (std::int64_t b = 0; b < s.blocks; ++b) {
                const auto [p1, p2] = patch_pair(i, b);
                for (std::int64_t p : {p1, p2}) {
                    const std::int64_t pe = effective_patch(p, map, map);
                    if (pe < 1 || map % pe != 0) {
                        throw ValueError("config: stage " + std::to_string(i + 1) + " map " +
                                         std::to_string(map) + " not divisible by patch " +
                                         std::to_string(p));
                    }
                }
            }
            if (conv_groups < 1) throw ValueError("config: conv groups must be positive");
            const std::int64_t out = stage_out(i);
            if (!depthwise && (s.d % conv_groups != 0 || out % conv_groups != 0)) {
                throw ValueError("config: conv groups " + std::to_string(conv_groups) +
                                 " must divide stage widths " + std::to_string(s.d) + "/" +
                                 std::to_string(out));
            }
        }
        if (stem_width < 0 || num_classes < 1) throw ValueError("config: bad stem width or classes");
    }
};

inline ModelConfig variant_config(const std::string& name) {
    ModelConfig cfg;
    cfg.variant = name;
    const std::array<std::int64_t, 4> heads = {1, 2, 4, 8};
    std::array<std::int64_t, 4> d, d_ffn, blocks;
    if (name == "ti") {
        d = {48, 96, 192, 384};
        d_ffn = {192, 384, 768, 768};
        blocks = {1, 1, 1, 1};
    } else if (name == "s") {
        d = {64, 128, 256, 512};
        d_ffn = {256, 512, 1024, 1024};
        blocks = {1, 1, 1, 1};
    } else if (name == "m") {
        d = {64, 128, 256, 512};
        d_ffn = {256, 512, 1024, 1024};
        blocks = {2, 2, 2, 2};
    } else if (name == "b") {
        d = {64, 128, 256, 512};
        d_ffn = {256, 512, 1024, 1024};
        blocks = {3, 4, 6, 3};
    } else {
        throw ValueError("unknown variant '" + name + "' (expected ti, s, m or b)");
    }
    for (std::size_t i = 0; i < 4; ++i) {
        cfg.stages[i].d = d[i];
        cfg.stages[i].d_ffn = d_ffn[i];
        cfg.stages[i].heads = heads[i];
        cfg.stages[i].blocks = blocks[i];
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Ablation axes.
// ---------------------------------------------------------------------------

enum class AblationAxis { Pe, PatchSize, Groups };

inline ModelConfig make_ablation_config(ModelConfig base, AblationAxis axis,
                                        const std::string& choice) {
    switch (axis) {
        case AblationAxis::Pe: {
            base.pe_placement = PePlacement::PatchWise;
            if (choice == "none") {
                base.pe_kind = PeKind::None;
            } else if (choice == "1d") {
                base.pe_kind = PeKind::Learnable1d;
            } else if (choice == "2d") {
                base.pe_kind = PeKind::Learnable2d;
            } else if (choice == "2d-image") {
                base.pe_kind = PeKind::Learnable2d;
                base.pe_placement = PePlacement::ImageWise;
            } else if (choice == "relative") {
                base.pe_kind = PeKind::Relative;
            } else {
                throw ValueError("pe ablation: unknown choice '" + choice + "'");
            }
            break;
        }
        case AblationAxis::PatchSize: {
            std::pair<std::int64_t, std::int64_t> first, second;
            bool alternate_blocks = false;
            if (choice == "all-7") {
                first = second = {7, 7};
            } else if (choice == "all-14") {
                first = second = {14, 14};
            } else if (choice == "block-alternating") {
                first = {7, 7};
                second = {14, 14};
                alternate_blocks = true;
            } else if (choice == "per-ste") {
                first = second = {7, 14};
            } else {
                throw ValueError("patch ablation: unknown choice '" + choice + "'");
            }
            for (auto& stage : base.stages) {
                stage.patch_schedule.clear();
                for (std::int64_t b = 0; b < stage.blocks; ++b) {
                    const bool odd = alternate_blocks && (b % 2 == 1);
                    stage.patch_schedule.push_back(odd ? second : first);
                }
            }
            break;
        }
        case AblationAxis::Groups: {
            base.depthwise = false;
            base.conv_groups = 1;
            if (choice == "depthwise") {
                base.depthwise = true;
            } else if (choice == "1" || choice == "4" || choice == "8" || choice == "16") {
                base.conv_groups = std::stoll(choice);
            } else {
                throw ValueError("groups ablation: unknown choice '" + choice + "'");
            }
            break;
        }
    }
    return base;
}

// ---------------------------------------------------------------------------
// Model pieces.
// ---------------------------------------------------------------------------

template <typename T>
struct ConvUnit {
    Conv2dParams<T> conv;
    std::optional<BatchNormState<T>> bn;
    bool relu_after = false;

    Tensor<T> forward(const Tensor<T>& x, NormMode mode) {
        auto y = conv2d(x, conv);
        if (bn) y = batch_norm(y, *bn, mode);
        if (relu_after) y = contnet::relu(y);
        return y;
    }
};

template <typename T>
struct ContBlock {
    STEParams<T> ste1, ste2;
    std::int64_t patch1 = 7, patch2 = 14;
    std::vector<ConvUnit<T>> conv_path;     // one dense/grouped conv, or depthwise + pointwise
    std::optional<ConvUnit<T>> shortcut;    // 1x1 projection when shape changes
    bool relu_after_add = true;

    Tensor<T> forward(const Tensor<T>& x, NormMode mode) {
        auto h = apply_ste_patchwise(x, ste1, patch1);
        h = apply_ste_patchwise(h, ste2, patch2);
        for (auto& unit : conv_path) h = unit.forward(h, mode);
        auto sc = shortcut ? shortcut->forward(x, mode) : x;
        auto y = add(h, sc);
        if (relu_after_add) y = contnet::relu(y);
        return y;
    }
};

// Per-stage input shapes recorded during a forward pass.
struct StageTrace {
    Shape stem_out;
    std::array<Shape, 4> stage_in;
    Shape logits;
};

template <typename T>
class Model {
public:
    ModelConfig cfg;
    ParameterStore<T> params;
    ConvUnit<T> stem;
    std::optional<ConvUnit<T>> stem_proj;
    std::array<std::vector<ContBlock<T>>, 4> stages;
    Tensor<T> head_weight, head_bias;
    NormMode mode = NormMode::Infer;

    void train_mode() { mode = NormMode::Train; }
    void infer_mode() { mode = NormMode::Infer; }

    Tensor<T> forward(const Tensor<T>& x, StageTrace* trace = nullptr) {
        if (x.rank() != 4 || x.shape()[1] != 3) {
            throw ShapeError("forward: input must be Nx3xHxW, got " + shape_str(x.shape()));
        }
        auto h = stem.forward(x, mode);
        h = pool2d(h, PoolKind::Max, 3, 2, 1);
        if (trace) trace->stem_out = h.shape();
        if (stem_proj) h = stem_proj->forward(h, mode);
        for (std::size_t s = 0; s < 4; ++s) {
            if (trace) trace->stage_in[s] = h.shape();
            for (std::size_t b = 0; b < stages[s].size(); ++b) {
                try {
                    h = stages[s][b].forward(h, mode);
                } catch (const ShapeError& e) {
                    throw ShapeError("stage " + std::to_string(s + 1) + " block " +
                                     std::to_string(b) + ": " + e.what());
                }
            }
        }
        auto pooled = global_avg_pool(h);
        auto logits = linear(pooled, head_weight, std::optional<Tensor<T>>(head_bias));
        if (trace) trace->logits = logits.shape();
        return logits;
    }

    // named non-learnable arrays (batch-norm running statistics)
    std::vector<std::pair<std::string, std::vector<T>*>> buffers() {
        std::vector<std::pair<std::string, std::vector<T>*>> out;
        auto grab = [&](const std::string& name, std::optional<BatchNormState<T>>& bn) {
            if (!bn) return;
            out.push_back({name + ".running_mean", &bn->running_mean});
            out.push_back({name + ".running_var", &bn->running_var});
        };
        grab("stem", stem.bn);
        if (stem_proj) grab("stem_proj", stem_proj->bn);
        for (std::size_t s = 0; s < 4; ++s) {
            for (std::size_t b = 0; b < stages[s].size(); ++b) {
                const std::string pre = "s" + std::to_string(s + 1) + ".b" + std::to_string(b);
                for (std::size_t u = 0; u < stages[s][b].conv_path.size(); ++u) {
                    grab(pre + ".conv" + std::to_string(u), stages[s][b].conv_path[u].bn);
                }
                if (stages[s][b].shortcut) grab(pre + ".shortcut", stages[s][b].shortcut->bn);
            }
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Network builder.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> init_conv_weight(Shape shape, std::int64_t groups, Rng& rng) {
    const std::int64_t k = shape[2];
    const std::int64_t fan_out = k * k * shape[0] / groups;
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_out));
    std::vector<T> v(static_cast<std::size_t>(numel_of(shape)));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
    return Tensor<T>::from_values(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> init_trunc_normal(Shape shape, Rng& rng, double stddev = 0.02) {
    std::vector<T> v(static_cast<std::size_t>(numel_of(shape)));
    for (auto& x : v) x = static_cast<T>(rng.truncated_normal(stddev));
    return Tensor<T>::from_values(std::move(shape), std::move(v));
}

template <typename T>
ConvUnit<T> build_conv_unit(ParameterStore<T>& store, const std::string& name, std::int64_t c_in,
                            std::int64_t c_out, std::int64_t k, std::int64_t stride,
                            std::int64_t padding, std::int64_t groups, bool with_bn, bool relu_after,
                            Rng& rng) {
    ConvUnit<T> unit;
    unit.conv.weight = store.add(name + ".weight",
                                 init_conv_weight<T>({c_out, c_in / groups, k, k}, groups, rng),
                                 ParamGroup::Conv, ParamKind::Weight);
    unit.conv.stride = stride;
    unit.conv.padding = padding;
    unit.conv.groups = groups;
    if (with_bn) {
        auto bn = BatchNormState<T>::make(c_out);
        bn.gain = store.add(name + ".bn.gain", bn.gain, ParamGroup::Conv, ParamKind::Norm);
        bn.bias = store.add(name + ".bn.bias", bn.bias, ParamGroup::Conv, ParamKind::Norm);
        unit.bn = std::move(bn);
    }
    unit.relu_after = relu_after;
    return unit;
}

template <typename T>
STEParams<T> build_ste(ParameterStore<T>& store, const std::string& name, std::int64_t c,
                       std::int64_t d_ffn, std::int64_t heads, std::int64_t patch,
                       std::int64_t map, const ModelConfig& cfg, Rng& rng) {
    STEParams<T> p;
    const std::int64_t d = c;  // embedding width equals the channel count
    auto weight = [&](const std::string& n, Shape shape) {
        return store.add(name + "." + n, init_trunc_normal<T>(std::move(shape), rng),
                         ParamGroup::Ste, ParamKind::Weight);
    };
    auto bias = [&](const std::string& n, std::int64_t extent) {
        return store.add(name + "." + n, Tensor<T>::zeros({extent}), ParamGroup::Ste,
                         ParamKind::Bias);
    };
    auto norm = [&](const std::string& n, std::int64_t extent, T fill) {
        return store.add(name + "." + n, Tensor<T>::filled({extent}, fill), ParamGroup::Ste,
                         ParamKind::Norm);
    };
    p.w_q = weight("wq", {c, d});
    p.b_q = bias("bq", d);
    p.w_k = weight("wk", {c, d});
    p.b_k = bias("bk", d);
    p.w_v = weight("wv", {c, d});
    p.b_v = bias("bv", d);
    p.w_mhsa = weight("wo", {d, c});
    p.b_mhsa = bias("bo", c);
    p.ln1_gain = norm("ln1.gain", c, T(1));
    p.ln1_bias = norm("ln1.bias", c, T(0));
    p.w1 = weight("w1", {c, d_ffn});
    p.b1 = bias("b1", d_ffn);
    p.w2 = weight("w2", {d_ffn, c});
    p.b2 = bias("b2", c);
    p.ln2_gain = norm("ln2.gain", c, T(1));
    p.ln2_bias = norm("ln2.bias", c, T(0));
    p.heads = heads;
    p.ffn_activation = !cfg.strict_paper;

    p.pe.kind = cfg.pe_kind;
    p.pe.placement = cfg.pe_placement;
    auto pe_param = [&](const std::string& n, Shape shape) {
        return store.add(name + ".pe." + n, init_trunc_normal<T>(std::move(shape), rng),
                         ParamGroup::Ste, ParamKind::Pe);
    };
    switch (cfg.pe_kind) {
        case PeKind::None:
            break;
        case PeKind::Learnable1d:
            p.pe.table = pe_param("table", {patch * patch, c});
            break;
        case PeKind::Learnable2d:
            if (cfg.pe_placement == PePlacement::ImageWise) {
                p.pe.row = pe_param("row", {map, c});
                p.pe.col = pe_param("col", {map, c});
            } else {
                p.pe.row = pe_param("row", {patch, c});
                p.pe.col = pe_param("col", {patch, c});
            }
            break;
        case PeKind::Relative: {
            const std::int64_t span = 2 * patch * patch - 1;
            for (std::int64_t h = 0; h < heads; ++h) {
                p.pe.rel.push_back(pe_param("rel" + std::to_string(h), {span, d / heads}));
            }
            break;
        }
    }
    return p;
}

}  // namespace detail

template <typename T>
Model<T> build_network(const ModelConfig& cfg, std::uint64_t seed = 0) {
    cfg.validate();
    Model<T> m;
    m.cfg = cfg;
    Rng rng(seed);
    const bool bn = !cfg.strict_paper;

    m.stem = detail::build_conv_unit(m.params, "stem", 3, cfg.stem_out(), 7, 2, 3, 1, bn, bn, rng);
    if (cfg.stem_out() != cfg.stages[0].d) {
        m.stem_proj = detail::build_conv_unit(m.params, "stem_proj", cfg.stem_out(),
                                              cfg.stages[0].d, 1, 1, 0, 1, bn, bn, rng);
    }

    for (std::size_t s = 0; s < 4; ++s) {
        const auto& spec = cfg.stages[s];
        const std::int64_t map = cfg.stage_map(s);
        for (std::int64_t b = 0; b < spec.blocks; ++b) {
            const std::string pre = "s" + std::to_string(s + 1) + ".b" + std::to_string(b);
            const bool last = b == spec.blocks - 1;
            ContBlock<T> block;
            const auto [p1, p2] = cfg.patch_pair(s, b);
            block.patch1 = effective_patch(p1, map, map);
            block.patch2 = effective_patch(p2, map, map);
            block.ste1 = detail::build_ste(m.params, pre + ".ste1", spec.d, spec.d_ffn, spec.heads,
                                           block.patch1, map, cfg, rng);
            block.ste2 = detail::build_ste(m.params, pre + ".ste2", spec.d, spec.d_ffn, spec.heads,
                                           block.patch2, map, cfg, rng);

            const std::int64_t c_out = last ? cfg.stage_out(s) : spec.d;
            const std::int64_t k = (last && s == 3) ? 1 : 3;
            const std::int64_t stride = (last && s < 3) ? 2 : 1;
            const std::int64_t pad = k / 2;
            if (cfg.depthwise && k == 3) {
                // depthwise 3x3 keeping channels, then pointwise mixing to c_out
                block.conv_path.push_back(detail::build_conv_unit(
                    m.params, pre + ".conv0", spec.d, spec.d, 3, stride, 1, spec.d, bn, bn, rng));
                block.conv_path.push_back(detail::build_conv_unit(
                    m.params, pre + ".conv1", spec.d, c_out, 1, 1, 0, 1, bn, false, rng));
            } else {
                block.conv_path.push_back(detail::build_conv_unit(m.params, pre + ".conv0", spec.d,
                                                                  c_out, k, stride, pad,
                                                                  cfg.conv_groups, bn, false, rng));
            }
            if (stride != 1 || c_out != spec.d) {
                block.shortcut = detail::build_conv_unit(m.params, pre + ".shortcut", spec.d, c_out,
                                                         1, stride, 0, 1, bn, false, rng);
            }
            block.relu_after_add = !cfg.strict_paper;
            m.stages[s].push_back(std::move(block));
        }
    }

    // zero head: fresh models predict the uniform distribution, so the first
    // loss is exactly ln(num_classes)
    m.head_weight = m.params.add("head.weight", Tensor<T>::zeros({cfg.head_width(), cfg.num_classes}),
                                 ParamGroup::Conv, ParamKind::Weight);
    m.head_bias = m.params.add("head.bias", Tensor<T>::zeros({cfg.num_classes}), ParamGroup::Conv,
                               ParamKind::Bias);
    return m;
}

}  // namespace contnet
