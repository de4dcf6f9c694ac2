#pragma once

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "contnet/contnet.hpp"
#include "contnet/params.hpp"

namespace contnet {

// Closed-form per-layer costs. MAC = 1 FLOP throughout, the convention the
// reference totals are quoted in.
inline std::int64_t ste_param_formula(std::int64_t d_mhsa, std::int64_t d_ffn, std::int64_t patch) {
    return 2 * d_mhsa * d_ffn + 4 * d_mhsa * d_mhsa + patch * patch * d_mhsa;
}

inline std::int64_t ste_flops_formula(std::int64_t d_mhsa, std::int64_t d_ffn, std::int64_t patch,
                                      std::int64_t h, std::int64_t w) {
    const std::int64_t hw = h * w;
    return 2 * d_mhsa * d_ffn * hw + 4 * d_mhsa * d_mhsa * hw + hw / (patch * patch);
}

struct CostRow {
    std::string name;
    std::string kind;  // conv | pool | ste | linear
    std::int64_t weight_params = 0;
    std::int64_t bias_params = 0;
    std::int64_t norm_params = 0;
    std::int64_t pe_params = 0;
    std::int64_t flops = 0;       // conv + linear multiply-accumulates
    std::int64_t attn_flops = 0;  // attention logit/value matmuls, tallied separately
    Shape output_shape;
    // ste rows carry their own hyper-parameters for the formula audit
    std::int64_t ste_d = 0, ste_d_ffn = 0, ste_patch = 0;

    std::int64_t params(const CountInclude& inc = {}) const {
        std::int64_t p = weight_params;
        if (inc.biases) p += bias_params;
        if (inc.norms) p += norm_params;
        if (inc.pe) p += pe_params;
        return p;
    }
};

struct CostReport {
    std::vector<CostRow> rows;

    std::int64_t total_params(const CountInclude& inc = {}) const {
        std::int64_t t = 0;
        for (const auto& r : rows) t += r.params(inc);
        return t;
    }
    std::int64_t total_flops() const {
        std::int64_t t = 0;
        for (const auto& r : rows) t += r.flops;
        return t;
    }
    std::int64_t total_attn_flops() const {
        std::int64_t t = 0;
        for (const auto& r : rows) t += r.attn_flops;
        return t;
    }
};

// Reference totals the reports are compared against: FLOPs at 224x224 and
// parameter counts per variant.
struct GoldenCost {
    double flops;
    double params;
};

inline const GoldenCost* golden_cost(const std::string& variant) {
    static const std::pair<const char*, GoldenCost> table[] = {
        {"ti", {0.8e9, 5.8e6}},
        {"s", {1.5e9, 10.1e6}},
        {"m", {3.1e9, 19.2e6}},
        {"b", {6.4e9, 39.6e6}},
    };
    for (const auto& [name, cost] : table) {
        if (variant == name) return &cost;
    }
    return nullptr;
}

namespace detail {

template <typename T>
std::int64_t opt_numel(const std::optional<Tensor<T>>& t) {
    return t ? t->numel() : 0;
}

template <typename T>
CostRow conv_row(const std::string& name, const ConvUnit<T>& unit, std::int64_t n, std::int64_t& c,
                 std::int64_t& h, std::int64_t& w) {
    const auto& p = unit.conv;
    const std::int64_t k = p.kernel();
    const std::int64_t hout = (h + 2 * p.padding - k) / p.stride + 1;
    const std::int64_t wout = (w + 2 * p.padding - k) / p.stride + 1;
    CostRow row;
    row.name = name;
    row.kind = "conv";
    row.weight_params = p.weight.numel();
    row.bias_params = opt_numel(p.bias);
    if (unit.bn) row.norm_params = unit.bn->gain.numel() + unit.bn->bias.numel();
    row.flops = p.weight.numel() * hout * wout * n;  // k^2 * Cin/g * Cout * positions
    c = p.out_channels();
    h = hout;
    w = wout;
    row.output_shape = {n, c, h, w};
    return row;
}

template <typename T>
CostRow ste_row(const std::string& name, const STEParams<T>& p, std::int64_t patch, std::int64_t n,
                std::int64_t c, std::int64_t h, std::int64_t w) {
    CostRow row;
    row.name = name;
    row.kind = "ste";
    row.weight_params = p.w_q.numel() + p.w_k.numel() + p.w_v.numel() + p.w_mhsa.numel() +
                        p.w1.numel() + p.w2.numel();
    row.bias_params = opt_numel(p.b_q) + opt_numel(p.b_k) + opt_numel(p.b_v) +
                      opt_numel(p.b_mhsa) + opt_numel(p.b1) + opt_numel(p.b2);
    row.norm_params = p.ln1_gain.numel() + p.ln1_bias.numel() + p.ln2_gain.numel() +
                      p.ln2_bias.numel();
    row.pe_params = p.pe.table.numel() + p.pe.row.numel() + p.pe.col.numel();
    for (const auto& rel : p.pe.rel) row.pe_params += rel.numel();
    const std::int64_t positions = n * h * w;
    // every pixel passes through the six projections
    row.flops = row.weight_params * positions;
    // logits and values cost P^2 * D per pixel each; relative logits add a
    // third term of the same size
    const std::int64_t terms = p.pe.kind == PeKind::Relative ? 3 : 2;
    row.attn_flops = terms * patch * patch * p.embed_dim() * positions;
    row.output_shape = {n, c, h, w};
    row.ste_d = p.embed_dim();
    row.ste_d_ffn = p.ffn_dim();
    row.ste_patch = patch;
    return row;
}

}  // namespace detail

// Static walk over the built model; no tensors are evaluated.
template <typename T>
CostReport summarize(Model<T>& m, std::int64_t batch = 1, std::int64_t input = 0) {
    if (input == 0) input = m.cfg.input_size;
    CostReport report;
    std::int64_t c = 3, h = input, w = input;
    report.rows.push_back(detail::conv_row("stem", m.stem, batch, c, h, w));
    h = (h + 2 - 3) / 2 + 1;
    w = (w + 2 - 3) / 2 + 1;
    report.rows.push_back(CostRow{"stem.pool", "pool", 0, 0, 0, 0, 0, 0, {batch, c, h, w}, 0, 0, 0});
    if (m.stem_proj) {
        report.rows.push_back(detail::conv_row("stem_proj", *m.stem_proj, batch, c, h, w));
    }
    for (std::size_t s = 0; s < 4; ++s) {
        for (std::size_t b = 0; b < m.stages[s].size(); ++b) {
            auto& block = m.stages[s][b];
            const std::string pre = "s" + std::to_string(s + 1) + ".b" + std::to_string(b);
            report.rows.push_back(detail::ste_row(pre + ".ste1", block.ste1, block.patch1, batch, c, h, w));
            report.rows.push_back(detail::ste_row(pre + ".ste2", block.ste2, block.patch2, batch, c, h, w));
            const std::int64_t c_in = c, h_in = h, w_in = w;
            for (std::size_t u = 0; u < block.conv_path.size(); ++u) {
                report.rows.push_back(
                    detail::conv_row(pre + ".conv" + std::to_string(u), block.conv_path[u], batch, c, h, w));
            }
            if (block.shortcut) {
                std::int64_t sc = c_in, sh = h_in, sw = w_in;
                report.rows.push_back(detail::conv_row(pre + ".shortcut", *block.shortcut, batch, sc, sh, sw));
            }
        }
    }
    report.rows.push_back(CostRow{"gap", "pool", 0, 0, 0, 0, 0, 0, {batch, c}, 0, 0, 0});
    CostRow head;
    head.name = "head";
    head.kind = "linear";
    head.weight_params = m.head_weight.numel();
    head.bias_params = m.head_bias.numel();
    head.flops = m.head_weight.numel() * batch;
    head.output_shape = {batch, m.head_weight.shape()[1]};
    report.rows.push_back(head);
    return report;
}

// Element count over the selected parameter classes.
template <typename T>
std::int64_t count_params(const Model<T>& m, const CountInclude& inc = {}) {
    return m.params.element_count(inc);
}

// Multiply-accumulate count of the conv and linear maps at the given input,
// the convention the reference table uses. Attention logit/value matmuls are
// reported separately by summarize(); pass include_attention to fold them in.
template <typename T>
std::int64_t count_flops(Model<T>& m, std::int64_t batch = 1, std::int64_t input = 0,
                         bool include_attention = false) {
    auto report = summarize(m, batch, input);
    return report.total_flops() + (include_attention ? report.total_attn_flops() : 0);
}

// ---------------------------------------------------------------------------
// Rendering.
// ---------------------------------------------------------------------------

inline std::string report_to_text(const CostReport& report, const std::string& variant = "",
                                  const CountInclude& inc = {}) {
    std::ostringstream os;
    os << std::left << std::setw(20) << "layer" << std::setw(8) << "kind" << std::right
       << std::setw(12) << "params" << std::setw(14) << "flops" << std::setw(14) << "attn_flops"
       << "  shape\n";
    for (const auto& r : report.rows) {
        os << std::left << std::setw(20) << r.name << std::setw(8) << r.kind << std::right
           << std::setw(12) << r.params(inc) << std::setw(14) << r.flops << std::setw(14)
           << r.attn_flops << "  " << shape_str(r.output_shape) << "\n";
    }
    const double total_p = static_cast<double>(report.total_params(inc));
    const double total_f = static_cast<double>(report.total_flops());
    const double total_a = static_cast<double>(report.total_attn_flops());
    os << "\n";
    os << "total params: " << report.total_params(inc) << " (" << std::fixed
       << std::setprecision(2) << total_p / 1e6 << "M)\n";
    os << "total flops (conv+linear): " << report.total_flops() << " (" << std::setprecision(2)
       << total_f / 1e9 << "G)\n";
    os << "attention matmul flops:    " << report.total_attn_flops() << " ("
       << std::setprecision(2) << total_a / 1e9 << "G), combined "
       << (total_f + total_a) / 1e9 << "G\n";
    if (const GoldenCost* gold = golden_cost(variant)) {
        os << "reference " << variant << ": " << std::setprecision(1) << gold->params / 1e6
           << "M params, " << gold->flops / 1e9 << "G flops; delta " << std::showpos
           << std::setprecision(2) << (total_p / gold->params - 1.0) * 100.0 << "% params, "
           << (total_f / gold->flops - 1.0) * 100.0 << "% flops" << std::noshowpos << "\n";
    }
    return os.str();
}

inline std::string report_to_tsv(const CostReport& report, const CountInclude& inc = {}) {
    std::ostringstream os;
    os << "layer\tkind\tparams\tflops\tattn_flops\tshape\n";
    for (const auto& r : report.rows) {
        os << r.name << "\t" << r.kind << "\t" << r.params(inc) << "\t" << r.flops << "\t"
           << r.attn_flops << "\t" << shape_str(r.output_shape) << "\n";
    }
    return os.str();
}

}  // namespace contnet
