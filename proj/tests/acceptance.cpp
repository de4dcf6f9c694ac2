// Acceptance suite: one line per criterion, nonzero exit when any fail.
// Every tolerance is pinned here, not configurable.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "contnet/analysis.hpp"
#include "contnet/checkpoint.hpp"
#include "contnet/config.hpp"
#include "contnet/contnet.hpp"
#include "contnet/dataset.hpp"
#include "contnet/gradsuite.hpp"
#include "contnet/train.hpp"
#include "contnet/transformer.hpp"

namespace {

using contnet::ModelConfig;
using contnet::Tensor;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Harness {
    int failed = 0;
    int total = 0;

    void report(const std::string& name, bool pass, const std::string& detail) {
        ++total;
        if (!pass) ++failed;
        std::printf("[%s] %s: %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
        std::fflush(stdout);
    }
};

ModelConfig tiny_config() {
    ModelConfig cfg;
    const std::int64_t d[4] = {8, 16, 32, 64};
    const std::int64_t heads[4] = {1, 2, 4, 8};
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

Tensor<double> random_tensor(contnet::Shape shape, contnet::Rng& rng, double scale = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(contnet::numel_of(shape)));
    for (auto& x : v) x = rng.uniform(-scale, scale);
    return Tensor<double>::from_values(std::move(shape), std::move(v));
}

std::string tmp_file(const std::string& name) {
    return std::string("acceptance_") + name;
}

std::vector<unsigned char> slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// --------------------------------------------------------------------------

void criterion_param_counts(Harness& h) {
    std::ostringstream detail;
    bool pass = true;
    for (const char* v : {"ti", "s", "m", "b"}) {
        const auto t0 = Clock::now();
        auto m = contnet::build_network<float>(contnet::variant_config(v), 1);
        const double params = static_cast<double>(contnet::count_params(m));
        const double elapsed = seconds_since(t0);
        const double delta = params / contnet::golden_cost(v)->params - 1.0;
        const bool ok = std::abs(delta) <= 0.05 && elapsed < 5.0;
        pass = pass && ok;
        detail << v << " " << std::fixed << std::setprecision(0) << params << " ("
               << std::showpos << std::setprecision(2) << delta * 100.0 << "%" << std::noshowpos
               << ", " << std::setprecision(1) << elapsed << "s) ";
    }
    h.report("parameter reproduction +-5% of 5.8M/10.1M/19.2M/39.6M", pass, detail.str());
}

void criterion_flop_counts(Harness& h) {
    std::ostringstream detail;
    bool pass = true;
    for (const char* v : {"ti", "s", "m", "b"}) {
        const auto t0 = Clock::now();
        auto m = contnet::build_network<float>(contnet::variant_config(v), 1);
        const double flops = static_cast<double>(contnet::count_flops(m, 1, 224));
        const double elapsed = seconds_since(t0);
        const double delta = flops / contnet::golden_cost(v)->flops - 1.0;
        const bool ok = std::abs(delta) <= 0.10 && elapsed < 5.0;
        pass = pass && ok;
        detail << v << " " << std::fixed << std::setprecision(3) << flops / 1e9 << "G ("
               << std::showpos << std::setprecision(2) << delta * 100.0 << "%" << std::noshowpos
               << ") ";
    }
    h.report("flop reproduction +-10% of 0.8G/1.5G/3.1G/6.4G at 224x224", pass, detail.str());
}

void criterion_formula_audit(Harness& h) {
    bool pass = true;
    std::int64_t ste_layers = 0, conv_layers = 0;
    std::ostringstream detail;
    for (const char* v : {"ti", "s", "m", "b"}) {
        auto cfg = contnet::variant_config(v);
        cfg.strict_paper = true;
        cfg.pe_kind = contnet::PeKind::Learnable1d;
        auto m = contnet::build_network<float>(cfg, 1);
        auto report = contnet::summarize(m);
        for (const auto& row : report.rows) {
            if (row.kind == "ste") {
                ++ste_layers;
                const std::int64_t measured = row.weight_params + row.pe_params;
                if (measured != contnet::ste_param_formula(row.ste_d, row.ste_d_ffn, row.ste_patch)) {
                    pass = false;
                    detail << row.name << "@" << v << " mismatch ";
                }
            }
        }
        // width-preserving 3x3 convolutions measure exactly 9C^2
        for (std::size_t s = 0; s < 4; ++s) {
            for (const auto& block : m.stages[s]) {
                const auto& conv = block.conv_path[0].conv;
                if (conv.kernel() == 3 && conv.in_channels() == conv.out_channels()) {
                    ++conv_layers;
                    const std::int64_t c = conv.in_channels();
                    if (conv.weight.numel() != 9 * c * c) {
                        pass = false;
                        detail << "conv@" << v << " mismatch ";
                    }
                }
            }
        }
    }
    detail << ste_layers << " STE layers and " << conv_layers
           << " width-preserving 3x3 convs match exactly";
    h.report("formula audit (strict mode, exact)", pass, detail.str());
}

void criterion_shape_contract(Harness& h) {
    bool pass = true;
    std::ostringstream detail;
    for (const char* v : {"ti", "s", "m", "b"}) {
        auto m = contnet::build_network<float>(contnet::variant_config(v), 1);
        contnet::NoGradGuard ng;
        auto x = Tensor<float>::zeros({1, 3, 224, 224});
        contnet::StageTrace trace;
        auto logits = m.forward(x, &trace);
        const std::int64_t expected[4] = {56, 28, 14, 7};
        bool ok = logits.shape() == contnet::Shape{1, 1000};
        for (std::size_t s = 0; s < 4; ++s) {
            ok = ok && trace.stage_in[s][2] == expected[s] && trace.stage_in[s][3] == expected[s];
        }
        pass = pass && ok;
        detail << v << " " << trace.stage_in[0][2] << "/" << trace.stage_in[1][2] << "/"
               << trace.stage_in[2][2] << "/" << trace.stage_in[3][2] << "->"
               << logits.shape()[1] << " ";
    }
    h.report("shape contract [56,28,14,7] + 1000-d logits (real forwards)", pass, detail.str());
}

void criterion_gradient_suite(Harness& h) {
    const auto t0 = Clock::now();
    auto results = contnet::run_gradient_suite(1);
    const double worst = contnet::worst_error(results);
    const double elapsed = seconds_since(t0);
    std::ostringstream detail;
    detail << results.size() << " checks, worst " << std::scientific << std::setprecision(2)
           << worst << ", " << std::fixed << std::setprecision(1) << elapsed << "s";
    h.report("gradient suite < 1e-4 within 2 min", worst < 1e-4 && elapsed < 120.0, detail.str());
}

void criterion_equivariance(Harness& h) {
    bool pass = true;
    std::ostringstream detail;
    contnet::Rng rng(3);

    // patch round trip is bit-exact
    for (std::int64_t p : {1, 2, 4, 7, 14}) {
        auto x = random_tensor({1, 3, 28, 28}, rng);
        auto back = contnet::merge_patches(contnet::split_patches(x, p));
        for (std::size_t i = 0; i < x.values().size(); ++i) {
            if (back.values()[i] != x.values()[i]) pass = false;
        }
    }
    detail << "round-trip bit-exact; ";

    // shared-weight STE on a 2x2 patch grid
    const std::int64_t c = 4, p_sz = 2;
    auto ste = contnet::STEParams<double>::make_zero(c, c, 8, 2);
    for (auto* t : {&ste.w_q, &ste.w_k, &ste.w_v, &ste.w_mhsa, &ste.w1, &ste.w2}) {
        for (auto& v : t->values()) v = rng.uniform(-0.5, 0.5);
    }
    auto x = random_tensor({1, c, 4, 4}, rng);

    // grid permutation (swap the two patch-grid rows) commutes with the op
    {
        auto xs = Tensor<double>::zeros({1, c, 4, 4});
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j)
                    xs.values()[static_cast<std::size_t>((ch * 4 + i) * 4 + j)] =
                        x.values()[static_cast<std::size_t>((ch * 4 + (i + 2) % 4) * 4 + j)];
        auto y = contnet::apply_ste_patchwise(x, ste, p_sz);
        auto ys = contnet::apply_ste_patchwise(xs, ste, p_sz);
        double worst = 0;
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j)
                    worst = std::max(worst,
                                     std::abs(ys.values()[static_cast<std::size_t>((ch * 4 + i) * 4 + j)] -
                                              y.values()[static_cast<std::size_t>((ch * 4 + (i + 2) % 4) * 4 + j)]));
        pass = pass && worst <= 1e-6;
        detail << "grid-permutation " << std::scientific << std::setprecision(1) << worst << "; ";
    }

    // within-patch pixel permutation commutes without PE and stops commuting
    // with a generic learnable table
    {
        const std::int64_t perm[4] = {3, 0, 1, 2};
        auto permute_within = [&](const Tensor<double>& in) {
            auto g = contnet::split_patches(in, p_sz);
            auto gp = g;
            gp.grid = Tensor<double>::zeros(g.grid.shape());
            for (std::int64_t cell = 0; cell < 4; ++cell)
                for (std::int64_t s = 0; s < 4; ++s)
                    for (std::int64_t ch = 0; ch < c; ++ch)
                        gp.grid.values()[static_cast<std::size_t>((cell * 4 + s) * c + ch)] =
                            g.grid.values()[static_cast<std::size_t>((cell * 4 + perm[s]) * c + ch)];
            return contnet::merge_patches(gp);
        };
        auto diff_after_permute = [&](const contnet::STEParams<double>& params) {
            auto y = contnet::apply_ste_patchwise(x, params, p_sz);
            auto yp = contnet::apply_ste_patchwise(permute_within(x), params, p_sz);
            auto y_perm = permute_within(y);
            double worst = 0;
            for (std::size_t i = 0; i < y_perm.values().size(); ++i)
                worst = std::max(worst, std::abs(yp.values()[i] - y_perm.values()[i]));
            return worst;
        };
        const double without_pe = diff_after_permute(ste);
        auto with_pe = ste;
        with_pe.pe.kind = contnet::PeKind::Learnable1d;
        with_pe.pe.table = random_tensor({4, c}, rng);
        const double with_pe_diff = diff_after_permute(with_pe);
        pass = pass && without_pe <= 1e-6 && with_pe_diff > 1e-3;
        detail << "pixel-permutation no-pe " << std::scientific << std::setprecision(1)
               << without_pe << ", learnable-pe breaks it (" << std::setprecision(1)
               << with_pe_diff << ")";
    }
    h.report("equivariance suite", pass, detail.str());
}

void criterion_ablations(Harness& h) {
    bool pass = true;
    int rows = 0;
    std::ostringstream detail;
    auto exercise = [&](const ModelConfig& cfg, const std::string& label) {
        try {
            auto m = contnet::build_network<float>(cfg, 1);
            contnet::NoGradGuard ng;
            auto x = Tensor<float>::zeros({1, 3, 224, 224});
            auto logits = m.forward(x);
            auto report = contnet::summarize(m);
            if (logits.shape() != contnet::Shape{1, 1000} || report.total_params({}) <= 0) {
                pass = false;
                detail << label << " bad-output ";
            }
            ++rows;
            return report;
        } catch (const std::exception& e) {
            pass = false;
            detail << label << " threw ";
            ++rows;
            return contnet::CostReport{};
        }
    };
    const ModelConfig base = contnet::variant_config("m");
    for (const char* choice : {"none", "1d", "2d", "2d-image", "relative"}) {
        exercise(contnet::make_ablation_config(base, contnet::AblationAxis::Pe, choice),
                 std::string("pe=") + choice);
    }
    for (const char* choice : {"all-7", "all-14", "block-alternating", "per-ste"}) {
        exercise(contnet::make_ablation_config(base, contnet::AblationAxis::PatchSize, choice),
                 std::string("patch=") + choice);
    }
    auto report_g1 = exercise(contnet::make_ablation_config(base, contnet::AblationAxis::Groups, "1"),
                              "groups=1");
    for (const char* choice : {"4", "8", "16"}) {
        auto report = exercise(contnet::make_ablation_config(base, contnet::AblationAxis::Groups, choice),
                               std::string("groups=") + choice);
        const std::int64_t g = std::atoll(choice);
        for (std::size_t i = 0; i < report.rows.size() && pass; ++i) {
            const auto& row = report.rows[i];
            if (row.kind == "conv" && row.name.find(".conv0") != std::string::npos) {
                if (row.weight_params * g != report_g1.rows[i].weight_params) {
                    pass = false;
                    detail << "groups=" << choice << " scaling ";
                }
            }
        }
    }
    exercise(contnet::make_ablation_config(base, contnet::AblationAxis::Groups, "depthwise"),
             "groups=depthwise");
    detail << rows << " rows built+forwarded+summarized on ConT-M, grouped convs scale 1/g";
    h.report("ablation constructibility (PE x5, patches x4, groups x5)", pass, detail.str());
}

void criterion_desk_scale_learning(Harness& h) {
    const auto t0 = Clock::now();
    contnet::SynthSpec spec;
    spec.classes = 2;
    spec.count = 64;
    spec.height = spec.width = 32;
    spec.seed = 7;
    auto data = contnet::to_dataset<float>(contnet::synth_dataset(spec));
    bool pass = true;
    std::ostringstream detail;
    const double ln2 = std::log(2.0);
    for (const char* opt : {"sgd", "adamw"}) {
        contnet::TrainConfig recipe =
            std::strcmp(opt, "sgd") == 0 ? contnet::sgd_recipe() : contnet::adamw_recipe();
        recipe.steps = 500;
        recipe.batch_size = 16;
        recipe.seed = 7;
        auto m = contnet::build_network<float>(tiny_config(), 7);
        auto history = contnet::train(m, data, recipe);
        const double first = history.step_loss.front();
        const bool loss_ok = first >= 0.8 * ln2 && first <= 1.2 * ln2;
        const bool acc_ok = history.final_accuracy >= 0.95;
        pass = pass && loss_ok && acc_ok;
        detail << opt << " acc " << std::fixed << std::setprecision(3) << history.final_accuracy
               << " loss0 " << std::setprecision(4) << first << " ";
    }
    const double elapsed = seconds_since(t0);
    pass = pass && elapsed < 600.0;
    detail << "(" << std::setprecision(1) << elapsed << "s)";
    h.report("desk-scale learning >=95% in 500 steps, loss0 ~ ln2, both recipes", pass,
             detail.str());
}

void criterion_determinism(Harness& h) {
    bool pass = true;
    std::ostringstream detail;

    // dataset write -> read -> write is byte identical
    {
        contnet::SynthSpec spec;
        spec.classes = 3;
        spec.count = 12;
        spec.height = spec.width = 16;
        spec.seed = 5;
        const std::string p1 = tmp_file("d1.ctds"), p2 = tmp_file("d2.ctds");
        contnet::write_dataset(p1, contnet::synth_dataset(spec));
        contnet::write_dataset(p2, contnet::read_dataset(p1));
        pass = pass && slurp(p1) == slurp(p2);
        detail << "dataset round-trip byte-identical; ";
        std::remove(p1.c_str());
        std::remove(p2.c_str());
    }

    // checkpoint save -> load -> forward is bit identical
    {
        contnet::SynthSpec spec;
        spec.classes = 2;
        spec.count = 16;
        spec.height = spec.width = 32;
        spec.seed = 9;
        auto data = contnet::to_dataset<float>(contnet::synth_dataset(spec));
        auto m = contnet::build_network<float>(tiny_config(), 9);
        contnet::TrainConfig recipe;
        recipe.steps = 8;
        recipe.batch_size = 8;
        recipe.seed = 9;
        contnet::train(m, data, recipe);
        const std::string path = tmp_file("m.ctck");
        contnet::save_checkpoint(path, m);
        auto loaded = contnet::load_checkpoint<float>(path);
        contnet::NoGradGuard ng;
        auto a = m.forward(data.images);
        auto b = loaded.forward(data.images);
        bool same = a.shape() == b.shape();
        for (std::size_t i = 0; same && i < a.values().size(); ++i) same = a.values()[i] == b.values()[i];
        pass = pass && same;
        detail << "checkpoint forward bit-identical; ";
        std::remove(path.c_str());
    }

    // seeded training reruns reproduce the 64-bit loss history exactly
    {
        contnet::SynthSpec spec;
        spec.classes = 2;
        spec.count = 16;
        spec.height = spec.width = 32;
        spec.seed = 11;
        auto data = contnet::to_dataset<double>(contnet::synth_dataset(spec));
        contnet::TrainConfig recipe;
        recipe.steps = 12;
        recipe.batch_size = 8;
        recipe.seed = 11;
        auto m1 = contnet::build_network<double>(tiny_config(), 11);
        auto h1 = contnet::train(m1, data, recipe);
        auto m2 = contnet::build_network<double>(tiny_config(), 11);
        auto h2 = contnet::train(m2, data, recipe);
        bool same = h1.step_loss.size() == h2.step_loss.size();
        for (std::size_t i = 0; same && i < h1.step_loss.size(); ++i) {
            same = h1.step_loss[i] == h2.step_loss[i];
        }
        pass = pass && same;
        detail << "seeded double-precision loss histories identical";
    }
    h.report("determinism and round trips", pass, detail.str());
}

}  // namespace

int main() {
    Harness h;
    criterion_param_counts(h);
    criterion_flop_counts(h);
    criterion_formula_audit(h);
    criterion_shape_contract(h);
    criterion_gradient_suite(h);
    criterion_equivariance(h);
    criterion_ablations(h);
    criterion_desk_scale_learning(h);
    criterion_determinism(h);
    std::printf("%d/%d criteria passed\n", h.total - h.failed, h.total);
    return h.failed == 0 ? 0 : 1;
}
