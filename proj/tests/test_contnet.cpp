#include <gtest/gtest.h>

#include <cctype>
#include <cmath>
#include <vector>

#include "contnet/analysis.hpp"
#include "contnet/contnet.hpp"
#include "contnet/rng.hpp"

using contnet::AblationAxis;
using contnet::Model;
using contnet::ModelConfig;
using contnet::PeKind;
using contnet::PePlacement;
using contnet::Shape;
using contnet::StageTrace;
using contnet::Tensor;

namespace {

// 32x32-input model small enough for real forward/backward in tests
ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.variant = "custom";
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

Tensor<double> random_image(std::int64_t n, std::int64_t size, contnet::Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(n * 3 * size * size));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor<double>::from_values({n, 3, size, size}, std::move(v));
}

}  // namespace

TEST(VariantTable, MediumSettings) {
    auto cfg = contnet::variant_config("m");
    const std::int64_t d[4] = {64, 128, 256, 512};
    const std::int64_t dffn[4] = {256, 512, 1024, 1024};
    const std::int64_t heads[4] = {1, 2, 4, 8};
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(cfg.stages[i].d, d[i]);
        EXPECT_EQ(cfg.stages[i].d_ffn, dffn[i]);
        EXPECT_EQ(cfg.stages[i].heads, heads[i]);
        EXPECT_EQ(cfg.stages[i].blocks, 2);
    }
}

TEST(VariantTable, TinyAndBigSettings) {
    auto ti = contnet::variant_config("ti");
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(ti.stages[i].blocks, 1);
    EXPECT_EQ(ti.stages[3].d, 384);
    EXPECT_EQ(ti.stages[3].d_ffn, 768);
    auto b = contnet::variant_config("b");
    EXPECT_EQ(b.stages[0].blocks, 3);
    EXPECT_EQ(b.stages[1].blocks, 4);
    EXPECT_EQ(b.stages[2].blocks, 6);
    EXPECT_EQ(b.stages[3].blocks, 3);
    EXPECT_THROW(contnet::variant_config("xl"), contnet::ValueError);
}

TEST(BuildNetwork, RejectsIndivisibleHeads) {
    auto cfg = tiny_config();
    cfg.stages[1].heads = 3;  // 16 % 3 != 0
    EXPECT_THROW(contnet::build_network<double>(cfg), contnet::ValueError);
}

TEST(BuildNetwork, RejectsBadPatchSchedule) {
    auto cfg = tiny_config();
    cfg.stages[0].patch_schedule = {{3, 4}};  // 3 does not divide the 8x8 map
    EXPECT_THROW(contnet::build_network<double>(cfg), contnet::ValueError);
}

TEST(BuildNetwork, EveryParameterTaggedOnce) {
    auto m = contnet::build_network<double>(tiny_config(), 1);
    std::int64_t total = 0, conv_side = 0, ste_side = 0;
    for (const auto& e : m.params.entries()) {
        total += e.tensor.numel();
        (e.group == contnet::ParamGroup::Conv ? conv_side : ste_side) += e.tensor.numel();
    }
    EXPECT_EQ(total, conv_side + ste_side);
    EXPECT_GT(conv_side, 0);
    EXPECT_GT(ste_side, 0);
    EXPECT_EQ(total, m.params.element_count());
    // LN and PE tables must sit in the ste group
    for (const auto& e : m.params.entries()) {
        if (e.name.find(".ln") != std::string::npos || e.name.find(".pe.") != std::string::npos) {
            EXPECT_EQ(e.group, contnet::ParamGroup::Ste) << e.name;
        }
        if (e.name.find(".bn.") != std::string::npos || e.name.find("head.") == 0 ||
            e.name.find("stem") == 0) {
            EXPECT_EQ(e.group, contnet::ParamGroup::Conv) << e.name;
        }
    }
}

TEST(Forward, TracesTinyStagePyramid) {
    auto m = contnet::build_network<double>(tiny_config(), 2);
    contnet::Rng rng(1);
    auto x = random_image(1, 32, rng);
    StageTrace trace;
    contnet::NoGradGuard ng;
    auto logits = m.forward(x, &trace);
    EXPECT_EQ(trace.stage_in[0], (Shape{1, 8, 8, 8}));
    EXPECT_EQ(trace.stage_in[1], (Shape{1, 16, 4, 4}));
    EXPECT_EQ(trace.stage_in[2], (Shape{1, 32, 2, 2}));
    EXPECT_EQ(trace.stage_in[3], (Shape{1, 64, 1, 1}));
    EXPECT_EQ(logits.shape(), (Shape{1, 2}));
    EXPECT_EQ(trace.logits, (Shape{1, 2}));
}

TEST(Forward, DeterministicAndBatchIndependent) {
    auto m = contnet::build_network<double>(tiny_config(), 3);
    contnet::Rng rng(2);
    auto x = random_image(3, 32, rng);
    contnet::NoGradGuard ng;
    auto a = m.forward(x);
    auto b = m.forward(x);
    for (std::size_t i = 0; i < a.values().size(); ++i) EXPECT_EQ(a.values()[i], b.values()[i]);
    // per-sample forwards agree with the batched one in infer mode
    for (int s = 0; s < 3; ++s) {
        std::vector<double> one(x.values().begin() + s * 3 * 32 * 32,
                                x.values().begin() + (s + 1) * 3 * 32 * 32);
        auto xs = Tensor<double>::from_values({1, 3, 32, 32}, std::move(one));
        auto ys = m.forward(xs);
        for (int k = 0; k < 2; ++k)
            EXPECT_EQ(ys.values()[static_cast<std::size_t>(k)], a.values()[static_cast<std::size_t>(s * 2 + k)]);
    }
}

TEST(ContBlock, NonDownsamplingPreservesShape) {
    auto cfg = tiny_config();
    cfg.stages[0].blocks = 2;
    cfg.stages[0].patch_schedule = {{2, 4}, {2, 4}};
    auto m = contnet::build_network<double>(cfg, 4);
    contnet::Rng rng(3);
    std::vector<double> v(static_cast<std::size_t>(8 * 8 * 8));
    for (auto& x : v) x = rng.uniform(-1, 1);
    auto x = Tensor<double>::from_values({1, 8, 8, 8}, std::move(v));
    contnet::NoGradGuard ng;
    auto y = m.stages[0][0].forward(x, contnet::NormMode::Infer);
    EXPECT_EQ(y.shape(), x.shape());
    auto down = m.stages[0][1].forward(y, contnet::NormMode::Infer);
    EXPECT_EQ(down.shape(), (Shape{1, 16, 4, 4}));
}

TEST(ContBlock, ZeroTransformWeightsReduceToShortcut) {
    auto cfg = tiny_config();
    auto m = contnet::build_network<double>(cfg, 5);
    // zero every STE/conv weight of stage-1 block 0, keep the shortcut
    auto& block = m.stages[0][0];
    for (auto& e : m.params.entries()) {
        if (e.name.rfind("s1.b0.", 0) == 0 && e.name.find("shortcut") == std::string::npos) {
            for (auto& v : e.tensor.values()) v = 0.0;
        }
    }
    contnet::Rng rng(4);
    std::vector<double> v(static_cast<std::size_t>(8 * 8 * 8));
    for (auto& x : v) x = rng.uniform(-1, 1);
    auto x = Tensor<double>::from_values({1, 8, 8, 8}, std::move(v));
    contnet::NoGradGuard ng;
    auto y = block.forward(x, contnet::NormMode::Infer);
    // transform path contributes exactly zero, so the block is relu(shortcut(x))
    auto expect = contnet::relu(block.shortcut->forward(x, contnet::NormMode::Infer));
    ASSERT_EQ(y.shape(), expect.shape());
    for (std::size_t i = 0; i < y.values().size(); ++i)
        EXPECT_NEAR(y.values()[i], expect.values()[i], 1e-12);
}

TEST(Network, ZeroedBlocksComputeShortcutCascade) {
    auto m = contnet::build_network<double>(tiny_config(), 21);
    for (auto& e : m.params.entries()) {
        const bool in_block = e.name.size() > 2 && e.name[0] == 's' && std::isdigit(e.name[1]);
        if (in_block && e.name.find("shortcut") == std::string::npos &&
            e.kind == contnet::ParamKind::Weight) {
            for (auto& v : e.tensor.values()) v = 0.0;
        }
    }
    for (auto& v : m.head_weight.values()) v = 0.01;  // logits must still read the features
    contnet::Rng rng(12);
    auto x = random_image(1, 32, rng);
    contnet::NoGradGuard ng;
    auto logits = m.forward(x);
    // hand-composed path: stem, pool, then only the shortcut of each block
    auto h = m.stem.forward(x, contnet::NormMode::Infer);
    h = contnet::pool2d(h, contnet::PoolKind::Max, 3, 2, 1);
    for (std::size_t s = 0; s < 4; ++s) {
        for (auto& block : m.stages[s]) {
            auto sc = block.shortcut ? block.shortcut->forward(h, contnet::NormMode::Infer) : h;
            h = contnet::relu(sc);
        }
    }
    auto expect = contnet::linear(contnet::global_avg_pool(h), m.head_weight,
                                  std::optional<contnet::Tensor<double>>(m.head_bias));
    ASSERT_EQ(logits.shape(), expect.shape());
    for (std::size_t i = 0; i < logits.values().size(); ++i) {
        EXPECT_NEAR(logits.values()[i], expect.values()[i], 1e-12);
    }
}

TEST(ContBlock, IdentityShortcutWhenShapePreserved) {
    auto cfg = tiny_config();
    cfg.stages[0].blocks = 2;
    cfg.stages[0].patch_schedule = {{2, 4}, {2, 4}};
    auto m = contnet::build_network<double>(cfg, 6);
    EXPECT_FALSE(m.stages[0][0].shortcut.has_value());  // stride 1, same width
    EXPECT_TRUE(m.stages[0][1].shortcut.has_value());   // downsampling block
    EXPECT_TRUE(m.stages[3][0].shortcut.has_value());   // widening 1x1 block
}

TEST(Ablation, PeChoicesBuildAndForward) {
    contnet::Rng rng(5);
    auto x = random_image(1, 32, rng);
    for (const std::string choice : {"none", "1d", "2d", "2d-image", "relative"}) {
        auto cfg = contnet::make_ablation_config(tiny_config(), AblationAxis::Pe, choice);
        auto m = contnet::build_network<double>(cfg, 7);
        contnet::NoGradGuard ng;
        auto y = m.forward(x);
        EXPECT_EQ(y.shape(), (Shape{1, 2})) << choice;
    }
    EXPECT_THROW(contnet::make_ablation_config(tiny_config(), AblationAxis::Pe, "sinusoid"),
                 contnet::ValueError);
}

TEST(Ablation, PatchChoicesRewriteSchedules) {
    auto all14 = contnet::make_ablation_config(contnet::variant_config("m"), AblationAxis::PatchSize,
                                               "all-14");
    for (const auto& stage : all14.stages)
        for (auto [p1, p2] : stage.patch_schedule) {
            EXPECT_EQ(p1, 14);
            EXPECT_EQ(p2, 14);
        }
    auto alt = contnet::make_ablation_config(contnet::variant_config("m"), AblationAxis::PatchSize,
                                             "block-alternating");
    EXPECT_EQ(alt.stages[0].patch_schedule[0], (std::pair<std::int64_t, std::int64_t>{7, 7}));
    EXPECT_EQ(alt.stages[0].patch_schedule[1], (std::pair<std::int64_t, std::int64_t>{14, 14}));
}

TEST(Ablation, GroupConfigsKeepShapesAndShrinkConvParams) {
    contnet::Rng rng(6);
    auto x = random_image(1, 32, rng);
    auto base_cfg = tiny_config();
    auto base = contnet::build_network<double>(base_cfg, 8);
    contnet::NoGradGuard ng;
    auto base_logits = base.forward(x);
    auto base_report = contnet::summarize(base);
    for (const std::string choice : {"4", "8", "depthwise"}) {
        auto cfg = contnet::make_ablation_config(base_cfg, AblationAxis::Groups, choice);
        auto m = contnet::build_network<double>(cfg, 8);
        auto y = m.forward(x);
        EXPECT_EQ(y.shape(), base_logits.shape()) << choice;
        if (choice == "4" || choice == "8") {
            const std::int64_t g = std::stoll(choice);
            auto report = contnet::summarize(m);
            for (std::size_t i = 0; i < report.rows.size(); ++i) {
                const auto& row = report.rows[i];
                if (row.kind == "conv" && row.name.find(".conv0") != std::string::npos) {
                    EXPECT_EQ(row.weight_params * g, base_report.rows[i].weight_params) << row.name;
                }
            }
        }
    }
}

TEST(Ablation, StrictPaperModeDropsNormsAndActivations) {
    auto cfg = tiny_config();
    cfg.strict_paper = true;
    auto m = contnet::build_network<double>(cfg, 9);
    EXPECT_FALSE(m.stem.bn.has_value());
    for (const auto& e : m.params.entries()) {
        EXPECT_EQ(e.name.find(".bn."), std::string::npos) << e.name;
    }
    EXPECT_FALSE(m.stages[0][0].relu_after_add);
    EXPECT_FALSE(m.stages[0][0].ste1.ffn_activation);
    contnet::Rng rng(7);
    auto x = random_image(1, 32, rng);
    contnet::NoGradGuard ng;
    auto y = m.forward(x);
    EXPECT_EQ(y.shape(), (Shape{1, 2}));
}

TEST(StemProj, InsertedOnlyOnWidthMismatch) {
    auto cfg = tiny_config();
    auto plain = contnet::build_network<double>(cfg, 10);
    EXPECT_FALSE(plain.stem_proj.has_value());
    cfg.stem_width = 12;
    auto projected = contnet::build_network<double>(cfg, 10);
    ASSERT_TRUE(projected.stem_proj.has_value());
    contnet::Rng rng(8);
    auto x = random_image(1, 32, rng);
    contnet::NoGradGuard ng;
    EXPECT_EQ(projected.forward(x).shape(), (Shape{1, 2}));
}

TEST(Forward, GradientFlowsEndToEnd) {
    auto m = contnet::build_network<double>(tiny_config(), 11);
    contnet::Rng rng(9);
    for (auto& v : m.head_weight.values()) v = rng.uniform(-0.2, 0.2);  // zero head blocks flow
    m.train_mode();
    auto x = random_image(2, 32, rng);
    auto logits = m.forward(x);
    contnet::backward(contnet::sum(contnet::mul(logits, logits)));
    std::size_t with_grad = 0;
    for (const auto& e : m.params.entries()) {
        if (e.tensor.has_grad()) {
            double norm = 0;
            for (double g : e.tensor.grad()) norm += g * g;
            if (norm > 0) ++with_grad;
        }
    }
    // everything except unused-at-this-seed corner cases must receive gradient
    EXPECT_GT(with_grad, m.params.size() * 9 / 10);
}
