#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "contnet/analysis.hpp"
#include "contnet/checkpoint.hpp"
#include "contnet/config.hpp"
#include "contnet/contnet.hpp"
#include "contnet/dataset.hpp"
#include "contnet/gradsuite.hpp"
#include "contnet/train.hpp"

namespace {

using contnet::AblationAxis;
using contnet::ModelConfig;
using contnet::TrainConfig;

std::string read_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw contnet::IoError("cannot open " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

std::pair<std::int64_t, std::int64_t> parse_hw(const std::string& text) {
    const auto x = text.find('x');
    if (x == std::string::npos) {
        throw contnet::ValueError("expected HxW, got '" + text + "'");
    }
    return {std::stoll(text.substr(0, x)), std::stoll(text.substr(x + 1))};
}

ModelConfig config_from_flags(const std::string& variant, const std::string& pe,
                              const std::string& pe_placement, const std::string& groups,
                              const std::string& patch_schedule, bool strict) {
    ModelConfig cfg = contnet::variant_config(variant);
    if (!pe.empty()) {
        cfg.pe_kind = contnet::detail::parse_pe_kind(pe);
    }
    if (!pe_placement.empty()) {
        cfg.pe_placement = contnet::detail::parse_pe_placement(pe_placement);
    }
    if (!groups.empty()) {
        cfg = contnet::make_ablation_config(cfg, AblationAxis::Groups, groups);
    }
    if (!patch_schedule.empty()) {
        cfg = contnet::make_ablation_config(cfg, AblationAxis::PatchSize, patch_schedule);
    }
    cfg.strict_paper = strict;
    return cfg;
}

int run_summary(const std::string& variant, const std::string& pe, const std::string& pe_placement,
                const std::string& groups, const std::string& patch_schedule, bool strict,
                const std::string& input, const std::string& format) {
    ModelConfig cfg = config_from_flags(variant, pe, pe_placement, groups, patch_schedule, strict);
    if (!input.empty()) {
        const auto [h, w] = parse_hw(input);
        if (h != w) throw contnet::ValueError("summary expects a square input, got " + input);
        cfg.input_size = h;
    }
    auto model = contnet::build_network<float>(cfg);
    auto report = contnet::summarize(model);
    if (format == "tsv") {
        std::cout << contnet::report_to_tsv(report);
    } else {
        // the reference totals are quoted at 224x224
        std::cout << contnet::report_to_text(report, cfg.input_size == 224 ? variant : "");
    }
    return 0;
}

int run_shapes(const std::string& variant, const std::string& config_path, const std::string& input,
               const std::string& format) {
    ModelConfig cfg = config_path.empty()
                          ? contnet::variant_config(variant)
                          : contnet::model_config_from_kv(contnet::detail::parse_kv(read_file(config_path)));
    if (!input.empty()) {
        const auto [h, w] = parse_hw(input);
        if (h != w) throw contnet::ValueError("shapes expects a square input, got " + input);
        cfg.input_size = h;
    }
    cfg.validate();
    auto model = contnet::build_network<float>(cfg);
    auto report = contnet::summarize(model);
    if (format == "tsv") {
        std::cout << "stage\tmap\twidth\tblocks\n";
        for (std::size_t s = 0; s < 4; ++s) {
            std::cout << (s + 1) << "\t" << cfg.stage_map(s) << "\t" << cfg.stages[s].d << "\t"
                      << cfg.stages[s].blocks << "\n";
        }
        std::cout << "logits\t1\t" << cfg.num_classes << "\t-\n";
    } else {
        std::cout << "input " << cfg.input_size << "x" << cfg.input_size << "\n";
        for (std::size_t s = 0; s < 4; ++s) {
            std::cout << "stage " << (s + 1) << ": map " << cfg.stage_map(s) << "x"
                      << cfg.stage_map(s) << ", width " << cfg.stages[s].d << ", blocks "
                      << cfg.stages[s].blocks << "\n";
        }
        std::cout << "head: " << cfg.head_width() << " -> logits " << cfg.num_classes << "\n";
        std::cout << "\nper-layer shapes:\n";
        for (const auto& row : report.rows) {
            std::cout << "  " << row.name << " -> " << contnet::shape_str(row.output_shape) << "\n";
        }
    }
    return 0;
}

int run_gradcheck(const std::string& config_path, std::uint64_t seed, double tol) {
    std::vector<contnet::GradCheckEntry> results;
    if (config_path.empty()) {
        results = contnet::run_gradient_suite(seed);
    } else {
        auto cfg = contnet::model_config_from_kv(contnet::detail::parse_kv(read_file(config_path)));
        results = contnet::run_gradient_suite(seed, &cfg);
    }
    for (const auto& e : results) {
        std::printf("%-34s %.3e\n", e.name.c_str(), e.max_rel_error);
    }
    const double worst = contnet::worst_error(results);
    std::printf("worst relative error: %.3e (tolerance %.1e)\n", worst, tol);
    return worst < tol ? 0 : 1;
}

int run_synth(const std::string& out, std::int64_t classes, std::int64_t count,
              const std::string& size, std::int64_t channels, std::uint64_t seed, double noise) {
    contnet::SynthSpec spec;
    spec.classes = classes;
    spec.count = count;
    spec.channels = channels;
    const auto [h, w] = parse_hw(size);
    spec.height = h;
    spec.width = w;
    spec.seed = seed;
    spec.noise = noise;
    contnet::write_dataset(out, contnet::synth_dataset(spec));
    std::cout << "wrote " << count << " images (" << channels << "x" << h << "x" << w << ", "
              << classes << " classes, seed " << seed << ") to " << out << "\n";
    return 0;
}

int run_train(const std::string& config_path, const std::string& data_path, const std::string& out,
              const std::string& history_path, std::int64_t seed_override) {
    const std::string text = read_file(config_path);
    const auto kv = contnet::detail::parse_kv(text);
    ModelConfig model_cfg = contnet::model_config_from_kv(kv);
    TrainConfig train_cfg = contnet::train_config_from_kv(kv);
    if (seed_override >= 0) train_cfg.seed = static_cast<std::uint64_t>(seed_override);

    auto raw = contnet::read_dataset(data_path);
    auto data = contnet::to_dataset<float>(raw, model_cfg.num_classes);
    auto model = contnet::build_network<float>(model_cfg, train_cfg.seed);
    std::cout << "training " << model_cfg.variant << " (" << contnet::count_params(model)
              << " params) on " << data.count() << " images\n";
    auto history = contnet::train(model, data, train_cfg);
    for (std::size_t e = 0; e < history.epoch_accuracy.size(); ++e) {
        if ((e + 1) % 10 == 0 || e + 1 == history.epoch_accuracy.size()) {
            std::cout << "epoch " << (e + 1) << ": train accuracy " << history.epoch_accuracy[e]
                      << "\n";
        }
    }
    std::cout << "steps " << history.step_loss.size() << ", first loss " << history.step_loss.front()
              << ", last loss " << history.step_loss.back() << ", final train accuracy "
              << history.final_accuracy << "\n";
    if (!out.empty()) {
        contnet::save_checkpoint(out, model);
        std::cout << "checkpoint written to " << out << "\n";
    }
    if (!history_path.empty()) {
        std::ofstream os(history_path);
        os << "step\tloss\n";
        for (std::size_t i = 0; i < history.step_loss.size(); ++i) {
            os << i << "\t" << std::setprecision(17) << history.step_loss[i] << "\n";
        }
        std::cout << "loss history written to " << history_path << "\n";
    }
    return 0;
}

int run_eval(const std::string& ckpt, const std::string& data_path) {
    auto model = contnet::load_checkpoint<float>(ckpt);
    auto raw = contnet::read_dataset(data_path);
    auto data = contnet::to_dataset<float>(raw, model.cfg.num_classes);
    const double acc = contnet::evaluate(model, data);
    std::cout << "top-1 accuracy: " << acc << " (" << data.count() << " images)\n";
    return 0;
}

int run_ablate(const std::string& axis, const std::string& choice, const std::string& variant,
               const std::string& format, const std::string& data_path, bool do_train,
               std::int64_t steps, std::int64_t seed) {
    ModelConfig cfg = contnet::variant_config(variant);
    TrainConfig recipe = contnet::sgd_recipe();
    if (axis == "pe") {
        cfg = contnet::make_ablation_config(cfg, AblationAxis::Pe, choice);
    } else if (axis == "patch") {
        cfg = contnet::make_ablation_config(cfg, AblationAxis::PatchSize, choice);
    } else if (axis == "groups") {
        cfg = contnet::make_ablation_config(cfg, AblationAxis::Groups, choice);
    } else if (axis == "lr") {
        // choice is conv:ste, the split learning-rate pairs of the study
        const auto colon = choice.find(':');
        if (colon == std::string::npos) {
            throw contnet::ValueError("lr ablation expects conv:ste, got '" + choice + "'");
        }
        recipe.lr_conv = std::stod(choice.substr(0, colon));
        recipe.lr_ste = std::stod(choice.substr(colon + 1));
        recipe.validate();
    } else {
        throw contnet::ValueError("unknown ablation axis '" + axis + "'");
    }
    auto model = contnet::build_network<float>(cfg, static_cast<std::uint64_t>(seed));
    auto report = contnet::summarize(model);
    if (format == "tsv") {
        std::cout << contnet::report_to_tsv(report);
    } else {
        std::cout << "ablation " << axis << " = " << choice << " on " << variant << "\n";
        if (axis == "lr") {
            std::cout << "recipe: lr_conv " << recipe.lr_conv << ", lr_ste " << recipe.lr_ste
                      << "\n";
        }
        std::cout << contnet::report_to_text(report, variant);
    }
    if (do_train) {
        if (data_path.empty()) throw contnet::ValueError("ablate --train needs --data");
        auto raw = contnet::read_dataset(data_path);
        // desk-scale: shrink the model to the data geometry is the caller's
        // job; here we only require compatibility
        auto data = contnet::to_dataset<float>(raw, cfg.num_classes);
        recipe.steps = steps;
        recipe.seed = static_cast<std::uint64_t>(seed);
        auto history = contnet::train(model, data, recipe);
        std::cout << "trained " << history.step_loss.size() << " steps, final train accuracy "
                  << history.final_accuracy << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ConTNet reference implementation: build, analyze, train and evaluate"};
    app.require_subcommand(1);

    std::string variant = "m", pe, pe_placement, groups, patch_schedule, input, format = "text";
    std::string config_path, data_path, out_path, ckpt_path, history_path, axis, choice, size =
        "32x32";
    bool strict = false, do_train = false;
    std::int64_t classes = 2, count = 64, channels = 3, steps = 500, seed_override = -1;
    std::uint64_t seed = 0;
    double tol = 1e-4, noise = 0.06;

    auto* summary = app.add_subcommand("summary", "print the per-layer cost report");
    summary->add_option("--variant", variant, "ti|s|m|b")->required();
    summary->add_option("--groups", groups, "block-conv groups: 1|4|8|16|depthwise");
    summary->add_option("--pe", pe, "positional encoding: none|1d|2d|relative");
    summary->add_option("--pe-placement", pe_placement, "patch_wise|image_wise");
    summary->add_option("--patch-schedule", patch_schedule,
                        "all-7|all-14|block-alternating|per-ste");
    summary->add_option("--input", input, "input size HxW (default 224x224)");
    summary->add_option("--format", format, "text|tsv");
    summary->add_flag("--strict-paper", strict, "bare convs and literal linear FFN");

    auto* shapes = app.add_subcommand("shapes", "print the stage shape trace");
    shapes->add_option("--variant", variant, "ti|s|m|b");
    shapes->add_option("--config", config_path, "model config file instead of a variant");
    shapes->add_option("--input", input, "input size HxW");
    shapes->add_option("--format", format, "text|tsv");

    auto* gradcheck = app.add_subcommand("gradcheck", "run the 64-bit finite-difference suite");
    gradcheck->add_option("--config", config_path, "model config for the end-to-end check");
    gradcheck->add_option("--seed", seed, "random seed");
    gradcheck->add_option("--tol", tol, "pass/fail threshold (default 1e-4)");

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset file");
    synth->add_option("--out", out_path, "output .ctds path")->required();
    synth->add_option("--classes", classes, "number of classes");
    synth->add_option("--count", count, "number of images");
    synth->add_option("--size", size, "image size HxW");
    synth->add_option("--channels", channels, "channel count");
    synth->add_option("--seed", seed, "generator seed");
    synth->add_option("--noise", noise, "pixel noise std in [0,1] units");

    auto* train = app.add_subcommand("train", "train from a config file and dataset");
    train->add_option("--config", config_path, "model+train config file")->required();
    train->add_option("--data", data_path, "dataset file")->required();
    train->add_option("--out", ckpt_path, "checkpoint output path");
    train->add_option("--history", history_path, "per-step loss TSV output");
    train->add_option("--seed", seed_override, "override train.seed");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    eval->add_option("--data", data_path, "dataset file")->required();

    auto* ablate = app.add_subcommand("ablate", "build and summarize a study variant");
    ablate->add_option("--axis", axis, "pe|patch|groups|lr")->required();
    ablate->add_option("--choice", choice, "axis choice")->required();
    ablate->add_option("--variant", variant, "base variant (default m)");
    ablate->add_option("--format", format, "text|tsv");
    ablate->add_option("--data", data_path, "dataset for --train");
    ablate->add_flag("--train", do_train, "also run desk-scale training");
    ablate->add_option("--steps", steps, "training steps for --train");
    ablate->add_option("--seed", seed_override, "build/train seed");

    try {
        app.parse(argc, argv);
        if (*summary) {
            return run_summary(variant, pe, pe_placement, groups, patch_schedule, strict, input,
                               format);
        }
        if (*shapes) return run_shapes(variant, config_path, input, format);
        if (*gradcheck) return run_gradcheck(config_path, seed, tol);
        if (*synth) return run_synth(out_path, classes, count, size, channels, seed, noise);
        if (*train) return run_train(config_path, data_path, ckpt_path, history_path, seed_override);
        if (*eval) return run_eval(ckpt_path, data_path);
        if (*ablate) {
            return run_ablate(axis, choice, variant, format, data_path, do_train, steps,
                              seed_override < 0 ? 0 : seed_override);
        }
        return 1;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // help text, success
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;  // usage problems are user errors
    } catch (const contnet::ContractError& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
