#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "contnet/contnet.hpp"
#include "contnet/errors.hpp"

namespace contnet {

// Key-value config text: one `key = value` per line, '#' comments. Keys are
// prefixed with their section (model. / train.); unknown keys are errors so
// typos cannot silently corrupt an ablation.

struct TrainConfig {
    std::string optimizer = "sgd";  // sgd | adamw
    double lr_conv = 0.2;
    double lr_ste = 0.005;
    double momentum = 0.9;
    double weight_decay = 5e-5;
    std::int64_t steps = 500;   // total optimizer steps; 0 defers to epochs
    std::int64_t epochs = 0;    // alternative budget in passes over the data
    std::int64_t batch_size = 16;
    double label_smooth_eps = 0.1;
    std::uint64_t seed = 0;
    std::string schedule = "cosine";  // cosine | constant

    void validate() const {
        if (optimizer != "sgd" && optimizer != "adamw") {
            throw ValueError("train config: unknown optimizer '" + optimizer + "'");
        }
        if (schedule != "cosine" && schedule != "constant") {
            throw ValueError("train config: unknown schedule '" + schedule + "'");
        }
        if (lr_conv < 0 || lr_ste < 0) {
            throw ValueError("train config: learning rates must not be negative");
        }
        if (label_smooth_eps < 0 || label_smooth_eps >= 1) {
            throw ValueError("train config: label_smooth_eps must be in [0, 1)");
        }
        if (batch_size < 1) throw ValueError("train config: batch size must be positive");
        if (steps < 0 || epochs < 0 || (steps == 0 && epochs == 0)) {
            throw ValueError("train config: set steps or epochs");
        }
        if (steps > 0 && epochs > 0) {
            throw ValueError("train config: steps and epochs are mutually exclusive");
        }
    }
};

inline TrainConfig sgd_recipe() { return TrainConfig{}; }

inline TrainConfig adamw_recipe() {
    TrainConfig cfg;
    cfg.optimizer = "adamw";
    cfg.lr_conv = 5e-4;
    cfg.lr_ste = 5e-4;
    cfg.weight_decay = 0.05;
    return cfg;
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::pair<std::string, std::string>> parse_kv(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ValueError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        out.push_back({trim(line.substr(0, eq)), trim(line.substr(eq + 1))});
    }
    return out;
}

inline std::int64_t parse_int(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const std::int64_t x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ValueError("config: key " + key + " expects an integer, got '" + v + "'");
    }
}

inline double parse_real(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ValueError("config: key " + key + " expects a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ValueError("config: key " + key + " expects true/false, got '" + v + "'");
}

inline PeKind parse_pe_kind(const std::string& v) {
    if (v == "none") return PeKind::None;
    if (v == "1d") return PeKind::Learnable1d;
    if (v == "2d") return PeKind::Learnable2d;
    if (v == "relative") return PeKind::Relative;
    throw ValueError("config: unknown pe kind '" + v + "'");
}

inline PePlacement parse_pe_placement(const std::string& v) {
    if (v == "patch_wise") return PePlacement::PatchWise;
    if (v == "image_wise") return PePlacement::ImageWise;
    throw ValueError("config: unknown pe placement '" + v + "'");
}

// "7:14" or "7:14,7:14,..." (one pair per block)
inline std::vector<std::pair<std::int64_t, std::int64_t>> parse_patches(const std::string& v,
                                                                        const std::string& key) {
    std::vector<std::pair<std::int64_t, std::int64_t>> out;
    std::istringstream is(v);
    std::string item;
    while (std::getline(is, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) {
            throw ValueError("config: key " + key + " expects p1:p2 pairs, got '" + v + "'");
        }
        out.push_back({parse_int(trim(item.substr(0, colon)), key),
                       parse_int(trim(item.substr(colon + 1)), key)});
    }
    if (out.empty()) throw ValueError("config: key " + key + " is empty");
    return out;
}

}  // namespace detail

inline ModelConfig model_config_from_kv(
    const std::vector<std::pair<std::string, std::string>>& kv) {
    ModelConfig cfg;
    // a named variant seeds the stage table; custom starts blank
    for (const auto& [key, value] : kv) {
        if (key == "model.variant") {
            cfg = value == "custom" ? ModelConfig{} : variant_config(value);
            cfg.variant = value;
        }
    }
    for (const auto& [key, value] : kv) {
        if (key.rfind("train.", 0) == 0) continue;
        if (key == "model.variant") {
            continue;
        } else if (key == "model.num_classes") {
            cfg.num_classes = detail::parse_int(value, key);
        } else if (key == "model.input_size") {
            cfg.input_size = detail::parse_int(value, key);
        } else if (key == "model.stem_width") {
            cfg.stem_width = detail::parse_int(value, key);
        } else if (key == "model.pe") {
            cfg.pe_kind = detail::parse_pe_kind(value);
        } else if (key == "model.pe_placement") {
            cfg.pe_placement = detail::parse_pe_placement(value);
        } else if (key == "model.groups") {
            cfg.conv_groups = detail::parse_int(value, key);
        } else if (key == "model.depthwise") {
            cfg.depthwise = detail::parse_bool(value, key);
        } else if (key == "model.strict_paper") {
            cfg.strict_paper = detail::parse_bool(value, key);
        } else if (key.rfind("model.stage", 0) == 0) {
            // model.stage<N>.<field>
            const std::size_t dot = key.find('.', 11);
            if (dot == std::string::npos || key.size() < 12) {
                throw ValueError("config: malformed stage key '" + key + "'");
            }
            const std::int64_t idx = detail::parse_int(key.substr(11, dot - 11), key) - 1;
            if (idx < 0 || idx > 3) throw ValueError("config: stage index out of range in '" + key + "'");
            auto& stage = cfg.stages[static_cast<std::size_t>(idx)];
            const std::string field = key.substr(dot + 1);
            if (field == "d") {
                stage.d = detail::parse_int(value, key);
            } else if (field == "d_ffn") {
                stage.d_ffn = detail::parse_int(value, key);
            } else if (field == "heads") {
                stage.heads = detail::parse_int(value, key);
            } else if (field == "blocks") {
                stage.blocks = detail::parse_int(value, key);
            } else if (field == "patches") {
                stage.patch_schedule = detail::parse_patches(value, key);
            } else {
                throw ValueError("config: unknown stage field '" + key + "'");
            }
        } else {
            throw ValueError("config: unknown key '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

inline std::string model_config_to_text(const ModelConfig& cfg) {
    std::ostringstream os;
    os << "model.variant = " << (cfg.variant.empty() ? "custom" : cfg.variant) << "\n";
    os << "model.num_classes = " << cfg.num_classes << "\n";
    os << "model.input_size = " << cfg.input_size << "\n";
    os << "model.stem_width = " << cfg.stem_width << "\n";
    os << "model.pe = " << to_string(cfg.pe_kind) << "\n";
    os << "model.pe_placement = " << to_string(cfg.pe_placement) << "\n";
    os << "model.groups = " << cfg.conv_groups << "\n";
    os << "model.depthwise = " << (cfg.depthwise ? "true" : "false") << "\n";
    os << "model.strict_paper = " << (cfg.strict_paper ? "true" : "false") << "\n";
    for (std::size_t i = 0; i < 4; ++i) {
        const auto& s = cfg.stages[i];
        const std::string pre = "model.stage" + std::to_string(i + 1) + ".";
        os << pre << "d = " << s.d << "\n";
        os << pre << "d_ffn = " << s.d_ffn << "\n";
        os << pre << "heads = " << s.heads << "\n";
        os << pre << "blocks = " << s.blocks << "\n";
        os << pre << "patches = ";
        if (s.patch_schedule.empty()) {
            os << "7:14";
        } else {
            for (std::size_t b = 0; b < s.patch_schedule.size(); ++b) {
                if (b) os << ",";
                os << s.patch_schedule[b].first << ":" << s.patch_schedule[b].second;
            }
        }
        os << "\n";
    }
    return os.str();
}

inline TrainConfig train_config_from_kv(
    const std::vector<std::pair<std::string, std::string>>& kv) {
    TrainConfig cfg;
    bool steps_set = false, epochs_set = false;
    for (const auto& [key, value] : kv) {
        if (key.rfind("model.", 0) == 0) continue;
        if (key == "train.optimizer") {
            cfg.optimizer = value;
            if (cfg.optimizer == "adamw") {
                const TrainConfig defaults = adamw_recipe();
                cfg.lr_conv = defaults.lr_conv;
                cfg.lr_ste = defaults.lr_ste;
                cfg.weight_decay = defaults.weight_decay;
            }
        } else {
            continue;
        }
    }
    for (const auto& [key, value] : kv) {
        if (key.rfind("model.", 0) == 0 || key == "train.optimizer") continue;
        if (key == "train.lr_conv") {
            cfg.lr_conv = detail::parse_real(value, key);
        } else if (key == "train.lr_ste") {
            cfg.lr_ste = detail::parse_real(value, key);
        } else if (key == "train.momentum") {
            cfg.momentum = detail::parse_real(value, key);
        } else if (key == "train.weight_decay") {
            cfg.weight_decay = detail::parse_real(value, key);
        } else if (key == "train.steps") {
            cfg.steps = detail::parse_int(value, key);
            steps_set = true;
        } else if (key == "train.epochs") {
            cfg.epochs = detail::parse_int(value, key);
            epochs_set = true;
        } else if (key == "train.batch_size") {
            cfg.batch_size = detail::parse_int(value, key);
        } else if (key == "train.label_smooth_eps") {
            cfg.label_smooth_eps = detail::parse_real(value, key);
        } else if (key == "train.seed") {
            cfg.seed = static_cast<std::uint64_t>(detail::parse_int(value, key));
        } else if (key == "train.schedule") {
            cfg.schedule = value;
        } else {
            throw ValueError("config: unknown key '" + key + "'");
        }
    }
    if (epochs_set && !steps_set) cfg.steps = 0;
    cfg.validate();
    return cfg;
}

inline std::string train_config_to_text(const TrainConfig& cfg) {
    std::ostringstream os;
    os << "train.optimizer = " << cfg.optimizer << "\n";
    os << "train.lr_conv = " << cfg.lr_conv << "\n";
    os << "train.lr_ste = " << cfg.lr_ste << "\n";
    os << "train.momentum = " << cfg.momentum << "\n";
    os << "train.weight_decay = " << cfg.weight_decay << "\n";
    if (cfg.epochs > 0) {
        os << "train.epochs = " << cfg.epochs << "\n";
    } else {
        os << "train.steps = " << cfg.steps << "\n";
    }
    os << "train.batch_size = " << cfg.batch_size << "\n";
    os << "train.label_smooth_eps = " << cfg.label_smooth_eps << "\n";
    os << "train.seed = " << cfg.seed << "\n";
    os << "train.schedule = " << cfg.schedule << "\n";
    return os.str();
}

}  // namespace contnet
