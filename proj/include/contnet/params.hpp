#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "contnet/errors.hpp"
#include "contnet/tensor.hpp"

namespace contnet {

// Learning-rate group. Everything transformer-side (attention, FFN, LN, PE)
// is "ste"; convolutions, batch norm, stem and head are "conv".
enum class ParamGroup { Conv, Ste };

// Classification used by parameter counting and weight-decay exemption.
enum class ParamKind { Weight, Bias, Norm, Pe };

inline const char* to_string(ParamGroup g) { return g == ParamGroup::Conv ? "conv" : "ste"; }

struct CountInclude {
    bool biases = true;
    bool norms = true;
    bool pe = true;
};

// Ordered registry of every learnable array. Registration order is the
// checkpoint order, names are the checkpoint keys.
template <typename T>
class ParameterStore {
public:
    struct Entry {
        std::string name;
        Tensor<T> tensor;
        ParamGroup group;
        ParamKind kind;
    };

    // returns a handle sharing the registered storage
    Tensor<T> add(std::string name, Tensor<T> tensor, ParamGroup group, ParamKind kind) {
        for (const auto& e : entries_) {
            if (e.name == name) throw ContractError("parameter registered twice: " + name);
        }
        tensor.set_requires_grad(true);
        entries_.push_back(Entry{std::move(name), tensor, group, kind});
        return tensor;
    }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    const Entry* find(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }

    static bool counted(ParamKind kind, const CountInclude& inc) {
        switch (kind) {
            case ParamKind::Weight: return true;
            case ParamKind::Bias: return inc.biases;
            case ParamKind::Norm: return inc.norms;
            case ParamKind::Pe: return inc.pe;
        }
        return true;
    }

    std::int64_t element_count(const CountInclude& inc = {}) const {
        std::int64_t total = 0;
        for (const auto& e : entries_) {
            if (counted(e.kind, inc)) total += e.tensor.numel();
        }
        return total;
    }

    void zero_grad() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

private:
    std::vector<Entry> entries_;
};

}  // namespace contnet
