#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "contnet/config.hpp"
#include "contnet/contnet.hpp"
#include "contnet/dataset.hpp"  // little-endian read/write helpers
#include "contnet/errors.hpp"

namespace contnet {

inline constexpr char kCheckpointMagic[4] = {'C', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_named_f32(std::ostream& os, const std::string& name, const Shape& shape,
                            const float* data, std::size_t n) {
    if (name.size() > 65535) throw ContractError("checkpoint: name too long: " + name);
    write_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u8(os, static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) write_u32(os, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < n; ++i) write_f32(os, data[i]);
}

}  // namespace detail

// Weights plus the embedded structured-text model config. Arrays are written
// in registration order as f32, learnables first, then batch-norm buffers.
template <typename T>
void save_checkpoint(const std::string& path, Model<T>& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(kCheckpointMagic, 4);
    detail::write_u32(os, kCheckpointVersion);
    const std::string config = model_config_to_text(m.cfg);
    detail::write_u32(os, static_cast<std::uint32_t>(config.size()));
    os.write(config.data(), static_cast<std::streamsize>(config.size()));

    auto buffers = m.buffers();
    detail::write_u32(os, static_cast<std::uint32_t>(m.params.size() + buffers.size()));
    std::vector<float> scratch;
    for (const auto& e : m.params.entries()) {
        scratch.resize(e.tensor.values().size());
        for (std::size_t i = 0; i < scratch.size(); ++i)
            scratch[i] = static_cast<float>(e.tensor.values()[i]);
        detail::write_named_f32(os, e.name, e.tensor.shape(), scratch.data(), scratch.size());
    }
    for (const auto& [name, vec] : buffers) {
        scratch.resize(vec->size());
        for (std::size_t i = 0; i < scratch.size(); ++i) scratch[i] = static_cast<float>((*vec)[i]);
        detail::write_named_f32(os, name, {static_cast<std::int64_t>(vec->size())}, scratch.data(),
                                scratch.size());
    }
    if (!os) throw IoError("failed writing " + path);
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw IoError(path + ": not a checkpoint file (bad magic)");
    }
    const std::uint32_t version = detail::read_u32(is, "version");
    if (version != kCheckpointVersion) {
        throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t config_len = detail::read_u32(is, "config length");
    std::string config(config_len, '\0');
    if (!is.read(config.data(), config_len)) throw IoError(path + ": truncated config");
    Model<T> m = build_network<T>(model_config_from_kv(detail::parse_kv(config)));

    auto buffers = m.buffers();
    const std::uint32_t tensor_count = detail::read_u32(is, "tensor count");
    if (tensor_count != m.params.size() + buffers.size()) {
        throw IoError(path + ": checkpoint holds " + std::to_string(tensor_count) +
                      " tensors, model expects " +
                      std::to_string(m.params.size() + buffers.size()));
    }
    auto read_into = [&](const std::string& expected_name, const Shape& expected_shape,
                         auto writeback) {
        const std::uint16_t name_len = detail::read_u16(is, "tensor name length");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw IoError(path + ": truncated tensor name");
        if (name != expected_name) {
            throw IoError(path + ": tensor '" + name + "' where '" + expected_name +
                          "' was expected");
        }
        const std::uint8_t rank = detail::read_u8(is, "tensor rank");
        Shape shape(rank);
        for (auto& d : shape) d = detail::read_u32(is, "tensor extent");
        if (shape != expected_shape) {
            throw IoError(path + ": tensor '" + name + "' has shape " + shape_str(shape) +
                          ", expected " + shape_str(expected_shape));
        }
        const std::int64_t n = numel_of(shape);
        for (std::int64_t i = 0; i < n; ++i) writeback(i, detail::read_f32(is, "tensor data"));
    };
    for (auto& e : m.params.entries()) {
        auto& values = e.tensor.values();
        read_into(e.name, e.tensor.shape(),
                  [&](std::int64_t i, float v) { values[static_cast<std::size_t>(i)] = static_cast<T>(v); });
    }
    for (auto& [name, vec] : buffers) {
        read_into(name, {static_cast<std::int64_t>(vec->size())},
                  [&](std::int64_t i, float v) { (*vec)[static_cast<std::size_t>(i)] = static_cast<T>(v); });
    }
    return m;
}

}  // namespace contnet
