#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "contnet/errors.hpp"
#include "contnet/rng.hpp"
#include "contnet/tensor.hpp"

namespace contnet {

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u16(std::ostream& os, std::uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

inline void write_u8(std::ostream& os, std::uint8_t v) {
    os.write(reinterpret_cast<const char*>(&v), 1);
}

inline void write_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(os, bits);
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError(std::string("truncated file reading ") + what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint16_t read_u16(std::istream& is, const char* what) {
    unsigned char b[2];
    if (!is.read(reinterpret_cast<char*>(b), 2)) throw IoError(std::string("truncated file reading ") + what);
    return static_cast<std::uint16_t>(b[0]) | static_cast<std::uint16_t>(b[1] << 8);
}

inline std::uint8_t read_u8(std::istream& is, const char* what) {
    char b;
    if (!is.read(&b, 1)) throw IoError(std::string("truncated file reading ") + what);
    return static_cast<std::uint8_t>(b);
}

inline float read_f32(std::istream& is, const char* what) {
    const std::uint32_t bits = read_u32(is, what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail

// Image/label container mirroring the on-disk layout: u8 pixels plus the
// per-channel normalization statistics recorded with the data.
struct RawDataset {
    std::uint32_t count = 0, channels = 0, height = 0, width = 0;
    std::vector<float> mean, stdev;    // [channels]
    std::vector<std::uint8_t> pixels;  // count * channels * height * width
    std::vector<std::uint16_t> labels;

    std::int64_t class_count() const {
        std::int64_t top = 0;
        for (auto l : labels) top = std::max<std::int64_t>(top, l);
        return labels.empty() ? 0 : top + 1;
    }
};

inline constexpr char kDatasetMagic[4] = {'C', 'T', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_dataset(const std::string& path, const RawDataset& d) {
    if (d.mean.size() != d.channels || d.stdev.size() != d.channels) {
        throw ValueError("dataset: mean/std must have one entry per channel");
    }
    const std::uint64_t expected = static_cast<std::uint64_t>(d.count) * d.channels * d.height * d.width;
    if (d.pixels.size() != expected || d.labels.size() != d.count) {
        throw ValueError("dataset: pixel/label payload does not match header counts");
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(kDatasetMagic, 4);
    detail::write_u32(os, kDatasetVersion);
    detail::write_u32(os, d.count);
    detail::write_u32(os, d.channels);
    detail::write_u32(os, d.height);
    detail::write_u32(os, d.width);
    for (float v : d.mean) detail::write_f32(os, v);
    for (float v : d.stdev) detail::write_f32(os, v);
    os.write(reinterpret_cast<const char*>(d.pixels.data()),
             static_cast<std::streamsize>(d.pixels.size()));
    for (std::uint16_t l : d.labels) detail::write_u16(os, l);
    if (!os) throw IoError("failed writing " + path);
}

inline RawDataset read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kDatasetMagic, 4) != 0) {
        throw IoError(path + ": not a dataset file (bad magic)");
    }
    const std::uint32_t version = detail::read_u32(is, "version");
    if (version != kDatasetVersion) {
        throw IoError(path + ": unsupported dataset version " + std::to_string(version));
    }
    RawDataset d;
    d.count = detail::read_u32(is, "count");
    d.channels = detail::read_u32(is, "channels");
    d.height = detail::read_u32(is, "height");
    d.width = detail::read_u32(is, "width");
    if (d.channels == 0 || d.height == 0 || d.width == 0) {
        throw IoError(path + ": empty image geometry");
    }
    d.mean.resize(d.channels);
    d.stdev.resize(d.channels);
    for (auto& v : d.mean) v = detail::read_f32(is, "mean");
    for (auto& v : d.stdev) v = detail::read_f32(is, "std");
    const std::uint64_t n = static_cast<std::uint64_t>(d.count) * d.channels * d.height * d.width;
    d.pixels.resize(n);
    if (!is.read(reinterpret_cast<char*>(d.pixels.data()), static_cast<std::streamsize>(n))) {
        throw IoError(path + ": truncated pixel payload");
    }
    d.labels.resize(d.count);
    for (auto& l : d.labels) l = detail::read_u16(is, "label");
    return d;
}

// In-memory training view: normalized floating-point images.
template <typename T>
struct Dataset {
    Tensor<T> images;  // [count, C, H, W]
    std::vector<std::uint16_t> labels;
    std::int64_t class_count = 0;

    std::int64_t count() const { return images.shape()[0]; }
};

template <typename T>
Dataset<T> to_dataset(const RawDataset& raw, std::int64_t expected_classes = 0) {
    Dataset<T> d;
    const std::int64_t n = raw.count, c = raw.channels, h = raw.height, w = raw.width;
    std::vector<T> v(static_cast<std::size_t>(n * c * h * w));
    const std::int64_t plane = h * w;
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const float mu = raw.mean[static_cast<std::size_t>(ch)];
            const float sd = raw.stdev[static_cast<std::size_t>(ch)];
            const std::uint8_t* src = raw.pixels.data() + (i * c + ch) * plane;
            T* dst = v.data() + (i * c + ch) * plane;
            for (std::int64_t j = 0; j < plane; ++j) {
                dst[j] = static_cast<T>((static_cast<float>(src[j]) / 255.0f - mu) / sd);
            }
        }
    d.images = Tensor<T>::from_values({n, c, h, w}, std::move(v));
    d.labels = raw.labels;
    d.class_count = expected_classes > 0 ? expected_classes : raw.class_count();
    for (auto l : raw.labels) {
        if (l >= d.class_count) {
            throw ValueError("dataset: label " + std::to_string(l) + " out of range [0, " +
                             std::to_string(d.class_count) + ")");
        }
    }
    return d;
}

// ---------------------------------------------------------------------------
// Synthetic data: class-dependent smooth mean images plus pixel noise,
// deterministic per seed. Classes are separable by construction.
// ---------------------------------------------------------------------------

struct SynthSpec {
    std::int64_t classes = 2;
    std::int64_t count = 64;
    std::int64_t channels = 3;
    std::int64_t height = 32;
    std::int64_t width = 32;
    std::uint64_t seed = 0;
    double noise = 0.06;  // gaussian std in [0,1] pixel units
};

inline RawDataset synth_dataset(const SynthSpec& spec) {
    if (spec.classes < 2 || spec.classes > 65535 || spec.count < 1) {
        throw ValueError("synth: need 2..65535 classes and a positive count");
    }
    Rng rng(spec.seed);
    // coarse 4x4 per-channel value grids define each class mean image
    const std::int64_t cell = 4;
    std::vector<std::vector<double>> class_mean(static_cast<std::size_t>(spec.classes));
    for (auto& grid : class_mean) {
        grid.resize(static_cast<std::size_t>(spec.channels * cell * cell));
        for (auto& v : grid) v = rng.uniform(0.15, 0.85);
    }
    RawDataset d;
    d.count = static_cast<std::uint32_t>(spec.count);
    d.channels = static_cast<std::uint32_t>(spec.channels);
    d.height = static_cast<std::uint32_t>(spec.height);
    d.width = static_cast<std::uint32_t>(spec.width);
    d.pixels.resize(static_cast<std::size_t>(spec.count * spec.channels * spec.height * spec.width));
    d.labels.resize(static_cast<std::size_t>(spec.count));
    std::size_t at = 0;
    for (std::int64_t i = 0; i < spec.count; ++i) {
        const std::int64_t cls = i % spec.classes;  // balanced labels
        d.labels[static_cast<std::size_t>(i)] = static_cast<std::uint16_t>(cls);
        const auto& grid = class_mean[static_cast<std::size_t>(cls)];
        for (std::int64_t ch = 0; ch < spec.channels; ++ch)
            for (std::int64_t y = 0; y < spec.height; ++y)
                for (std::int64_t x = 0; x < spec.width; ++x) {
                    const std::int64_t gy = y * cell / spec.height;
                    const std::int64_t gx = x * cell / spec.width;
                    double v = grid[static_cast<std::size_t>((ch * cell + gy) * cell + gx)];
                    v += rng.normal(0.0, spec.noise);
                    v = std::min(1.0, std::max(0.0, v));
                    d.pixels[at++] = static_cast<std::uint8_t>(v * 255.0 + 0.5);
                }
    }
    // record the population statistics of the generated pixels
    d.mean.assign(static_cast<std::size_t>(spec.channels), 0.0f);
    d.stdev.assign(static_cast<std::size_t>(spec.channels), 1.0f);
    const std::int64_t plane = spec.height * spec.width;
    for (std::int64_t ch = 0; ch < spec.channels; ++ch) {
        double mu = 0;
        for (std::int64_t i = 0; i < spec.count; ++i) {
            const std::uint8_t* src = d.pixels.data() + (i * spec.channels + ch) * plane;
            for (std::int64_t j = 0; j < plane; ++j) mu += src[j] / 255.0;
        }
        mu /= static_cast<double>(spec.count * plane);
        double var = 0;
        for (std::int64_t i = 0; i < spec.count; ++i) {
            const std::uint8_t* src = d.pixels.data() + (i * spec.channels + ch) * plane;
            for (std::int64_t j = 0; j < plane; ++j) {
                const double dv = src[j] / 255.0 - mu;
                var += dv * dv;
            }
        }
        var /= static_cast<double>(spec.count * plane);
        d.mean[static_cast<std::size_t>(ch)] = static_cast<float>(mu);
        d.stdev[static_cast<std::size_t>(ch)] = static_cast<float>(std::max(std::sqrt(var), 1e-3));
    }
    return d;
}

}  // namespace contnet
