#pragma once

// Image datasets: IDX and CSV loaders, an IDX writer, built-in synthetic
// generators, per-channel standardization, and train-time augmentation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "scan/errors.hpp"
#include "scan/random.hpp"
#include "scan/tensor.hpp"

namespace scan {

enum class Split { Train, Val, Test };

inline const char* to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

/// Per-channel affine standardization x' = (x - mean) / std.
struct Normalization {
    std::vector<double> mean;
    std::vector<double> stddev;

    bool empty() const { return mean.empty(); }
};

struct Dataset {
    std::size_t channels = 1, height = 28, width = 28;
    std::size_t num_classes = 10;
    std::vector<float> pixels;  // [n, C, H, W]
    std::vector<std::int32_t> labels;
    Split split = Split::Train;
    Normalization normalization;  // applied to `pixels`, empty while raw

    std::size_t size() const { return labels.size(); }
    std::size_t sample_numel() const { return channels * height * width; }
    Shape sample_shape() const { return {channels, height, width}; }

    std::span<const float> image(std::size_t i) const {
        return std::span<const float>(pixels).subspan(i * sample_numel(), sample_numel());
    }

    /// Gathers the given samples into an [n, C, H, W] tensor.
    template <class T = float>
    Tensor<T> batch(std::span<const std::size_t> indices) const {
        const std::size_t s = sample_numel();
        std::vector<T> v(indices.size() * s);
        for (std::size_t b = 0; b < indices.size(); ++b) {
            auto img = image(indices[b]);
            std::copy(img.begin(), img.end(), v.begin() + static_cast<std::ptrdiff_t>(b * s));
        }
        return Tensor<T>({indices.size(), channels, height, width}, std::move(v));
    }

    template <class T = float>
    Tensor<T> sample(std::size_t i) const {
        const std::size_t idx[1] = {i};
        return batch<T>(idx);
    }

    std::vector<std::int32_t> batch_labels(std::span<const std::size_t> indices) const {
        std::vector<std::int32_t> out(indices.size());
        for (std::size_t b = 0; b < indices.size(); ++b) out[b] = labels[indices[b]];
        return out;
    }

    void validate() const {
        if (pixels.size() != labels.size() * sample_numel()) {
            throw ContractError("dataset: " + std::to_string(pixels.size()) + " pixel values for " +
                                std::to_string(labels.size()) + " samples of " + std::to_string(sample_numel()));
        }
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
                throw ContractError("dataset: label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                                    " outside [0," + std::to_string(num_classes) + ")");
            }
        }
    }

    /// Samples [first, first + count) as a new dataset with the given split tag.
    Dataset slice(std::size_t first, std::size_t count, Split tag) const {
        if (first + count > size()) throw ContractError("dataset slice out of range");
        Dataset d = *this;
        d.split = tag;
        d.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(first),
                        labels.begin() + static_cast<std::ptrdiff_t>(first + count));
        const std::size_t s = sample_numel();
        d.pixels.assign(pixels.begin() + static_cast<std::ptrdiff_t>(first * s),
                        pixels.begin() + static_cast<std::ptrdiff_t>((first + count) * s));
        return d;
    }
};

/// Per-channel mean and (population) standard deviation of a raw dataset.
inline Normalization compute_normalization(const Dataset& ds) {
    Normalization n;
    const std::size_t plane = ds.height * ds.width;
    n.mean.assign(ds.channels, 0.0);
    n.stddev.assign(ds.channels, 1.0);
    if (ds.size() == 0) return n;
    for (std::size_t c = 0; c < ds.channels; ++c) {
        double s = 0.0, ss = 0.0;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const float* p = ds.pixels.data() + (i * ds.channels + c) * plane;
            for (std::size_t k = 0; k < plane; ++k) {
                s += p[k];
                ss += static_cast<double>(p[k]) * p[k];
            }
        }
        const double cnt = static_cast<double>(ds.size() * plane);
        const double mean = s / cnt;
        const double var = std::max(ss / cnt - mean * mean, 0.0);
        n.mean[c] = mean;
        n.stddev[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    return n;
}

inline void standardize(Dataset& ds, const Normalization& norm) {
    if (!ds.normalization.empty()) throw ContractError("dataset is already standardized");
    if (norm.mean.size() != ds.channels || norm.stddev.size() != ds.channels) {
        throw ContractError("normalization has " + std::to_string(norm.mean.size()) + " channels, dataset has " +
                            std::to_string(ds.channels));
    }
    const std::size_t plane = ds.height * ds.width;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t c = 0; c < ds.channels; ++c) {
            float* p = ds.pixels.data() + (i * ds.channels + c) * plane;
            const double m = norm.mean[c], inv = 1.0 / norm.stddev[c];
            for (std::size_t k = 0; k < plane; ++k) p[k] = static_cast<float>((p[k] - m) * inv);
        }
    }
    ds.normalization = norm;
}

// ---------------------------------------------------------------------------
// IDX format

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open '" + path.string() + "'");
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off) {
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

inline void put_be32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v >> 24));
    out.push_back(static_cast<char>(v >> 16));
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v));
}

inline void require_bytes(const std::filesystem::path& path, std::size_t expected, std::size_t actual) {
    if (actual < expected) {
        throw ParseError("'" + path.string() + "' is truncated: expected " + std::to_string(expected) +
                         " bytes, found " + std::to_string(actual));
    }
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Reads an IDX image file (uint8, rank 3) and its IDX label file (uint8,
/// rank 1). Pixels are scaled by 1/255; the result is not standardized.
inline Dataset load_idx(const std::filesystem::path& image_path, const std::filesystem::path& label_path,
                        std::size_t num_classes = 10, Split split = Split::Train) {
    const auto img = detail::read_file(image_path);
    const auto lab = detail::read_file(label_path);
    detail::require_bytes(image_path, 16, img.size());
    detail::require_bytes(label_path, 8, lab.size());
    if (const auto m = detail::read_be32(img, 0); m != kIdxImageMagic) {
        std::ostringstream os;
        os << "'" << image_path.string() << "': bad magic 0x" << std::hex << m << ", expected 0x" << kIdxImageMagic;
        throw ParseError(os.str());
    }
    if (const auto m = detail::read_be32(lab, 0); m != kIdxLabelMagic) {
        std::ostringstream os;
        os << "'" << label_path.string() << "': bad magic 0x" << std::hex << m << ", expected 0x" << kIdxLabelMagic;
        throw ParseError(os.str());
    }
    const std::size_t n = detail::read_be32(img, 4);
    const std::size_t rows = detail::read_be32(img, 8);
    const std::size_t cols = detail::read_be32(img, 12);
    const std::size_t n_labels = detail::read_be32(lab, 4);
    if (n != n_labels) {
        throw ParseError("IDX count mismatch: " + std::to_string(n) + " images in '" + image_path.string() + "' but " +
                         std::to_string(n_labels) + " labels in '" + label_path.string() + "'");
    }
    detail::require_bytes(image_path, 16 + n * rows * cols, img.size());
    detail::require_bytes(label_path, 8 + n, lab.size());

    Dataset ds;
    ds.channels = 1;
    ds.height = rows;
    ds.width = cols;
    ds.num_classes = num_classes;
    ds.split = split;
    ds.pixels.resize(n * rows * cols);
    for (std::size_t i = 0; i < ds.pixels.size(); ++i) ds.pixels[i] = static_cast<float>(img[16 + i]) / 255.0f;
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.labels[i] = lab[8 + i];
    try {
        ds.validate();
    } catch (const ContractError& e) {
        throw ParseError("'" + label_path.string() + "': " + e.what());
    }
    return ds;
}

/// Encodes single-channel [0,1] pixels as an IDX image/label pair (bytes, not files).
inline std::pair<std::string, std::string> encode_idx(const Dataset& ds) {
    if (ds.channels != 1) throw ContractError("IDX export supports single-channel images only");
    if (!ds.normalization.empty()) throw ContractError("IDX export expects raw [0,1] pixels");
    std::string img, lab;
    detail::put_be32(img, kIdxImageMagic);
    detail::put_be32(img, static_cast<std::uint32_t>(ds.size()));
    detail::put_be32(img, static_cast<std::uint32_t>(ds.height));
    detail::put_be32(img, static_cast<std::uint32_t>(ds.width));
    img.reserve(img.size() + ds.pixels.size());
    for (float v : ds.pixels) {
        img.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
    }
    detail::put_be32(lab, kIdxLabelMagic);
    detail::put_be32(lab, static_cast<std::uint32_t>(ds.size()));
    for (auto y : ds.labels) lab.push_back(static_cast<char>(static_cast<unsigned char>(y)));
    return {img, lab};
}

/// File names used inside a dataset directory (the MNIST layout).
struct IdxLayout {
    static std::string images(Split s) { return s == Split::Test ? "t10k-images-idx3-ubyte" : "train-images-idx3-ubyte"; }
    static std::string labels(Split s) { return s == Split::Test ? "t10k-labels-idx1-ubyte" : "train-labels-idx1-ubyte"; }
};

// ---------------------------------------------------------------------------
// CSV format: header row, label first, then pixel values 0..255.

inline Dataset load_csv(const std::filesystem::path& path, std::size_t channels, std::size_t height, std::size_t width,
                        std::size_t num_classes, Split split = Split::Train) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open '" + path.string() + "'");
    Dataset ds;
    ds.channels = channels;
    ds.height = height;
    ds.width = width;
    ds.num_classes = num_classes;
    ds.split = split;
    const std::size_t expected = 1 + ds.sample_numel();
    std::string line;
    if (!std::getline(in, line)) throw ParseError("'" + path.string() + "': missing header row");
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::size_t fields = 0;
        std::size_t pos = 0;
        while (pos <= line.size()) {
            const std::size_t next = std::min(line.find(',', pos), line.size());
            const std::string cell = line.substr(pos, next - pos);
            char* end = nullptr;
            const double v = std::strtod(cell.c_str(), &end);
            if (cell.empty() || end != cell.c_str() + cell.size()) {
                throw ParseError("'" + path.string() + "' line " + std::to_string(line_no) + ": field " +
                                 std::to_string(fields + 1) + " is not a number: '" + cell + "'");
            }
            if (fields == 0) {
                ds.labels.push_back(static_cast<std::int32_t>(v));
            } else {
                if (v < 0 || v > 255) {
                    throw ParseError("'" + path.string() + "' line " + std::to_string(line_no) + ": pixel value " +
                                     cell + " outside 0..255");
                }
                ds.pixels.push_back(static_cast<float>(v / 255.0));
            }
            ++fields;
            pos = next + 1;
        }
        if (fields != expected) {
            throw ParseError("'" + path.string() + "' line " + std::to_string(line_no) + ": expected " +
                             std::to_string(expected) + " fields, found " + std::to_string(fields));
        }
    }
    try {
        ds.validate();
    } catch (const ContractError& e) {
        throw ParseError("'" + path.string() + "': " + e.what());
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic generators (single channel, values in [0,1]).

namespace synth {

namespace detail {

inline float smooth_step(double edge_distance, double softness) {
    // 1 inside (negative distance), 0 outside, linear ramp of width `softness`.
    return static_cast<float>(std::clamp(0.5 - edge_distance / softness, 0.0, 1.0));
}

inline void add_noise_and_clip(std::vector<float>& img, double sigma, Rng& rng) {
    for (auto& v : img) v = std::clamp(static_cast<float>(v + sigma * rng.normal()), 0.0f, 1.0f);
}

}  // namespace detail

/// Two classes: a Gaussian bump centred in the upper or lower half of the image.
inline Dataset blobs(std::size_t n, std::uint64_t seed, std::size_t size = 28) {
    Rng rng(seed);
    Dataset ds;
    ds.height = ds.width = size;
    ds.num_classes = 2;
    ds.pixels.reserve(n * size * size);
    std::vector<float> img(size * size);
    for (std::size_t i = 0; i < n; ++i) {
        const auto y = static_cast<std::int32_t>(rng.below(2));
        const double s = static_cast<double>(size);
        // Classes differ vertically so that horizontal flips keep the label.
        const double cx = s * 0.5 + rng.normal() * s * 0.1;
        const double cy = s * (y == 0 ? 0.3 : 0.7) + rng.normal() * s * 0.05;
        const double radius = s * rng.uniform(0.08, 0.14);
        for (std::size_t r = 0; r < size; ++r) {
            for (std::size_t c = 0; c < size; ++c) {
                const double dx = static_cast<double>(c) + 0.5 - cx, dy = static_cast<double>(r) + 0.5 - cy;
                img[r * size + c] = static_cast<float>(std::exp(-(dx * dx + dy * dy) / (2 * radius * radius)));
            }
        }
        detail::add_noise_and_clip(img, 0.1, rng);
        ds.pixels.insert(ds.pixels.end(), img.begin(), img.end());
        ds.labels.push_back(y);
    }
    return ds;
}

/// `classes` classes distinguished by the radius of a centred ring.
inline Dataset rings(std::size_t n, std::uint64_t seed, std::size_t classes = 3, std::size_t size = 28) {
    Rng rng(seed);
    Dataset ds;
    ds.height = ds.width = size;
    ds.num_classes = classes;
    std::vector<float> img(size * size);
    const double s = static_cast<double>(size);
    for (std::size_t i = 0; i < n; ++i) {
        const auto y = static_cast<std::int32_t>(rng.below(classes));
        const double r0 = s * (0.12 + 0.3 * (static_cast<double>(y) + 0.5) / static_cast<double>(classes));
        const double cx = s / 2 + rng.normal(), cy = s / 2 + rng.normal();
        const double thick = rng.uniform(1.0, 2.0);
        for (std::size_t r = 0; r < size; ++r) {
            for (std::size_t c = 0; c < size; ++c) {
                const double d = std::hypot(static_cast<double>(c) + 0.5 - cx, static_cast<double>(r) + 0.5 - cy);
                img[r * size + c] = detail::smooth_step(std::abs(d - r0) - thick, 1.0);
            }
        }
        detail::add_noise_and_clip(img, 0.1, rng);
        ds.pixels.insert(ds.pixels.end(), img.begin(), img.end());
        ds.labels.push_back(y);
    }
    return ds;
}

/// Ten mirror-symmetric glyph classes with random placement, scale, stroke
/// width, contrast, clutter and noise. Per-sample difficulty varies widely,
/// so some samples are easy enough for a shallow classifier and others not.
///
///   0 disc          1 ring           2 filled square   3 hollow square
///   4 plus          5 cross (x)      6 triangle        7 diamond
///   8 two bars (=)  9 vertical bar
inline Dataset shapes(std::size_t n, std::uint64_t seed, std::size_t size = 28) {
    Rng rng(seed);
    Dataset ds;
    ds.height = ds.width = size;
    ds.num_classes = 10;
    ds.pixels.reserve(n * size * size);
    std::vector<float> img(size * size);
    const double s = static_cast<double>(size);
    for (std::size_t i = 0; i < n; ++i) {
        const auto y = static_cast<std::int32_t>(rng.below(10));
        const double difficulty = rng.uniform();  // 0 easy .. 1 hard
        const double half = s * rng.uniform(0.2, 0.34);
        const double cx = s / 2 + rng.uniform(-1, 1) * (s / 2 - half - 1) * 0.6;
        const double cy = s / 2 + rng.uniform(-1, 1) * (s / 2 - half - 1) * 0.6;
        const double stroke = half * rng.uniform(0.18, 0.3);
        const double angle = rng.uniform(-1, 1) * 0.25 * difficulty;
        const double fg = rng.uniform(0.65, 1.0) - 0.2 * difficulty;
        const double bg = rng.uniform(0.0, 0.1 + 0.15 * difficulty);
        const double ca = std::cos(angle), sa = std::sin(angle);
        for (std::size_t r = 0; r < size; ++r) {
            for (std::size_t c = 0; c < size; ++c) {
                const double px = static_cast<double>(c) + 0.5 - cx, py = static_cast<double>(r) + 0.5 - cy;
                // Rotate into the glyph frame and scale to unit half-size.
                const double u = (ca * px + sa * py) / half, v = (-sa * px + ca * py) / half;
                const double w = stroke / half;
                const double au = std::abs(u), av = std::abs(v);
                double d = 0.0;  // signed distance in glyph units (negative inside)
                switch (y) {
                    case 0: d = std::hypot(u, v) - 0.9; break;
                    case 1: d = std::abs(std::hypot(u, v) - 0.8) - w; break;
                    case 2: d = std::max(au, av) - 0.8; break;
                    case 3: d = std::abs(std::max(au, av) - 0.8) - w; break;
                    case 4: d = std::min(std::max(au - w, av - 0.95), std::max(av - w, au - 0.95)); break;
                    case 5: {
                        const double a1 = std::abs(u - v) / std::sqrt(2.0), a2 = std::abs(u + v) / std::sqrt(2.0);
                        d = std::max(std::min(a1, a2) - w, std::max(au, av) - 0.85);
                        break;
                    }
                    case 6:
                        // Apex up, base along v = 0.8.
                        d = std::max(v - 0.8, (2.0 * au - (v + 0.9) * 0.95) / std::sqrt(5.0));
                        break;
                    case 7: d = (au + av) / std::sqrt(2.0) - 0.7; break;
                    case 8: d = std::max(std::min(std::abs(v - 0.45), std::abs(v + 0.45)) - w, au - 0.9); break;
                    case 9: d = std::max(au - w * 1.3, av - 0.95); break;
                    default: break;
                }
                img[r * size + c] = static_cast<float>(bg + (fg - bg) * detail::smooth_step(d * half, 1.0));
            }
        }
        // Clutter: random short strokes that do not belong to the glyph.
        const auto clutter = static_cast<std::size_t>(difficulty * 4.0);
        for (std::size_t k = 0; k < clutter; ++k) {
            const double x0 = rng.uniform(0, s), y0 = rng.uniform(0, s);
            const double len = rng.uniform(3, 7), th = rng.uniform(0, M_PI);
            const double dx = std::cos(th), dy = std::sin(th);
            const double level = rng.uniform(0.3, 0.7) * fg;
            for (std::size_t r = 0; r < size; ++r) {
                for (std::size_t c = 0; c < size; ++c) {
                    const double px = static_cast<double>(c) + 0.5 - x0, py = static_cast<double>(r) + 0.5 - y0;
                    const double t = std::clamp(px * dx + py * dy, 0.0, len);
                    const double dist = std::hypot(px - t * dx, py - t * dy);
                    const float m = detail::smooth_step(dist - 0.6, 1.0);
                    img[r * size + c] = std::max(img[r * size + c], static_cast<float>(level * m));
                }
            }
        }
        detail::add_noise_and_clip(img, 0.03 + 0.3 * difficulty * difficulty, rng);
        ds.pixels.insert(ds.pixels.end(), img.begin(), img.end());
        ds.labels.push_back(y);
    }
    return ds;
}

/// Generator lookup by name ("blobs", "rings", "shapes").
inline Dataset generate(std::string_view name, std::size_t n, std::uint64_t seed) {
    if (name == "blobs") return blobs(n, seed);
    if (name == "rings") return rings(n, seed);
    if (name == "shapes") return shapes(n, seed);
    throw ConfigError("unknown synthetic dataset '" + std::string(name) + "' (known: blobs, rings, shapes)");
}

}  // namespace synth

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
    bool enabled = true;
    std::size_t pad = 4;
    double flip_probability = 0.5;
};

namespace detail {

/// Index into [0, n) after reflecting about the borders (no edge repeat).
inline std::size_t reflect(long i, std::size_t n) {
    const long m = static_cast<long>(n);
    if (m == 1) return 0;
    const long period = 2 * (m - 1);
    long k = i % period;
    if (k < 0) k += period;
    return static_cast<std::size_t>(k < m ? k : period - k);
}

}  // namespace detail

/// Crops an [H,W] window at (top, left) from the reflect-padded plane and
/// optionally mirrors it horizontally.
inline void crop_flip_plane(const float* src, float* dst, std::size_t H, std::size_t W, long top, long left,
                            bool flip) {
    for (std::size_t r = 0; r < H; ++r) {
        const std::size_t sr = detail::reflect(static_cast<long>(r) + top, H);
        for (std::size_t c = 0; c < W; ++c) {
            const std::size_t oc = flip ? W - 1 - c : c;
            dst[r * W + oc] = src[sr * W + detail::reflect(static_cast<long>(c) + left, W)];
        }
    }
}

/// Pad-reflect, random crop back to the original size, random horizontal flip;
/// each image independently. Consumes the RNG in a fixed order per image.
template <class T>
Tensor<T> augment(const Tensor<T>& batch, const AugmentConfig& cfg, Rng& rng) {
    if (!cfg.enabled) return batch;
    if (batch.rank() != 4) throw ShapeError("augment expects [N,C,H,W], got " + to_string(batch.shape()));
    const std::size_t N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    std::vector<T> out(batch.numel());
    std::vector<float> plane(H * W), res(H * W);
    for (std::size_t n = 0; n < N; ++n) {
        const long top = static_cast<long>(rng.below(2 * cfg.pad + 1)) - static_cast<long>(cfg.pad);
        const long left = static_cast<long>(rng.below(2 * cfg.pad + 1)) - static_cast<long>(cfg.pad);
        const bool flip = rng.bernoulli(cfg.flip_probability);
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * H * W;
            for (std::size_t k = 0; k < H * W; ++k) plane[k] = static_cast<float>(batch[off + k]);
            crop_flip_plane(plane.data(), res.data(), H, W, top, left, flip);
            for (std::size_t k = 0; k < H * W; ++k) out[off + k] = static_cast<T>(res[k]);
        }
    }
    return Tensor<T>(batch.shape(), std::move(out));
}

}  // namespace scan
