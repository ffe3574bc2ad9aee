#pragma once

// Multi-exit network: a backbone split into depth sections, an attention gate
// on every shallow exit, and a bottleneck + fully connected classifier per exit.
//
//   x -> section 1 -> section 2 -> ... -> section C -> head C
//            |            |
//        attention 1  attention 2
//            |            |
//          head 1       head 2
//
// Attention refines only the branch fed to the shallow head; the backbone path
// itself is unmodified.

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "scan/errors.hpp"
#include "scan/ops.hpp"
#include "scan/random.hpp"
#include "scan/tensor.hpp"

namespace scan {

using ops::Mode;

struct SectionSpec {
    std::size_t channels = 16;
    std::size_t stride = 1;
    std::size_t depth = 1;  // conv+bn+relu blocks in the section
};

struct ModelConfig {
    std::string name = "tiny-3";
    std::size_t in_channels = 1;
    std::size_t height = 28;
    std::size_t width = 28;
    std::size_t num_classes = 10;
    std::vector<SectionSpec> sections;
    bool attention = true;
    std::uint64_t init_seed = 1;

    std::size_t num_exits() const { return sections.size(); }

    /// Built-in configurations. "tiny-3" and "tiny-4" take 28x28 grayscale input.
    static ModelConfig preset(std::string_view name) {
        ModelConfig cfg;
        cfg.name = std::string(name);
        if (name == "tiny-3") {
            cfg.sections = {{16, 1, 1}, {32, 2, 1}, {64, 2, 1}};
        } else if (name == "tiny-4") {
            cfg.sections = {{16, 1, 1}, {32, 1, 1}, {64, 2, 1}, {128, 2, 1}};
        } else if (name == "micro-3") {
            // Gradient-check sized network.
            cfg.in_channels = 1;
            cfg.height = cfg.width = 8;
            cfg.num_classes = 3;
            cfg.sections = {{2, 1, 1}, {3, 2, 1}, {4, 2, 1}};
        } else {
            throw ConfigError("unknown model preset '" + std::string(name) + "' (known: tiny-3, tiny-4, micro-3)");
        }
        return cfg;
    }
};

/// Spatial size after a 3x3, padding-1 convolution with the given stride.
inline std::size_t conv3x3_out(std::size_t size, std::size_t stride) { return (size - 1) / stride + 1; }

struct FeatureShape {
    std::size_t channels, height, width;
    bool operator==(const FeatureShape&) const = default;
    std::size_t numel() const { return channels * height * width; }
};

inline std::string to_string(const FeatureShape& s) {
    return "[" + std::to_string(s.channels) + "," + std::to_string(s.height) + "," + std::to_string(s.width) + "]";
}

/// Shapes derived from a ModelConfig; throws ConfigError naming the first
/// violated constraint.
struct Topology {
    FeatureShape input;
    std::vector<FeatureShape> section_out;  // size C

    static Topology derive(const ModelConfig& cfg) {
        if (cfg.sections.size() < 2) {
            throw ConfigError("model '" + cfg.name + "': at least 2 sections (classifiers) required, got " +
                              std::to_string(cfg.sections.size()));
        }
        if (cfg.in_channels == 0 || cfg.height == 0 || cfg.width == 0) {
            throw ConfigError("model '" + cfg.name + "': input shape must be positive");
        }
        if (cfg.num_classes < 1) throw ConfigError("model '" + cfg.name + "': num_classes must be >= 1");
        Topology t;
        t.input = {cfg.in_channels, cfg.height, cfg.width};
        FeatureShape cur = t.input;
        for (std::size_t k = 0; k < cfg.sections.size(); ++k) {
            const auto& s = cfg.sections[k];
            if (s.channels == 0 || s.stride == 0 || s.depth == 0) {
                throw ConfigError("section " + std::to_string(k + 1) + ": channels, stride and depth must be >= 1");
            }
            cur = {s.channels, conv3x3_out(cur.height, s.stride), conv3x3_out(cur.width, s.stride)};
            t.section_out.push_back(cur);
        }
        if (cfg.attention) {
            for (std::size_t k = 0; k + 1 < t.section_out.size(); ++k) {
                const auto& f = t.section_out[k];
                if (f.height % 2 != 0 || f.width % 2 != 0) {
                    throw ConfigError("attention module " + std::to_string(k + 1) + ": feature " + to_string(f) +
                                      " has an odd spatial size; the stride-2 down/up path needs even sizes");
                }
            }
        }
        return t;
    }
};

namespace detail {

template <class T>
Tensor<T> kaiming(Shape shape, std::size_t fan_in, double gain, Rng& rng) {
    const double std_dev = gain / std::sqrt(static_cast<double>(fan_in));
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal() * std_dev);
    return Tensor<T>(std::move(shape), std::move(v), true);
}

}  // namespace detail

/// conv3x3 (no bias) -> batchnorm -> relu.
template <class T>
struct ConvBlock {
    Tensor<T> weight, gamma, beta;
    ops::BatchNormState<T> bn;
    std::size_t stride = 1;

    static ConvBlock create(std::size_t in, std::size_t out, std::size_t stride, Rng& rng) {
        ConvBlock b;
        b.weight = detail::kaiming<T>({out, in, 3, 3}, in * 9, std::sqrt(2.0), rng);
        b.gamma = Tensor<T>::full({out}, T(1), true);
        b.beta = Tensor<T>::zeros({out}, true);
        b.bn = ops::BatchNormState<T>::create(out);
        b.stride = stride;
        return b;
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        auto y = ops::conv2d(x, weight, Tensor<T>{}, {stride, 1});
        return ops::relu(ops::batchnorm2d(y, gamma, beta, bn, mode, mode == Mode::Train ? &bn : nullptr));
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        auto y = ops::conv2d(x, weight, Tensor<T>{}, {stride, 1});
        return ops::relu(ops::batchnorm2d(y, gamma, beta, bn, Mode::Eval, nullptr));
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& params, std::vector<NamedTensor<T>>& buffers) {
        params.push_back({prefix + ".conv.weight", &weight});
        params.push_back({prefix + ".bn.gamma", &gamma});
        params.push_back({prefix + ".bn.beta", &beta});
        buffers.push_back({prefix + ".bn.running_mean", &bn.running_mean});
        buffers.push_back({prefix + ".bn.running_var", &bn.running_var});
    }
};

/// Squeeze-expand gate: map = sigmoid(deconv(relu(bn(conv(F))))), refined = F * map.
template <class T>
struct AttentionModule {
    Tensor<T> conv_weight;  // [C, C, 3, 3], stride 2, padding 1
    Tensor<T> gamma, beta;
    ops::BatchNormState<T> bn;
    Tensor<T> deconv_weight;  // [C, C, 4, 4], stride 2, padding 1
    Tensor<T> deconv_bias;    // [C]

    static constexpr ops::Conv2dOptions kDown{2, 1};
    static constexpr ops::Conv2dOptions kUp{2, 1};

    static AttentionModule create(std::size_t channels, Rng& rng) {
        AttentionModule a;
        a.conv_weight = detail::kaiming<T>({channels, channels, 3, 3}, channels * 9, std::sqrt(2.0), rng);
        a.gamma = Tensor<T>::full({channels}, T(1), true);
        a.beta = Tensor<T>::zeros({channels}, true);
        a.bn = ops::BatchNormState<T>::create(channels);
        a.deconv_weight = detail::kaiming<T>({channels, channels, 4, 4}, channels * 4, 1.0, rng);
        a.deconv_bias = Tensor<T>::zeros({channels}, true);
        return a;
    }

    struct Output {
        Tensor<T> refined;
        Tensor<T> map;
    };

    Output forward(const Tensor<T>& features, Mode mode, ops::BatchNormState<T>* update) const {
        auto down = ops::conv2d(features, conv_weight, Tensor<T>{}, kDown);
        auto act = ops::relu(ops::batchnorm2d(down, gamma, beta, bn, mode, update));
        auto map = ops::sigmoid(ops::conv_transpose2d(act, deconv_weight, deconv_bias, kUp));
        if (map.shape() != features.shape()) {
            throw ShapeError("attention map " + to_string(map.shape()) + " does not match feature " +
                             to_string(features.shape()));
        }
        return {ops::mul(features, map), map};
    }

    Output forward(const Tensor<T>& features, Mode mode) {
        return forward(features, mode, mode == Mode::Train ? &bn : nullptr);
    }

    Output forward(const Tensor<T>& features) const { return forward(features, Mode::Eval, nullptr); }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& params, std::vector<NamedTensor<T>>& buffers) {
        params.push_back({prefix + ".conv.weight", &conv_weight});
        params.push_back({prefix + ".bn.gamma", &gamma});
        params.push_back({prefix + ".bn.beta", &beta});
        params.push_back({prefix + ".deconv.weight", &deconv_weight});
        params.push_back({prefix + ".deconv.bias", &deconv_bias});
        buffers.push_back({prefix + ".bn.running_mean", &bn.running_mean});
        buffers.push_back({prefix + ".bn.running_var", &bn.running_var});
    }
};

/// Bottleneck blocks (bringing the feature to the deepest section's shape),
/// global average pooling, and a fully connected classifier.
template <class T>
struct ExitHead {
    std::vector<ConvBlock<T>> bottleneck;
    Tensor<T> fc_weight;  // [K, C_deepest]
    Tensor<T> fc_bias;    // [K]

    struct Output {
        Tensor<T> feature;
        Tensor<T> logits;
    };

    template <class Self>
    static Output run(Self& self, const Tensor<T>& x, Mode mode) {
        Tensor<T> f = x;
        for (auto& block : self.bottleneck) {
            if constexpr (std::is_const_v<Self>) {
                f = block.forward(f);
            } else {
                f = block.forward(f, mode);
            }
        }
        auto logits = ops::linear(ops::global_avg_pool(f), self.fc_weight, self.fc_bias);
        return {f, logits};
    }

    Output forward(const Tensor<T>& x, Mode mode) { return run(*this, x, mode); }
    Output forward(const Tensor<T>& x) const { return run(*this, x, Mode::Eval); }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& params, std::vector<NamedTensor<T>>& buffers) {
        for (std::size_t b = 0; b < bottleneck.size(); ++b) {
            bottleneck[b].collect(prefix + ".bottleneck." + std::to_string(b), params, buffers);
        }
        params.push_back({prefix + ".fc.weight", &fc_weight});
        params.push_back({prefix + ".fc.bias", &fc_bias});
    }
};

template <class T>
struct BackboneSection {
    std::vector<ConvBlock<T>> blocks;
    FeatureShape input_shape;
    FeatureShape output_shape;

    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        Tensor<T> y = x;
        for (auto& b : blocks) y = b.forward(y, mode);
        return y;
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> y = x;
        for (const auto& b : blocks) y = b.forward(y);
        return y;
    }
};

/// Everything a training step or an analysis needs from one pass over all exits.
template <class T>
struct ForwardResult {
    std::vector<Tensor<T>> logits;          // C x [N, K]
    std::vector<Tensor<T>> probs;           // softmax of logits
    std::vector<Tensor<T>> features;        // C x [N, C_deep, H_deep, W_deep]
    std::vector<Tensor<T>> attention_maps;  // C-1 entries; empty when attention is disabled
};

template <class T>
class SectionCache;

template <class T>
class ScanNetwork {
public:
    explicit ScanNetwork(ModelConfig config) : config_(std::move(config)), topology_(Topology::derive(config_)) {
        Rng rng(config_.init_seed);
        const std::size_t C = config_.sections.size();
        FeatureShape in = topology_.input;
        for (std::size_t k = 0; k < C; ++k) {
            const auto& spec = config_.sections[k];
            BackboneSection<T> section;
            section.input_shape = in;
            std::size_t ch = in.channels;
            for (std::size_t d = 0; d < spec.depth; ++d) {
                section.blocks.push_back(ConvBlock<T>::create(ch, spec.channels, d == 0 ? spec.stride : 1, rng));
                ch = spec.channels;
            }
            section.output_shape = topology_.section_out[k];
            in = section.output_shape;
            sections_.push_back(std::move(section));
        }
        if (config_.attention) {
            for (std::size_t k = 0; k + 1 < C; ++k) {
                attention_.push_back(AttentionModule<T>::create(topology_.section_out[k].channels, rng));
            }
        }
        const std::size_t deep_channels = topology_.section_out.back().channels;
        for (std::size_t i = 0; i < C; ++i) {
            ExitHead<T> head;
            std::size_t ch = topology_.section_out[i].channels;
            // One block per remaining section, mirroring its width and stride.
            for (std::size_t k = i + 1; k < C; ++k) {
                head.bottleneck.push_back(ConvBlock<T>::create(ch, config_.sections[k].channels,
                                                               config_.sections[k].stride, rng));
                ch = config_.sections[k].channels;
            }
            head.fc_weight = detail::kaiming<T>({config_.num_classes, deep_channels}, deep_channels, 1.0, rng);
            head.fc_bias = Tensor<T>::zeros({config_.num_classes}, true);
            heads_.push_back(std::move(head));
        }
        collect();
    }

    ScanNetwork(const ScanNetwork& other) : ScanNetwork(other.config_) { copy_state_from(other); }
    ScanNetwork& operator=(const ScanNetwork& other) {
        if (this != &other) {
            *this = ScanNetwork(other.config_);
            copy_state_from(other);
        }
        return *this;
    }
    ScanNetwork(ScanNetwork&& other) noexcept { *this = std::move(other); }
    ScanNetwork& operator=(ScanNetwork&& other) noexcept {
        config_ = std::move(other.config_);
        topology_ = std::move(other.topology_);
        sections_ = std::move(other.sections_);
        attention_ = std::move(other.attention_);
        heads_ = std::move(other.heads_);
        collect();
        return *this;
    }

    const ModelConfig& config() const { return config_; }
    const Topology& topology() const { return topology_; }
    std::size_t num_exits() const { return sections_.size(); }
    std::size_t num_classes() const { return config_.num_classes; }
    bool has_attention() const { return !attention_.empty(); }

    const std::vector<BackboneSection<T>>& sections() const { return sections_; }
    const std::vector<AttentionModule<T>>& attention() const { return attention_; }
    const std::vector<ExitHead<T>>& heads() const { return heads_; }
    std::vector<AttentionModule<T>>& attention() { return attention_; }
    std::vector<ExitHead<T>>& heads() { return heads_; }

    /// Trainable tensors in a fixed, documented order.
    const std::vector<NamedTensor<T>>& parameters() const { return params_; }
    /// Batchnorm running statistics.
    const std::vector<NamedTensor<T>>& buffers() const { return buffers_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor->numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor->zero_grad();
    }

    void check_input(const Tensor<T>& x) const {
        const auto& in = topology_.input;
        if (x.rank() != 4 || x.dim(1) != in.channels || x.dim(2) != in.height || x.dim(3) != in.width) {
            throw ShapeError("network '" + config_.name + "' expects [N," + std::to_string(in.channels) + "," +
                             std::to_string(in.height) + "," + std::to_string(in.width) + "], got " +
                             to_string(x.shape()));
        }
    }

    Tensor<T> run_section(std::size_t k, const Tensor<T>& x, Mode mode) {
        return mode == Mode::Train ? sections_[k].forward(x, mode) : sections_[k].forward(x);
    }
    Tensor<T> run_section(std::size_t k, const Tensor<T>& x) const { return sections_[k].forward(x); }

    struct ExitOutput {
        Tensor<T> logits;
        Tensor<T> feature;
        Tensor<T> attention_map;  // undefined for the deepest exit or without attention
    };

    /// Attention (shallow exits only) followed by the exit head.
    ExitOutput run_exit(std::size_t i, const Tensor<T>& section_output, Mode mode) {
        if (mode == Mode::Eval) return std::as_const(*this).run_exit(i, section_output);
        ExitOutput out;
        Tensor<T> branch = section_output;
        if (i < attention_.size()) {
            auto a = attention_[i].forward(section_output, mode);
            branch = a.refined;
            out.attention_map = a.map;
        }
        auto h = heads_[i].forward(branch, mode);
        out.logits = h.logits;
        out.feature = h.feature;
        return out;
    }

    ExitOutput run_exit(std::size_t i, const Tensor<T>& section_output) const {
        ExitOutput out;
        Tensor<T> branch = section_output;
        if (i < attention_.size()) {
            auto a = attention_[i].forward(section_output);
            branch = a.refined;
            out.attention_map = a.map;
        }
        auto h = heads_[i].forward(branch);
        out.logits = h.logits;
        out.feature = h.feature;
        return out;
    }

    /// Every exit for a batch; each section runs exactly once.
    ForwardResult<T> forward_all(const Tensor<T>& x, Mode mode) {
        if (mode == Mode::Eval) return std::as_const(*this).forward_all(x);
        check_input(x);
        ForwardResult<T> r;
        Tensor<T> h = x;
        for (std::size_t k = 0; k < sections_.size(); ++k) {
            h = sections_[k].forward(h, mode);
            append(r, run_exit(k, h, mode));
        }
        return r;
    }

    ForwardResult<T> forward_all(const Tensor<T>& x) const {
        check_input(x);
        ForwardResult<T> r;
        Tensor<T> h = x;
        for (std::size_t k = 0; k < sections_.size(); ++k) {
            h = sections_[k].forward(h);
            append(r, run_exit(k, h));
        }
        return r;
    }

    /// Plain backbone + deepest classifier, ignoring every shallow branch.
    Tensor<T> forward_backbone(const Tensor<T>& x) const {
        check_input(x);
        Tensor<T> h = x;
        for (const auto& s : sections_) h = s.forward(h);
        return heads_.back().forward(h).logits;
    }

    /// Softmax of exit i (0-based) for one sample, reusing and extending `cache`.
    Tensor<T> forward_until_exit(const Tensor<T>& sample, std::size_t i, SectionCache<T>& cache) const;

    /// Named parameter or buffer lookup.
    Tensor<T>* find(const std::string& name) {
        for (auto& p : params_) {
            if (p.name == name) return p.tensor;
        }
        for (auto& b : buffers_) {
            if (b.name == name) return b.tensor;
        }
        return nullptr;
    }

    void copy_state_from(const ScanNetwork& other) {
        auto copy = [](std::vector<NamedTensor<T>>& dst, const std::vector<NamedTensor<T>>& from) {
            for (std::size_t i = 0; i < dst.size(); ++i) {
                auto d = dst[i].tensor->mutable_data();
                auto s = from[i].tensor->data();
                std::copy(s.begin(), s.end(), d.begin());
            }
        };
        copy(params_, other.params_);
        copy(buffers_, other.buffers_);
    }

private:
    static void append(ForwardResult<T>& r, ExitOutput e) {
        r.probs.push_back(ops::softmax(e.logits));
        r.logits.push_back(std::move(e.logits));
        r.features.push_back(std::move(e.feature));
        if (e.attention_map.defined()) r.attention_maps.push_back(std::move(e.attention_map));
    }

    void collect() {
        params_.clear();
        buffers_.clear();
        for (std::size_t k = 0; k < sections_.size(); ++k) {
            for (std::size_t d = 0; d < sections_[k].blocks.size(); ++d) {
                sections_[k].blocks[d].collect("sections." + std::to_string(k) + "." + std::to_string(d), params_,
                                               buffers_);
            }
        }
        for (std::size_t k = 0; k < attention_.size(); ++k) {
            attention_[k].collect("attention." + std::to_string(k), params_, buffers_);
        }
        for (std::size_t k = 0; k < heads_.size(); ++k) heads_[k].collect("heads." + std::to_string(k), params_, buffers_);
    }

    ModelConfig config_;
    Topology topology_;
    std::vector<BackboneSection<T>> sections_;
    std::vector<AttentionModule<T>> attention_;
    std::vector<ExitHead<T>> heads_;
    std::vector<NamedTensor<T>> params_;
    std::vector<NamedTensor<T>> buffers_;
};

template <class T>
ScanNetwork<T> build_scan_network(const ModelConfig& config) {
    return ScanNetwork<T>(config);
}

/// Per-sample memo of backbone section outputs for sequential exit queries.
/// Counters record how much work was actually executed.
template <class T>
class SectionCache {
public:
    SectionCache() = default;

    std::size_t sections_run() const { return sections_run_; }
    std::size_t heads_run() const { return heads_run_; }
    std::size_t attention_run() const { return attention_run_; }
    std::size_t sections_cached() const { return outputs_.size(); }

    void reset() { *this = SectionCache{}; }

private:
    friend class ScanNetwork<T>;

    void bind(const Tensor<T>& sample) {
        if (!sample_.defined()) {
            sample_ = sample;
            return;
        }
        if (sample_.node() == sample.node()) return;
        if (sample_.shape() != sample.shape() ||
            !std::equal(sample_.data().begin(), sample_.data().end(), sample.data().begin())) {
            throw CacheIdentityError("section cache belongs to a different sample");
        }
    }

    Tensor<T> sample_;
    std::vector<Tensor<T>> outputs_;
    std::vector<std::optional<Tensor<T>>> probs_;
    std::size_t sections_run_ = 0;
    std::size_t heads_run_ = 0;
    std::size_t attention_run_ = 0;
};

template <class T>
Tensor<T> ScanNetwork<T>::forward_until_exit(const Tensor<T>& sample, std::size_t i, SectionCache<T>& cache) const {
    if (i >= sections_.size()) {
        throw ContractError("exit index " + std::to_string(i) + " out of range for " +
                            std::to_string(sections_.size()) + " exits");
    }
    check_input(sample);
    if (sample.dim(0) != 1) throw ShapeError("forward_until_exit expects a single sample");
    cache.bind(sample);
    if (cache.probs_.size() < sections_.size()) cache.probs_.resize(sections_.size());
    if (cache.probs_[i]) return *cache.probs_[i];

    NoGradGuard no_grad;
    while (cache.outputs_.size() <= i) {
        const std::size_t k = cache.outputs_.size();
        const Tensor<T>& in = k == 0 ? sample : cache.outputs_.back();
        cache.outputs_.push_back(sections_[k].forward(in));
        ++cache.sections_run_;
    }
    if (i < attention_.size()) ++cache.attention_run_;
    auto exit = run_exit(i, cache.outputs_[i]);
    ++cache.heads_run_;
    auto probs = ops::softmax(exit.logits);
    cache.probs_[i] = probs;
    return probs;
}

}  // namespace scan
