#pragma once

// Threshold-gated anytime inference. Exits are queried in order; the first
// exit whose maximum softmax probability is strictly greater than its
// threshold answers. If none does, the mean of all exits' softmax vectors
// decides.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "scan/data.hpp"
#include "scan/errors.hpp"
#include "scan/io.hpp"
#include "scan/metrics.hpp"
#include "scan/model.hpp"

namespace scan {

struct ThresholdVector {
    std::vector<double> sigma;

    std::size_t size() const { return sigma.size(); }

    static ThresholdVector uniform(std::size_t C, double value) { return {std::vector<double>(C, value)}; }

    /// Every gate value must be a probability. Thresholds produced by the
    /// genetic search additionally lie in [0.7, 1.0].
    void validate(std::size_t num_exits) const {
        if (sigma.size() != num_exits) {
            throw ContractError("threshold vector has " + std::to_string(sigma.size()) + " entries, network has " +
                                std::to_string(num_exits) + " exits");
        }
        for (std::size_t i = 0; i < sigma.size(); ++i) {
            if (!(sigma[i] >= 0.0 && sigma[i] <= 1.0)) {
                throw ContractError("threshold " + std::to_string(i + 1) + " = " + std::to_string(sigma[i]) +
                                    " is outside [0,1]");
            }
        }
    }

    std::string to_text() const {
        std::ostringstream os;
        for (double s : sigma) os << shortest(s) << '\n';
        return os.str();
    }

    static ThresholdVector parse(const std::string& text, const std::string& what = "thresholds") {
        ThresholdVector t;
        std::istringstream in(text);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            line.erase(0, line.find_first_not_of(" \t\r"));
            line.erase(line.find_last_not_of(" \t\r") + 1);
            if (line.empty()) continue;
            char* end = nullptr;
            const double v = std::strtod(line.c_str(), &end);
            if (end != line.c_str() + line.size()) {
                throw ParseError(what + " line " + std::to_string(line_no) + ": not a decimal: '" + line + "'");
            }
            t.sigma.push_back(v);
        }
        return t;
    }
};

inline void save_thresholds(const std::filesystem::path& path, const ThresholdVector& t) {
    write_atomic(path, t.to_text());
}

inline ThresholdVector load_thresholds(const std::filesystem::path& path) {
    return ThresholdVector::parse(read_bytes(path), "'" + path.string() + "'");
}

/// Index of the first maximum.
template <class It>
std::size_t argmax(It first, It last) {
    return static_cast<std::size_t>(std::max_element(first, last) - first);
}

/// Argmax of the mean of C probability rows, accumulated in exit order.
inline std::size_t ensemble_argmax(const std::vector<std::span<const float>>& rows) {
    const std::size_t K = rows.front().size();
    std::vector<double> mean(K, 0.0);
    for (const auto& r : rows) {
        for (std::size_t k = 0; k < K; ++k) mean[k] += r[k];
    }
    for (auto& m : mean) m /= static_cast<double>(rows.size());
    return argmax(mean.begin(), mean.end());
}

struct InferenceTrace {
    std::size_t exit_used = 0;        // 0-based; == num_exits for the ensemble
    std::size_t prediction = 0;
    std::vector<double> confidence;   // max softmax at each evaluated exit
    std::uint64_t cumulative_flops = 0;
    bool ensemble = false;
};

/// Gate decision shared by the live engine and the cache simulator.
inline bool exit_accepts(double max_probability, double sigma) { return max_probability > sigma; }

/// Cost of a sample answering at exit `exit_used` (num_exits = ensemble).
inline std::uint64_t paid_cost(const CostModel& cost, std::size_t exit_used) {
    return exit_used < cost.num_exits() ? cost.cumulative()[exit_used] : cost.ensemble_cost();
}

/// Runs one sample ([1,C,H,W]) through the gated exits.
template <class T>
InferenceTrace scalable_infer(const ScanNetwork<T>& net, const Tensor<T>& sample, const ThresholdVector& thresholds,
                              const CostModel& cost, SectionCache<T>* cache_out = nullptr) {
    const std::size_t C = net.num_exits(), K = net.num_classes();
    thresholds.validate(C);
    SectionCache<T> local;
    SectionCache<T>& cache = cache_out ? *cache_out : local;
    InferenceTrace trace;
    const auto cum = cost.cumulative();
    std::vector<Tensor<T>> seen;
    for (std::size_t i = 0; i < C; ++i) {
        auto probs = net.forward_until_exit(sample, i, cache);
        const auto p = probs.data();
        const std::size_t best = argmax(p.begin(), p.end());
        const double conf = p[best];
        trace.confidence.push_back(conf);
        trace.cumulative_flops = cum[i];
        if (exit_accepts(conf, thresholds.sigma[i])) {
            trace.exit_used = i;
            trace.prediction = best;
            return trace;
        }
        seen.push_back(std::move(probs));
    }
    std::vector<std::span<const float>> rows;
    std::vector<std::vector<float>> converted;
    for (const auto& s : seen) {
        converted.emplace_back(s.data().begin(), s.data().end());
        rows.emplace_back(converted.back().data(), K);
    }
    trace.exit_used = C;
    trace.ensemble = true;
    trace.prediction = ensemble_argmax(rows);
    trace.cumulative_flops = cost.ensemble_cost();
    return trace;
}

struct BatchInferenceResult {
    double accuracy = 0.0;
    double acceleration = 0.0;
    std::vector<InferenceTrace> traces;
    std::vector<std::size_t> histogram;  // C exits + ensemble
};

template <class T>
BatchInferenceResult batch_scalable_infer(const ScanNetwork<T>& net, const Dataset& ds,
                                          const ThresholdVector& thresholds) {
    const auto cost = count_flops(net);
    const std::size_t C = net.num_exits();
    thresholds.validate(C);
    BatchInferenceResult r;
    r.histogram.assign(C + 1, 0);
    std::size_t correct = 0;
    std::vector<std::uint64_t> paid;
    for (std::size_t s = 0; s < ds.size(); ++s) {
        auto trace = scalable_infer(net, ds.sample<T>(s), thresholds, cost);
        correct += static_cast<std::int32_t>(trace.prediction) == ds.labels[s];
        ++r.histogram[trace.exit_used];
        paid.push_back(trace.cumulative_flops);
        r.traces.push_back(std::move(trace));
    }
    if (ds.size()) {
        r.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
        r.acceleration = acceleration_ratio(paid, cost.full_cost());
    }
    return r;
}

/// CSV: sample_id, exit_used, prediction, label, cumulative_flops. Exits are
/// 1-based; the ensemble is written as "ensemble".
inline std::string traces_to_csv(const std::vector<InferenceTrace>& traces, std::span<const std::int32_t> labels) {
    std::ostringstream os;
    os << "sample_id,exit_used,prediction,label,cumulative_flops\n";
    for (std::size_t s = 0; s < traces.size(); ++s) {
        const auto& t = traces[s];
        os << s << ',';
        if (t.ensemble) {
            os << "ensemble";
        } else {
            os << t.exit_used + 1;
        }
        os << ',' << t.prediction << ',' << labels[s] << ',' << t.cumulative_flops << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Logit cache

/// Frozen per-sample, per-exit softmax rows with labels and the cost vector.
struct LogitCache {
    std::size_t n = 0, num_exits = 0, num_classes = 0;
    std::vector<float> probs;  // [n, C, K]
    std::vector<std::int32_t> labels;
    std::vector<std::uint64_t> cumulative_cost;  // per exit
    std::uint64_t ensemble_cost = 0;

    std::span<const float> row(std::size_t sample, std::size_t exit) const {
        return std::span<const float>(probs).subspan((sample * num_exits + exit) * num_classes, num_classes);
    }

    std::uint64_t full_cost() const { return cumulative_cost.back(); }

    std::uint64_t cost_of(std::size_t exit_used) const {
        return exit_used < num_exits ? cumulative_cost[exit_used] : ensemble_cost;
    }

    void validate() const {
        if (num_exits < 1 || num_classes < 1) throw ContractError("logit cache: empty exit or class dimension");
        if (probs.size() != n * num_exits * num_classes || labels.size() != n ||
            cumulative_cost.size() != num_exits) {
            throw ContractError("logit cache: inconsistent array sizes");
        }
    }
};

template <class T>
LogitCache export_logit_cache(const ScanNetwork<T>& net, const Dataset& ds, std::size_t batch_size = 256) {
    NoGradGuard no_grad;
    const auto cost = count_flops(net);
    LogitCache c;
    c.n = ds.size();
    c.num_exits = net.num_exits();
    c.num_classes = net.num_classes();
    c.labels = ds.labels;
    c.cumulative_cost = cost.cumulative();
    c.ensemble_cost = cost.ensemble_cost();
    c.probs.resize(c.n * c.num_exits * c.num_classes);
    const std::size_t C = c.num_exits, K = c.num_classes;
    std::vector<std::size_t> idx;
    for (std::size_t first = 0; first < ds.size(); first += batch_size) {
        const std::size_t n = std::min(batch_size, ds.size() - first);
        idx.resize(n);
        std::iota(idx.begin(), idx.end(), first);
        const auto fr = net.forward_all(ds.batch<T>(idx));
        for (std::size_t i = 0; i < C; ++i) {
            const auto p = fr.probs[i].data();
            for (std::size_t s = 0; s < n; ++s) {
                for (std::size_t k = 0; k < K; ++k) {
                    c.probs[((first + s) * C + i) * K + k] = static_cast<float>(p[s * K + k]);
                }
            }
        }
    }
    return c;
}

inline constexpr const char* kLogitCacheMagic = "SCAN-LOGITCACHE v1";

inline std::string encode_logit_cache(const LogitCache& c) {
    c.validate();
    std::string payload;
    append_raw(payload, std::span<const float>(c.probs));
    const std::size_t label_offset = payload.size();
    append_raw(payload, std::span<const std::int32_t>(c.labels));
    nlohmann::json header = {{"samples", c.n},
                             {"exits", c.num_exits},
                             {"classes", c.num_classes},
                             {"cumulative_cost", c.cumulative_cost},
                             {"ensemble_cost", c.ensemble_cost},
                             {"softmax", {{"dtype", "f32"}, {"offset", 0}, {"shape", {c.n, c.num_exits, c.num_classes}}}},
                             {"labels", {{"dtype", "i32"}, {"offset", label_offset}, {"shape", {c.n}}}}};
    return encode_container(kLogitCacheMagic, header, payload);
}

inline LogitCache decode_logit_cache(const std::string& bytes, const std::string& what = "logit cache") {
    const auto ct = decode_container(bytes, kLogitCacheMagic, what);
    const auto& h = ct.header;
    LogitCache c;
    try {
        c.n = h.at("samples").get<std::size_t>();
        c.num_exits = h.at("exits").get<std::size_t>();
        c.num_classes = h.at("classes").get<std::size_t>();
        c.cumulative_cost = h.at("cumulative_cost").get<std::vector<std::uint64_t>>();
        c.ensemble_cost = h.at("ensemble_cost").get<std::uint64_t>();
        c.probs = read_raw<float>(ct.payload, h.at("softmax").at("offset").get<std::size_t>(),
                                  c.n * c.num_exits * c.num_classes, what);
        c.labels = read_raw<std::int32_t>(ct.payload, h.at("labels").at("offset").get<std::size_t>(), c.n, what);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(what + ": " + e.what());
    }
    try {
        c.validate();
    } catch (const ContractError& e) {
        throw ParseError(what + ": " + e.what());
    }
    return c;
}

inline void save_logit_cache(const std::filesystem::path& path, const LogitCache& c) {
    write_atomic(path, encode_logit_cache(c));
}

inline LogitCache load_logit_cache(const std::filesystem::path& path) {
    return decode_logit_cache(read_bytes(path), "logit cache '" + path.string() + "'");
}

}  // namespace scan
