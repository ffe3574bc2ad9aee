#pragma once

// Analytic FLOP accounting, acceleration ratio and exit statistics.
//
// Conventions: a multiply-accumulate is 2 FLOPs; batchnorm, relu, sigmoid,
// pooling, elementwise gating and softmax cost 1 op per element they read;
// bias additions are ignored.

#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "scan/errors.hpp"
#include "scan/io.hpp"
#include "scan/model.hpp"

namespace scan {

namespace flops {

inline std::uint64_t conv(std::size_t k, std::size_t cin, std::size_t cout, std::size_t ho, std::size_t wo) {
    return 2ULL * k * k * cin * cout * ho * wo;
}

/// Transposed convolution: every input position stamps a k x k x cout patch.
inline std::uint64_t deconv(std::size_t k, std::size_t cin, std::size_t cout, std::size_t hi, std::size_t wi) {
    return 2ULL * k * k * cin * cout * hi * wi;
}

inline std::uint64_t fc(std::size_t in, std::size_t out) { return 2ULL * in * out; }

/// conv3x3 + batchnorm + relu.
inline std::uint64_t conv_block(std::size_t cin, const FeatureShape& out) {
    const std::uint64_t elems = out.numel();
    return conv(3, cin, out.channels, out.height, out.width) + 2 * elems;
}

}  // namespace flops

struct CostModel {
    std::vector<std::uint64_t> section;    // per backbone section
    std::vector<std::uint64_t> attention;  // per exit; 0 where absent
    std::vector<std::uint64_t> head;       // bottleneck + pool + fc + softmax
    std::uint64_t ensemble_extra = 0;      // averaging the C softmax vectors

    std::size_t num_exits() const { return section.size(); }

    /// Cost paid by a sample that stops at exit i (0-based): every section up
    /// to i plus every attention module and head evaluated on the way.
    std::vector<std::uint64_t> cumulative() const {
        std::vector<std::uint64_t> c(section.size());
        std::uint64_t acc = 0;
        for (std::size_t i = 0; i < section.size(); ++i) {
            acc += section[i] + attention[i] + head[i];
            c[i] = acc;
        }
        return c;
    }

    std::uint64_t full_cost() const { return cumulative().back(); }
    std::uint64_t ensemble_cost() const { return full_cost() + ensemble_extra; }

    std::uint64_t total() const {
        return std::accumulate(section.begin(), section.end(), std::uint64_t{0}) +
               std::accumulate(attention.begin(), attention.end(), std::uint64_t{0}) +
               std::accumulate(head.begin(), head.end(), std::uint64_t{0});
    }
};

template <class T>
CostModel count_flops(const ScanNetwork<T>& net) {
    const auto& cfg = net.config();
    const auto& topo = net.topology();
    const std::size_t C = net.num_exits(), K = net.num_classes();
    CostModel m;
    FeatureShape in = topo.input;
    for (std::size_t k = 0; k < C; ++k) {
        std::uint64_t s = 0;
        std::size_t cin = in.channels;
        const auto& out = topo.section_out[k];
        for (std::size_t d = 0; d < cfg.sections[k].depth; ++d) {
            // Only the first block strides; later blocks keep the output size.
            s += flops::conv_block(cin, out);
            cin = out.channels;
        }
        m.section.push_back(s);
        in = out;
    }
    for (std::size_t i = 0; i < C; ++i) {
        const auto& f = topo.section_out[i];
        std::uint64_t a = 0;
        if (i < net.attention().size()) {
            const FeatureShape down{f.channels, f.height / 2, f.width / 2};
            a += flops::conv_block(f.channels, down);
            a += flops::deconv(4, f.channels, f.channels, down.height, down.width);
            a += 2 * f.numel();  // sigmoid + gating product
        }
        m.attention.push_back(a);

        std::uint64_t h = 0;
        FeatureShape cur = f;
        for (std::size_t k = i + 1; k < C; ++k) {
            const FeatureShape next{cfg.sections[k].channels, conv3x3_out(cur.height, cfg.sections[k].stride),
                                    conv3x3_out(cur.width, cfg.sections[k].stride)};
            h += flops::conv_block(cur.channels, next);
            cur = next;
        }
        h += cur.numel();                 // global average pool
        h += flops::fc(cur.channels, K);  // classifier
        h += K;                           // softmax
        m.head.push_back(h);
    }
    m.ensemble_extra = static_cast<std::uint64_t>(C) * K;
    return m;
}

/// Full-model cost divided by the mean cost actually paid.
inline double acceleration_ratio(std::span<const std::uint64_t> paid, std::uint64_t full_cost) {
    if (paid.empty()) throw ContractError("acceleration_ratio: no samples");
    long double sum = 0;
    for (auto c : paid) sum += c;
    return static_cast<double>(static_cast<long double>(full_cost) * paid.size() / sum);
}

/// Same ratio from a histogram over exits 0..C-1 plus the ensemble slot C.
inline double acceleration_ratio(std::span<const std::size_t> histogram, const CostModel& cost) {
    const auto cum = cost.cumulative();
    if (histogram.size() != cum.size() + 1) throw ContractError("acceleration_ratio: histogram needs C+1 slots");
    long double sum = 0, n = 0;
    for (std::size_t i = 0; i < histogram.size(); ++i) {
        const auto c = i < cum.size() ? cum[i] : cost.ensemble_cost();
        sum += static_cast<long double>(c) * histogram[i];
        n += histogram[i];
    }
    if (n == 0) throw ContractError("acceleration_ratio: empty histogram");
    return static_cast<double>(static_cast<long double>(cost.full_cost()) * n / sum);
}

struct ExitDistribution {
    std::vector<double> fraction;  // C exits followed by the ensemble
    double mean_exit = 0.0;        // 1-based; the ensemble counts as C+1
    double difficulty = 0.0;       // 1 - fraction resolved at the first exit
};

/// `exits` holds 0-based exit indices with C meaning the ensemble.
inline ExitDistribution exit_distribution(std::span<const std::size_t> exits, std::size_t num_exits) {
    if (exits.empty()) throw ContractError("exit_distribution: no samples");
    std::vector<std::size_t> hist(num_exits + 1, 0);
    double sum = 0.0;
    for (auto e : exits) {
        if (e > num_exits) throw ContractError("exit_distribution: exit index " + std::to_string(e) + " out of range");
        ++hist[e];
        sum += static_cast<double>(e + 1);
    }
    ExitDistribution d;
    const double n = static_cast<double>(exits.size());
    for (auto h : hist) d.fraction.push_back(static_cast<double>(h) / n);
    d.mean_exit = sum / n;
    d.difficulty = 1.0 - d.fraction.front();
    return d;
}

/// One CSV row of the training history.
struct MetricRecord {
    std::size_t epoch = 0;  // 1-based
    std::size_t exit = 0;   // 1-based
    std::string split;      // "train" or "val"
    double accuracy = 0.0;
    double loss = 0.0;
};

struct MetricsHistory {
    std::vector<MetricRecord> records;

    bool empty() const { return records.empty(); }

    std::string to_csv() const {
        std::ostringstream os;
        os << "epoch,exit,split,accuracy,loss\n";
        for (const auto& r : records) {
            os << r.epoch << ',' << r.exit << ',' << r.split << ',' << shortest(r.accuracy) << ',' << shortest(r.loss) << '\n';
        }
        return os.str();
    }
};

}  // namespace scan
