#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "scan/inference.hpp"
#include "scan/metrics.hpp"

using scan::CostModel;
using scan::ModelConfig;
using scan::ScanNetwork;

namespace {

CostModel cost_from_cumulative(const std::vector<std::uint64_t>& cum) {
    CostModel m;
    std::uint64_t prev = 0;
    for (auto c : cum) {
        m.section.push_back(c - prev);
        m.attention.push_back(0);
        m.head.push_back(0);
        prev = c;
    }
    return m;
}

}  // namespace

TEST(Flops, SingleConvExample) {
    EXPECT_EQ(scan::flops::conv(3, 1, 1, 8, 8), 1152u);
}

TEST(Flops, LinearInOutputChannels) {
    EXPECT_EQ(scan::flops::conv(3, 4, 16, 7, 7), 2 * scan::flops::conv(3, 4, 8, 7, 7));
    EXPECT_EQ(scan::flops::fc(64, 20), 2 * scan::flops::fc(64, 10));
    EXPECT_EQ(scan::flops::deconv(4, 8, 6, 5, 5), 2 * scan::flops::deconv(4, 8, 3, 5, 5));
}

// Layer-by-layer tally for tiny-3 on 1x28x28 input, written out by hand.
TEST(Flops, Tiny3MatchesHandTally) {
    ScanNetwork<float> net(ModelConfig::preset("tiny-3"));
    const auto m = scan::count_flops(net);

    const std::uint64_t s1 = 2ull * 9 * 1 * 16 * 784 + 2 * 16 * 784;   // 1->16, 28x28
    const std::uint64_t s2 = 2ull * 9 * 16 * 32 * 196 + 2 * 32 * 196;  // 16->32, 14x14
    const std::uint64_t s3 = 2ull * 9 * 32 * 64 * 49 + 2 * 64 * 49;    // 32->64, 7x7
    EXPECT_EQ(s1, 250880u);
    EXPECT_EQ(s2, 1818880u);
    EXPECT_EQ(s3, 1812608u);
    EXPECT_EQ(m.section, (std::vector<std::uint64_t>{s1, s2, s3}));

    // down conv + bn/relu, 4x4 transposed conv back up, sigmoid and gating
    const std::uint64_t a1 = 2ull * 9 * 16 * 16 * 196 + 2 * 16 * 196 + 2ull * 16 * 16 * 16 * 196 + 2 * 16 * 784;
    const std::uint64_t a2 = 2ull * 9 * 32 * 32 * 49 + 2 * 32 * 49 + 2ull * 16 * 32 * 32 * 49 + 2 * 32 * 196;
    EXPECT_EQ(a1, 2540160u);
    EXPECT_EQ(a2, 2524480u);
    EXPECT_EQ(m.attention, (std::vector<std::uint64_t>{a1, a2, 0}));

    const std::uint64_t tail = 64 * 49 + 2 * 64 * 10 + 10;  // pool, fc, softmax
    EXPECT_EQ(m.head, (std::vector<std::uint64_t>{s2 + s3 + tail, s3 + tail, tail}));

    EXPECT_EQ(m.cumulative(), (std::vector<std::uint64_t>{6426954u, 12587348u, 14404382u}));
    EXPECT_EQ(m.ensemble_cost(), 14404382u + 3 * 10);
}

TEST(Flops, CostVectorIncreasesForEveryPreset) {
    for (const char* name : {"tiny-3", "tiny-4", "micro-3"}) {
        for (bool attention : {true, false}) {
            auto cfg = ModelConfig::preset(name);
            cfg.attention = attention;
            const auto cum = scan::count_flops(ScanNetwork<float>(cfg)).cumulative();
            for (std::size_t i = 1; i < cum.size(); ++i) EXPECT_LT(cum[i - 1], cum[i]) << name;
            EXPECT_GE(scan::count_flops(ScanNetwork<float>(cfg)).ensemble_cost(), cum.back());
        }
    }
}

TEST(Acceleration, AllDeepestIsOne) {
    const auto m = cost_from_cumulative({10, 30, 60, 100});
    const std::vector<std::size_t> hist{0, 0, 0, 7, 0};
    EXPECT_DOUBLE_EQ(scan::acceleration_ratio(hist, m), 1.0);
}

TEST(Acceleration, AllFirstExit) {
    const auto m = cost_from_cumulative({10, 30, 60, 100});
    const std::vector<std::size_t> hist{5, 0, 0, 0, 0};
    EXPECT_DOUBLE_EQ(scan::acceleration_ratio(hist, m), 10.0);
}

TEST(Acceleration, HalfFirstHalfDeepest) {
    const auto m = cost_from_cumulative({10, 30, 60, 100});
    const std::vector<std::size_t> hist{50, 0, 0, 50, 0};
    EXPECT_NEAR(scan::acceleration_ratio(hist, m), 100.0 / 55.0, 1e-12);
    const std::vector<std::uint64_t> paid{10, 100, 10, 100};
    EXPECT_NEAR(scan::acceleration_ratio(paid, 100), 100.0 / 55.0, 1e-12);
}

TEST(Acceleration, EnsembleCostsMoreThanDeepest) {
    auto m = cost_from_cumulative({10, 30, 60, 100});
    m.ensemble_extra = 25;
    const std::vector<std::size_t> hist{0, 0, 0, 0, 4};
    EXPECT_DOUBLE_EQ(scan::acceleration_ratio(hist, m), 0.8);
}

TEST(Acceleration, RejectsEmptyAndMisshapenInput) {
    const auto m = cost_from_cumulative({10, 30});
    EXPECT_THROW(scan::acceleration_ratio(std::vector<std::size_t>{0, 0, 0}, m), scan::ContractError);
    EXPECT_THROW(scan::acceleration_ratio(std::vector<std::size_t>{1, 1}, m), scan::ContractError);
    EXPECT_THROW(scan::acceleration_ratio(std::vector<std::uint64_t>{}, 10), scan::ContractError);
}

TEST(ExitDistribution, AllFirstExit) {
    const std::vector<std::size_t> exits(12, 0);
    const auto d = scan::exit_distribution(exits, 3);
    EXPECT_EQ(d.difficulty, 0.0);
    EXPECT_EQ(d.mean_exit, 1.0);
    EXPECT_EQ(d.fraction, (std::vector<double>{1, 0, 0, 0}));
}

TEST(ExitDistribution, UniformOverFourSlots) {
    const std::vector<std::size_t> exits{0, 1, 2, 3, 3, 2, 1, 0};
    const auto d = scan::exit_distribution(exits, 3);
    for (double f : d.fraction) EXPECT_DOUBLE_EQ(f, 0.25);
    EXPECT_DOUBLE_EQ(d.mean_exit, 2.5);
    EXPECT_DOUBLE_EQ(d.difficulty, 0.75);
    EXPECT_THROW(scan::exit_distribution(std::vector<std::size_t>{4}, 3), scan::ContractError);
}

TEST(ExitDistribution, FractionsSumToOne) {
    std::vector<std::size_t> exits;
    for (std::size_t i = 0; i < 997; ++i) exits.push_back((i * i + 3 * i) % 5);
    const auto d = scan::exit_distribution(exits, 4);
    double s = 0;
    for (double f : d.fraction) s += f;
    EXPECT_NEAR(s, 1.0, 1e-9);
}

// The trace CSV is re-read with plain string handling and the histogram is
// rebuilt from its exit column.
TEST(ExitDistribution, MatchesRecountOfExportedTraceCsv) {
    auto cfg = ModelConfig::preset("micro-3");
    ScanNetwork<float> net(cfg);
    auto ds = scan::synth::generate("blobs", 60, 4);
    scan::Dataset small;
    small.height = small.width = 8;
    small.num_classes = 3;
    for (std::size_t s = 0; s < ds.size(); ++s) {
        const float* img = ds.image(s).data();
        for (std::size_t r = 0; r < 8; ++r)
            for (std::size_t c = 0; c < 8; ++c) small.pixels.push_back(img[(r * 3 + 2) * 28 + c * 3 + 2]);
        small.labels.push_back(ds.labels[s] + static_cast<std::int32_t>(s % 2));
    }
    // Median confidence per exit as the threshold, so samples spread over the slots.
    const auto cache = scan::export_logit_cache(net, small);
    scan::ThresholdVector sigma;
    for (std::size_t i = 0; i < 3; ++i) {
        std::vector<float> conf;
        for (std::size_t n = 0; n < cache.n; ++n) {
            const auto r = cache.row(n, i);
            conf.push_back(*std::max_element(r.begin(), r.end()));
        }
        std::nth_element(conf.begin(), conf.begin() + conf.size() / 2, conf.end());
        sigma.sigma.push_back(conf[conf.size() / 2]);
    }
    const auto result = scan::batch_scalable_infer(net, small, sigma);
    const std::string csv = scan::traces_to_csv(result.traces, small.labels);

    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    ASSERT_EQ(line, "sample_id,exit_used,prediction,label,cumulative_flops");
    std::map<std::string, std::size_t> counts;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        const auto a = line.find(','), b = line.find(',', a + 1);
        ++counts[line.substr(a + 1, b - a - 1)];
        ++rows;
    }
    ASSERT_EQ(rows, small.size());
    ASSERT_GE(counts.size(), 2u) << "thresholds should split the samples over several exits";

    std::vector<std::size_t> exits;
    for (const auto& t : result.traces) exits.push_back(t.exit_used);
    const auto d = scan::exit_distribution(exits, 3);
    const char* names[] = {"1", "2", "3", "ensemble"};
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_DOUBLE_EQ(d.fraction[i], static_cast<double>(counts[names[i]]) / static_cast<double>(rows)) << names[i];
        EXPECT_EQ(result.histogram[i], counts[names[i]]);
    }
}
