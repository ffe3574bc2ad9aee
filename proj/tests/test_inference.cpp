#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <vector>

#include "scan/inference.hpp"
#include "scan/threshold_search.hpp"

using scan::ModelConfig;
using scan::ScanNetwork;
using scan::ThresholdVector;

namespace fs = std::filesystem;

namespace {

scan::Dataset random_dataset(std::size_t n, std::uint64_t seed, std::size_t size = 8, std::size_t classes = 3) {
    scan::Rng rng(seed);
    scan::Dataset ds;
    ds.height = ds.width = size;
    ds.num_classes = classes;
    for (std::size_t i = 0; i < n * size * size; ++i) ds.pixels.push_back(static_cast<float>(rng.normal()));
    for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(static_cast<std::int32_t>(rng.below(classes)));
    return ds;
}

/// Random weights with the classifiers scaled up so that confidences spread
/// over (1/K, 1) instead of clustering near uniform.
ScanNetwork<float> confident_net(std::uint64_t seed) {
    ScanNetwork<float> net(ModelConfig::preset("micro-3"));
    scan::Rng rng(seed);
    for (const auto& p : net.parameters()) {
        for (auto& v : p.tensor->mutable_data()) v += static_cast<float>(0.3 * rng.normal());
    }
    const float scale[] = {6.f, 1.f, 3.f};
    for (std::size_t i = 0; i < 3; ++i) {
        for (auto& v : net.heads()[i].fc_weight.mutable_data()) v *= scale[i];
    }
    return net;
}

std::vector<std::size_t> exits_of(const scan::BatchInferenceResult& r) {
    std::vector<std::size_t> e;
    for (const auto& t : r.traces) e.push_back(t.exit_used);
    return e;
}

}  // namespace

TEST(ThresholdVector, ValidationAndText) {
    ThresholdVector t{{0.7, 0.85, 1.0}};
    EXPECT_NO_THROW(t.validate(3));
    EXPECT_THROW(t.validate(2), scan::ContractError);
    EXPECT_THROW(ThresholdVector({{0.7, 1.2, 0.9}}).validate(3), scan::ContractError);
    EXPECT_THROW(ThresholdVector({{0.7, std::nan(""), 0.9}}).validate(3), scan::ContractError);
    EXPECT_EQ(t.to_text(), "0.7\n0.85\n1\n");
    EXPECT_EQ(ThresholdVector::parse(t.to_text()).sigma, t.sigma);
    EXPECT_THROW(ThresholdVector::parse("0.7\nzero\n"), scan::ParseError);
}

TEST(Gate, StrictInequality) {
    EXPECT_TRUE(scan::exit_accepts(0.81, 0.8));
    EXPECT_FALSE(scan::exit_accepts(0.8, 0.8));
    EXPECT_FALSE(scan::exit_accepts(1.0, 1.0));
}

TEST(ScalableInfer, ConfidentFirstExitStopsEarly) {
    ScanNetwork<float> net(ModelConfig::preset("micro-3"));
    auto& h = net.heads()[0];
    for (auto& v : h.fc_weight.mutable_data()) v = 0.f;
    h.fc_bias.mutable_data()[0] = std::log(0.9f);
    h.fc_bias.mutable_data()[1] = std::log(0.05f);
    h.fc_bias.mutable_data()[2] = std::log(0.05f);
    const auto cost = scan::count_flops(net);
    auto ds = random_dataset(1, 1);

    scan::SectionCache<float> cache;
    const auto trace = scan::scalable_infer(net, ds.sample<float>(0), ThresholdVector::uniform(3, 0.7), cost, &cache);
    EXPECT_EQ(trace.exit_used, 0u);
    EXPECT_EQ(trace.prediction, 0u);
    EXPECT_FALSE(trace.ensemble);
    ASSERT_EQ(trace.confidence.size(), 1u);
    EXPECT_NEAR(trace.confidence[0], 0.9, 1e-6);
    EXPECT_EQ(trace.cumulative_flops, cost.cumulative()[0]);
    EXPECT_EQ(cache.sections_run(), 1u);
    EXPECT_EQ(cache.heads_run(), 1u);
}

TEST(ScalableInfer, UnreachableThresholdsFallBackToEnsemble) {
    auto net = confident_net(2);
    const auto cost = scan::count_flops(net);
    auto ds = random_dataset(20, 3);
    for (std::size_t s = 0; s < ds.size(); ++s) {
        scan::SectionCache<float> cache;
        auto x = ds.sample<float>(s);
        const auto trace = scan::scalable_infer(net, x, ThresholdVector::uniform(3, 1.0), cost, &cache);
        ASSERT_TRUE(trace.ensemble);
        EXPECT_EQ(trace.exit_used, 3u);
        EXPECT_EQ(trace.cumulative_flops, cost.ensemble_cost());
        EXPECT_EQ(cache.sections_run(), 3u);
        EXPECT_EQ(cache.heads_run(), 3u);

        const auto fr = net.forward_all(x);
        std::vector<std::span<const float>> rows;
        for (const auto& p : fr.probs) rows.emplace_back(p.data());
        EXPECT_EQ(trace.prediction, scan::ensemble_argmax(rows));
    }
}

TEST(ScalableInfer, ZeroThresholdAgreesWithFirstExitArgmax) {
    auto net = confident_net(4);
    const auto cost = scan::count_flops(net);
    auto ds = random_dataset(100, 5);
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
    const auto fr = net.forward_all(ds.batch<float>(idx));
    for (std::size_t s = 0; s < ds.size(); ++s) {
        const auto trace = scan::scalable_infer(net, ds.sample<float>(s), ThresholdVector::uniform(3, 0.0), cost);
        const auto row = fr.logits[0].data().subspan(s * 3, 3);
        EXPECT_EQ(trace.exit_used, 0u);
        EXPECT_EQ(trace.prediction, scan::argmax(row.begin(), row.end())) << s;
    }
}

TEST(ScalableInfer, SectionsNeverRecomputed) {
    auto net = confident_net(6);
    const auto cost = scan::count_flops(net);
    auto ds = random_dataset(40, 7);
    for (double sigma : {0.0, 0.6, 0.8, 0.95, 1.0}) {
        for (std::size_t s = 0; s < ds.size(); ++s) {
            scan::SectionCache<float> cache;
            const auto t = scan::scalable_infer(net, ds.sample<float>(s), ThresholdVector::uniform(3, sigma), cost, &cache);
            EXPECT_LE(cache.sections_run(), 3u);
            EXPECT_EQ(cache.sections_run(), std::min<std::size_t>(t.exit_used + 1, 3));
        }
    }
}

TEST(BatchInfer, SingleSampleDataset) {
    auto net = confident_net(8);
    auto ds = random_dataset(1, 9);
    const auto t = ThresholdVector{{0.6, 0.7, 0.8}};
    const auto r = scan::batch_scalable_infer(net, ds, t);
    const auto one = scan::scalable_infer(net, ds.sample<float>(0), t, scan::count_flops(net));
    EXPECT_EQ(r.accuracy, static_cast<std::int32_t>(one.prediction) == ds.labels[0] ? 1.0 : 0.0);
    ASSERT_EQ(r.traces.size(), 1u);
    EXPECT_EQ(r.traces[0].exit_used, one.exit_used);
}

TEST(BatchInfer, TraceGatingIsSound) {
    auto net = confident_net(10);
    auto ds = random_dataset(200, 11);
    const ThresholdVector t{{0.8, 0.75, 0.9}};
    const auto r = scan::batch_scalable_infer(net, ds, t);
    for (const auto& trace : r.traces) {
        const std::size_t k = trace.exit_used;
        ASSERT_EQ(trace.confidence.size(), std::min<std::size_t>(k + 1, 3));
        for (std::size_t i = 0; i < std::min<std::size_t>(k, 3); ++i) EXPECT_LE(trace.confidence[i], t.sigma[i]);
        if (k < 3) EXPECT_GT(trace.confidence[k], t.sigma[k]);
    }
}

TEST(BatchInfer, LooseThresholdsExitNoLaterThanStrictOnes) {
    auto net = confident_net(12);
    auto ds = random_dataset(150, 13);
    const auto loose = scan::batch_scalable_infer(net, ds, ThresholdVector::uniform(3, 0.7));
    const auto strict = scan::batch_scalable_infer(net, ds, ThresholdVector::uniform(3, 0.99));
    const auto a = scan::exit_distribution(exits_of(loose), 3), b = scan::exit_distribution(exits_of(strict), 3);
    EXPECT_LE(a.mean_exit, b.mean_exit);
    EXPECT_GE(loose.acceleration, strict.acceleration);
    EXPECT_LT(a.mean_exit, 4.0) << "loose thresholds should let some samples out early";
}

TEST(BatchInfer, RaisingOneThresholdNeverMovesASampleEarlier) {
    auto net = confident_net(14);
    auto ds = random_dataset(120, 15);
    const ThresholdVector base{{0.7, 0.7, 0.7}};
    const auto before = exits_of(scan::batch_scalable_infer(net, ds, base));
    for (std::size_t i = 0; i < 3; ++i) {
        for (double raised : {0.8, 0.9, 0.99}) {
            auto t = base;
            t.sigma[i] = raised;
            const auto after = exits_of(scan::batch_scalable_infer(net, ds, t));
            for (std::size_t s = 0; s < ds.size(); ++s) EXPECT_GE(after[s], before[s]) << "exit " << i << " sample " << s;
        }
    }
}

TEST(BatchInfer, CacheSimulationReplaysLiveDecisions) {
    auto net = confident_net(16);
    auto ds = random_dataset(300, 17);
    const auto cache = scan::export_logit_cache(net, ds, 64);
    const scan::CacheSummary summary(cache);
    std::vector<std::size_t> slots_used(4, 0);
    for (const ThresholdVector& t : {ThresholdVector{{0.7, 0.7, 0.7}}, ThresholdVector{{0.9, 0.72, 0.85}},
                                     ThresholdVector{{1.0, 0.8, 0.7}}, ThresholdVector{{0.95, 0.95, 1.0}}}) {
        const auto live = scan::batch_scalable_infer(net, ds, t);
        const auto sim = scan::simulate_from_cache(t, summary, true);
        EXPECT_EQ(sim.exits, exits_of(live));
        EXPECT_EQ(sim.histogram, live.histogram);
        EXPECT_EQ(sim.accuracy, live.accuracy);
        EXPECT_NEAR(sim.acceleration, live.acceleration, 1e-12);
        for (std::size_t i = 0; i < 4; ++i) slots_used[i] += live.histogram[i];
    }
    for (std::size_t i = 0; i < 4; ++i) EXPECT_GT(slots_used[i], 0u) << "slot " << i << " never exercised";
}

TEST(LogitCache, RowsAreDistributions) {
    auto net = confident_net(18);
    auto ds = random_dataset(50, 19);
    const auto c = scan::export_logit_cache(net, ds);
    EXPECT_EQ(c.probs.size(), 50u * 3 * 3);
    for (std::size_t s = 0; s < c.n; ++s) {
        for (std::size_t i = 0; i < c.num_exits; ++i) {
            double sum = 0;
            for (float v : c.row(s, i)) sum += v;
            EXPECT_NEAR(sum, 1.0, 1e-6);
        }
    }
    EXPECT_EQ(c.cumulative_cost, scan::count_flops(net).cumulative());
    EXPECT_EQ(c.labels, ds.labels);
}

TEST(LogitCache, SpotChecksAgainstForwardAll) {
    auto net = confident_net(20);
    auto ds = random_dataset(64, 21);
    const auto c = scan::export_logit_cache(net, ds, 16);
    for (std::size_t s : {0u, 5u, 15u, 16u, 17u, 31u, 40u, 47u, 58u, 63u}) {
        const auto fr = net.forward_all(ds.sample<float>(s));
        for (std::size_t i = 0; i < 3; ++i) {
            const auto row = c.row(s, i);
            for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(row[k], fr.probs[i][k]) << s << "/" << i;
        }
    }
}

TEST(LogitCache, FileRoundTripIsBitExact) {
    auto net = confident_net(22);
    auto ds = random_dataset(33, 23);
    const auto c = scan::export_logit_cache(net, ds);
    const fs::path p = fs::temp_directory_path() / "scan_test_cache.bin";
    scan::save_logit_cache(p, c);
    const auto back = scan::load_logit_cache(p);
    EXPECT_EQ(scan::encode_logit_cache(back), scan::read_bytes(p));
    EXPECT_EQ(back.n, c.n);
    EXPECT_EQ(back.labels, c.labels);
    EXPECT_EQ(back.cumulative_cost, c.cumulative_cost);
    EXPECT_EQ(back.ensemble_cost, c.ensemble_cost);
    ASSERT_EQ(back.probs.size(), c.probs.size());
    EXPECT_EQ(std::memcmp(back.probs.data(), c.probs.data(), c.probs.size() * sizeof(float)), 0);

    std::string bytes = scan::read_bytes(p);
    bytes.resize(bytes.size() - 8);
    EXPECT_THROW(scan::decode_logit_cache(bytes), scan::ParseError);
    fs::remove(p);
}
