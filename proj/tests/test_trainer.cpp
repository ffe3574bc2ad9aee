#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "scan/checkpoint.hpp"
#include "scan/inference.hpp"
#include "scan/trainer.hpp"

using scan::ModelConfig;
using scan::ScanNetwork;

namespace {

scan::Dataset standardized(scan::Dataset ds) {
    scan::standardize(ds, scan::compute_normalization(ds));
    return ds;
}

scan::TrainConfig quick_config(std::size_t epochs) {
    scan::TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = 32;
    cfg.milestones = {};
    cfg.seed = 5;
    return cfg;
}

std::vector<float> flat_state(const ScanNetwork<float>& net) {
    std::vector<float> out;
    for (const auto& p : net.parameters()) out.insert(out.end(), p.tensor->data().begin(), p.tensor->data().end());
    for (const auto& b : net.buffers()) out.insert(out.end(), b.tensor->data().begin(), b.tensor->data().end());
    return out;
}

}  // namespace

TEST(TrainConfig, Validation) {
    auto cfg = quick_config(1);
    cfg.batch_size = 1;
    EXPECT_THROW(cfg.validate(), scan::ConfigError);
    cfg = quick_config(1);
    cfg.lr_decay = 1.0;
    EXPECT_THROW(cfg.validate(), scan::ConfigError);
    cfg = quick_config(1);
    cfg.distill.alpha = -0.1;
    EXPECT_THROW(cfg.validate(), scan::ConfigError);
}

TEST(TrainConfig, StepSchedule) {
    scan::TrainConfig cfg;
    cfg.sgd.learning_rate = 0.1;
    cfg.milestones = {2, 4};
    cfg.lr_decay = 0.5;
    EXPECT_DOUBLE_EQ(cfg.learning_rate_at(0), 0.1);
    EXPECT_DOUBLE_EQ(cfg.learning_rate_at(1), 0.1);
    EXPECT_DOUBLE_EQ(cfg.learning_rate_at(2), 0.05);
    EXPECT_DOUBLE_EQ(cfg.learning_rate_at(5), 0.025);
}

TEST(Sgd, MomentumAndSelectiveDecay) {
    auto w = scan::Tensor<float>::from({1}, {2.0f}, true);
    auto b = scan::Tensor<float>::from({1}, {2.0f}, true);
    scan::Sgd<float> opt({{"fc.weight", &w}, {"fc.bias", &b}}, {0.1, 0.9, 0.5});
    for (int step = 0; step < 2; ++step) {
        w.mutable_grad()[0] = 1.0f;
        b.mutable_grad()[0] = 1.0f;
        opt.step();
        opt.zero_grad();
    }
    // weight: v1 = 1 + 0.5*2 = 2, w1 = 1.8; v2 = 0.9*2 + 1 + 0.9 = 3.7, w2 = 1.43
    EXPECT_NEAR(w[0], 1.43f, 1e-6);
    // bias: v1 = 1, b1 = 1.9; v2 = 1.9, b2 = 1.71
    EXPECT_NEAR(b[0], 1.71f, 1e-6);
    EXPECT_TRUE(scan::is_decayed("heads.0.fc.weight"));
    EXPECT_FALSE(scan::is_decayed("sections.0.0.bn.gamma"));
    EXPECT_FALSE(scan::is_decayed("attention.0.deconv.bias"));
}

TEST(Train, BlobsReachHighDeepestAccuracy) {
    auto all = standardized(scan::synth::generate("blobs", 700, 1));
    auto train_set = all.slice(0, 500, scan::Split::Train);
    auto val_set = all.slice(500, 200, scan::Split::Val);
    auto mc = ModelConfig::preset("tiny-3");
    mc.num_classes = 2;
    ScanNetwork<float> net(mc);
    auto cfg = quick_config(20);
    cfg.milestones = {12, 17};
    auto r = scan::train(net, train_set, val_set, cfg);
    EXPECT_GE(r.best_val_accuracy, 0.95);
    EXPECT_EQ(scan::evaluate(net, val_set).exit_accuracy.back(), r.best_val_accuracy);
    // epochs x exits x {train, val}
    EXPECT_EQ(r.checkpoint.history.records.size(), 20u * 3 * 2);
}

TEST(Train, ZeroEpochsKeepsInitialWeights) {
    auto ds = standardized(scan::synth::generate("blobs", 64, 2));
    auto mc = ModelConfig::preset("tiny-3");
    mc.num_classes = 2;
    ScanNetwork<float> net(mc);
    const auto before = flat_state(net);
    auto r = scan::train(net, ds, ds.slice(0, 0, scan::Split::Val), quick_config(0));
    EXPECT_EQ(flat_state(net), before);
    EXPECT_EQ(flat_state(r.checkpoint.network), before);
    EXPECT_TRUE(r.checkpoint.history.empty());
    EXPECT_EQ(r.best_epoch, 0u);
}

TEST(Train, SameSeedGivesIdenticalCheckpointBytes) {
    auto ds = standardized(scan::synth::generate("shapes", 160, 3));
    auto train_set = ds.slice(0, 128, scan::Split::Train), val_set = ds.slice(128, 32, scan::Split::Val);
    auto run = [&] {
        ScanNetwork<float> net(ModelConfig::preset("tiny-3"));
        auto r = scan::train(net, train_set, val_set, quick_config(2));
        return scan::encode_checkpoint(r.checkpoint);
    };
    EXPECT_EQ(run(), run());
}

TEST(Train, DescendsOnFixedBatch) {
    auto ds = standardized(scan::synth::generate("shapes", 16, 4));
    ScanNetwork<float> net(ModelConfig::preset("tiny-3"));
    std::vector<std::size_t> idx(16);
    std::iota(idx.begin(), idx.end(), 0);
    const auto x = ds.batch(idx);
    const auto y = ds.batch_labels(idx);
    scan::Sgd<float> opt(net.parameters(), {0.01, 0.0, 0.0});
    double prev = INFINITY;
    for (int step = 0; step < 12; ++step) {
        auto loss = scan::scan_loss(net.forward_all(x, scan::ops::Mode::Train), y, scan::DistillConfig{}).total;
        const double l = loss.item();
        EXPECT_LT(l, prev) << "step " << step;
        prev = l;
        loss.backward();
        opt.step();
        opt.zero_grad();
    }
}

TEST(Train, NoDistillationLossIsSumOfCrossEntropies) {
    auto ds = standardized(scan::synth::generate("shapes", 8, 5));
    ScanNetwork<float> net(ModelConfig::preset("tiny-3"));
    std::vector<std::size_t> idx(8);
    std::iota(idx.begin(), idx.end(), 0);
    const auto y = ds.batch_labels(idx);
    auto fr = net.forward_all(ds.batch(idx), scan::ops::Mode::Train);
    auto loss = scan::scan_loss(fr, y, {0.0, 0.0, 1.0});
    float sum = scan::cross_entropy(fr.logits[0], y).item();
    for (std::size_t i = 1; i < 3; ++i) sum += scan::cross_entropy(fr.logits[i], y).item();
    EXPECT_EQ(loss.total.item(), sum);
}

TEST(Train, DivergenceIsReportedWithContext) {
    auto ds = standardized(scan::synth::generate("shapes", 64, 6));
    ScanNetwork<float> net(ModelConfig::preset("tiny-3"));
    auto cfg = quick_config(3);
    cfg.sgd.learning_rate = 1e8;
    try {
        scan::train(net, ds, ds.slice(0, 0, scan::Split::Val), cfg);
        FAIL() << "expected divergence";
    } catch (const scan::DivergenceError& e) {
        EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos) << e.what();
    }
}

TEST(Train, ShapeMismatchIsRejected) {
    auto ds = standardized(scan::synth::generate("shapes", 8, 7));
    ScanNetwork<float> net(ModelConfig::preset("micro-3"));
    EXPECT_THROW(scan::train(net, ds, ds, quick_config(1)), scan::ShapeError);
}

TEST(Evaluate, OneHotOutputsAndIdenticalExits) {
    auto ds = standardized(scan::synth::generate("shapes", 40, 8));
    ScanNetwork<float> net(ModelConfig::preset("tiny-3"));
    for (auto& h : net.heads()) {
        for (auto& v : h.fc_weight.mutable_data()) v = 0.f;
        for (auto& v : h.fc_bias.mutable_data()) v = 0.f;
        h.fc_bias.mutable_data()[3] = 100.f;
    }
    const auto r = scan::evaluate(net, ds);
    const double frac3 = static_cast<double>(std::count(ds.labels.begin(), ds.labels.end(), 3)) / 40.0;
    for (double a : r.exit_accuracy) EXPECT_DOUBLE_EQ(a, frac3);
    EXPECT_DOUBLE_EQ(r.ensemble_accuracy, frac3);

    auto only3 = ds;
    std::fill(only3.labels.begin(), only3.labels.end(), 3);
    const auto p = scan::evaluate(net, only3);
    for (double a : p.exit_accuracy) EXPECT_EQ(a, 1.0);
    EXPECT_EQ(p.ensemble_accuracy, 1.0);
}

TEST(Evaluate, MatchesRecountOverExportedOutputs) {
    auto ds = standardized(scan::synth::generate("shapes", 300, 9));
    ScanNetwork<float> net(ModelConfig::preset("tiny-3"));
    auto cfg = quick_config(1);
    scan::train(net, ds.slice(0, 256, scan::Split::Train), ds.slice(0, 0, scan::Split::Val), cfg);
    const auto r = scan::evaluate(net, ds, {}, 64);
    const auto cache = scan::export_logit_cache(net, ds);
    const std::size_t C = 3, K = 10;
    std::vector<std::size_t> correct(C + 1, 0);
    for (std::size_t n = 0; n < ds.size(); ++n) {
        std::vector<double> mean(K, 0.0);
        for (std::size_t i = 0; i < C; ++i) {
            const float* row = cache.probs.data() + (n * C + i) * K;
            std::size_t best = 0;
            for (std::size_t k = 1; k < K; ++k) best = row[k] > row[best] ? k : best;
            correct[i] += static_cast<std::int32_t>(best) == ds.labels[n];
            for (std::size_t k = 0; k < K; ++k) mean[k] += row[k];
        }
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k) best = mean[k] > mean[best] ? k : best;
        correct[C] += static_cast<std::int32_t>(best) == ds.labels[n];
    }
    for (std::size_t i = 0; i < C; ++i) EXPECT_DOUBLE_EQ(r.exit_accuracy[i], correct[i] / 300.0);
    EXPECT_DOUBLE_EQ(r.ensemble_accuracy, correct[C] / 300.0);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    auto ds = standardized(scan::synth::generate("shapes", 96, 10));
    ScanNetwork<float> net(ModelConfig::preset("tiny-3"));
    auto r = scan::train(net, ds.slice(0, 64, scan::Split::Train), ds.slice(64, 32, scan::Split::Val), quick_config(1));
    r.checkpoint.fingerprint = "0123456789abcdef";
    r.checkpoint.run_config = {{"seed", 5}};
    const auto bytes = scan::encode_checkpoint(r.checkpoint);
    const auto back = scan::decode_checkpoint(bytes);
    EXPECT_EQ(scan::encode_checkpoint(back), bytes);
    EXPECT_EQ(flat_state(back.network), flat_state(r.checkpoint.network));
    EXPECT_EQ(back.momentum, r.checkpoint.momentum);
    EXPECT_EQ(back.normalization.mean, r.checkpoint.normalization.mean);
    EXPECT_EQ(back.history.to_csv(), r.checkpoint.history.to_csv());

    std::vector<std::size_t> idx(32);
    std::iota(idx.begin(), idx.end(), 0);
    const auto x = ds.batch(idx);
    const auto a = r.checkpoint.network.forward_all(x), b = back.network.forward_all(x);
    for (std::size_t e = 0; e < 3; ++e) {
        EXPECT_TRUE(std::equal(a.logits[e].data().begin(), a.logits[e].data().end(), b.logits[e].data().begin()));
    }
}

TEST(Checkpoint, CorruptionIsDetected) {
    ScanNetwork<float> net(ModelConfig::preset("micro-3"));
    const auto bytes = scan::encode_checkpoint(scan::Checkpoint(net));
    EXPECT_THROW(scan::decode_checkpoint("not a checkpoint\n"), scan::ParseError);
    EXPECT_THROW(scan::decode_checkpoint(bytes.substr(0, bytes.size() - 8)), scan::ParseError);
    EXPECT_THROW(scan::decode_checkpoint(bytes.substr(0, 40)), scan::ParseError);
}

TEST(MetricsHistory, CsvLayout) {
    scan::MetricsHistory h;
    h.records.push_back({1, 2, "val", 0.5, 0.25});
    EXPECT_EQ(h.to_csv(), "epoch,exit,split,accuracy,loss\n1,2,val,0.5,0.25\n");
}
