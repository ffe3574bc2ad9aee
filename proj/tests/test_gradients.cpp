#include <gtest/gtest.h>

#include "gradcheck.hpp"

TEST(Gradients, EveryPrimitiveMatchesFiniteDifferences) {
    for (const auto& r : gradcheck::primitive_suite()) {
        EXPECT_LT(r.max_rel_error, 1e-4) << r.name << " over " << r.entries << " entries";
        EXPECT_GT(r.entries, 0u) << r.name;
    }
}

TEST(Gradients, TwoLayerConvNetMatchesFiniteDifferences) {
    using V = std::vector<scan::Tensor<double>>;
    namespace ops = scan::ops;
    scan::Rng rng(3);
    auto T = [&](scan::Shape s) { return scan::Tensor<double>::from(s, gradcheck::randn(scan::numel_of(s), rng)); };
    auto r = gradcheck::check("conv-sigmoid-conv", {T({4, 2, 6, 6}), T({3, 2, 3, 3}), T({3}), T({2, 3, 3, 3}), T({2})},
                              [](const V& v) {
                                  auto h = ops::sigmoid(ops::conv2d(v[0], v[1], v[2], {1, 1}));
                                  return gradcheck::project(ops::conv2d(h, v[3], v[4], {2, 1}));
                              });
    EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Gradients, FullObjectiveOnMicroNetwork) {
    scan::DistillConfig distill;
    distill.alpha = 0.5;
    distill.lambda_hint = 0.5;
    distill.temperature = 2.0;
    auto results = gradcheck::network_suite(scan::ModelConfig::preset("micro-3"), distill, 3, 1u << 20, 1e-5, 17);
    for (const auto& r : results) EXPECT_LT(r.max_rel_error, 1e-4) << r.name;
}

TEST(Gradients, FullObjectiveWithDefaultWeights) {
    auto results = gradcheck::network_suite(scan::ModelConfig::preset("micro-3"), scan::DistillConfig{}, 3, 1u << 20, 1e-5, 18);
    for (const auto& r : results) EXPECT_LT(r.max_rel_error, 1e-4) << r.name;
}

TEST(Gradients, TeacherSideReceivesNoShallowGradient) {
    // Only the shallow terms, with KL and hint active: the deepest head must
    // not see any gradient through the teacher signals.
    scan::ScanNetwork<double> net(scan::ModelConfig::preset("micro-3"));
    scan::Rng rng(4);
    auto x = scan::Tensor<double>::from({2, 1, 8, 8}, gradcheck::randn(128, rng));
    std::vector<std::int32_t> y{0, 2};
    scan::DistillConfig d{0.5, 0.5, 1.0};
    auto fr = net.forward_all(x, scan::ops::Mode::Train);
    auto loss = scan::scan_loss(fr, y, d);
    net.zero_grad();
    loss.per_exit[0].backward();
    for (const auto& p : net.parameters()) {
        if (p.name.rfind("heads.2.", 0) != 0) continue;
        for (double g : p.tensor->grad()) EXPECT_EQ(g, 0.0) << p.name;
    }
}
