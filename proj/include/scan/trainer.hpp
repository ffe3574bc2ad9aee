#pragma once

// Mini-batch SGD over the joint multi-exit objective, with per-epoch train and
// validation metrics and best-checkpoint selection on deepest-exit accuracy.

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "scan/checkpoint.hpp"
#include "scan/data.hpp"
#include "scan/distill.hpp"
#include "scan/metrics.hpp"
#include "scan/model.hpp"
#include "scan/optim.hpp"

namespace scan {

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 64;
    SgdConfig sgd;
    std::vector<std::size_t> milestones{10, 15};  // epochs after which the LR decays
    double lr_decay = 0.1;
    std::uint64_t seed = 0;
    DistillConfig distill;
    AugmentConfig augment;

    void validate() const {
        if (batch_size < 2) throw ConfigError("train.batch_size must be >= 2 (batchnorm needs batch statistics)");
        if (!(lr_decay > 0.0 && lr_decay < 1.0)) throw ConfigError("train.lr_decay must lie in (0,1)");
        if (!(sgd.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
        if (!(sgd.momentum >= 0.0 && sgd.momentum < 1.0)) throw ConfigError("train.momentum must lie in [0,1)");
        if (!(sgd.weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
        distill.validate();
    }

    double learning_rate_at(std::size_t epoch) const {
        double lr = sgd.learning_rate;
        for (auto m : milestones) {
            if (epoch >= m) lr *= lr_decay;
        }
        return lr;
    }
};

struct EvalReport {
    std::vector<double> exit_accuracy;  // per exit
    std::vector<double> exit_loss;      // per-exit objective term
    double ensemble_accuracy = 0.0;
    std::size_t samples = 0;
};

/// Eval-mode accuracy of every exit and of the mean-of-softmax ensemble.
inline EvalReport evaluate(const ScanNetwork<float>& net, const Dataset& ds, const DistillConfig& distill = {},
                           std::size_t batch_size = 256) {
    NoGradGuard no_grad;
    const std::size_t C = net.num_exits(), K = net.num_classes();
    EvalReport r;
    r.exit_accuracy.assign(C, 0.0);
    r.exit_loss.assign(C, 0.0);
    r.samples = ds.size();
    if (ds.size() == 0) return r;
    std::vector<std::size_t> correct(C, 0);
    std::size_t ensemble_correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t first = 0; first < ds.size(); first += batch_size) {
        const std::size_t n = std::min(batch_size, ds.size() - first);
        idx.resize(n);
        std::iota(idx.begin(), idx.end(), first);
        const auto labels = ds.batch_labels(idx);
        const auto fr = net.forward_all(ds.batch(idx));
        const auto loss = scan_loss(fr, labels, distill);
        for (std::size_t i = 0; i < C; ++i) r.exit_loss[i] += loss.per_exit[i].item() * static_cast<double>(n);
        std::vector<double> mean(K);
        for (std::size_t s = 0; s < n; ++s) {
            std::fill(mean.begin(), mean.end(), 0.0);
            for (std::size_t i = 0; i < C; ++i) {
                const auto p = fr.probs[i].data().subspan(s * K, K);
                const auto best = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
                correct[i] += static_cast<std::int32_t>(best) == labels[s];
                for (std::size_t k = 0; k < K; ++k) mean[k] += p[k];
            }
            const auto best = static_cast<std::size_t>(std::max_element(mean.begin(), mean.end()) - mean.begin());
            ensemble_correct += static_cast<std::int32_t>(best) == labels[s];
        }
    }
    const double n = static_cast<double>(ds.size());
    for (std::size_t i = 0; i < C; ++i) {
        r.exit_accuracy[i] = static_cast<double>(correct[i]) / n;
        r.exit_loss[i] /= n;
    }
    r.ensemble_accuracy = static_cast<double>(ensemble_correct) / n;
    return r;
}

struct EpochSummary {
    std::size_t epoch = 0;  // 1-based
    double learning_rate = 0.0;
    std::vector<double> train_accuracy, train_loss;
    EvalReport val;
    double seconds = 0.0;
};

struct TrainResult {
    Checkpoint checkpoint;  // best epoch by deepest-exit validation accuracy
    std::size_t best_epoch = 0;
    double best_val_accuracy = 0.0;
};

/// Trains `net` in place. On return `net` holds the best weights, which are
/// also stored in the returned checkpoint.
inline TrainResult train(ScanNetwork<float>& net, const Dataset& train_set, const Dataset& val_set,
                         const TrainConfig& cfg,
                         const std::function<void(const EpochSummary&)>& on_epoch = {}) {
    cfg.validate();
    if (train_set.sample_shape() != Shape{net.topology().input.channels, net.topology().input.height,
                                          net.topology().input.width}) {
        throw ShapeError("train: dataset samples are " + to_string(train_set.sample_shape()) +
                         " but the network expects " + to_string(net.topology().input));
    }
    const std::size_t C = net.num_exits();
    Sgd<float> opt(net.parameters(), cfg.sgd);
    Rng shuffle_rng(cfg.seed);
    Rng augment_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

    TrainResult result{Checkpoint(net), 0, -1.0};
    result.checkpoint.normalization = train_set.normalization;
    MetricsHistory history;

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        opt.set_learning_rate(cfg.learning_rate_at(epoch));
        shuffle_rng.shuffle(order.begin(), order.end());
        std::vector<double> loss_sum(C, 0.0);
        std::vector<std::size_t> correct(C, 0);
        std::size_t seen = 0;
        const std::size_t K = net.num_classes();
        for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - first);
            if (n < 2) continue;  // batch statistics need two samples
            const std::span<const std::size_t> idx(order.data() + first, n);
            const auto labels = train_set.batch_labels(idx);
            const auto x = augment(train_set.batch(idx), cfg.augment, augment_rng);
            auto where = [&] {
                std::ostringstream os;
                os << "epoch " << epoch + 1 << ", batch " << first / cfg.batch_size + 1 << " (learning rate "
                   << opt.learning_rate() << ")";
                return os.str();
            };
            ForwardResult<float> fr;
            ScanLoss<float> loss;
            try {
                fr = net.forward_all(x, Mode::Train);
                loss = scan_loss(fr, labels, cfg.distill);
            } catch (const NumericError& e) {
                throw DivergenceError("training diverged at " + where() + ": " + e.what());
            }
            if (!std::isfinite(loss.total.item())) {
                std::ostringstream os;
                os << "non-finite training loss at " << where() << "; per-exit losses:";
                for (std::size_t i = 0; i < C; ++i) os << ' ' << loss.per_exit[i].item();
                throw DivergenceError(os.str());
            }
            loss.total.backward();
            opt.step();
            opt.zero_grad();
            for (std::size_t i = 0; i < C; ++i) {
                loss_sum[i] += loss.per_exit[i].item() * static_cast<double>(n);
                const auto p = fr.logits[i].data();
                for (std::size_t s = 0; s < n; ++s) {
                    const auto row = p.subspan(s * K, K);
                    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
                    correct[i] += best == labels[s];
                }
            }
            seen += n;
        }

        EpochSummary summary;
        summary.epoch = epoch + 1;
        summary.learning_rate = opt.learning_rate();
        for (std::size_t i = 0; i < C; ++i) {
            const double acc = seen ? static_cast<double>(correct[i]) / static_cast<double>(seen) : 0.0;
            const double l = seen ? loss_sum[i] / static_cast<double>(seen) : 0.0;
            summary.train_accuracy.push_back(acc);
            summary.train_loss.push_back(l);
            history.records.push_back({epoch + 1, i + 1, "train", acc, l});
        }
        summary.val = evaluate(net, val_set, cfg.distill);
        for (std::size_t i = 0; i < C; ++i) {
            history.records.push_back({epoch + 1, i + 1, "val", summary.val.exit_accuracy[i], summary.val.exit_loss[i]});
        }
        // Without a validation split the latest epoch is kept.
        const double val_acc = summary.val.exit_accuracy.back();
        if (val_set.size() == 0 || val_acc > result.best_val_accuracy) {
            result.best_val_accuracy = val_acc;
            result.best_epoch = epoch + 1;
            result.checkpoint.network.copy_state_from(net);
            result.checkpoint.epoch = epoch + 1;
            result.checkpoint.momentum = opt.velocity();
        }
        summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        if (on_epoch) on_epoch(summary);
    }
    if (result.best_epoch == 0) result.best_val_accuracy = 0.0;
    result.checkpoint.history = std::move(history);
    net.copy_state_from(result.checkpoint.network);
    return result;
}

}  // namespace scan
