#pragma once

// Self-distillation objective. For shallow exit i < C:
//   loss_i = (1 - alpha) * CE(q_i, y) + alpha * T^2 * KL(q_C^T || q_i^T) + lambda * ||F_i - F_C||^2
// and the deepest exit is trained on cross-entropy alone. Teacher signals
// (q_C, F_C) are detached for the shallow terms.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "scan/errors.hpp"
#include "scan/model.hpp"
#include "scan/ops.hpp"
#include "scan/tensor.hpp"

namespace scan {

struct DistillConfig {
    // Literal reading of the published hyper-parameter list; see README for the
    // swapped alternative (alpha = 0.5, lambda_hint = 5e-7).
    double alpha = 5e-7;
    double lambda_hint = 0.5;
    double temperature = 1.0;

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("distill.alpha must lie in [0,1]");
        if (!(lambda_hint >= 0.0)) throw ConfigError("distill.lambda must be >= 0");
        if (!(temperature > 0.0)) throw ConfigError("distill.temperature must be > 0");
    }
};

/// Mean over the batch of -log q[y], from logits via log-sum-exp.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
    return ops::scale(ops::mean(ops::gather_rows(ops::log_softmax(logits), labels)), T(-1));
}

/// Mean over the batch of -log q[y] for an explicit probability matrix.
template <class T>
double cross_entropy_probs(const Tensor<T>& probs, std::span<const std::int32_t> labels) {
    if (probs.rank() != 2 || probs.dim(0) != labels.size()) throw ShapeError("cross_entropy_probs: shape");
    const std::size_t N = probs.dim(0), K = probs.dim(1);
    double acc = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= K) {
            throw ContractError("cross_entropy_probs: label " + std::to_string(labels[n]) + " out of range");
        }
        acc -= std::log(static_cast<double>(probs[n * K + static_cast<std::size_t>(labels[n])]));
    }
    return acc / static_cast<double>(N);
}

/// T^2 * mean_batch sum_k p_t(k) (log p_t(k) - log p_s(k)) with temperature-
/// softened distributions. The teacher side never receives gradient.
template <class T>
Tensor<T> kl_divergence(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits, double temperature) {
    if (student_logits.shape() != teacher_logits.shape() || student_logits.rank() != 2) {
        throw ShapeError("kl_divergence: shape mismatch " + to_string(student_logits.shape()) + " vs " +
                         to_string(teacher_logits.shape()));
    }
    const T inv_t = static_cast<T>(1.0 / temperature);
    const double N = static_cast<double>(student_logits.dim(0));
    Tensor<T> teacher_log_p;
    {
        NoGradGuard no_grad;
        teacher_log_p = ops::log_softmax(ops::scale(teacher_logits.detach(), inv_t));
    }
    std::vector<T> p(teacher_log_p.numel());
    double entropy_term = 0.0;  // sum p log p, constant w.r.t. the student
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double lp = teacher_log_p[i];
        const double pi = std::exp(lp);
        p[i] = static_cast<T>(pi);
        entropy_term += pi * lp;
    }
    auto teacher_p = Tensor<T>(teacher_log_p.shape(), std::move(p));
    auto student_log_p = ops::log_softmax(ops::scale(student_logits, inv_t));
    auto cross = ops::sum(ops::mul(teacher_p, student_log_p));  // sum p log q
    const T factor = static_cast<T>(temperature * temperature / N);
    // factor * (entropy_term - cross)
    return ops::scale(ops::add_scalar(ops::scale(cross, T(-1)), static_cast<T>(entropy_term)), factor);
}

/// Mean squared difference; the teacher feature is treated as a constant.
template <class T>
Tensor<T> feature_hint_loss(const Tensor<T>& student, const Tensor<T>& teacher) {
    if (student.shape() != teacher.shape()) {
        throw ShapeError("feature_hint_loss: shape mismatch " + to_string(student.shape()) + " vs " +
                         to_string(teacher.shape()));
    }
    auto diff = ops::sub(student, teacher.detach());
    return ops::mean(ops::mul(diff, diff));
}

template <class T>
struct ScanLoss {
    Tensor<T> total;
    std::vector<Tensor<T>> per_exit;
};

template <class T>
ScanLoss<T> scan_loss(const ForwardResult<T>& fr, std::span<const std::int32_t> labels, const DistillConfig& cfg) {
    cfg.validate();
    const std::size_t C = fr.logits.size();
    if (C == 0 || fr.features.size() != C) throw ContractError("scan_loss: incomplete forward result");
    ScanLoss<T> out;
    const auto& teacher_logits = fr.logits.back();
    const auto& teacher_feature = fr.features.back();
    for (std::size_t i = 0; i + 1 < C; ++i) {
        auto loss = ops::scale(cross_entropy(fr.logits[i], labels), static_cast<T>(1.0 - cfg.alpha));
        if (cfg.alpha > 0.0) {
            loss = ops::add(loss, ops::scale(kl_divergence(fr.logits[i], teacher_logits, cfg.temperature),
                                             static_cast<T>(cfg.alpha)));
        }
        if (cfg.lambda_hint > 0.0) {
            loss = ops::add(loss, ops::scale(feature_hint_loss(fr.features[i], teacher_feature),
                                             static_cast<T>(cfg.lambda_hint)));
        }
        out.per_exit.push_back(loss);
    }
    out.per_exit.push_back(cross_entropy(teacher_logits, labels));
    out.total = out.per_exit.front();
    for (std::size_t i = 1; i < C; ++i) out.total = ops::add(out.total, out.per_exit[i]);
    return out;
}

}  // namespace scan
