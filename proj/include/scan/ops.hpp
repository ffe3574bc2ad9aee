#pragma once

// Differentiable primitives. Each forward computes its result eagerly and, when
// recording, attaches a closure that maps the output gradient to the inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include "scan/errors.hpp"
#include "scan/kernels.hpp"
#include "scan/tensor.hpp"

namespace scan::ops {

namespace detail {

template <class T>
void accumulate_into(Node<T>& target, std::span<const T> delta) {
    auto g = target.grad_buffer();
    for (std::size_t i = 0; i < delta.size(); ++i) g[i] += delta[i];
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
    }
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
    if (s.size() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(s));
    }
}

template <class T>
void require_finite(std::span<const T> values, const char* op) {
    for (T v : values) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    auto an = a.node(), bn = b.node();
    return Tensor<T>::make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node<T>& self) {
        if (an->requires_grad) detail::accumulate_into<T>(*an, self.grad);
        if (bn->requires_grad) detail::accumulate_into<T>(*bn, self.grad);
    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    auto an = a.node(), bn = b.node();
    return Tensor<T>::make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node<T>& self) {
        if (an->requires_grad) detail::accumulate_into<T>(*an, self.grad);
        if (bn->requires_grad) {
            auto g = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    auto an = a.node(), bn = b.node();
    return Tensor<T>::make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node<T>& self) {
        const std::size_t n = self.grad.size();
        if (an->requires_grad) {
            auto g = an->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            auto g = bn->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * an->data[i];
        }
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
    auto an = a.node();
    return Tensor<T>::make_result(a.shape(), std::move(out), {&a}, [an, factor](Node<T>& self) {
        auto g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + offset;
    auto an = a.node();
    return Tensor<T>::make_result(a.shape(), std::move(out), {&a}, [an](Node<T>& self) {
        detail::accumulate_into<T>(*an, self.grad);
    });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
    auto an = a.node();
    return Tensor<T>::make_result(a.shape(), std::move(out), {&a}, [an](Node<T>& self) {
        auto g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (an->data[i] > T(0)) g[i] += self.grad[i];
        }
    });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T x = a[i];
        // Branches keep exp() from overflowing for large |x|.
        out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
    }
    auto an = a.node();
    auto result = Tensor<T>::make_result(a.shape(), std::move(out), {&a}, [an](Node<T>& self) {
        auto g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T y = self.data[i];
            g[i] += self.grad[i] * y * (T(1) - y);
        }
    });
    return result;
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel_of(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
    }
    std::vector<T> out(a.data().begin(), a.data().end());
    auto an = a.node();
    return Tensor<T>::make_result(std::move(shape), std::move(out), {&a}, [an](Node<T>& self) {
        detail::accumulate_into<T>(*an, self.grad);
    });
}

/// [N, ...] -> [N, prod(...)].
template <class T>
Tensor<T> flatten(const Tensor<T>& a) {
    if (a.rank() < 1) throw ShapeError("flatten: scalar input");
    return reshape(a, Shape{a.dim(0), a.numel() / a.dim(0)});
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    double acc = 0.0;
    for (T v : a.data()) acc += static_cast<double>(v);
    auto an = a.node();
    return Tensor<T>::make_result(Shape{}, std::vector<T>{static_cast<T>(acc)}, {&a}, [an](Node<T>& self) {
        auto g = an->grad_buffer();
        const T d = self.grad[0];
        for (auto& v : g) v += d;
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    double acc = 0.0;
    for (T v : a.data()) acc += static_cast<double>(v);
    const double n = static_cast<double>(a.numel());
    auto an = a.node();
    return Tensor<T>::make_result(Shape{}, std::vector<T>{static_cast<T>(acc / n)}, {&a}, [an, n](Node<T>& self) {
        auto g = an->grad_buffer();
        const T d = static_cast<T>(static_cast<double>(self.grad[0]) / n);
        for (auto& v : g) v += d;
    });
}

/// Picks x[i, index[i]] for each row of a [N, K] tensor.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::int32_t> index) {
    detail::require_rank(x.shape(), 2, "gather_rows");
    const std::size_t N = x.dim(0), K = x.dim(1);
    if (index.size() != N) throw ShapeError("gather_rows: index count does not match batch");
    std::vector<std::int32_t> idx(index.begin(), index.end());
    std::vector<T> out(N);
    for (std::size_t i = 0; i < N; ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= K) {
            throw ContractError("gather_rows: label " + std::to_string(idx[i]) + " outside [0," +
                                std::to_string(K) + ")");
        }
        out[i] = x[i * K + static_cast<std::size_t>(idx[i])];
    }
    auto xn = x.node();
    return Tensor<T>::make_result(Shape{N}, std::move(out), {&x}, [xn, idx, K](Node<T>& self) {
        auto g = xn->grad_buffer();
        for (std::size_t i = 0; i < idx.size(); ++i) g[i * K + static_cast<std::size_t>(idx[i])] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Softmax family (last axis)

template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
    if (logits.rank() < 1 || logits.shape().back() < 1) throw ShapeError("softmax: empty class axis");
    detail::require_finite(logits.data(), "softmax");
    const std::size_t K = logits.shape().back();
    const std::size_t rows = logits.numel() / K;
    std::vector<T> out(logits.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = logits.data().data() + r * K;
        const T m = *std::max_element(x, x + K);
        double denom = 0.0;
        for (std::size_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(x[k] - m));
        for (std::size_t k = 0; k < K; ++k) {
            out[r * K + k] = static_cast<T>(std::exp(static_cast<double>(x[k] - m)) / denom);
        }
    }
    auto ln = logits.node();
    return Tensor<T>::make_result(logits.shape(), std::move(out), {&logits}, [ln, K, rows](Node<T>& self) {
        auto g = ln->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = self.data.data() + r * K;
            const T* dy = self.grad.data() + r * K;
            double dot = 0.0;
            for (std::size_t k = 0; k < K; ++k) dot += static_cast<double>(dy[k]) * y[k];
            for (std::size_t k = 0; k < K; ++k) g[r * K + k] += y[k] * (dy[k] - static_cast<T>(dot));
        }
    });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& logits) {
    if (logits.rank() < 1 || logits.shape().back() < 1) throw ShapeError("log_softmax: empty class axis");
    detail::require_finite(logits.data(), "log_softmax");
    const std::size_t K = logits.shape().back();
    const std::size_t rows = logits.numel() / K;
    std::vector<T> out(logits.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = logits.data().data() + r * K;
        const T m = *std::max_element(x, x + K);
        double denom = 0.0;
        for (std::size_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(x[k] - m));
        const double lse = static_cast<double>(m) + std::log(denom);
        for (std::size_t k = 0; k < K; ++k) out[r * K + k] = static_cast<T>(static_cast<double>(x[k]) - lse);
    }
    auto ln = logits.node();
    return Tensor<T>::make_result(logits.shape(), std::move(out), {&logits}, [ln, K, rows](Node<T>& self) {
        auto g = ln->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = self.data.data() + r * K;
            const T* dy = self.grad.data() + r * K;
            double total = 0.0;
            for (std::size_t k = 0; k < K; ++k) total += dy[k];
            for (std::size_t k = 0; k < K; ++k) {
                g[r * K + k] += dy[k] - static_cast<T>(std::exp(static_cast<double>(y[k])) * total);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Dense layers

/// [M,K] x [K,N] -> [M,N].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank(a.shape(), 2, "matmul");
    detail::require_rank(b.shape(), 2, "matmul");
    const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    if (b.dim(0) != K) {
        throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    std::vector<T> out(M * N);
    kernels::gemm_nn(M, N, K, a.data().data(), K, b.data().data(), N, out.data(), N, false);
    auto an = a.node(), bn = b.node();
    return Tensor<T>::make_result(Shape{M, N}, std::move(out), {&a, &b}, [an, bn, M, K, N](Node<T>& self) {
        if (an->requires_grad) {
            std::vector<T> bt(N * K);
            kernels::transpose(N, K, bn->data.data(), bt.data());
            kernels::gemm_nn(M, K, N, self.grad.data(), N, bt.data(), K, an->grad_buffer().data(), K, true);
        }
        if (bn->requires_grad) {
            kernels::gemm_tn(K, N, M, an->data.data(), K, self.grad.data(), N, bn->grad_buffer().data(), N, true);
        }
    });
}

/// x[N,in] * W[out,in]^T + b[out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    detail::require_rank(x.shape(), 2, "linear");
    detail::require_rank(weight.shape(), 2, "linear");
    const std::size_t N = x.dim(0), in = x.dim(1), out_features = weight.dim(0);
    if (weight.dim(1) != in) {
        throw ShapeError("linear: input features " + std::to_string(in) + " vs weight " + to_string(weight.shape()));
    }
    if (bias.defined() && bias.shape() != Shape{out_features}) throw ShapeError("linear: bias shape");
    std::vector<T> wt(in * out_features);
    kernels::transpose(in, out_features, weight.data().data(), wt.data());
    std::vector<T> out(N * out_features);
    kernels::gemm_nn(N, out_features, in, x.data().data(), in, wt.data(), out_features, out.data(), out_features, false);
    if (bias.defined()) {
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t o = 0; o < out_features; ++o) out[n * out_features + o] += bias[o];
        }
    }
    auto xn = x.node(), wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    return Tensor<T>::make_result(
        Shape{N, out_features}, std::move(out), {&x, &weight, bias.defined() ? &bias : nullptr},
        [xn, wn, bn, N, in, out_features](Node<T>& self) {
            if (xn->requires_grad) {
                kernels::gemm_nn(N, in, out_features, self.grad.data(), out_features, wn->data.data(), in,
                                 xn->grad_buffer().data(), in, true);
            }
            if (wn->requires_grad) {
                kernels::gemm_tn(out_features, in, N, self.grad.data(), out_features, xn->data.data(), in,
                                 wn->grad_buffer().data(), in, true);
            }
            if (bn && bn->requires_grad) {
                auto g = bn->grad_buffer();
                for (std::size_t o = 0; o < out_features; ++o) {
                    double acc = 0.0;
                    for (std::size_t n = 0; n < N; ++n) acc += self.grad[n * out_features + o];
                    g[o] += static_cast<T>(acc);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Convolutions

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

namespace detail {

template <class T>
void add_channel_bias(std::vector<T>& out, std::size_t N, std::size_t C, std::size_t HW, const Tensor<T>& bias) {
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            T* p = out.data() + (n * C + c) * HW;
            const T b = bias[c];
            for (std::size_t i = 0; i < HW; ++i) p[i] += b;
        }
    }
}

template <class T>
void accumulate_channel_bias_grad(Node<T>& bias, std::span<const T> grad, std::size_t N, std::size_t C,
                                  std::size_t HW) {
    auto g = bias.grad_buffer();
    for (std::size_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
            const T* p = grad.data() + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) acc += p[i];
        }
        g[c] += static_cast<T>(acc);
    }
}

}  // namespace detail

/// input [N,C_in,H,W], weight [C_out,C_in,kH,kW], optional bias [C_out].
/// Lowered per sample to im2col + GEMM.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opt = {}) {
    detail::require_rank(input.shape(), 4, "conv2d input");
    detail::require_rank(weight.shape(), 4, "conv2d weight");
    if (opt.stride < 1) throw ContractError("conv2d: stride must be >= 1");
    const std::size_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t Cout = weight.dim(0), kH = weight.dim(2), kW = weight.dim(3);
    if (weight.dim(1) != Cin) {
        throw ShapeError("conv2d: input has " + std::to_string(Cin) + " channels but weight " +
                         to_string(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
    }
    if (kH > H + 2 * opt.padding || kW > W + 2 * opt.padding) {
        throw ShapeError("conv2d: kernel " + to_string(weight.shape()) + " larger than padded input " +
                         to_string(input.shape()));
    }
    if (bias.defined() && bias.shape() != Shape{Cout}) throw ShapeError("conv2d: bias shape");
    // One-sample geometry; the batch loop offsets the image pointers.
    const kernels::ConvGeometry g{1, Cin, H, W, kH, kW, opt.stride, opt.padding,
                                  (H + 2 * opt.padding - kH) / opt.stride + 1,
                                  (W + 2 * opt.padding - kW) / opt.stride + 1};
    const std::size_t patch = g.patch(), HWo = g.out_h * g.out_w, in_stride = Cin * H * W;

    std::vector<T> out(N * Cout * HWo);
    std::vector<T> cols(patch * HWo);
    for (std::size_t n = 0; n < N; ++n) {
        kernels::im2col(g, input.data().data() + n * in_stride, cols.data());
        kernels::gemm_nn(Cout, HWo, patch, weight.data().data(), patch, cols.data(), HWo, out.data() + n * Cout * HWo,
                         HWo, false);
    }
    if (bias.defined()) detail::add_channel_bias(out, N, Cout, HWo, bias);

    auto xn = input.node(), wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    return Tensor<T>::make_result(
        Shape{N, Cout, g.out_h, g.out_w}, std::move(out), {&input, &weight, bias.defined() ? &bias : nullptr},
        [xn, wn, bn, g, N, Cout](Node<T>& self) {
            const std::size_t patch = g.patch(), HWo = g.out_h * g.out_w;
            const std::size_t in_stride = g.channels * g.height * g.width;
            std::vector<T> cols(patch * HWo), cols_t(HWo * patch), dcols(patch * HWo);
            T* dw = wn->requires_grad ? wn->grad_buffer().data() : nullptr;
            T* dx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
            for (std::size_t n = 0; n < N; ++n) {
                const T* dy = self.grad.data() + n * Cout * HWo;
                if (dw) {
                    kernels::im2col(g, xn->data.data() + n * in_stride, cols.data());
                    kernels::transpose(HWo, patch, cols.data(), cols_t.data());
                    kernels::gemm_nn(Cout, patch, HWo, dy, HWo, cols_t.data(), patch, dw, patch, true);
                }
                if (dx) {
                    kernels::gemm_tn(patch, HWo, Cout, wn->data.data(), patch, dy, HWo, dcols.data(), HWo, false);
                    kernels::col2im(g, dcols.data(), dx + n * in_stride, true);
                }
            }
            if (bn && bn->requires_grad) {
                detail::accumulate_channel_bias_grad<T>(*bn, self.grad, N, Cout, HWo);
            }
        });
}

/// Transposed convolution (adjoint of conv2d over the input).
/// input [N,C_in,H,W], weight [C_in,C_out,kH,kW], optional bias [C_out].
/// Output spatial size is (H-1)*stride - 2*padding + kH.
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           Conv2dOptions opt = {}) {
    detail::require_rank(input.shape(), 4, "conv_transpose2d input");
    detail::require_rank(weight.shape(), 4, "conv_transpose2d weight");
    if (opt.stride < 1) throw ContractError("conv_transpose2d: stride must be >= 1");
    const std::size_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t Cout = weight.dim(1), kH = weight.dim(2), kW = weight.dim(3);
    if (weight.dim(0) != Cin) {
        throw ShapeError("conv_transpose2d: input has " + std::to_string(Cin) + " channels but weight " +
                         to_string(weight.shape()) + " expects " + std::to_string(weight.dim(0)));
    }
    const long Ho = static_cast<long>((H - 1) * opt.stride + kH) - 2 * static_cast<long>(opt.padding);
    const long Wo = static_cast<long>((W - 1) * opt.stride + kW) - 2 * static_cast<long>(opt.padding);
    if (Ho <= 0 || Wo <= 0) throw ShapeError("conv_transpose2d: padding removes the whole output");
    if (bias.defined() && bias.shape() != Shape{Cout}) throw ShapeError("conv_transpose2d: bias shape");
    // Geometry of the forward convolution this operator is the adjoint of (one sample).
    const kernels::ConvGeometry g{1, Cout, static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo), kH, kW,
                                  opt.stride, opt.padding, H, W};
    const std::size_t patch = g.patch(), HWi = H * W, out_stride = Cout * g.height * g.width;

    std::vector<T> out(N * out_stride);
    std::vector<T> cols(patch * HWi);
    for (std::size_t n = 0; n < N; ++n) {
        kernels::gemm_tn(patch, HWi, Cin, weight.data().data(), patch, input.data().data() + n * Cin * HWi, HWi,
                         cols.data(), HWi, false);
        kernels::col2im(g, cols.data(), out.data() + n * out_stride, true);
    }
    if (bias.defined()) detail::add_channel_bias(out, N, Cout, g.height * g.width, bias);

    auto xn = input.node(), wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    return Tensor<T>::make_result(
        Shape{N, Cout, g.height, g.width}, std::move(out), {&input, &weight, bias.defined() ? &bias : nullptr},
        [xn, wn, bn, g, N, Cin](Node<T>& self) {
            const std::size_t patch = g.patch(), HWi = g.out_h * g.out_w;
            const std::size_t out_stride = g.channels * g.height * g.width;
            std::vector<T> dcols(patch * HWi), dcols_t(HWi * patch);
            T* dw = wn->requires_grad ? wn->grad_buffer().data() : nullptr;
            T* dx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
            for (std::size_t n = 0; n < N; ++n) {
                kernels::im2col(g, self.grad.data() + n * out_stride, dcols.data());
                if (dx) {
                    kernels::gemm_nn(Cin, HWi, patch, wn->data.data(), patch, dcols.data(), HWi, dx + n * Cin * HWi,
                                     HWi, true);
                }
                if (dw) {
                    kernels::transpose(HWi, patch, dcols.data(), dcols_t.data());
                    kernels::gemm_nn(Cin, patch, HWi, xn->data.data() + n * Cin * HWi, HWi, dcols_t.data(), patch, dw,
                                     patch, true);
                }
            }
            if (bn && bn->requires_grad) {
                detail::accumulate_channel_bias_grad<T>(*bn, self.grad, N, g.channels, g.height * g.width);
            }
        });
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Running statistics owned by a batchnorm layer.
template <class T>
struct BatchNormState {
    Tensor<T> running_mean;
    Tensor<T> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    static BatchNormState create(std::size_t channels) {
        return {Tensor<T>::zeros({channels}), Tensor<T>::full({channels}, T(1))};
    }
};

enum class Mode { Train, Eval };

/// Normalizes with batch statistics in Train mode (optionally folding them into
/// `running_update`) and with `stats` in Eval mode.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      const BatchNormState<T>& stats, Mode mode,
                      std::type_identity_t<BatchNormState<T>>* running_update) {
    const BatchNormState<T>& state = stats;
    detail::require_rank(input.shape(), 4, "batchnorm2d");
    const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} || state.running_mean.shape() != Shape{C}) {
        throw ShapeError("batchnorm2d: parameter shapes do not match " + std::to_string(C) + " channels");
    }
    const double eps = state.eps;
    std::vector<T> mean_c(C), invstd_c(C);
    if (mode == Mode::Train) {
        if (N < 2) throw DegenerateBatchError("batchnorm2d: train mode needs batch size >= 2, got " + std::to_string(N));
        const double M = static_cast<double>(N * HW);
        std::span<T> rm, rv;
        if (running_update) {
            rm = running_update->running_mean.mutable_data();
            rv = running_update->running_var.mutable_data();
        }
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = input.data().data() + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) s += p[i];
            }
            const double mu = s / M;
            double sq = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = input.data().data() + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    const double d = p[i] - mu;
                    sq += d * d;
                }
            }
            const double var = sq / M;
            mean_c[c] = static_cast<T>(mu);
            invstd_c[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
            const double unbiased = M > 1 ? sq / (M - 1) : var;
            if (running_update) {
                rm[c] = static_cast<T>((1.0 - state.momentum) * rm[c] + state.momentum * mu);
                rv[c] = static_cast<T>((1.0 - state.momentum) * rv[c] + state.momentum * unbiased);
            }
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean_c[c] = state.running_mean[c];
            invstd_c[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var[c]) + eps));
        }
    }

    std::vector<T> out(input.numel());
    std::vector<T> xhat(input.numel());
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * HW;
            const T mu = mean_c[c], is = invstd_c[c], ga = gamma[c], be = beta[c];
            for (std::size_t i = 0; i < HW; ++i) {
                const T xh = (input[off + i] - mu) * is;
                xhat[off + i] = xh;
                out[off + i] = xh * ga + be;
            }
        }
    }

    auto xn = input.node(), gn = gamma.node(), bn = beta.node();
    const bool batch_stats = mode == Mode::Train;
    return Tensor<T>::make_result(
        input.shape(), std::move(out), {&input, &gamma, &beta},
        [xn, gn, bn, xhat = std::move(xhat), invstd_c = std::move(invstd_c), N, C, HW, batch_stats](Node<T>& self) {
            const double M = static_cast<double>(N * HW);
            for (std::size_t c = 0; c < C; ++c) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t off = (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        sum_dy += self.grad[off + i];
                        sum_dy_xhat += static_cast<double>(self.grad[off + i]) * xhat[off + i];
                    }
                }
                if (gn->requires_grad) gn->grad_buffer()[c] += static_cast<T>(sum_dy_xhat);
                if (bn->requires_grad) bn->grad_buffer()[c] += static_cast<T>(sum_dy);
                if (!xn->requires_grad) continue;
                auto gx = xn->grad_buffer();
                const T scale = gn->data[c] * invstd_c[c];
                const T mean_dy = static_cast<T>(sum_dy / M);
                const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / M);
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t off = (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        if (batch_stats) {
                            gx[off + i] += scale * (self.grad[off + i] - mean_dy - xhat[off + i] * mean_dy_xhat);
                        } else {
                            gx[off + i] += scale * self.grad[off + i];
                        }
                    }
                }
            }
        });
}

template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, Mode mode) {
    return batchnorm2d(input, gamma, beta, state, mode, mode == Mode::Train ? &state : nullptr);
}

// ---------------------------------------------------------------------------
// Pooling

template <class T>
Tensor<T> max_pool2d(const Tensor<T>& input, std::size_t kernel, std::size_t stride) {
    detail::require_rank(input.shape(), 4, "max_pool2d");
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (kernel < 1 || stride < 1 || kernel > H || kernel > W) throw ShapeError("max_pool2d: bad window");
    const std::size_t Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
    std::vector<T> out(N * C * Ho * Wo);
    std::vector<std::size_t> argmax(out.size());
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* src = input.data().data() + nc * H * W;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
            for (std::size_t ow = 0; ow < Wo; ++ow) {
                std::size_t best = (oh * stride) * W + ow * stride;
                for (std::size_t ki = 0; ki < kernel; ++ki) {
                    for (std::size_t kj = 0; kj < kernel; ++kj) {
                        const std::size_t idx = (oh * stride + ki) * W + ow * stride + kj;
                        if (src[idx] > src[best]) best = idx;
                    }
                }
                const std::size_t o = nc * Ho * Wo + oh * Wo + ow;
                out[o] = src[best];
                argmax[o] = nc * H * W + best;
            }
        }
    }
    auto xn = input.node();
    return Tensor<T>::make_result(Shape{N, C, Ho, Wo}, std::move(out), {&input},
                                  [xn, argmax = std::move(argmax)](Node<T>& self) {
                                      auto g = xn->grad_buffer();
                                      for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
                                  });
}

template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& input, std::size_t kernel, std::size_t stride) {
    detail::require_rank(input.shape(), 4, "avg_pool2d");
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (kernel < 1 || stride < 1 || kernel > H || kernel > W) throw ShapeError("avg_pool2d: bad window");
    const std::size_t Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
    const double area = static_cast<double>(kernel * kernel);
    std::vector<T> out(N * C * Ho * Wo);
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* src = input.data().data() + nc * H * W;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
            for (std::size_t ow = 0; ow < Wo; ++ow) {
                double acc = 0.0;
                for (std::size_t ki = 0; ki < kernel; ++ki) {
                    for (std::size_t kj = 0; kj < kernel; ++kj) acc += src[(oh * stride + ki) * W + ow * stride + kj];
                }
                out[nc * Ho * Wo + oh * Wo + ow] = static_cast<T>(acc / area);
            }
        }
    }
    auto xn = input.node();
    return Tensor<T>::make_result(
        Shape{N, C, Ho, Wo}, std::move(out), {&input}, [xn, N, C, H, W, Ho, Wo, kernel, stride, area](Node<T>& self) {
            auto g = xn->grad_buffer();
            for (std::size_t nc = 0; nc < N * C; ++nc) {
                for (std::size_t oh = 0; oh < Ho; ++oh) {
                    for (std::size_t ow = 0; ow < Wo; ++ow) {
                        const T d = static_cast<T>(self.grad[nc * Ho * Wo + oh * Wo + ow] / area);
                        for (std::size_t ki = 0; ki < kernel; ++ki) {
                            for (std::size_t kj = 0; kj < kernel; ++kj) {
                                g[nc * H * W + (oh * stride + ki) * W + ow * stride + kj] += d;
                            }
                        }
                    }
                }
            }
        });
}

/// [N,C,H,W] -> [N,C] by averaging each plane.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
    detail::require_rank(input.shape(), 4, "global_avg_pool");
    const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
    std::vector<T> out(N * C);
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        double acc = 0.0;
        const T* p = input.data().data() + nc * HW;
        for (std::size_t i = 0; i < HW; ++i) acc += p[i];
        out[nc] = static_cast<T>(acc / static_cast<double>(HW));
    }
    auto xn = input.node();
    return Tensor<T>::make_result(Shape{N, C}, std::move(out), {&input}, [xn, HW](Node<T>& self) {
        auto g = xn->grad_buffer();
        for (std::size_t nc = 0; nc < self.grad.size(); ++nc) {
            const T d = static_cast<T>(self.grad[nc] / static_cast<double>(HW));
            for (std::size_t i = 0; i < HW; ++i) g[nc * HW + i] += d;
        }
    });
}

}  // namespace scan::ops
