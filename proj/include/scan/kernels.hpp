#pragma once

// Dense kernels behind the differentiable ops. Every output element of the
// GEMM routines accumulates over the inner dimension in ascending order, so a
// row's result never depends on how many other rows share the call. Batched and
// single-sample evaluation therefore agree bit for bit.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace scan::kernels {

namespace detail {

template <class T>
struct Lanes;
template <>
struct Lanes<float> {
    typedef float type __attribute__((vector_size(64)));
};
template <>
struct Lanes<double> {
    typedef double type __attribute__((vector_size(64)));
};

/// Register-blocked GEMM core. Element (i,p) of A lives at A[i*row_stride + p*col_stride].
/// Each C element is summed over p in ascending order starting from zero, then
/// stored (or added to C when accumulating).
template <class T>
__attribute__((optimize("fp-contract=fast"))) void gemm_core(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A, std::size_t row_stride,
               std::size_t col_stride, const T* __restrict B, std::size_t ldb, T* __restrict C, std::size_t ldc,
               bool accumulate) {
    using V = typename Lanes<T>::type;
    constexpr std::size_t L = sizeof(V) / sizeof(T);
    constexpr std::size_t W = 2 * L;  // panel width
    constexpr std::size_t R = 8;      // rows per register block
    if (M == 0 || N == 0) return;
    std::vector<V> panel(2 * K);
    for (std::size_t j = 0; j < N; j += W) {
        const std::size_t width = std::min(W, N - j);
        // Pack B[:, j:j+W] contiguously; lanes past N stay zero and are never stored.
        T* packed = reinterpret_cast<T*>(panel.data());
        for (std::size_t p = 0; p < K; ++p) {
            const T* src = B + p * ldb + j;
            T* dst = packed + p * W;
            std::size_t c = 0;
            for (; c < width; ++c) dst[c] = src[c];
            for (; c < W; ++c) dst[c] = T(0);
        }
        auto store = [&](std::size_t row, const V& lo, const V& hi) {
            T tmp[W];
            std::memcpy(tmp, &lo, sizeof(V));
            std::memcpy(tmp + L, &hi, sizeof(V));
            T* out = C + row * ldc + j;
            if (accumulate) {
                for (std::size_t c = 0; c < width; ++c) out[c] += tmp[c];
            } else {
                for (std::size_t c = 0; c < width; ++c) out[c] = tmp[c];
            }
        };
        std::size_t i = 0;
        for (; i + R <= M; i += R) {
            V acc[R][2] = {};
            for (std::size_t p = 0; p < K; ++p) {
                const V b0 = panel[2 * p], b1 = panel[2 * p + 1];
                for (std::size_t r = 0; r < R; ++r) {
                    const T a = A[(i + r) * row_stride + p * col_stride];
                    acc[r][0] += a * b0;
                    acc[r][1] += a * b1;
                }
            }
            for (std::size_t r = 0; r < R; ++r) store(i + r, acc[r][0], acc[r][1]);
        }
        for (; i < M; ++i) {
            V acc0 = {}, acc1 = {};
            for (std::size_t p = 0; p < K; ++p) {
                const T a = A[i * row_stride + p * col_stride];
                acc0 += a * panel[2 * p];
                acc1 += a * panel[2 * p + 1];
            }
            store(i, acc0, acc1);
        }
    }
}

}  // namespace detail

/// C[M,N] (+)= A[M,K] * B[K,N]; all row-major with the given leading dimensions.
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B,
             std::size_t ldb, T* C, std::size_t ldc, bool accumulate) {
    detail::gemm_core(M, N, K, A, lda, 1, B, ldb, C, ldc, accumulate);
}

/// C[M,N] (+)= A^T * B where A is stored [K,M].
template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B,
             std::size_t ldb, T* C, std::size_t ldc, bool accumulate) {
    detail::gemm_core(M, N, K, A, 1, lda, B, ldb, C, ldc, accumulate);
}

/// C[M,N] += A[M,K] * B[K,N] for long inner dimensions (weight gradients):
/// the reduction is split into cache-sized chunks that are added to C in order.
template <class T>
void gemm_nn_long_k(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B,
                    std::size_t ldb, T* C, std::size_t ldc) {
    constexpr std::size_t kChunk = 1024;
    for (std::size_t k0 = 0; k0 < K; k0 += kChunk) {
        const std::size_t kn = std::min(kChunk, K - k0);
        gemm_nn(M, N, kn, A + k0, lda, B + k0 * ldb, ldb, C, ldc, true);
    }
}

/// Out[rows, cols] = In[cols, rows]^T.
template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out) {
    constexpr std::size_t kTile = 32;
    for (std::size_t r0 = 0; r0 < rows; r0 += kTile) {
        for (std::size_t c0 = 0; c0 < cols; c0 += kTile) {
            const std::size_t r1 = std::min(rows, r0 + kTile);
            const std::size_t c1 = std::min(cols, c0 + kTile);
            for (std::size_t r = r0; r < r1; ++r) {
                for (std::size_t c = c0; c < c1; ++c) out[r * cols + c] = in[c * rows + r];
            }
        }
    }
}

/// Geometry of one 2-D convolution window sweep.
struct ConvGeometry {
    std::size_t batch, channels, height, width;
    std::size_t kernel_h, kernel_w, stride, padding;
    std::size_t out_h, out_w;

    std::size_t patch() const { return channels * kernel_h * kernel_w; }
    std::size_t positions() const { return batch * out_h * out_w; }
};

/// cols[patch, batch*out_h*out_w] from an NCHW image batch, zero padded.
template <class T>
void im2col(const ConvGeometry& g, const T* image, T* cols) {
    const std::size_t P = g.positions();
    const std::size_t plane = g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                T* row = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * P;
                for (std::size_t n = 0; n < g.batch; ++n) {
                    const T* src = image + (n * g.channels + c) * g.height * g.width;
                    T* dst = row + n * plane;
                    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                        const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.padding);
                        T* d = dst + oh * g.out_w;
                        if (ih < 0 || ih >= static_cast<long>(g.height)) {
                            std::fill(d, d + g.out_w, T(0));
                            continue;
                        }
                        const T* s = src + static_cast<std::size_t>(ih) * g.width;
                        for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.padding);
                            d[ow] = (iw < 0 || iw >= static_cast<long>(g.width)) ? T(0) : s[iw];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatters cols[patch, positions] back into the image.
template <class T>
void col2im(const ConvGeometry& g, const T* cols, T* image, bool accumulate) {
    if (!accumulate) std::fill(image, image + g.batch * g.channels * g.height * g.width, T(0));
    const std::size_t P = g.positions();
    const std::size_t plane = g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                const T* row = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * P;
                for (std::size_t n = 0; n < g.batch; ++n) {
                    T* dst = image + (n * g.channels + c) * g.height * g.width;
                    const T* src = row + n * plane;
                    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                        const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.padding);
                        if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
                        T* d = dst + static_cast<std::size_t>(ih) * g.width;
                        const T* s = src + oh * g.out_w;
                        for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.padding);
                            if (iw >= 0 && iw < static_cast<long>(g.width)) d[iw] += s[ow];
                        }
                    }
                }
            }
        }
    }
}

/// [C, N*HW] <-> [N, C, HW] layout shuffles used around the convolution GEMMs.
template <class T>
void channels_major_to_nchw(std::size_t N, std::size_t C, std::size_t HW, const T* in, T* out) {
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t n = 0; n < N; ++n) {
            std::copy_n(in + c * N * HW + n * HW, HW, out + (n * C + c) * HW);
        }
    }
}

template <class T>
void nchw_to_channels_major(std::size_t N, std::size_t C, std::size_t HW, const T* in, T* out) {
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            std::copy_n(in + (n * C + c) * HW, HW, out + c * N * HW + n * HW);
        }
    }
}

}  // namespace scan::kernels
