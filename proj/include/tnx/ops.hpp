#pragma once

#include <cassert>
#include <cmath>
#include <limits>

#include "tnx/tensor.hpp"

namespace tnx {

// --------------------------------------------------------------------------
// matmul: [m,k] x [k,n] -> [m,n], accumulation strictly ascending over k.
// --------------------------------------------------------------------------
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul expects rank-2 tensors, got " + a.shape_str() + " and " +
                         b.shape_str());
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul inner extents differ: " + a.shape_str() + " vs " + b.shape_str());
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out({m, n});
    count_muls(static_cast<std::uint64_t>(m) * k * n);
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    parallel_for(m, [&](std::size_t i) {
        T* orow = po + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T av = pa[i * k + kk];
            const T* brow = pb + kk * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }, 8);
    return out;
}

// y = x * W^T + b for position-major x [rows, in] and weight [out, in].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& p) {
    if (x.rank() != 2 || x.dim(1) != p.in_dim())
        throw ShapeError("linear: input " + x.shape_str() + " does not match weight " +
                         p.weight.shape_str());
    const std::size_t rows = x.dim(0), in = p.in_dim(), out = p.out_dim();
    Tensor<T> y({rows, out});
    count_muls(static_cast<std::uint64_t>(rows) * in * out);
    const T* px = x.data();
    const T* pw = p.weight.data();
    const T* pb = p.has_bias() ? p.bias.data() : nullptr;
    T* py = y.data();
    parallel_for(rows, [&](std::size_t r) {
        const T* xr = px + r * in;
        T* yr = py + r * out;
        for (std::size_t o = 0; o < out; ++o) {
            const T* wr = pw + o * in;
            T acc = pb ? pb[o] : T(0);
            for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
            yr[o] = acc;
        }
    }, 4);
    return y;
}

// --------------------------------------------------------------------------
// softmax over the last axis with optional boolean mask (true = masked out).
// Masked slots are driven to the most-negative finite value before the
// max-subtraction; the resulting weight must underflow to exactly zero,
// which is asserted rather than assumed.
// --------------------------------------------------------------------------
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, const MaskTensor* mask = nullptr) {
    if (x.rank() == 0 || x.dim(x.rank() - 1) == 0) throw ShapeError("softmax needs a last axis");
    if (mask && mask->dims() != x.dims())
        throw ShapeError("softmax mask shape " + mask->shape_str() + " != input " + x.shape_str());
    const std::size_t n = x.dim(x.rank() - 1);
    const std::size_t rows = x.size() / n;
    constexpr T kNegSentinel = std::numeric_limits<T>::lowest();
    Tensor<T> out(x.dims());
    const T* px = x.data();
    const std::uint8_t* pm = mask ? mask->data() : nullptr;
    T* po = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = px + r * n;
        const std::uint8_t* mr = pm ? pm + r * n : nullptr;
        T m = kNegSentinel;
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) {
            if (mr && mr[j]) continue;
            any = true;
            if (xr[j] > m) m = xr[j];
        }
        if (!any) throw DomainError("softmax row is fully masked");
        double denom = 0.0;
        T* orow = po + r * n;
        for (std::size_t j = 0; j < n; ++j) {
            const T logit = (mr && mr[j]) ? kNegSentinel : xr[j];
            const double e = std::exp(static_cast<double>(logit) - static_cast<double>(m));
            orow[j] = static_cast<T>(e);
            denom += e;
        }
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = static_cast<T>(static_cast<double>(orow[j]) / denom);
            if (mr && mr[j]) assert(orow[j] == T(0));
        }
    }
    return out;
}

// --------------------------------------------------------------------------
// layernorm over the last axis (population variance, then affine).
// --------------------------------------------------------------------------
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    const std::size_t c = x.dim(x.rank() - 1);
    if (gamma.size() != c || beta.size() != c)
        throw ShapeError("layernorm affine params do not match channel extent");
    const std::size_t rows = x.size() / c;
    Tensor<T> out(x.dims());
    const T* px = x.data();
    const T* pg = gamma.data();
    const T* pb = beta.data();
    T* po = out.data();
    parallel_for(rows, [&](std::size_t r) {
        const T* xr = px + r * c;
        T* orow = po + r * c;
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += xr[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = static_cast<double>(xr[j]) - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
        for (std::size_t j = 0; j < c; ++j) {
            const double norm = (static_cast<double>(xr[j]) - mean) * inv;
            orow[j] = static_cast<T>(norm * pg[j] + pb[j]);
        }
    }, 16);
    return out;
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const LayerNormParams<T>& p) {
    return layernorm(x, p.gamma, p.beta, p.eps);
}

// --------------------------------------------------------------------------
// Exact-erf GELU.
// --------------------------------------------------------------------------
template <typename T>
T gelu_scalar(T v) {
    const double x = static_cast<double>(v);
    return static_cast<T>(0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440)));
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> out(x.dims());
    const T* px = x.data();
    T* po = out.data();
    parallel_for(x.size(), [&](std::size_t i) { po[i] = gelu_scalar(px[i]); }, 4096);
    return out;
}

// --------------------------------------------------------------------------
// Adaptive average pooling, standard bucketing:
// cell a covers input rows [floor(a*H/out_h), ceil((a+1)*H/out_h)).
// --------------------------------------------------------------------------
inline std::size_t pool_bucket_start(std::size_t a, std::size_t in, std::size_t out) {
    return (a * in) / out;
}
inline std::size_t pool_bucket_end(std::size_t a, std::size_t in, std::size_t out) {
    return ((a + 1) * in + out - 1) / out;
}

template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    if (x.rank() != 3) throw ShapeError("adaptive_avg_pool expects [C,H,W], got " + x.shape_str());
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (out_h == 0 || out_w == 0) throw ShapeError("adaptive_avg_pool output extent is zero");
    if (out_h > h || out_w > w)
        throw ShapeError("adaptive_avg_pool output larger than input " + x.shape_str());
    Tensor<T> out({c, out_h, out_w});
    parallel_for(c, [&](std::size_t ch) {
        for (std::size_t a = 0; a < out_h; ++a) {
            const std::size_t r0 = pool_bucket_start(a, h, out_h);
            const std::size_t r1 = pool_bucket_end(a, h, out_h);
            for (std::size_t b = 0; b < out_w; ++b) {
                const std::size_t c0 = pool_bucket_start(b, w, out_w);
                const std::size_t c1 = pool_bucket_end(b, w, out_w);
                double acc = 0.0;
                for (std::size_t r = r0; r < r1; ++r)
                    for (std::size_t cc = c0; cc < c1; ++cc) acc += x.at(ch, r, cc);
                out.at(ch, a, b) =
                    static_cast<T>(acc / static_cast<double>((r1 - r0) * (c1 - c0)));
            }
        }
    });
    return out;
}

// --------------------------------------------------------------------------
// Depthwise 3x3 correlation, zero padding 1, stride 1.
// --------------------------------------------------------------------------
template <typename T>
Tensor<T> depthwise_conv3x3(const Tensor<T>& x, const Tensor<T>& filt, const Tensor<T>& bias) {
    if (x.rank() != 3) throw ShapeError("depthwise_conv3x3 expects [C,H,W]");
    if (filt.rank() != 3 || filt.dim(1) != 3 || filt.dim(2) != 3)
        throw ShapeError("depthwise_conv3x3 filter must be [C,3,3], got " + filt.shape_str());
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (filt.dim(0) != c || bias.size() != c)
        throw ShapeError("depthwise_conv3x3 channel mismatch");
    Tensor<T> out({c, h, w});
    count_muls(static_cast<std::uint64_t>(c) * h * w * 9);
    parallel_for(c, [&](std::size_t ch) {
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                double acc = bias[ch];
                for (int u = 0; u < 3; ++u) {
                    const long r = static_cast<long>(i) + u - 1;
                    if (r < 0 || r >= static_cast<long>(h)) continue;
                    for (int v = 0; v < 3; ++v) {
                        const long s = static_cast<long>(j) + v - 1;
                        if (s < 0 || s >= static_cast<long>(w)) continue;
                        acc += static_cast<double>(x.at(ch, r, s)) * filt.at(ch, u, v);
                    }
                }
                out.at(ch, i, j) = static_cast<T>(acc);
            }
        }
    });
    return out;
}

// --------------------------------------------------------------------------
// Plain strided correlation: x [Cin,H,W], filt [Cout,Cin,k,k] -> [Cout,H',W'].
// --------------------------------------------------------------------------
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& filt, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
    if (x.rank() != 3 || filt.rank() != 4) throw ShapeError("conv2d expects [Cin,H,W], [Cout,Cin,k,k]");
    const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t cout = filt.dim(0), k = filt.dim(2);
    if (filt.dim(1) != cin || filt.dim(3) != k) throw ShapeError("conv2d filter shape mismatch");
    if (bias.size() != 0 && bias.size() != cout) throw ShapeError("conv2d bias extent mismatch");
    if (h + 2 * pad < k || w + 2 * pad < k) throw ShapeError("conv2d kernel larger than padded input");
    const std::size_t oh = (h + 2 * pad - k) / stride + 1;
    const std::size_t ow = (w + 2 * pad - k) / stride + 1;
    Tensor<T> out({cout, oh, ow});
    count_muls(static_cast<std::uint64_t>(cout) * oh * ow * cin * k * k);
    const bool has_bias = bias.size() != 0;
    parallel_for(cout, [&](std::size_t co) {
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
                double acc = has_bias ? static_cast<double>(bias[co]) : 0.0;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    for (std::size_t u = 0; u < k; ++u) {
                        const long r = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                        if (r < 0 || r >= static_cast<long>(h)) continue;
                        for (std::size_t v = 0; v < k; ++v) {
                            const long s =
                                static_cast<long>(j * stride + v) - static_cast<long>(pad);
                            if (s < 0 || s >= static_cast<long>(w)) continue;
                            acc += static_cast<double>(x.at(ci, r, s)) * filt.at(co, ci, u, v);
                        }
                    }
                }
                out.at(co, i, j) = static_cast<T>(acc);
            }
        }
    });
    return out;
}

// --------------------------------------------------------------------------
// Layout shuffles between channel-planar [C,H,W] and position-major [H*W,C].
// --------------------------------------------------------------------------
template <typename T>
Tensor<T> chw_to_rows(const Tensor<T>& x) {
    if (x.rank() != 3) throw ShapeError("chw_to_rows expects [C,H,W]");
    const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor<T> out({hw, c});
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) po[p * c + ch] = px[ch * hw + p];
    return out;
}

template <typename T>
Tensor<T> rows_to_chw(const Tensor<T>& x, std::size_t h, std::size_t w) {
    if (x.rank() != 2 || x.dim(0) != h * w) throw ShapeError("rows_to_chw extent mismatch");
    const std::size_t c = x.dim(1), hw = h * w;
    Tensor<T> out({c, h, w});
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) po[ch * hw + p] = px[p * c + ch];
    return out;
}

// elementwise helpers
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("add shape mismatch");
    Tensor<T> out(a.dims());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("hadamard shape mismatch");
    Tensor<T> out(a.dims());
    count_muls(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

}  // namespace tnx
