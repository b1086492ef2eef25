#pragma once

// Random tensor/parameter factories shared by the unit tests and the
// selftest command.

#include <cstring>

#include "tnx/agg_attention.hpp"
#include "tnx/conv_glu.hpp"

namespace tnx::testing {

template <typename T>
Tensor<T> rand_tensor(Rng& rng, std::vector<std::size_t> dims, double lo = -1.0,
                      double hi = 1.0) {
    Tensor<T> t(std::move(dims));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
LinearParams<T> rand_linear(Rng& rng, std::size_t out, std::size_t in, double scale = 0.5) {
    LinearParams<T> p;
    p.weight = rand_tensor<T>(rng, {out, in}, -scale, scale);
    p.bias = rand_tensor<T>(rng, {out}, -scale, scale);
    return p;
}

template <typename T>
LayerNormParams<T> rand_norm(Rng& rng, std::size_t c) {
    LayerNormParams<T> p;
    p.gamma = rand_tensor<T>(rng, {c}, 0.5, 1.5);
    p.beta = rand_tensor<T>(rng, {c}, -0.2, 0.2);
    return p;
}

template <typename T>
PfaParams<T> rand_pfa(Rng& rng, int heads, int head_dim, int k) {
    const std::size_t c = static_cast<std::size_t>(heads) * head_dim;
    PfaParams<T> p;
    p.q_proj = rand_linear<T>(rng, c, c);
    p.k_proj = rand_linear<T>(rng, c, c);
    p.v_proj = rand_linear<T>(rng, c, c);
    p.pool_proj = rand_linear<T>(rng, c, c);
    p.pool_norm = rand_norm<T>(rng, c);
    p.window_bias = rand_tensor<T>(rng, {static_cast<std::size_t>(heads),
                                         static_cast<std::size_t>(k) * k},
                                   -0.3, 0.3);
    p.heads = heads;
    p.head_dim = head_dim;
    return p;
}

template <typename T>
AggAttentionParams<T> rand_agg(Rng& rng, int heads, int head_dim, int k) {
    AggAttentionParams<T> p;
    p.base = rand_pfa<T>(rng, heads, head_dim, k);
    p.qe = rand_tensor<T>(rng, {static_cast<std::size_t>(heads),
                                static_cast<std::size_t>(head_dim)},
                          -0.2, 0.2);
    p.pos_tokens = rand_tensor<T>(rng, {static_cast<std::size_t>(heads),
                                        static_cast<std::size_t>(head_dim),
                                        static_cast<std::size_t>(k) * k},
                                  -0.2, 0.2);
    p.tau_raw = Tensor<T>({static_cast<std::size_t>(heads)});
    for (int h = 0; h < heads; ++h)
        p.tau_raw[h] = static_cast<T>(softplus_inverse(1.0 / 0.24) + rng.uniform(-0.3, 0.3));
    p.cpb.fc1 = rand_linear<T>(rng, 16, 2);  // small hidden width keeps oracles quick
    p.cpb.fc2 = rand_linear<T>(rng, heads, 16, 0.2);
    return p;
}

template <typename T>
MhsaParams<T> rand_mhsa(Rng& rng, int heads, int head_dim) {
    const std::size_t c = static_cast<std::size_t>(heads) * head_dim;
    MhsaParams<T> p;
    p.q_proj = rand_linear<T>(rng, c, c);
    p.k_proj = rand_linear<T>(rng, c, c);
    p.v_proj = rand_linear<T>(rng, c, c);
    p.qe = rand_tensor<T>(rng, {static_cast<std::size_t>(heads),
                                static_cast<std::size_t>(head_dim)},
                          -0.2, 0.2);
    p.tau_raw = Tensor<T>({static_cast<std::size_t>(heads)});
    for (int h = 0; h < heads; ++h)
        p.tau_raw[h] = static_cast<T>(softplus_inverse(1.0 / 0.24));
    p.heads = heads;
    p.head_dim = head_dim;
    return p;
}

template <typename T>
ConvGluParams<T> rand_convglu(Rng& rng, std::size_t c, std::size_t hidden,
                              ConvGluVariant variant) {
    ConvGluParams<T> p;
    p.w1 = rand_linear<T>(rng, hidden, c);
    p.w2 = rand_linear<T>(rng, hidden, c);
    p.dw_filter = rand_tensor<T>(rng, {hidden, 3, 3}, -0.4, 0.4);
    p.dw_bias = rand_tensor<T>(rng, {hidden}, -0.1, 0.1);
    p.w3 = rand_linear<T>(rng, c, hidden);
    p.variant = variant;
    return p;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

}  // namespace tnx::testing
