#pragma once

#include <cmath>
#include <functional>

#include "tnx/fused_kernel.hpp"
#include "tnx/ops.hpp"

namespace tnx {

// Learnable state of one pixel-focused attention layer. The same k/v
// projections serve both the sliding-window path and the pooled path;
// pool_proj and pool_norm are the Linear/LayerNorm of Activate-and-Pool.
template <typename T>
struct PfaParams {
    LinearParams<T> q_proj, k_proj, v_proj;
    LinearParams<T> pool_proj;
    LayerNormParams<T> pool_norm;
    Tensor<T> window_bias;  // [heads, k*k]
    int heads = 0;
    int head_dim = 0;

    int channels() const { return heads * head_dim; }
};

// sigma(X) = LayerNorm(AvgPool(GELU(Linear(X)))), in exactly that order.
template <typename T>
Tensor<T> activate_and_pool(const Tensor<T>& x, const PfaParams<T>& params, std::size_t pool_h,
                            std::size_t pool_w) {
    if (x.rank() != 3) throw ShapeError("activate_and_pool expects [C,H,W]");
    const std::size_t h = x.dim(1), w = x.dim(2);
    Tensor<T> rows = chw_to_rows(x);
    Tensor<T> projected = gelu(linear(rows, params.pool_proj));
    Tensor<T> pooled = adaptive_avg_pool(rows_to_chw(projected, h, w), pool_h, pool_w);
    Tensor<T> normed = layernorm(chw_to_rows(pooled), params.pool_norm);
    return rows_to_chw(normed, pool_h, pool_w);
}

namespace detail {

// [rows, heads*d] -> [heads, rows, d]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads, std::size_t d) {
    const std::size_t rows = x.dim(0);
    Tensor<T> out({heads, rows, d});
    for (std::size_t p = 0; p < rows; ++p)
        for (std::size_t h = 0; h < heads; ++h)
            std::copy(x.data() + (p * heads + h) * d, x.data() + (p * heads + h) * d + d,
                      out.data() + (h * rows + p) * d);
    return out;
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
    const std::size_t heads = x.dim(0), rows = x.dim(1), d = x.dim(2);
    Tensor<T> out({rows, heads * d});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t p = 0; p < rows; ++p)
            std::copy(x.data() + (h * rows + p) * d, x.data() + (h * rows + p) * d + d,
                      out.data() + (p * heads + h) * d);
    return out;
}

template <typename T>
Tensor<T> reshaped(Tensor<T> t, std::vector<std::size_t> dims) {
    return Tensor<T>(std::move(dims), t.release());
}

template <typename T>
Tensor<T> reshaped_copy(const Tensor<T>& t, std::vector<std::size_t> dims) {
    return Tensor<T>(std::move(dims), std::vector<T>(t.vec()));
}

// Everything the dual-path core needs beyond q/k/v. scale is per (head,
// pixel); pool_bias per (head, pixel, pooled key); qt is the positional
// attention term added to the window weights after the softmax.
template <typename T>
struct DualPathSpec {
    const WindowGeometry* geom = nullptr;
    const Tensor<T>* window_bias = nullptr;                     // [heads, k*k]
    std::function<double(int head, int pix)> scale;             // logit scale
    std::function<double(int head, int pix, int p)> pool_bias;  // may be null
    const Tensor<T>* qt = nullptr;                              // [heads, rows, k*k]
};

template <typename T>
struct DualPathResult {
    Tensor<T> out_rows;     // [rows, heads*d]
    Tensor<T> window_attn;  // [heads, H, W, k*k], masked slots exactly 0
    Tensor<T> pool_attn;    // [heads, rows, P]
};

// Joint-softmax dual-path attention. The window and pooled similarity rows
// share one running max and one denominator, which is what makes the split
// computation equal to attention over the concatenated key set.
template <typename T>
DualPathResult<T> dual_path_attention(const Tensor<T>& q_heads, const Tensor<T>& k_heads,
                                      const Tensor<T>& v_heads, const Tensor<T>& k_pool,
                                      const Tensor<T>& v_pool, const DualPathSpec<T>& spec,
                                      bool keep_rows = false) {
    const WindowGeometry& geom = *spec.geom;
    const std::size_t heads = q_heads.dim(0), rows = q_heads.dim(1), d = q_heads.dim(2);
    const std::size_t h = static_cast<std::size_t>(geom.h), w = static_cast<std::size_t>(geom.w);
    const int slots = geom.slots();
    const std::size_t plen = static_cast<std::size_t>(geom.pool_len());
    if (rows != h * w) throw ShapeError("dual-path attention rows do not match geometry");
    if (plen > 0 && (k_pool.dim(1) != plen || v_pool.dim(1) != plen))
        throw ShapeError("pooled keys do not match geometry");
    constexpr T kNegSentinel = std::numeric_limits<T>::lowest();

    KernelWorkspace ws;
    Tensor<T> window_logits = fused_window_qk(reshaped_copy(q_heads, {heads, h, w, d}),
                                              reshaped_copy(k_heads, {heads, h, w, d}), geom, ws);

    // pooled similarities, f64 accumulation
    Tensor<T> pool_logits;
    if (plen > 0) {
        pool_logits = Tensor<T>({heads, rows, plen});
        count_muls(static_cast<std::uint64_t>(heads) * rows * plen * d);
        parallel_for(heads * rows, [&](std::size_t hp) {
            const std::size_t head = hp / rows, pix = hp % rows;
            const T* qv = q_heads.data() + (head * rows + pix) * d;
            T* orow = pool_logits.data() + (head * rows + pix) * plen;
            for (std::size_t p = 0; p < plen; ++p) {
                const T* kv = k_pool.data() + (head * plen + p) * d;
                double acc = 0.0;
                for (std::size_t dd = 0; dd < d; ++dd)
                    acc += static_cast<double>(qv[dd]) * static_cast<double>(kv[dd]);
                orow[p] = static_cast<T>(acc);
            }
        }, 8);
    }

    // scale + bias + joint softmax, in place
    parallel_for(heads * rows, [&](std::size_t hp) {
        const std::size_t head = hp / rows, pix = hp % rows;
        const int i = static_cast<int>(pix / w), j = static_cast<int>(pix % w);
        const double scale = spec.scale(static_cast<int>(head), static_cast<int>(pix));
        T* wl = window_logits.data() + (head * rows + pix) * slots;
        T* pl = plen ? pool_logits.data() + (head * rows + pix) * plen : nullptr;
        double m = -std::numeric_limits<double>::infinity();
        for (int s = 0; s < slots; ++s) {
            if (geom.masked(i, j, s)) continue;
            const double logit = scale * static_cast<double>(wl[s]) +
                                 static_cast<double>(spec.window_bias->at(head, s));
            wl[s] = static_cast<T>(logit);
            if (logit > m) m = logit;
        }
        for (std::size_t p = 0; p < plen; ++p) {
            double logit = scale * static_cast<double>(pl[p]);
            if (spec.pool_bias)
                logit += spec.pool_bias(static_cast<int>(head), static_cast<int>(pix),
                                        static_cast<int>(p));
            pl[p] = static_cast<T>(logit);
            if (logit > m) m = logit;
        }
        if (!std::isfinite(m)) throw DomainError("attention row has no effective key");
        double denom = 0.0;
        for (int s = 0; s < slots; ++s) {
            const double e = geom.masked(i, j, s)
                                 ? std::exp(static_cast<double>(kNegSentinel) - m)
                                 : std::exp(static_cast<double>(wl[s]) - m);
            wl[s] = static_cast<T>(e);
            denom += e;
        }
        for (std::size_t p = 0; p < plen; ++p) {
            const double e = std::exp(static_cast<double>(pl[p]) - m);
            pl[p] = static_cast<T>(e);
            denom += e;
        }
        for (int s = 0; s < slots; ++s) {
            wl[s] = static_cast<T>(static_cast<double>(wl[s]) / denom);
            if (geom.masked(i, j, s)) assert(wl[s] == T(0));
        }
        for (std::size_t p = 0; p < plen; ++p)
            pl[p] = static_cast<T>(static_cast<double>(pl[p]) / denom);
    }, 4);

    DualPathResult<T> res;
    if (keep_rows) {
        res.window_attn = Tensor<T>(window_logits.dims(), std::vector<T>(window_logits.vec()));
        if (plen > 0)
            res.pool_attn = Tensor<T>(pool_logits.dims(), std::vector<T>(pool_logits.vec()));
    }

    // positional attention joins the window weights after the softmax
    if (spec.qt) {
        for (std::size_t i = 0; i < window_logits.size(); ++i)
            window_logits[i] += (*spec.qt)[i];
    }

    Tensor<T> win_out = fused_window_av(window_logits,
                                        reshaped_copy(v_heads, {heads, h, w, d}), geom, ws);

    // pooled value aggregation, f64 accumulation over pooled keys
    Tensor<T> out_heads({heads, rows, d});
    if (plen > 0) count_muls(static_cast<std::uint64_t>(heads) * rows * plen * d);
    parallel_for(heads * rows, [&](std::size_t hp) {
        const std::size_t head = hp / rows, pix = hp % rows;
        const T* wrow = win_out.data() + (head * rows + pix) * d;
        T* orow = out_heads.data() + (head * rows + pix) * d;
        if (plen == 0) {
            std::copy(wrow, wrow + d, orow);
            return;
        }
        const T* arow = pool_logits.data() + (head * rows + pix) * plen;
        for (std::size_t dd = 0; dd < d; ++dd) {
            double acc = 0.0;
            for (std::size_t p = 0; p < plen; ++p)
                acc += static_cast<double>(arow[p]) *
                       static_cast<double>(v_pool[(head * plen + p) * d + dd]);
            orow[dd] = static_cast<T>(static_cast<double>(wrow[dd]) + acc);
        }
    }, 8);

    if (keep_rows && plen == 0) res.pool_attn = Tensor<T>();
    res.out_rows = merge_heads(out_heads);
    return res;
}

}  // namespace detail

// Plain pixel-focused attention: dot-product similarity scaled by
// 1/sqrt(d), learnable window bias, no pooled bias, one joint softmax
// across both paths.
template <typename T>
detail::DualPathResult<T> pfa_forward_detailed(const Tensor<T>& x, const PfaParams<T>& params,
                                               const WindowGeometry& geom,
                                               bool keep_rows = false) {
    if (x.rank() != 3 || x.dim(0) != static_cast<std::size_t>(params.channels()) ||
        x.dim(1) != static_cast<std::size_t>(geom.h) ||
        x.dim(2) != static_cast<std::size_t>(geom.w))
        throw ShapeError("pfa_forward input " + x.shape_str() + " does not match params/geometry");
    if (params.window_bias.dim(0) != static_cast<std::size_t>(params.heads) ||
        params.window_bias.dim(1) != static_cast<std::size_t>(geom.slots()))
        throw ShapeError("pfa window bias shape mismatch");
    const std::size_t heads = params.heads, d = params.head_dim;
    Tensor<T> rows = chw_to_rows(x);
    Tensor<T> q = detail::split_heads(linear(rows, params.q_proj), heads, d);
    Tensor<T> k = detail::split_heads(linear(rows, params.k_proj), heads, d);
    Tensor<T> v = detail::split_heads(linear(rows, params.v_proj), heads, d);
    Tensor<T> sigma_rows = chw_to_rows(activate_and_pool(x, params, geom.pool_h, geom.pool_w));
    Tensor<T> kp = detail::split_heads(linear(sigma_rows, params.k_proj), heads, d);
    Tensor<T> vp = detail::split_heads(linear(sigma_rows, params.v_proj), heads, d);

    detail::DualPathSpec<T> spec;
    spec.geom = &geom;
    spec.window_bias = &params.window_bias;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    spec.scale = [inv_sqrt_d](int, int) { return inv_sqrt_d; };
    return detail::dual_path_attention(q, k, v, kp, vp, spec, keep_rows);
}

template <typename T>
Tensor<T> pfa_forward(const Tensor<T>& x, const PfaParams<T>& params, const WindowGeometry& geom) {
    return rows_to_chw(pfa_forward_detailed(x, params, geom).out_rows, geom.h, geom.w);
}

// Attention weights as one row per (head, pixel): [heads, H*W, k^2 + P].
// Masked slots are exactly zero and each row sums to one.
template <typename T>
Tensor<T> pfa_attention_rows(const Tensor<T>& x, const PfaParams<T>& params,
                             const WindowGeometry& geom) {
    auto res = pfa_forward_detailed(x, params, geom, /*keep_rows=*/true);
    const std::size_t heads = params.heads;
    const std::size_t rows = static_cast<std::size_t>(geom.h) * geom.w;
    const std::size_t slots = geom.slots(), plen = geom.pool_len();
    Tensor<T> out({heads, rows, slots + plen});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t p = 0; p < rows; ++p) {
            std::copy(res.window_attn.data() + (h * rows + p) * slots,
                      res.window_attn.data() + (h * rows + p) * slots + slots,
                      out.data() + (h * rows + p) * (slots + plen));
            std::copy(res.pool_attn.data() + (h * rows + p) * plen,
                      res.pool_attn.data() + (h * rows + p) * plen + plen,
                      out.data() + (h * rows + p) * (slots + plen) + slots);
        }
    return out;
}

// Reference form: per pixel, materialize Concat(K_rho, K_sigma) and
// Concat(V_rho, V_sigma) and run one standard softmax attention over the
// concatenated keys. Ground truth only; all arithmetic in double.
template <typename T>
Tensor<T> pfa_concat_oracle(const Tensor<T>& x, const PfaParams<T>& params,
                            const WindowGeometry& geom) {
    if (x.rank() != 3 || x.dim(0) != static_cast<std::size_t>(params.channels()))
        throw ShapeError("pfa_concat_oracle input does not match params");
    const std::size_t heads = params.heads, d = params.head_dim;
    const std::size_t h = geom.h, w = geom.w, rows = h * w;
    const int slots = geom.slots();
    const std::size_t plen = geom.pool_len();
    Tensor<T> rows_x = chw_to_rows(x);
    Tensor<T> q = detail::split_heads(linear(rows_x, params.q_proj), heads, d);
    Tensor<T> k = detail::split_heads(linear(rows_x, params.k_proj), heads, d);
    Tensor<T> v = detail::split_heads(linear(rows_x, params.v_proj), heads, d);
    Tensor<T> sigma_rows = chw_to_rows(activate_and_pool(x, params, geom.pool_h, geom.pool_w));
    Tensor<T> kp = detail::split_heads(linear(sigma_rows, params.k_proj), heads, d);
    Tensor<T> vp = detail::split_heads(linear(sigma_rows, params.v_proj), heads, d);

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    Tensor<T> out_heads({heads, rows, d});
    std::vector<double> logits(slots + plen);
    std::vector<const T*> values(slots + plen);
    for (std::size_t head = 0; head < heads; ++head) {
        for (std::size_t pix = 0; pix < rows; ++pix) {
            const int i = static_cast<int>(pix / w), j = static_cast<int>(pix % w);
            const T* qv = q.data() + (head * rows + pix) * d;
            std::size_t n = 0;
            for (int s = 0; s < slots; ++s) {
                if (geom.masked(i, j, s)) continue;
                int ti, tj;
                geom.slot_target(i, j, s, ti, tj);
                const std::size_t key = static_cast<std::size_t>(ti) * w + tj;
                const T* kv = k.data() + (head * rows + key) * d;
                double acc = 0.0;
                for (std::size_t dd = 0; dd < d; ++dd)
                    acc += static_cast<double>(qv[dd]) * static_cast<double>(kv[dd]);
                logits[n] = acc * inv_sqrt_d + static_cast<double>(params.window_bias.at(head, s));
                values[n] = v.data() + (head * rows + key) * d;
                ++n;
            }
            for (std::size_t p = 0; p < plen; ++p) {
                const T* kv = kp.data() + (head * plen + p) * d;
                double acc = 0.0;
                for (std::size_t dd = 0; dd < d; ++dd)
                    acc += static_cast<double>(qv[dd]) * static_cast<double>(kv[dd]);
                logits[n] = acc * inv_sqrt_d;
                values[n] = vp.data() + (head * plen + p) * d;
                ++n;
            }
            if (n == 0) throw DomainError("concat oracle row is fully masked");
            double m = logits[0];
            for (std::size_t t = 1; t < n; ++t) m = std::max(m, logits[t]);
            double denom = 0.0;
            for (std::size_t t = 0; t < n; ++t) {
                logits[t] = std::exp(logits[t] - m);
                denom += logits[t];
            }
            T* orow = out_heads.data() + (head * rows + pix) * d;
            for (std::size_t dd = 0; dd < d; ++dd) {
                double acc = 0.0;
                for (std::size_t t = 0; t < n; ++t)
                    acc += (logits[t] / denom) * static_cast<double>(values[t][dd]);
                orow[dd] = static_cast<T>(acc);
            }
        }
    }
    return rows_to_chw(detail::merge_heads(out_heads), h, w);
}

// Window-only variant for the translational-equivariance property: pooled
// path removed, weights renormalized over the window keys alone.
template <typename T>
Tensor<T> pfa_forward_window_only(const Tensor<T>& x, const PfaParams<T>& params,
                                  const WindowGeometry& geom) {
    WindowGeometry g = geom;
    for (auto& n : g.n_eff) n -= g.pool_len();
    g.pool_h = 0;
    g.pool_w = 0;
    const std::size_t heads = params.heads, d = params.head_dim;
    Tensor<T> rows = chw_to_rows(x);
    Tensor<T> q = detail::split_heads(linear(rows, params.q_proj), heads, d);
    Tensor<T> k = detail::split_heads(linear(rows, params.k_proj), heads, d);
    Tensor<T> v = detail::split_heads(linear(rows, params.v_proj), heads, d);
    detail::DualPathSpec<T> spec;
    spec.geom = &g;
    spec.window_bias = &params.window_bias;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    spec.scale = [inv_sqrt_d](int, int) { return inv_sqrt_d; };
    auto res = detail::dual_path_attention(q, k, v, Tensor<T>(), Tensor<T>(), spec);
    return rows_to_chw(res.out_rows, geom.h, geom.w);
}

}  // namespace tnx
