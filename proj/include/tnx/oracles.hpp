#pragma once

// Naive reference implementations, kept deliberately independent of the
// optimized library paths: plain nested loops over channel-planar layouts,
// no fused kernels, no dual-path split, no shared layout helpers. The
// selftest command and the unit tests compare the production ops against
// these.

#include "tnx/agg_attention.hpp"
#include "tnx/conv_glu.hpp"

namespace tnx::oracles {

template <typename T>
Tensor<T> matmul_ref(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            T acc = T(0);
            for (std::size_t t = 0; t < k; ++t) acc += a.at(i, t) * b.at(t, j);
            out.at(i, j) = acc;
        }
    return out;
}

template <typename T>
std::vector<T> softmax_ref(const std::vector<T>& row) {
    double denom = 0.0;
    for (T v : row) denom += std::exp(static_cast<double>(v));
    std::vector<T> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i)
        out[i] = static_cast<T>(std::exp(static_cast<double>(row[i])) / denom);
    return out;
}

template <typename T>
std::vector<T> layernorm_ref(const std::vector<T>& row, double eps) {
    double mean = 0.0;
    for (T v : row) mean += v;
    mean /= static_cast<double>(row.size());
    double var = 0.0;
    for (T v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(row.size());
    std::vector<T> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i)
        out[i] = static_cast<T>((row[i] - mean) / std::sqrt(var + eps));
    return out;
}

// adaptive pooling by explicit bucket enumeration
template <typename T>
Tensor<T> adaptive_pool_ref(const Tensor<T>& x, std::size_t oh, std::size_t ow) {
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor<T> out({c, oh, ow});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t a = 0; a < oh; ++a)
            for (std::size_t b = 0; b < ow; ++b) {
                const std::size_t r0 = a * h / oh;
                const std::size_t r1 = ((a + 1) * h + oh - 1) / oh;
                const std::size_t c0 = b * w / ow;
                const std::size_t c1 = ((b + 1) * w + ow - 1) / ow;
                double acc = 0.0;
                std::size_t count = 0;
                for (std::size_t r = r0; r < r1; ++r)
                    for (std::size_t cc = c0; cc < c1; ++cc) {
                        acc += x.at(ch, r, cc);
                        ++count;
                    }
                out.at(ch, a, b) = static_cast<T>(acc / static_cast<double>(count));
            }
    return out;
}

template <typename T>
Tensor<T> dwconv3x3_ref(const Tensor<T>& x, const Tensor<T>& filt, const Tensor<T>& bias) {
    const long c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor<T> out({static_cast<std::size_t>(c), static_cast<std::size_t>(h),
                   static_cast<std::size_t>(w)});
    for (long ch = 0; ch < c; ++ch)
        for (long i = 0; i < h; ++i)
            for (long j = 0; j < w; ++j) {
                double acc = bias[ch];
                for (long u = -1; u <= 1; ++u)
                    for (long v = -1; v <= 1; ++v) {
                        const long r = i + u, s = j + v;
                        if (r < 0 || r >= h || s < 0 || s >= w) continue;
                        acc += static_cast<double>(x.at(ch, r, s)) * filt.at(ch, u + 1, v + 1);
                    }
                out.at(ch, i, j) = static_cast<T>(acc);
            }
    return out;
}

template <typename T>
Tensor<T> conv2d_ref(const Tensor<T>& x, const Tensor<T>& filt, const Tensor<T>& bias,
                     long stride, long pad) {
    const long cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const long cout = filt.dim(0), k = filt.dim(2);
    const long oh = (h + 2 * pad - k) / stride + 1;
    const long ow = (w + 2 * pad - k) / stride + 1;
    Tensor<T> out({static_cast<std::size_t>(cout), static_cast<std::size_t>(oh),
                   static_cast<std::size_t>(ow)});
    for (long co = 0; co < cout; ++co)
        for (long i = 0; i < oh; ++i)
            for (long j = 0; j < ow; ++j) {
                double acc = bias.size() ? bias[co] : T(0);
                for (long ci = 0; ci < cin; ++ci)
                    for (long u = 0; u < k; ++u)
                        for (long v = 0; v < k; ++v) {
                            const long r = i * stride + u - pad, s = j * stride + v - pad;
                            if (r < 0 || r >= h || s < 0 || s >= w) continue;
                            acc += static_cast<double>(x.at(ci, r, s)) * filt.at(co, ci, u, v);
                        }
                out.at(co, i, j) = static_cast<T>(acc);
            }
    return out;
}

// --------------------------------------------------------------------------
// Fully scalar attention references.
// --------------------------------------------------------------------------

namespace detail {

// y[o] at one pixel = b[o] + sum_i W[o,i] * x[i]
template <typename T>
std::vector<double> project_pixel(const Tensor<T>& x, std::size_t i, std::size_t j,
                                  const LinearParams<T>& p) {
    const std::size_t c = x.dim(0);
    std::vector<double> out(p.out_dim());
    for (std::size_t o = 0; o < p.out_dim(); ++o) {
        double acc = p.has_bias() ? static_cast<double>(p.bias[o]) : 0.0;
        for (std::size_t ci = 0; ci < c; ++ci)
            acc += static_cast<double>(p.weight.at(o, ci)) * static_cast<double>(x.at(ci, i, j));
        out[o] = acc;
    }
    return out;
}

inline void l2_normalize(std::vector<double>& v, std::size_t begin, std::size_t len) {
    double sum = 0.0;
    for (std::size_t i = 0; i < len; ++i) sum += v[begin + i] * v[begin + i];
    const double norm = std::max(std::sqrt(sum), 1e-12);
    for (std::size_t i = 0; i < len; ++i) v[begin + i] /= norm;
}

// sigma(X) recomputed from first principles on the planar layout
template <typename T>
Tensor<double> activate_and_pool_ref(const Tensor<T>& x, const PfaParams<T>& params,
                                     std::size_t ph, std::size_t pw) {
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor<double> act({c, h, w});
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const auto proj = project_pixel(x, i, j, params.pool_proj);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double v = proj[ch];
                act.at(ch, i, j) = 0.5 * v * (1.0 + std::erf(v * 0.70710678118654752440));
            }
        }
    Tensor<double> pooled = adaptive_pool_ref(act, ph, pw);
    Tensor<double> out({c, ph, pw});
    for (std::size_t a = 0; a < ph; ++a)
        for (std::size_t b = 0; b < pw; ++b) {
            std::vector<double> row(c);
            for (std::size_t ch = 0; ch < c; ++ch) row[ch] = pooled.at(ch, a, b);
            auto normed = layernorm_ref(row, static_cast<double>(params.pool_norm.eps));
            for (std::size_t ch = 0; ch < c; ++ch)
                out.at(ch, a, b) = normed[ch] * static_cast<double>(params.pool_norm.gamma[ch]) +
                                   static_cast<double>(params.pool_norm.beta[ch]);
        }
    return out;
}

template <typename T>
std::vector<double> project_pixel_d(const Tensor<double>& x, std::size_t i, std::size_t j,
                                    const LinearParams<T>& p) {
    const std::size_t c = x.dim(0);
    std::vector<double> out(p.out_dim());
    for (std::size_t o = 0; o < p.out_dim(); ++o) {
        double acc = p.has_bias() ? static_cast<double>(p.bias[o]) : 0.0;
        for (std::size_t ci = 0; ci < c; ++ci)
            acc += static_cast<double>(p.weight.at(o, ci)) * x.at(ci, i, j);
        out[o] = acc;
    }
    return out;
}

}  // namespace detail

// Scalar dual-path attention covering both the plain and the aggregated
// variants. With `aggregated` false: raw q/k, 1/sqrt(d) scaling, no QE/T,
// no pooled bias -- plain pixel-focused attention.
template <typename T>
Tensor<T> attention_ref(const Tensor<T>& x, const PfaParams<T>& base,
                        const AggAttentionParams<T>* agg, const WindowGeometry& geom,
                        bool aggregated) {
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t heads = base.heads, d = base.head_dim;
    const int k = geom.k, slots = geom.slots(), half = k / 2;
    const std::size_t ph = geom.pool_h, pw = geom.pool_w;
    const std::size_t plen = ph * pw;

    Tensor<double> sigma = detail::activate_and_pool_ref(x, base, ph, pw);
    Tensor<T> out({c, h, w});

    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            auto q_all = detail::project_pixel(x, i, j, base.q_proj);
            for (std::size_t head = 0; head < heads; ++head) {
                std::vector<double> q(q_all.begin() + head * d, q_all.begin() + (head + 1) * d);
                if (aggregated) detail::l2_normalize(q, 0, d);
                std::vector<double> q_hat = q;  // pre-embedding query for the QLV term
                if (aggregated)
                    for (std::size_t dd = 0; dd < d; ++dd)
                        q[dd] += static_cast<double>(agg->qe[head * d + dd]);

                double scale;
                if (aggregated) {
                    const double tau = softplus(static_cast<double>(agg->tau_raw[head]));
                    scale = tau * std::log(static_cast<double>(
                                geom.effective_keys(static_cast<int>(i), static_cast<int>(j))));
                } else {
                    scale = 1.0 / std::sqrt(static_cast<double>(d));
                }

                std::vector<double> logits;
                std::vector<std::vector<double>> vals;
                std::vector<int> window_slot;
                for (int s = 0; s < slots; ++s) {
                    if (geom.masked(static_cast<int>(i), static_cast<int>(j), s)) continue;
                    const long ti = static_cast<long>(i) + s / k - half;
                    const long tj = static_cast<long>(j) + s % k - half;
                    auto k_all = detail::project_pixel(x, ti, tj, base.k_proj);
                    auto v_all = detail::project_pixel(x, ti, tj, base.v_proj);
                    std::vector<double> kv(k_all.begin() + head * d,
                                           k_all.begin() + (head + 1) * d);
                    if (aggregated) detail::l2_normalize(kv, 0, d);
                    double sim = 0.0;
                    for (std::size_t dd = 0; dd < d; ++dd) sim += q[dd] * kv[dd];
                    double logit = scale * sim +
                                   static_cast<double>(base.window_bias.at(head, s));
                    logits.push_back(logit);
                    vals.emplace_back(v_all.begin() + head * d, v_all.begin() + (head + 1) * d);
                    window_slot.push_back(s);
                }
                const std::size_t n_window = logits.size();
                for (std::size_t p = 0; p < plen; ++p) {
                    auto k_all = detail::project_pixel_d(sigma, p / pw, p % pw, base.k_proj);
                    auto v_all = detail::project_pixel_d(sigma, p / pw, p % pw, base.v_proj);
                    std::vector<double> kv(k_all.begin() + head * d,
                                           k_all.begin() + (head + 1) * d);
                    if (aggregated) detail::l2_normalize(kv, 0, d);
                    double sim = 0.0;
                    for (std::size_t dd = 0; dd < d; ++dd) sim += q[dd] * kv[dd];
                    double logit = scale * sim;
                    if (aggregated) {
                        // pointwise log-CPB: raw offsets against bucket centers
                        const std::size_t a = p / pw, b = p % pw;
                        const double cy = (static_cast<double>(pool_bucket_start(a, h, ph)) +
                                           static_cast<double>(pool_bucket_end(a, h, ph)) - 1.0) /
                                          2.0;
                        const double cx = (static_cast<double>(pool_bucket_start(b, w, pw)) +
                                           static_cast<double>(pool_bucket_end(b, w, pw)) - 1.0) /
                                          2.0;
                        auto logt = [](double delta) {
                            const double mag = std::log2(1.0 + std::abs(delta)) / 3.0;
                            return delta < 0 ? -mag : (delta > 0 ? mag : 0.0);
                        };
                        const double in0 = logt(static_cast<double>(i) - cy);
                        const double in1 = logt(static_cast<double>(j) - cx);
                        double bias = 0.0;
                        {
                            const auto& fc1 = agg->cpb.fc1;
                            const auto& fc2 = agg->cpb.fc2;
                            std::vector<double> hidden(fc1.out_dim());
                            for (std::size_t o = 0; o < fc1.out_dim(); ++o) {
                                double acc = static_cast<double>(fc1.bias[o]);
                                acc += static_cast<double>(fc1.weight.at(o, 0)) * in0;
                                acc += static_cast<double>(fc1.weight.at(o, 1)) * in1;
                                hidden[o] = acc > 0.0 ? acc : 0.0;
                            }
                            double acc = static_cast<double>(fc2.bias[head]);
                            for (std::size_t o = 0; o < fc1.out_dim(); ++o)
                                acc += static_cast<double>(fc2.weight.at(head, o)) * hidden[o];
                            bias = acc;
                        }
                        logit += bias;
                    }
                    logits.push_back(logit);
                    vals.emplace_back(v_all.begin() + head * d, v_all.begin() + (head + 1) * d);
                }

                double m = logits[0];
                for (double L : logits) m = std::max(m, L);
                double denom = 0.0;
                std::vector<double> weights(logits.size());
                for (std::size_t t = 0; t < logits.size(); ++t) {
                    weights[t] = std::exp(logits[t] - m);
                    denom += weights[t];
                }
                for (auto& wt : weights) wt /= denom;

                if (aggregated) {
                    for (std::size_t t = 0; t < n_window; ++t) {
                        double qt = 0.0;
                        for (std::size_t dd = 0; dd < d; ++dd)
                            qt += q_hat[dd] *
                                  static_cast<double>(
                                      agg->pos_tokens[(head * d + dd) * slots + window_slot[t]]);
                        weights[t] += qt;
                    }
                }

                for (std::size_t dd = 0; dd < d; ++dd) {
                    double acc = 0.0;
                    for (std::size_t t = 0; t < weights.size(); ++t)
                        acc += weights[t] * vals[t][dd];
                    out.at(head * d + dd, i, j) = static_cast<T>(acc);
                }
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> mhsa_ref(const Tensor<T>& x, const MhsaParams<T>& params) {
    const std::size_t h = x.dim(1), w = x.dim(2);
    const std::size_t heads = params.heads, d = params.head_dim;
    const std::size_t n = h * w;
    Tensor<T> out({x.dim(0), h, w});
    for (std::size_t pix = 0; pix < n; ++pix) {
        auto q_all = detail::project_pixel(x, pix / w, pix % w, params.q_proj);
        for (std::size_t head = 0; head < heads; ++head) {
            std::vector<double> q(q_all.begin() + head * d, q_all.begin() + (head + 1) * d);
            detail::l2_normalize(q, 0, d);
            for (std::size_t dd = 0; dd < d; ++dd)
                q[dd] += static_cast<double>(params.qe[head * d + dd]);
            const double tau = softplus(static_cast<double>(params.tau_raw[head]));
            const double scale = tau * std::log(static_cast<double>(n));
            std::vector<double> logits(n);
            std::vector<std::vector<double>> vals(n);
            for (std::size_t key = 0; key < n; ++key) {
                auto k_all = detail::project_pixel(x, key / w, key % w, params.k_proj);
                auto v_all = detail::project_pixel(x, key / w, key % w, params.v_proj);
                std::vector<double> kv(k_all.begin() + head * d, k_all.begin() + (head + 1) * d);
                detail::l2_normalize(kv, 0, d);
                double sim = 0.0;
                for (std::size_t dd = 0; dd < d; ++dd) sim += q[dd] * kv[dd];
                logits[key] = scale * sim;
                vals[key].assign(v_all.begin() + head * d, v_all.begin() + (head + 1) * d);
            }
            double m = logits[0];
            for (double L : logits) m = std::max(m, L);
            double denom = 0.0;
            for (auto& L : logits) {
                L = std::exp(L - m);
                denom += L;
            }
            for (std::size_t dd = 0; dd < d; ++dd) {
                double acc = 0.0;
                for (std::size_t key = 0; key < n; ++key)
                    acc += (logits[key] / denom) * vals[key][dd];
                out.at(head * d + dd, pix / w, pix % w) = static_cast<T>(acc);
            }
        }
    }
    return out;
}

// scalar ConvGLU composition, all four variants
template <typename T>
Tensor<T> conv_glu_ref(const Tensor<T>& x, const ConvGluParams<T>& params) {
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t hid = params.hidden();
    auto project = [&](const Tensor<double>& src, const LinearParams<T>& p) {
        const std::size_t ci = src.dim(0);
        Tensor<double> out({p.out_dim(), h, w});
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                for (std::size_t o = 0; o < p.out_dim(); ++o) {
                    double acc = static_cast<double>(p.bias[o]);
                    for (std::size_t cc = 0; cc < ci; ++cc)
                        acc += static_cast<double>(p.weight.at(o, cc)) * src.at(cc, i, j);
                    out.at(o, i, j) = acc;
                }
        return out;
    };
    auto gelu_t = [&](const Tensor<double>& src) {
        Tensor<double> out(src.dims());
        for (std::size_t i = 0; i < src.size(); ++i)
            out[i] = 0.5 * src[i] * (1.0 + std::erf(src[i] * 0.70710678118654752440));
        return out;
    };
    auto dw = [&](const Tensor<double>& src) {
        Tensor<double> out({hid, h, w});
        for (std::size_t ch = 0; ch < hid; ++ch)
            for (long i = 0; i < static_cast<long>(h); ++i)
                for (long j = 0; j < static_cast<long>(w); ++j) {
                    double acc = static_cast<double>(params.dw_bias[ch]);
                    for (long u = -1; u <= 1; ++u)
                        for (long v = -1; v <= 1; ++v) {
                            const long r = i + u, s = j + v;
                            if (r < 0 || r >= static_cast<long>(h) || s < 0 ||
                                s >= static_cast<long>(w))
                                continue;
                            acc += static_cast<double>(params.dw_filter.at(ch, u + 1, v + 1)) *
                                   src.at(ch, r, s);
                        }
                    out.at(ch, i, j) = acc;
                }
        return out;
    };
    auto mul = [](const Tensor<double>& a, const Tensor<double>& b) {
        Tensor<double> out(a.dims());
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
        return out;
    };

    Tensor<double> xd({c, h, w});
    for (std::size_t i = 0; i < x.size(); ++i) xd[i] = x[i];
    Tensor<double> value = project(xd, params.w1);
    Tensor<double> gate = project(xd, params.w2);
    Tensor<double> mixed;
    switch (params.variant) {
        case ConvGluVariant::ConvGLU: mixed = mul(value, gelu_t(dw(gate))); break;
        case ConvGluVariant::Type1: mixed = mul(value, dw(gelu_t(gate))); break;
        case ConvGluVariant::Type2: mixed = mul(dw(value), gelu_t(gate)); break;
        case ConvGluVariant::Type3: mixed = dw(mul(value, gelu_t(gate))); break;
    }
    Tensor<double> projected = project(mixed, params.w3);
    Tensor<T> out({c, h, w});
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(projected[i]);
    return out;
}

}  // namespace tnx::oracles
