#pragma once

#include <map>

#include "tnx/pfa.hpp"

namespace tnx {

// lambda = tau * ln(n_eff); masked tokens are excluded from n_eff upstream.
inline double length_scale(double tau, int n_eff) {
    if (n_eff <= 0) throw DomainError("length_scale requires at least one effective key");
    return tau * std::log(static_cast<double>(n_eff));
}

inline double softplus(double x) {
    if (x > 30.0) return x;
    return std::log1p(std::exp(x));
}

// pre-softplus value so that softplus(raw) == target
inline double softplus_inverse(double target) { return std::log(std::expm1(target)); }

// Unit l2 norm along the last axis, eps-guarded at 1e-12.
template <typename T>
Tensor<T> cosine_normalize(const Tensor<T>& x) {
    const std::size_t d = x.dim(x.rank() - 1);
    const std::size_t rows = x.size() / d;
    Tensor<T> out(x.dims());
    const T* px = x.data();
    T* po = out.data();
    parallel_for(rows, [&](std::size_t r) {
        double sum = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double v = px[r * d + i];
            sum += v * v;
        }
        const double norm = std::max(std::sqrt(sum), 1e-12);
        for (std::size_t i = 0; i < d; ++i)
            po[r * d + i] = static_cast<T>(px[r * d + i] / norm);
    }, 32);
    return out;
}

// --------------------------------------------------------------------------
// Log-spaced relative coordinates between query pixels and pooled-bucket
// centers. The per-axis offset sets are small, and the full pairwise table
// is their cross product, so only the unique axis values are stored; the
// transformed 2-vector for (query, key) is (axis_h[idx_h], axis_w[idx_w]).
// Transform: sign(delta) * log2(1 + |delta|) / log2(8), delta measured in
// feature-pixel units against adaptive-pool bucket centers.
// --------------------------------------------------------------------------
template <typename T>
struct RelativeCoords {
    int h = 0, w = 0, pool_h = 0, pool_w = 0;
    std::vector<T> axis_h;  // unique transformed offsets per axis
    std::vector<T> axis_w;
    std::vector<std::uint32_t> idx_h;  // [h * pool_h]
    std::vector<std::uint32_t> idx_w;  // [w * pool_w]

    std::size_t unique_rows() const { return axis_h.size() * axis_w.size(); }

    // contract-shape view: [h*w, pool_h*pool_w, 2]
    Tensor<T> materialize() const {
        const std::size_t rows = static_cast<std::size_t>(h) * w;
        const std::size_t plen = static_cast<std::size_t>(pool_h) * pool_w;
        Tensor<T> out({rows, plen, 2});
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                for (int a = 0; a < pool_h; ++a)
                    for (int b = 0; b < pool_w; ++b) {
                        const std::size_t row = static_cast<std::size_t>(i) * w + j;
                        const std::size_t p = static_cast<std::size_t>(a) * pool_w + b;
                        out.at(row, p, 0) = axis_h[idx_h[static_cast<std::size_t>(i) * pool_h + a]];
                        out.at(row, p, 1) = axis_w[idx_w[static_cast<std::size_t>(j) * pool_w + b]];
                    }
        return out;
    }
};

namespace detail {

template <typename T>
T log_spaced(double delta) {
    const double mag = std::log2(1.0 + std::abs(delta)) / 3.0;  // log2(8) == 3
    return static_cast<T>(delta < 0 ? -mag : (delta > 0 ? mag : 0.0));
}

// Unique raw offsets along one axis between query index i and bucket
// centers (start+end-1)/2. Doubled offsets are integers, which makes the
// uniquing exact.
template <typename T>
void build_axis(int extent, int pool, std::vector<T>& axis, std::vector<std::uint32_t>& idx) {
    std::map<long, std::uint32_t> uniq;
    std::vector<long> doubled(static_cast<std::size_t>(extent) * pool);
    for (int i = 0; i < extent; ++i) {
        for (int a = 0; a < pool; ++a) {
            const long s = static_cast<long>(pool_bucket_start(a, extent, pool));
            const long e = static_cast<long>(pool_bucket_end(a, extent, pool));
            const long two_delta = 2L * i - (s + e - 1);
            doubled[static_cast<std::size_t>(i) * pool + a] = two_delta;
            uniq.emplace(two_delta, 0);
        }
    }
    std::uint32_t next = 0;
    for (auto& [key, slot] : uniq) slot = next++;
    axis.resize(uniq.size());
    for (const auto& [key, slot] : uniq)
        axis[slot] = log_spaced<T>(static_cast<double>(key) / 2.0);
    idx.resize(doubled.size());
    for (std::size_t t = 0; t < doubled.size(); ++t) idx[t] = uniq[doubled[t]];
}

}  // namespace detail

template <typename T>
RelativeCoords<T> build_relative_coords(int h, int w, int pool_h, int pool_w) {
    if (h <= 0 || w <= 0 || pool_h <= 0 || pool_w <= 0 || pool_h > h || pool_w > w)
        throw ShapeError("relative coords: invalid extents");
    RelativeCoords<T> rc;
    rc.h = h;
    rc.w = w;
    rc.pool_h = pool_h;
    rc.pool_w = pool_w;
    detail::build_axis(h, pool_h, rc.axis_h, rc.idx_h);
    detail::build_axis(w, pool_w, rc.axis_w, rc.idx_w);
    return rc;
}

template <typename T>
struct CpbMlp {
    LinearParams<T> fc1;  // [hidden, 2]
    LinearParams<T> fc2;  // [heads, hidden]
};

// Compact continuous-position-bias table: the MLP is evaluated once per
// unique relative coordinate; queries index into the grid.
template <typename T>
struct CpbGrid {
    std::size_t n_uh = 0, n_uw = 0;
    Tensor<T> values;                  // [heads, n_uh, n_uw]
    std::vector<std::uint32_t> idx_h;  // [h * pool_h]
    std::vector<std::uint32_t> idx_w;  // [w * pool_w]
    int pool_h = 0, pool_w = 0, w = 0;

    double bias(int head, int pix, int p) const {
        const int qi = pix / w, qj = pix % w;
        const int pa = p / pool_w, pb = p % pool_w;
        return values.at(static_cast<std::size_t>(head),
                         idx_h[static_cast<std::size_t>(qi) * pool_h + pa],
                         idx_w[static_cast<std::size_t>(qj) * pool_w + pb]);
    }
};

template <typename T>
CpbGrid<T> build_cpb_grid(const RelativeCoords<T>& coords, const CpbMlp<T>& mlp) {
    const std::size_t n_uh = coords.axis_h.size(), n_uw = coords.axis_w.size();
    const std::size_t heads = mlp.fc2.out_dim();
    Tensor<T> table({n_uh * n_uw, 2});
    for (std::size_t a = 0; a < n_uh; ++a)
        for (std::size_t b = 0; b < n_uw; ++b) {
            table.at(a * n_uw + b, 0) = coords.axis_h[a];
            table.at(a * n_uw + b, 1) = coords.axis_w[b];
        }
    Tensor<T> hidden = linear(table, mlp.fc1);
    for (std::size_t i = 0; i < hidden.size(); ++i)
        if (hidden[i] < T(0)) hidden[i] = T(0);
    Tensor<T> out = linear(hidden, mlp.fc2);  // [n_u, heads]
    CpbGrid<T> grid;
    grid.n_uh = n_uh;
    grid.n_uw = n_uw;
    grid.values = Tensor<T>({heads, n_uh, n_uw});
    for (std::size_t u = 0; u < n_uh * n_uw; ++u)
        for (std::size_t head = 0; head < heads; ++head)
            grid.values[head * n_uh * n_uw + u] = out[u * heads + head];
    grid.idx_h = coords.idx_h;
    grid.idx_w = coords.idx_w;
    grid.pool_h = coords.pool_h;
    grid.pool_w = coords.pool_w;
    grid.w = coords.w;
    return grid;
}

// Contract-shape bias: [heads, h*w, pool_h*pool_w]. Defined for any
// resolution; no table resize is ever needed.
template <typename T>
Tensor<T> log_cpb(const RelativeCoords<T>& coords, const CpbMlp<T>& mlp) {
    const CpbGrid<T> grid = build_cpb_grid(coords, mlp);
    const std::size_t heads = mlp.fc2.out_dim();
    const std::size_t rows = static_cast<std::size_t>(coords.h) * coords.w;
    const std::size_t plen = static_cast<std::size_t>(coords.pool_h) * coords.pool_w;
    Tensor<T> out({heads, rows, plen});
    for (std::size_t head = 0; head < heads; ++head)
        for (std::size_t pix = 0; pix < rows; ++pix)
            for (std::size_t p = 0; p < plen; ++p)
                out.at(head, pix, p) = static_cast<T>(
                    grid.bias(static_cast<int>(head), static_cast<int>(pix), static_cast<int>(p)));
    return out;
}

// Bilinear resample over a [heads, src_h, src_w] grid (align-corners), the
// traditional interpolation scheme for relative position bias tables.
template <typename T>
Tensor<T> interpolate_bias(const Tensor<T>& bias, std::size_t new_h, std::size_t new_w) {
    if (bias.rank() != 3) throw ShapeError("interpolate_bias expects [heads, h, w]");
    if (new_h == 0 || new_w == 0) throw ShapeError("interpolate_bias target extent is zero");
    const std::size_t heads = bias.dim(0), sh = bias.dim(1), sw = bias.dim(2);
    Tensor<T> out({heads, new_h, new_w});
    for (std::size_t head = 0; head < heads; ++head) {
        for (std::size_t i = 0; i < new_h; ++i) {
            const double fy = new_h == 1 ? 0.0
                                         : static_cast<double>(i) * (sh - 1) / (new_h - 1);
            const std::size_t y0 = static_cast<std::size_t>(fy);
            const std::size_t y1 = std::min(y0 + 1, sh - 1);
            const double ty = fy - static_cast<double>(y0);
            for (std::size_t j = 0; j < new_w; ++j) {
                const double fx = new_w == 1 ? 0.0
                                             : static_cast<double>(j) * (sw - 1) / (new_w - 1);
                const std::size_t x0 = static_cast<std::size_t>(fx);
                const std::size_t x1 = std::min(x0 + 1, sw - 1);
                const double tx = fx - static_cast<double>(x0);
                const double v00 = bias.at(head, y0, x0), v01 = bias.at(head, y0, x1);
                const double v10 = bias.at(head, y1, x0), v11 = bias.at(head, y1, x1);
                const double top = v00 * (1.0 - tx) + v01 * tx;
                const double bot = v10 * (1.0 - tx) + v11 * tx;
                out.at(head, i, j) = static_cast<T>(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    return out;
}

// --------------------------------------------------------------------------
// Aggregated attention.
// --------------------------------------------------------------------------
template <typename T>
struct AggAttentionParams {
    PfaParams<T> base;
    Tensor<T> qe;          // [heads, d]
    Tensor<T> pos_tokens;  // [heads, d, k*k]
    Tensor<T> tau_raw;     // [heads], pre-softplus
    CpbMlp<T> cpb;
};

enum class SimilarityScaling {
    LengthScaledCosine,  // l2-normalized q/k, logits scaled by tau*ln(n_eff)
    InvSqrtHeadDim,      // raw q/k, logits scaled by 1/sqrt(d)
};

template <typename T>
detail::DualPathResult<T> aggregated_attention_detailed(const Tensor<T>& x,
                                                        const AggAttentionParams<T>& params,
                                                        const WindowGeometry& geom,
                                                        const CpbGrid<T>& pool_bias,
                                                        SimilarityScaling scaling,
                                                        bool keep_rows = false) {
    const PfaParams<T>& base = params.base;
    if (x.rank() != 3 || x.dim(0) != static_cast<std::size_t>(base.channels()) ||
        x.dim(1) != static_cast<std::size_t>(geom.h) ||
        x.dim(2) != static_cast<std::size_t>(geom.w))
        throw ShapeError("aggregated attention input does not match params/geometry");
    const std::size_t heads = base.heads, d = base.head_dim;
    const std::size_t rows = static_cast<std::size_t>(geom.h) * geom.w;
    const bool cosine = scaling == SimilarityScaling::LengthScaledCosine;

    Tensor<T> xrows = chw_to_rows(x);
    Tensor<T> q = detail::split_heads(linear(xrows, base.q_proj), heads, d);
    Tensor<T> k = detail::split_heads(linear(xrows, base.k_proj), heads, d);
    Tensor<T> v = detail::split_heads(linear(xrows, base.v_proj), heads, d);
    Tensor<T> sigma_rows = chw_to_rows(activate_and_pool(x, base, geom.pool_h, geom.pool_w));
    Tensor<T> kp = detail::split_heads(linear(sigma_rows, base.k_proj), heads, d);
    Tensor<T> vp = detail::split_heads(linear(sigma_rows, base.v_proj), heads, d);

    if (cosine) {
        q = cosine_normalize(q);
        k = cosine_normalize(k);
        kp = cosine_normalize(kp);
    }

    // positional attention term: qt[h, pix, s] = <q_hat, T[h,:,s]>
    const int slots = geom.slots();
    Tensor<T> qt({heads, rows, static_cast<std::size_t>(slots)});
    count_muls(static_cast<std::uint64_t>(heads) * rows * slots * d);
    parallel_for(heads * rows, [&](std::size_t hp) {
        const std::size_t head = hp / rows, pix = hp % rows;
        const T* qv = q.data() + (head * rows + pix) * d;
        T* orow = qt.data() + (head * rows + pix) * slots;
        for (int s = 0; s < slots; ++s) {
            double acc = 0.0;
            for (std::size_t dd = 0; dd < d; ++dd)
                acc += static_cast<double>(qv[dd]) *
                       static_cast<double>(params.pos_tokens[(head * d + dd) * slots + s]);
            orow[s] = static_cast<T>(acc);
        }
    }, 8);

    // queries carry the embedding on both similarity paths
    Tensor<T> q_shifted(q.dims());
    for (std::size_t head = 0; head < heads; ++head)
        for (std::size_t pix = 0; pix < rows; ++pix)
            for (std::size_t dd = 0; dd < d; ++dd)
                q_shifted[(head * rows + pix) * d + dd] =
                    q[(head * rows + pix) * d + dd] + params.qe[head * d + dd];

    detail::DualPathSpec<T> spec;
    spec.geom = &geom;
    spec.window_bias = &base.window_bias;
    spec.qt = &qt;
    std::vector<double> taus(heads);
    for (std::size_t head = 0; head < heads; ++head)
        taus[head] = softplus(static_cast<double>(params.tau_raw[head]));
    if (cosine) {
        const WindowGeometry* g = &geom;
        auto taus_copy = taus;
        spec.scale = [g, taus_copy](int head, int pix) {
            return length_scale(taus_copy[head], g->n_eff[pix]);
        };
        spec.pool_bias = [&pool_bias](int head, int pix, int p) {
            return pool_bias.bias(head, pix, p);
        };
    } else {
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
        spec.scale = [inv_sqrt_d](int, int) { return inv_sqrt_d; };
        spec.pool_bias = [&pool_bias](int head, int pix, int p) {
            return pool_bias.bias(head, pix, p);
        };
    }
    return detail::dual_path_attention(q_shifted, k, v, kp, vp, spec, keep_rows);
}

template <typename T>
Tensor<T> aggregated_attention_forward(const Tensor<T>& x, const AggAttentionParams<T>& params,
                                       const WindowGeometry& geom,
                                       const RelativeCoords<T>& coords,
                                       SimilarityScaling scaling =
                                           SimilarityScaling::LengthScaledCosine) {
    const CpbGrid<T> grid = build_cpb_grid(coords, params.cpb);
    return rows_to_chw(
        aggregated_attention_detailed(x, params, geom, grid, scaling).out_rows, geom.h, geom.w);
}

// --------------------------------------------------------------------------
// Stage-4 mixer: full MHSA with query embedding and length-scaled cosine
// attention; positional information comes from the channel mixer's
// depthwise convolution, so no relative bias here.
// --------------------------------------------------------------------------
template <typename T>
struct MhsaParams {
    LinearParams<T> q_proj, k_proj, v_proj;
    Tensor<T> qe;       // [heads, d]
    Tensor<T> tau_raw;  // [heads]
    int heads = 0;
    int head_dim = 0;

    int channels() const { return heads * head_dim; }
};

template <typename T>
Tensor<T> mhsa_stage4_forward(const Tensor<T>& x, const MhsaParams<T>& params) {
    if (x.rank() != 3 || x.dim(0) != static_cast<std::size_t>(params.channels()))
        throw ShapeError("mhsa input does not match params");
    const std::size_t heads = params.heads, d = params.head_dim;
    const std::size_t h = x.dim(1), w = x.dim(2), rows = h * w;
    Tensor<T> xrows = chw_to_rows(x);
    Tensor<T> q = cosine_normalize(detail::split_heads(linear(xrows, params.q_proj), heads, d));
    Tensor<T> k = cosine_normalize(detail::split_heads(linear(xrows, params.k_proj), heads, d));
    Tensor<T> v = detail::split_heads(linear(xrows, params.v_proj), heads, d);

    Tensor<T> out_heads({heads, rows, d});
    count_muls(2 * static_cast<std::uint64_t>(heads) * rows * rows * d);
    parallel_for(heads * rows, [&](std::size_t hp) {
        const std::size_t head = hp / rows, pix = hp % rows;
        const double scale =
            length_scale(softplus(static_cast<double>(params.tau_raw[head])),
                         static_cast<int>(rows));
        std::vector<double> logits(rows);
        const T* qv = q.data() + (head * rows + pix) * d;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t key = 0; key < rows; ++key) {
            const T* kv = k.data() + (head * rows + key) * d;
            double acc = 0.0;
            for (std::size_t dd = 0; dd < d; ++dd)
                acc += (static_cast<double>(qv[dd]) + params.qe[head * d + dd]) *
                       static_cast<double>(kv[dd]);
            logits[key] = scale * acc;
            m = std::max(m, logits[key]);
        }
        double denom = 0.0;
        for (std::size_t key = 0; key < rows; ++key) {
            logits[key] = std::exp(logits[key] - m);
            denom += logits[key];
        }
        T* orow = out_heads.data() + (head * rows + pix) * d;
        for (std::size_t dd = 0; dd < d; ++dd) {
            double acc = 0.0;
            for (std::size_t key = 0; key < rows; ++key)
                acc += (logits[key] / denom) * static_cast<double>(v[(head * rows + key) * d + dd]);
            orow[dd] = static_cast<T>(acc);
        }
    }, 2);
    return rows_to_chw(detail::merge_heads(out_heads), h, w);
}

}  // namespace tnx
