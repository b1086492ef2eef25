#pragma once

#include <algorithm>
#include <atomic>
#include <limits>

#include "tnx/geometry.hpp"
#include "tnx/tensor.hpp"

namespace tnx {

// Scratch accounting for the kernel bench. Temporary buffers are obtained
// through the workspace so the high-water mark can be asserted: the fused
// path must stay at one halo tile per worker while the naive path grows
// with H*W.
struct KernelWorkspace {
    int tile_h = 8;
    int tile_w = 8;
    int max_workers = 0;  // 0 = library thread count

    std::atomic<std::size_t> current_bytes{0};
    std::atomic<std::size_t> peak_bytes{0};

    void on_alloc(std::size_t bytes) {
        const std::size_t now = current_bytes.fetch_add(bytes) + bytes;
        std::size_t prev = peak_bytes.load();
        while (prev < now && !peak_bytes.compare_exchange_weak(prev, now)) {
        }
    }
    void on_free(std::size_t bytes) { current_bytes.fetch_sub(bytes); }

    int workers() const { return max_workers > 0 ? max_workers : thread_count(); }
};

template <typename T>
class Scratch {
public:
    Scratch(KernelWorkspace& ws, std::size_t n) : ws_(ws), buf_(n) {
        ws_.on_alloc(n * sizeof(T));
    }
    ~Scratch() { ws_.on_free(buf_.size() * sizeof(T)); }
    T* data() { return buf_.data(); }
    T& operator[](std::size_t i) { return buf_[i]; }

private:
    KernelWorkspace& ws_;
    std::vector<T> buf_;
};

namespace detail {

template <typename T>
void check_qk_shapes(const Tensor<T>& q, const Tensor<T>& k, const WindowGeometry& g) {
    if (q.rank() != 4 || k.rank() != 4 || !q.same_shape(k))
        throw ShapeError("window qk expects matching [heads,H,W,d] tensors");
    if (q.dim(1) != static_cast<std::size_t>(g.h) || q.dim(2) != static_cast<std::size_t>(g.w))
        throw ShapeError("window qk extents do not match geometry");
}

// Fixed inner-product order: slot-major then d ascending, f64 accumulation,
// one rounding at the store. Both the fused and the naive path go through
// these two helpers so bit-equality is structural.
template <typename T>
inline T dot_f64(const T* a, const T* b, std::size_t d) {
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i)
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return static_cast<T>(acc);
}

}  // namespace detail

// --------------------------------------------------------------------------
// logits[h,i,j,s] = <q[h,i,j,:], k[h, slot s of (i,j), :]>, masked slots get
// the most-negative finite sentinel. Streams over output tiles; per tile it
// packs the k-halo once into workspace scratch, so scratch is O(tile) and
// the unfolded [heads,H*W,k^2,d] tensor never exists.
// --------------------------------------------------------------------------
template <typename T>
Tensor<T> fused_window_qk(const Tensor<T>& q, const Tensor<T>& k, const WindowGeometry& geom,
                          KernelWorkspace& ws) {
    detail::check_qk_shapes(q, k, geom);
    const std::size_t heads = q.dim(0), h = q.dim(1), w = q.dim(2), d = q.dim(3);
    const int kk = geom.k, slots = geom.slots(), half = kk / 2;
    constexpr T kNegSentinel = std::numeric_limits<T>::lowest();
    Tensor<T> out({heads, h, w, static_cast<std::size_t>(slots)});

    const std::size_t tiles_i = (h + ws.tile_h - 1) / ws.tile_h;
    const std::size_t tiles_j = (w + ws.tile_w - 1) / ws.tile_w;
    const std::size_t tasks = heads * tiles_i * tiles_j;
    const std::size_t prev_threads = static_cast<std::size_t>(ws.workers());

    auto run_tile = [&](std::size_t task) {
        const std::size_t head = task / (tiles_i * tiles_j);
        const std::size_t rest = task % (tiles_i * tiles_j);
        const std::size_t ti = rest / tiles_j, tj = rest % tiles_j;
        const int i0 = static_cast<int>(ti) * ws.tile_h;
        const int j0 = static_cast<int>(tj) * ws.tile_w;
        const int i1 = std::min<int>(i0 + ws.tile_h, static_cast<int>(h));
        const int j1 = std::min<int>(j0 + ws.tile_w, static_cast<int>(w));
        const int halo_h = ws.tile_h + kk - 1, halo_w = ws.tile_w + kk - 1;
        Scratch<T> halo(ws, static_cast<std::size_t>(halo_h) * halo_w * d);
        // pack K halo (out-of-bounds rows stay zero; masked slots never read)
        std::fill(halo.data(), halo.data() + static_cast<std::size_t>(halo_h) * halo_w * d, T(0));
        for (int r = i0 - half; r < i1 + half; ++r) {
            if (r < 0 || r >= static_cast<int>(h)) continue;
            for (int c = j0 - half; c < j1 + half; ++c) {
                if (c < 0 || c >= static_cast<int>(w)) continue;
                const T* src = k.data() + ((head * h + r) * w + c) * d;
                T* dst = halo.data() +
                         (static_cast<std::size_t>(r - (i0 - half)) * halo_w + (c - (j0 - half))) * d;
                std::copy(src, src + d, dst);
            }
        }
        for (int i = i0; i < i1; ++i) {
            for (int j = j0; j < j1; ++j) {
                const T* qv = q.data() + ((head * h + i) * w + j) * d;
                T* orow = out.data() + (((head * h + i) * w + j)) * slots;
                for (int s = 0; s < slots; ++s) {
                    if (geom.masked(i, j, s)) {
                        orow[s] = kNegSentinel;
                        continue;
                    }
                    const int hr = i - i0 + s / kk;  // halo-local row
                    const int hc = j - j0 + s % kk;
                    orow[s] = detail::dot_f64(
                        qv, halo.data() + (static_cast<std::size_t>(hr) * halo_w + hc) * d, d);
                }
            }
        }
    };

    if (prev_threads <= 1) {
        for (std::size_t t = 0; t < tasks; ++t) run_tile(t);
    } else {
        parallel_for(tasks, run_tile, std::max<std::size_t>(1, tasks / prev_threads));
    }
    count_muls(heads * geom.total_window_keys * d);
    return out;
}

// --------------------------------------------------------------------------
// out[h,i,j,:] = sum_s attn[h,i,j,s] * v[slot s]; masked / out-of-bounds
// slots contribute nothing. Same tile streaming as fused_window_qk.
// --------------------------------------------------------------------------
template <typename T>
Tensor<T> fused_window_av(const Tensor<T>& attn, const Tensor<T>& v, const WindowGeometry& geom,
                          KernelWorkspace& ws) {
    if (attn.rank() != 4 || v.rank() != 4) throw ShapeError("window av expects rank-4 tensors");
    const std::size_t heads = v.dim(0), h = v.dim(1), w = v.dim(2), d = v.dim(3);
    const int kk = geom.k, slots = geom.slots(), half = kk / 2;
    if (attn.dim(0) != heads || attn.dim(1) != h || attn.dim(2) != w ||
        attn.dim(3) != static_cast<std::size_t>(slots))
        throw ShapeError("window av attention shape mismatch");
    Tensor<T> out({heads, h, w, d});

    const std::size_t tiles_i = (h + ws.tile_h - 1) / ws.tile_h;
    const std::size_t tiles_j = (w + ws.tile_w - 1) / ws.tile_w;
    const std::size_t tasks = heads * tiles_i * tiles_j;
    const std::size_t prev_threads = static_cast<std::size_t>(ws.workers());

    auto run_tile = [&](std::size_t task) {
        const std::size_t head = task / (tiles_i * tiles_j);
        const std::size_t rest = task % (tiles_i * tiles_j);
        const std::size_t ti = rest / tiles_j, tj = rest % tiles_j;
        const int i0 = static_cast<int>(ti) * ws.tile_h;
        const int j0 = static_cast<int>(tj) * ws.tile_w;
        const int i1 = std::min<int>(i0 + ws.tile_h, static_cast<int>(h));
        const int j1 = std::min<int>(j0 + ws.tile_w, static_cast<int>(w));
        const int halo_h = ws.tile_h + kk - 1, halo_w = ws.tile_w + kk - 1;
        Scratch<T> halo(ws, static_cast<std::size_t>(halo_h) * halo_w * d);
        std::fill(halo.data(), halo.data() + static_cast<std::size_t>(halo_h) * halo_w * d, T(0));
        for (int r = i0 - half; r < i1 + half; ++r) {
            if (r < 0 || r >= static_cast<int>(h)) continue;
            for (int c = j0 - half; c < j1 + half; ++c) {
                if (c < 0 || c >= static_cast<int>(w)) continue;
                const T* src = v.data() + ((head * h + r) * w + c) * d;
                T* dst = halo.data() +
                         (static_cast<std::size_t>(r - (i0 - half)) * halo_w + (c - (j0 - half))) * d;
                std::copy(src, src + d, dst);
            }
        }
        for (int i = i0; i < i1; ++i) {
            for (int j = j0; j < j1; ++j) {
                const T* arow = attn.data() + ((head * h + i) * w + j) * slots;
                T* orow = out.data() + ((head * h + i) * w + j) * d;
                for (std::size_t dd = 0; dd < d; ++dd) {
                    double acc = 0.0;
                    for (int s = 0; s < slots; ++s) {
                        if (geom.masked(i, j, s)) continue;
                        const int hr = i - i0 + s / kk;
                        const int hc = j - j0 + s % kk;
                        acc += static_cast<double>(arow[s]) *
                               static_cast<double>(
                                   halo[(static_cast<std::size_t>(hr) * halo_w + hc) * d + dd]);
                    }
                    orow[dd] = static_cast<T>(acc);
                }
            }
        }
    };

    if (prev_threads <= 1) {
        for (std::size_t t = 0; t < tasks; ++t) run_tile(t);
    } else {
        parallel_for(tasks, run_tile, std::max<std::size_t>(1, tasks / prev_threads));
    }
    count_muls(heads * geom.total_window_keys * d);
    return out;
}

// --------------------------------------------------------------------------
// Reference path: explicitly materialize the unfolded [heads,H*W,k^2,d]
// tensor, then run the same inner products in the same order.
// --------------------------------------------------------------------------
template <typename T>
Tensor<T> naive_unfold(const Tensor<T>& x, const WindowGeometry& geom, KernelWorkspace& ws,
                       Scratch<T>& buf) {
    (void)ws;
    const std::size_t heads = x.dim(0), h = x.dim(1), w = x.dim(2), d = x.dim(3);
    const int kk = geom.k, slots = geom.slots(), half = kk / 2;
    for (std::size_t head = 0; head < heads; ++head) {
        for (int i = 0; i < static_cast<int>(h); ++i) {
            for (int j = 0; j < static_cast<int>(w); ++j) {
                for (int s = 0; s < slots; ++s) {
                    T* dst = buf.data() +
                             (((head * h + i) * w + j) * slots + s) * d;
                    const int ti = i + s / kk - half, tj = j + s % kk - half;
                    if (ti < 0 || ti >= static_cast<int>(h) || tj < 0 ||
                        tj >= static_cast<int>(w)) {
                        std::fill(dst, dst + d, T(0));
                    } else {
                        const T* src = x.data() + ((head * h + ti) * w + tj) * d;
                        std::copy(src, src + d, dst);
                    }
                }
            }
        }
    }
    return Tensor<T>();  // buffer lives in `buf`; return value unused
}

template <typename T>
Tensor<T> naive_unfold_qk(const Tensor<T>& q, const Tensor<T>& k, const WindowGeometry& geom,
                          KernelWorkspace& ws) {
    detail::check_qk_shapes(q, k, geom);
    const std::size_t heads = q.dim(0), h = q.dim(1), w = q.dim(2), d = q.dim(3);
    const int slots = geom.slots();
    constexpr T kNegSentinel = std::numeric_limits<T>::lowest();
    Scratch<T> unfolded(ws, heads * h * w * static_cast<std::size_t>(slots) * d);
    naive_unfold(k, geom, ws, unfolded);
    Tensor<T> out({heads, h, w, static_cast<std::size_t>(slots)});
    for (std::size_t head = 0; head < heads; ++head) {
        for (int i = 0; i < static_cast<int>(h); ++i) {
            for (int j = 0; j < static_cast<int>(w); ++j) {
                const T* qv = q.data() + ((head * h + i) * w + j) * d;
                T* orow = out.data() + ((head * h + i) * w + j) * slots;
                for (int s = 0; s < slots; ++s) {
                    if (geom.masked(i, j, s)) {
                        orow[s] = kNegSentinel;
                        continue;
                    }
                    orow[s] = detail::dot_f64(
                        qv, unfolded.data() + (((head * h + i) * w + j) * slots + s) * d, d);
                }
            }
        }
    }
    count_muls(heads * geom.total_window_keys * d);
    return out;
}

template <typename T>
Tensor<T> naive_unfold_av(const Tensor<T>& attn, const Tensor<T>& v, const WindowGeometry& geom,
                          KernelWorkspace& ws) {
    const std::size_t heads = v.dim(0), h = v.dim(1), w = v.dim(2), d = v.dim(3);
    const int slots = geom.slots();
    if (attn.dim(3) != static_cast<std::size_t>(slots))
        throw ShapeError("naive av attention shape mismatch");
    Scratch<T> unfolded(ws, heads * h * w * static_cast<std::size_t>(slots) * d);
    naive_unfold(v, geom, ws, unfolded);
    Tensor<T> out({heads, h, w, d});
    for (std::size_t head = 0; head < heads; ++head) {
        for (int i = 0; i < static_cast<int>(h); ++i) {
            for (int j = 0; j < static_cast<int>(w); ++j) {
                const T* arow = attn.data() + ((head * h + i) * w + j) * slots;
                T* orow = out.data() + ((head * h + i) * w + j) * d;
                for (std::size_t dd = 0; dd < d; ++dd) {
                    double acc = 0.0;
                    for (int s = 0; s < slots; ++s) {
                        if (geom.masked(i, j, s)) continue;
                        acc += static_cast<double>(arow[s]) *
                               static_cast<double>(
                                   unfolded[(((head * h + i) * w + j) * slots + s) * d + dd]);
                    }
                    orow[dd] = static_cast<T>(acc);
                }
            }
        }
    }
    count_muls(heads * geom.total_window_keys * d);
    return out;
}

// --------------------------------------------------------------------------
// Analytic gradients of the two window ops, gather-form so the result is
// independent of tiling and thread count.
//   logits = window_qk(q, k): d_logits flows to dq, dk
//   out    = window_av(attn, v): d_out flows to dattn, dv
// --------------------------------------------------------------------------
template <typename T>
struct WindowGrads {
    Tensor<T> dq, dk, dv, dattn;
};

template <typename T>
WindowGrads<T> fused_window_backward(const Tensor<T>& d_logits, const Tensor<T>& d_out,
                                     const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                     const Tensor<T>& attn, const WindowGeometry& geom) {
    detail::check_qk_shapes(q, k, geom);
    const std::size_t heads = q.dim(0), h = q.dim(1), w = q.dim(2), d = q.dim(3);
    const int kk = geom.k, slots = geom.slots(), half = kk / 2;
    if (d_logits.dims() != attn.dims() || d_out.dims() != v.dims())
        throw ShapeError("window backward upstream gradient shape mismatch");
    WindowGrads<T> g;
    g.dq = Tensor<T>({heads, h, w, d});
    g.dk = Tensor<T>({heads, h, w, d});
    g.dv = Tensor<T>({heads, h, w, d});
    g.dattn = Tensor<T>({heads, h, w, static_cast<std::size_t>(slots)});

    auto idx = [&](std::size_t head, int i, int j) { return ((head * h + i) * w + j); };

    parallel_for(heads * h, [&](std::size_t row) {
        const std::size_t head = row / h;
        const int i = static_cast<int>(row % h);
        for (int j = 0; j < static_cast<int>(w); ++j) {
            const std::size_t p = idx(head, i, j);
            // dq and dattn: gathers over the query's own window
            for (std::size_t dd = 0; dd < d; ++dd) {
                double acc = 0.0;
                for (int s = 0; s < slots; ++s) {
                    if (geom.masked(i, j, s)) continue;
                    const int ti = i + s / kk - half, tj = j + s % kk - half;
                    acc += static_cast<double>(d_logits[p * slots + s]) *
                           static_cast<double>(k[idx(head, ti, tj) * d + dd]);
                }
                g.dq[p * d + dd] = static_cast<T>(acc);
            }
            for (int s = 0; s < slots; ++s) {
                if (geom.masked(i, j, s)) {
                    g.dattn[p * slots + s] = T(0);
                    continue;
                }
                const int ti = i + s / kk - half, tj = j + s % kk - half;
                g.dattn[p * slots + s] = detail::dot_f64(
                    d_out.data() + p * d, v.data() + idx(head, ti, tj) * d, d);
            }
            // dk and dv: reverse gathers over the queries whose window
            // covers pixel (i, j); slot s seen from query (i,j)-offset(s)
            for (std::size_t dd = 0; dd < d; ++dd) {
                double acc_k = 0.0, acc_v = 0.0;
                for (int s = 0; s < slots; ++s) {
                    const int qi = i - (s / kk - half), qj = j - (s % kk - half);
                    if (qi < 0 || qi >= static_cast<int>(h) || qj < 0 ||
                        qj >= static_cast<int>(w))
                        continue;
                    // slot s of query (qi,qj) targets (i,j) and is in bounds
                    const std::size_t qp = idx(head, qi, qj);
                    acc_k += static_cast<double>(d_logits[qp * slots + s]) *
                             static_cast<double>(q[qp * d + dd]);
                    acc_v += static_cast<double>(attn[qp * slots + s]) *
                             static_cast<double>(d_out[qp * d + dd]);
                }
                g.dk[p * d + dd] = static_cast<T>(acc_k);
                g.dv[p * d + dd] = static_cast<T>(acc_v);
            }
        }
    });
    return g;
}

// Bench result for one kernel case; one CSV row per run.
struct BenchResult {
    std::string kernel_case;
    int h = 0, w = 0, c = 0, heads = 0, k = 0, iters = 0;
    double ns_per_iter = 0.0;
    std::size_t scratch_bytes = 0;
};

BenchResult run_bench(const std::string& kernel_case, int h, int w, int c, int heads, int k,
                      int iters, int tile, std::uint64_t seed);

}  // namespace tnx
