#pragma once

#include <cstdint>
#include <vector>

#include "tnx/common.hpp"

namespace tnx {

// Sliding-window geometry for one feature resolution. Window slots are
// enumerated row-major with the center at slot (k*k-1)/2; mask marks slots
// whose target pixel falls outside [0,h) x [0,w). n_eff counts the keys a
// query actually attends to: k^2 + pool_h*pool_w - masked slots.
struct WindowGeometry {
    int k = 0;
    int h = 0, w = 0;
    int pool_h = 0, pool_w = 0;
    std::vector<std::uint8_t> mask;  // [h, w, k*k]
    std::vector<int> n_eff;          // [h, w]
    std::uint64_t total_window_keys = 0;  // unmasked window slots over all pixels

    int slots() const { return k * k; }
    int pool_len() const { return pool_h * pool_w; }

    bool masked(int i, int j, int s) const {
        return mask[(static_cast<std::size_t>(i) * w + j) * slots() + s] != 0;
    }
    int effective_keys(int i, int j) const { return n_eff[static_cast<std::size_t>(i) * w + j]; }

    // target pixel of window slot s for query (i, j); may be out of bounds
    void slot_target(int i, int j, int s, int& ti, int& tj) const {
        const int half = k / 2;
        ti = i + s / k - half;
        tj = j + s % k - half;
    }
};

inline WindowGeometry build_geometry(int h, int w, int k, int pool_h, int pool_w) {
    if (k <= 0 || k % 2 == 0) throw ConfigError("window extent must be odd and positive");
    if (h <= 0 || w <= 0) throw ShapeError("feature extents must be positive");
    if (pool_h < 0 || pool_w < 0 || pool_h > h || pool_w > w)
        throw ConfigError("pool extents must lie in [0, feature extents]");
    WindowGeometry g;
    g.k = k;
    g.h = h;
    g.w = w;
    g.pool_h = pool_h;
    g.pool_w = pool_w;
    const int slots = k * k;
    g.mask.assign(static_cast<std::size_t>(h) * w * slots, 0);
    g.n_eff.assign(static_cast<std::size_t>(h) * w, 0);
    const int half = k / 2;
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            int masked = 0;
            for (int s = 0; s < slots; ++s) {
                const int ti = i + s / k - half;
                const int tj = j + s % k - half;
                if (ti < 0 || ti >= h || tj < 0 || tj >= w) {
                    g.mask[(static_cast<std::size_t>(i) * w + j) * slots + s] = 1;
                    ++masked;
                }
            }
            g.n_eff[static_cast<std::size_t>(i) * w + j] = slots + pool_h * pool_w - masked;
            g.total_window_keys += static_cast<std::uint64_t>(slots - masked);
        }
    }
    return g;
}

}  // namespace tnx
