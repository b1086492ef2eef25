#include <algorithm>
#include <cmath>
#include <chrono>

#include "tnx/fused_kernel.hpp"
#include "tnx/testing.hpp"

namespace tnx {

// Times one kernel case (QK similarity + attention-weighted aggregation)
// and reports the scratch high-water mark. Runs single-worker so the fused
// path's scratch is exactly one halo tile.
BenchResult run_bench(const std::string& kernel_case, int h, int w, int c, int heads, int k,
                      int iters, int tile, std::uint64_t seed) {
    if (kernel_case != "fused" && kernel_case != "naive")
        throw ConfigError("bench case must be 'fused' or 'naive'");
    if (heads <= 0 || c <= 0 || c % heads != 0)
        throw ConfigError("bench requires channels divisible by heads");
    if (iters < 1) throw ConfigError("bench iters must be >= 1");
    const int d = c / heads;
    const auto geom = build_geometry(h, w, k, 0, 0);

    Rng rng(seed);
    auto q = testing::rand_tensor<float>(rng, {static_cast<std::size_t>(heads),
                                               static_cast<std::size_t>(h),
                                               static_cast<std::size_t>(w),
                                               static_cast<std::size_t>(d)});
    auto kk = testing::rand_tensor<float>(rng, q.dims());
    auto v = testing::rand_tensor<float>(rng, q.dims());
    // pre-normalized attention rows, uniform over unmasked slots
    Tensor<float> attn({static_cast<std::size_t>(heads), static_cast<std::size_t>(h),
                        static_cast<std::size_t>(w), static_cast<std::size_t>(k * k)});
    for (int head = 0; head < heads; ++head)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const int n = geom.effective_keys(i, j);
                for (int s = 0; s < k * k; ++s)
                    attn.at(head, i, j, s) =
                        geom.masked(i, j, s) ? 0.0f : 1.0f / static_cast<float>(n);
            }

    KernelWorkspace ws;
    ws.tile_h = tile;
    ws.tile_w = tile;
    ws.max_workers = 1;

    // probe an always-unmasked element (center slot of the center pixel)
    const std::size_t probe =
        ((static_cast<std::size_t>(h / 2)) * w + w / 2) * (k * k) + (k * k) / 2;
    auto run_once = [&] {
        if (kernel_case == "fused") {
            auto logits = fused_window_qk(q, kk, geom, ws);
            auto out = fused_window_av(attn, v, geom, ws);
            return logits[probe] + out[0];
        }
        auto logits = naive_unfold_qk(q, kk, geom, ws);
        auto out = naive_unfold_av(attn, v, geom, ws);
        return logits[probe] + out[0];
    };

    float sink = 0.0f;
    for (int i = 0; i < 3; ++i) sink += run_once();  // warmup

    std::vector<double> samples(iters);
    for (int i = 0; i < iters; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        sink += run_once();
        const auto t1 = std::chrono::steady_clock::now();
        samples[i] = std::chrono::duration<double, std::nano>(t1 - t0).count();
    }
    std::sort(samples.begin(), samples.end());
    const double median = samples.size() % 2 == 1
                              ? samples[samples.size() / 2]
                              : 0.5 * (samples[samples.size() / 2 - 1] +
                                       samples[samples.size() / 2]);

    BenchResult res;
    res.kernel_case = kernel_case;
    res.h = h;
    res.w = w;
    res.c = c;
    res.heads = heads;
    res.k = k;
    res.iters = iters;
    res.ns_per_iter = median;
    res.scratch_bytes = ws.peak_bytes.load();
    if (!std::isfinite(sink)) throw DomainError("bench produced non-finite values");
    return res;
}

}  // namespace tnx
