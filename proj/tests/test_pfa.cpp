#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "tnx/oracles.hpp"
#include "tnx/pfa.hpp"
#include "tnx/testing.hpp"

using namespace tnx;
using testing::bit_equal;
using testing::max_abs_diff;
using testing::rand_pfa;
using testing::rand_tensor;

namespace {

PfaParams<double> identity_pool_params(Rng& rng, int heads, int d, int k) {
    auto p = rand_pfa<double>(rng, heads, d, k);
    const std::size_t c = static_cast<std::size_t>(heads) * d;
    p.pool_norm.gamma = Tensor<double>::full({c}, 1.0);
    p.pool_norm.beta = Tensor<double>({c});
    return p;
}

}  // namespace

TEST_CASE("activate and pool") {
    Rng rng(30);
    SUBCASE("matches the composition of the four primitives") {
        auto p = rand_pfa<double>(rng, 2, 3, 3);
        auto x = rand_tensor<double>(rng, {6, 5, 7});
        auto got = activate_and_pool(x, p, 2, 3);
        auto step = rows_to_chw(gelu(linear(chw_to_rows(x), p.pool_proj)), 5, 7);
        auto want = rows_to_chw(layernorm(chw_to_rows(adaptive_avg_pool(step, 2, 3)), p.pool_norm),
                                2, 3);
        CHECK(max_abs_diff(got, want) <= 1e-12);
    }
    SUBCASE("identity linear on constant input normalizes to zero") {
        auto p = identity_pool_params(rng, 2, 3, 3);
        p.pool_proj.weight = Tensor<double>({6, 6});
        for (int i = 0; i < 6; ++i) p.pool_proj.weight.at(i, i) = 1.0;
        p.pool_proj.bias = Tensor<double>({6});
        auto got = activate_and_pool(Tensor<double>::full({6, 4, 4}, 0.3), p, 2, 2);
        for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i]) < 1e-9);
    }
    SUBCASE("output extents follow the pooled grid") {
        auto p = rand_pfa<double>(rng, 1, 4, 3);
        auto x = rand_tensor<double>(rng, {4, 8, 8});
        auto got = activate_and_pool(x, p, 7, 7);
        CHECK(got.dim(0) == 4);
        CHECK(got.dim(1) == 7);
        CHECK(got.dim(2) == 7);
    }
}

TEST_CASE("uniform attention when q, k and bias vanish") {
    Rng rng(31);
    auto p = rand_pfa<double>(rng, 1, 3, 3);
    p.q_proj.weight = Tensor<double>({3, 3});
    p.q_proj.bias = Tensor<double>({3});
    p.k_proj.weight = Tensor<double>({3, 3});
    p.k_proj.bias = Tensor<double>({3});
    p.window_bias = Tensor<double>({1, 9});
    auto x = rand_tensor<double>(rng, {3, 4, 4});
    auto geom = build_geometry(4, 4, 3, 2, 2);
    auto rows = pfa_attention_rows(x, p, geom);
    for (std::size_t pix = 0; pix < 16; ++pix) {
        const int n = geom.effective_keys(static_cast<int>(pix / 4), static_cast<int>(pix % 4));
        for (std::size_t t = 0; t < 13; ++t) {
            const double v = rows.at(0, pix, t);
            if (t < 9 && geom.masked(static_cast<int>(pix / 4), static_cast<int>(pix % 4),
                                     static_cast<int>(t)))
                CHECK(v == 0.0);
            else
                CHECK(v == doctest::Approx(1.0 / n).epsilon(1e-9));
        }
    }
    // output equals the unweighted mean of unmasked window values and pooled values
    auto out = pfa_forward(x, p, geom);
    auto oracle = oracles::attention_ref<double>(x, p, nullptr, geom, false);
    CHECK(max_abs_diff(out, oracle) <= 1e-12);
}

TEST_CASE("padding-mask soundness on a 6x6/k=3 map") {
    Rng rng(32);
    auto p = rand_pfa<double>(rng, 2, 3, 3);
    auto x = rand_tensor<double>(rng, {6, 6, 6});
    auto geom = build_geometry(6, 6, 3, 2, 2);
    auto rows = pfa_attention_rows(x, p, geom);
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t pix = 0; pix < 36; ++pix) {
            double sum = 0.0;
            for (std::size_t t = 0; t < 13; ++t) {
                const double v = rows.at(h, pix, t);
                if (t < 9 && geom.masked(static_cast<int>(pix / 6), static_cast<int>(pix % 6),
                                         static_cast<int>(t))) {
                    CHECK(v == 0.0);
                } else {
                    CHECK(v > 0.0);
                }
                sum += v;
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
}

TEST_CASE("dual-path equals the concatenated oracle") {
    Rng rng(33);
    SUBCASE("f64 randomized geometries") {
        for (int trial = 0; trial < 8; ++trial) {
            const int h = 2 + static_cast<int>(rng.next_u64() % 6);
            const int w = 2 + static_cast<int>(rng.next_u64() % 6);
            const int k = (rng.next_u64() % 2) ? 3 : 5;
            const int ph = 1 + static_cast<int>(rng.next_u64() % h);
            const int pw = 1 + static_cast<int>(rng.next_u64() % w);
            const int heads = 1 + static_cast<int>(rng.next_u64() % 3);
            auto p = rand_pfa<double>(rng, heads, 3, k);
            auto x = rand_tensor<double>(rng, {static_cast<std::size_t>(heads) * 3,
                                               static_cast<std::size_t>(h),
                                               static_cast<std::size_t>(w)});
            auto geom = build_geometry(h, w, k, ph, pw);
            CHECK(max_abs_diff(pfa_forward(x, p, geom), pfa_concat_oracle(x, p, geom)) <= 1e-12);
        }
    }
    SUBCASE("f32 tolerance") {
        auto p = rand_pfa<float>(rng, 2, 4, 3);
        auto x = rand_tensor<float>(rng, {8, 6, 5});
        auto geom = build_geometry(6, 5, 3, 2, 2);
        CHECK(max_abs_diff(pfa_forward(x, p, geom), pfa_concat_oracle(x, p, geom)) <= 1e-6);
    }
    SUBCASE("cross-check against the fully scalar third implementation") {
        auto p = rand_pfa<double>(rng, 2, 3, 3);
        auto x = rand_tensor<double>(rng, {6, 5, 6});
        auto geom = build_geometry(5, 6, 3, 2, 3);
        auto scalar = oracles::attention_ref<double>(x, p, nullptr, geom, false);
        CHECK(max_abs_diff(pfa_concat_oracle(x, p, geom), scalar) <= 1e-12);
        CHECK(max_abs_diff(pfa_forward(x, p, geom), scalar) <= 1e-12);
    }
}

TEST_CASE("degenerate 1x1 map with 1x1 pool equals plain single-key attention") {
    Rng rng(34);
    auto p = rand_pfa<double>(rng, 2, 3, 1);
    auto x = rand_tensor<double>(rng, {6, 1, 1});
    auto geom = build_geometry(1, 1, 1, 1, 1);
    auto out = pfa_forward(x, p, geom);
    CHECK(max_abs_diff(out, pfa_concat_oracle(x, p, geom)) <= 1e-12);
    // both keys carry values; weights sum to one, so output lies between them
    auto rows = pfa_attention_rows(x, p, geom);
    CHECK(rows.at(0, 0, 0) + rows.at(0, 0, 1) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("doubling V doubles the output exactly") {
    Rng rng(35);
    auto p = rand_pfa<double>(rng, 2, 3, 3);
    p.v_proj.bias = Tensor<double>({6});  // keep the map linear in V
    auto x = rand_tensor<double>(rng, {6, 5, 5});
    auto geom = build_geometry(5, 5, 3, 2, 2);
    auto base = pfa_forward(x, p, geom);
    PfaParams<double> doubled = p;
    for (std::size_t i = 0; i < doubled.v_proj.weight.size(); ++i)
        doubled.v_proj.weight[i] *= 2.0;
    auto out = pfa_forward(x, doubled, geom);
    for (std::size_t i = 0; i < out.size(); ++i)
        CHECK(out[i] == doctest::Approx(2.0 * base[i]).epsilon(1e-12));
}

TEST_CASE("windowed translational equivariance without the pool path") {
    Rng rng(36);
    auto p = rand_pfa<double>(rng, 2, 3, 3);
    p.window_bias = Tensor<double>({2, 9});  // zero bias
    const int h = 9, w = 9, k = 3;
    auto x = rand_tensor<double>(rng, {6, h, w});
    Tensor<double> shifted({6, h, w});
    for (std::size_t c = 0; c < 6; ++c)
        for (int i = 1; i < h; ++i)
            for (int j = 1; j < w; ++j) shifted.at(c, i, j) = x.at(c, i - 1, j - 1);
    auto geom = build_geometry(h, w, k, 2, 2);
    auto base = pfa_forward_window_only(x, p, geom);
    auto moved = pfa_forward_window_only(shifted, p, geom);
    // compare where both windows are at least k from every border
    for (std::size_t c = 0; c < 6; ++c)
        for (int i = k + 1; i < h - k; ++i)
            for (int j = k + 1; j < w - k; ++j)
                CHECK(moved.at(c, i, j) == base.at(c, i - 1, j - 1));
}

TEST_CASE("permutations inside one pooling bucket leave remote outputs unchanged") {
    Rng rng(37);
    auto p = rand_pfa<double>(rng, 2, 3, 3);
    const int h = 10, w = 10;
    auto x = rand_tensor<double>(rng, {6, h, w});
    auto geom = build_geometry(h, w, 3, 2, 2);
    auto base = pfa_forward(x, p, geom);
    // permute pixels inside bucket (1,1) = rows 5..9 x cols 5..9, far from (1,1)
    Tensor<double> permuted = x;
    std::vector<std::pair<int, int>> cells;
    for (int i = 5; i < 10; ++i)
        for (int j = 5; j < 10; ++j) cells.emplace_back(i, j);
    // rotate the cell contents by one position
    for (std::size_t c = 0; c < 6; ++c) {
        const double first = permuted.at(c, cells[0].first, cells[0].second);
        for (std::size_t t = 0; t + 1 < cells.size(); ++t)
            permuted.at(c, cells[t].first, cells[t].second) =
                x.at(c, cells[t + 1].first, cells[t + 1].second);
        permuted.at(c, cells.back().first, cells.back().second) = first;
    }
    auto out = pfa_forward(permuted, p, geom);
    for (std::size_t c = 0; c < 6; ++c)
        CHECK(std::abs(out.at(c, 1, 1) - base.at(c, 1, 1)) <= 1e-12);
}

TEST_CASE("shape errors") {
    Rng rng(38);
    auto p = rand_pfa<double>(rng, 2, 3, 3);
    auto geom = build_geometry(5, 5, 3, 2, 2);
    CHECK_THROWS_AS(pfa_forward(rand_tensor<double>(rng, {5, 5, 5}), p, geom), ShapeError);
    CHECK_THROWS_AS(pfa_forward(rand_tensor<double>(rng, {6, 4, 5}), p, geom), ShapeError);
}
