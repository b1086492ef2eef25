#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "tnx/archive.hpp"
#include "tnx/flops.hpp"
#include "tnx/testing.hpp"

using namespace tnx;
using testing::bit_equal;
using testing::max_abs_diff;

namespace {

ModelConfig toy_config() {
    ModelConfig c;
    for (int s = 0; s < 4; ++s) {
        c.stages[s].channels = 24;
        c.stages[s].blocks = 1;
        c.stages[s].mlp_ratio = 2;
        c.stages[s].mixer = s == 3 ? MixerKind::Mhsa : MixerKind::AggregatedAttention;
        c.stages[s].window_k = s == 3 ? 0 : 3;
        c.stages[s].pool = s == 3 ? 0 : 32;
    }
    c.num_classes = 10;
    return c;
}

Tensor<float> toy_image(std::uint64_t seed, int res) {
    Rng rng(seed);
    Tensor<float> img({3, static_cast<std::size_t>(res), static_cast<std::size_t>(res)});
    for (std::size_t i = 0; i < img.size(); ++i)
        img[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    return img;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(static_cast<double>(t[i]))) return false;
    return true;
}

}  // namespace

TEST_CASE("stock presets match the published variant table") {
    auto micro = ModelConfig::preset("micro");
    CHECK(micro.stages[0].channels == 48);
    CHECK(micro.stages[3].channels == 384);
    CHECK(micro.stages[2].blocks == 15);
    auto tiny = ModelConfig::preset("tiny");
    CHECK(tiny.stages[0].channels == 72);
    auto small = ModelConfig::preset("small");
    CHECK(small.stages[2].blocks == 22);
    auto base = ModelConfig::preset("base");
    CHECK(base.stages[3].channels == 768);
    CHECK(base.stages[2].blocks == 23);
    for (const auto& cfg : {micro, tiny, small, base}) {
        for (int s = 0; s < 3; ++s) {
            CHECK(cfg.stages[s].mixer == MixerKind::AggregatedAttention);
            CHECK(cfg.stages[s].window_k == 3);
            CHECK(cfg.stages[s].pool == 32);
        }
        CHECK(cfg.stages[3].mixer == MixerKind::Mhsa);
        CHECK(cfg.stages[0].mlp_ratio == 8);
        CHECK(cfg.stages[2].mlp_ratio == 4);
    }
    CHECK_THROWS_AS(ModelConfig::preset("giant"), ConfigError);
}

TEST_CASE("config file round trip") {
    auto cfg = ModelConfig::preset("micro");
    const std::string text = config_to_text(cfg);
    auto parsed = parse_config_text(text);
    CHECK(config_to_text(parsed) == text);

    CHECK_THROWS_AS(parse_config_text("channels=48,96,192,384\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text(text + "bogus=1\n"), ConfigError);
    ModelConfig bad = cfg;
    bad.stages[1].channels = 50;  // not divisible by head dim
    CHECK_THROWS_AS(validate_config(bad), ConfigError);
}

TEST_CASE("pooled extents per mode") {
    auto cfg = ModelConfig::preset("micro");
    CHECK(pooled_extent(cfg, 0, 224, InferenceMode::Normal) == 7);
    CHECK(pooled_extent(cfg, 0, 224, InferenceMode::Linear) == 7);
    CHECK(pooled_extent(cfg, 0, 448, InferenceMode::Normal) == 14);
    CHECK(pooled_extent(cfg, 0, 448, InferenceMode::Linear) == 7);
    CHECK(pooled_extent(cfg, 3, 224, InferenceMode::Normal) == 0);  // MHSA stage
    ModelConfig fixed = cfg;
    fixed.pool_mode = PoolMode::Fixed;
    for (int s = 0; s < 3; ++s) fixed.stages[s].pool = 4;
    CHECK(pooled_extent(fixed, 0, 448, InferenceMode::Normal) == 4);
    CHECK(pooled_extent(fixed, 0, 448, InferenceMode::Linear) == 4);
}

TEST_CASE("parameter accounting") {
    SUBCASE("closed form equals an exhaustive walk of stored tensors") {
        auto cfg = toy_config();
        auto model = build_model<float>(cfg, 1);
        CHECK(walk_param_count(model) == count_params(cfg));
        auto micro = ModelConfig::preset("micro");
        auto micro_model = build_model<float>(micro, 1);
        CHECK(walk_param_count(micro_model) == count_params(micro));
    }
    SUBCASE("QE + positional tokens cost a fraction of a percent") {
        auto with = ModelConfig::preset("micro");
        auto without = with;
        without.query_embedding_and_tokens = false;
        const auto p_with = count_params(with);
        const auto p_without = count_params(without);
        CHECK(p_with > p_without);
        const double delta = static_cast<double>(p_with - p_without) / p_without;
        CHECK(delta <= 0.0035);
        CHECK(delta > 0.001);
    }
    SUBCASE("flops breakdown params agree with count_params") {
        auto cfg = ModelConfig::preset("tiny");
        CHECK(count_flops(cfg, 224, 224, InferenceMode::Normal).total().params ==
              count_params(cfg));
    }
}

TEST_CASE("deterministic initialization") {
    auto cfg = toy_config();
    auto a = build_model<float>(cfg, 42);
    auto b = build_model<float>(cfg, 42);
    bool equal = true;
    visit_params(a, [&](const std::string& name, Tensor<float>& t, InitKind) {
        visit_params(b, [&](const std::string& name2, Tensor<float>& t2, InitKind) {
            if (name == name2 && !bit_equal(t, t2)) equal = false;
        });
    });
    CHECK(equal);
    auto c = build_model<float>(cfg, 43);
    bool any_diff = false;
    visit_params(a, [&](const std::string& name, Tensor<float>& t, InitKind) {
        visit_params(c, [&](const std::string& name2, Tensor<float>& t2, InitKind) {
            if (name == name2 && !bit_equal(t, t2)) any_diff = true;
        });
    });
    CHECK(any_diff);
    SUBCASE("trunc-normal weights live inside +/- 2 sigma, biases zero, tau as pinned") {
        visit_params(a, [&](const std::string& name, Tensor<float>& t, InitKind kind) {
            if (kind == InitKind::TruncNormal)
                for (std::size_t i = 0; i < t.size(); ++i) CHECK(std::abs(t[i]) <= 0.04f);
            if (kind == InitKind::Zero)
                for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == 0.0f);
            if (kind == InitKind::TauInit)
                for (std::size_t i = 0; i < t.size(); ++i)
                    CHECK(softplus(t[i]) == doctest::Approx(1.0 / 0.24).epsilon(1e-5));
            if (kind == InitKind::CpbOutZero)
                for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == 0.0f);
            (void)name;
        });
    }
}

TEST_CASE("forward on a toy model") {
    auto cfg = toy_config();
    auto model = build_model<float>(cfg, 5);
    auto img = toy_image(6, 64);
    SUBCASE("finite logits of the configured head size, reproducible") {
        auto logits = forward(model, img, InferenceMode::Normal);
        CHECK(logits.size() == 10);
        CHECK(all_finite(logits));
        auto again = forward(model, img, InferenceMode::Normal);
        CHECK(bit_equal(logits, again));
    }
    SUBCASE("input extents must be multiples of 32") {
        CHECK_THROWS_WITH_AS(forward(model, toy_image(1, 60), InferenceMode::Normal),
                             doctest::Contains("multiples of 32"), ShapeError);
    }
    SUBCASE("mode coincidence at 224 and divergence at 320") {
        auto img224 = toy_image(7, 224);
        auto normal = forward(model, img224, InferenceMode::Normal);
        auto linear = forward(model, img224, InferenceMode::Linear);
        CHECK(bit_equal(normal, linear));
        auto img320 = toy_image(8, 320);
        auto n320 = forward(model, img320, InferenceMode::Normal);
        auto l320 = forward(model, img320, InferenceMode::Linear);
        CHECK(all_finite(n320));
        CHECK(all_finite(l320));
        CHECK(max_abs_diff(n320, l320) > 0.0);
    }
    SUBCASE("extrapolated vs interpolated position bias diverge off the training resolution") {
        // stock init zeroes the CPB output layer; give it weight so the
        // pooled bias actually depends on the coordinates
        Rng rng(99);
        for (auto& stage : model.stages)
            for (auto& blk : stage.blocks)
                if (blk.agg)
                    for (std::size_t i = 0; i < blk.agg->cpb.fc2.weight.size(); ++i)
                        blk.agg->cpb.fc2.weight[i] = static_cast<float>(rng.uniform(-0.05, 0.05));
        auto img320 = toy_image(9, 320);
        auto extrap = forward(model, img320, InferenceMode::Normal, BiasMode::Extrapolate);
        auto interp = forward(model, img320, InferenceMode::Normal, BiasMode::Interpolate);
        CHECK(all_finite(extrap));
        CHECK(all_finite(interp));
        CHECK(max_abs_diff(extrap, interp) > 0.0);
        auto img224 = toy_image(9, 224);
        CHECK(bit_equal(forward(model, img224, InferenceMode::Normal, BiasMode::Extrapolate),
                        forward(model, img224, InferenceMode::Normal, BiasMode::Interpolate)));
    }
}

TEST_CASE("weight archive round trip") {
    auto cfg = toy_config();
    auto model = build_model<float>(cfg, 11);
    const std::string p1 = "/tmp/tnx_test_a.tnx", p2 = "/tmp/tnx_test_b.tnx";
    save_weights(model, p1);
    auto loaded = load_model<float>(p1);
    save_weights(loaded, p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    CHECK(!b1.empty());

    SUBCASE("loaded model reproduces the original logits bit-exactly") {
        auto img = toy_image(12, 64);
        CHECK(bit_equal(forward(model, img, InferenceMode::Normal),
                        forward(loaded, img, InferenceMode::Normal)));
    }
    SUBCASE("mismatched config load names the offending tensor") {
        ModelConfig other = toy_config();
        other.stages[0].channels = 48;
        auto wrong = allocate_model<float>(other);
        try {
            load_weights_into(wrong, p1);
            CHECK(false);
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find("stages.0") != std::string::npos);
        }
    }
    SUBCASE("bad magic and truncation are descriptive IO errors") {
        std::string corrupted = b1;
        corrupted[0] = 'X';
        std::ofstream bad("/tmp/tnx_test_bad.tnx", std::ios::binary);
        bad.write(corrupted.data(), static_cast<std::streamsize>(corrupted.size()));
        bad.close();
        CHECK_THROWS_WITH_AS(read_archive("/tmp/tnx_test_bad.tnx"),
                             doctest::Contains("magic"), IoError);
        std::ofstream cut("/tmp/tnx_test_cut.tnx", std::ios::binary);
        cut.write(b1.data(), static_cast<std::streamsize>(b1.size() - 7));
        cut.close();
        CHECK_THROWS_WITH_AS(read_archive("/tmp/tnx_test_cut.tnx"),
                             doctest::Contains("truncated"), IoError);
        std::remove("/tmp/tnx_test_bad.tnx");
        std::remove("/tmp/tnx_test_cut.tnx");
    }
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("erf saliency") {
    SUBCASE("identity-mixer toy gives a single-pixel delta") {
        auto cfg = toy_config();
        auto model = build_model<float>(cfg, 3);
        // stem reads only the center tap of channel 0; blocks become no-ops
        auto& stem = model.stages[0].embed;
        stem.weight = Tensor<float>({24, 3, 7, 7});
        for (int o = 0; o < 24; ++o) stem.weight.at(o, 0, 3, 3) = 0.1f * (o + 1);
        for (int o = 0; o < 24; ++o) stem.bias[o] = 0.05f * ((o % 5) - 2);
        auto& blk = model.stages[0].blocks[0];
        blk.out_proj.weight = Tensor<float>({24, 24});
        blk.out_proj.bias = Tensor<float>({24});
        blk.glu.w3.weight = Tensor<float>({24, static_cast<std::size_t>(blk.glu.hidden())});
        blk.glu.w3.bias = Tensor<float>({24});
        auto img = toy_image(13, 32);
        auto grid = erf_saliency(model, img, 1, 1e-3, false);
        int nonzero = 0;
        for (std::size_t i = 0; i < grid.size(); ++i)
            if (grid[i] != 0.0f) ++nonzero;
        CHECK(nonzero == 1);
        CHECK(grid.at(16, 16) == 1.0f);
    }
    SUBCASE("full toy: support covers the grid with a central peak") {
        auto cfg = toy_config();
        cfg.pool_mode = PoolMode::Fixed;
        for (int s = 0; s < 3; ++s) cfg.stages[s].pool = 1;
        auto model = build_model<float>(cfg, 14);
        auto img = toy_image(15, 32);
        auto grid = erf_saliency(model, img, 1, 1e-2, false);
        int positive = 0;
        for (std::size_t i = 0; i < grid.size(); ++i)
            if (grid[i] > 0.0f) ++positive;
        CHECK(positive > static_cast<int>(0.95 * grid.size()));
        // the window path concentrates saliency near the probe's footprint
        double inner = 0.0, outer = 0.0;
        int n_inner = 0, n_outer = 0;
        for (int i = 0; i < 32; ++i)
            for (int j = 0; j < 32; ++j) {
                if (i >= 8 && i < 24 && j >= 8 && j < 24) {
                    inner += grid.at(i, j);
                    ++n_inner;
                } else {
                    outer += grid.at(i, j);
                    ++n_outer;
                }
            }
        CHECK(inner / n_inner > outer / n_outer);
    }
    SUBCASE("halving the step changes the grid by under 5% relative") {
        auto cfg = toy_config();
        auto model = build_model<double>(cfg, 16);
        Rng rng(17);
        Tensor<double> img({3, 32, 32});
        for (std::size_t i = 0; i < img.size(); ++i) img[i] = rng.uniform(-1.0, 1.0);
        auto g1 = erf_saliency(model, img, 1, 1e-3, false);
        auto g2 = erf_saliency(model, img, 1, 5e-4, false);
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < g1.size(); ++i) {
            num = std::max(num, std::abs(static_cast<double>(g1[i]) - g2[i]));
            den = std::max(den, std::abs(static_cast<double>(g1[i])));
        }
        CHECK(num / den < 0.05);
    }
    SUBCASE("desk-scale guard") {
        auto model = build_model<float>(toy_config(), 18);
        CHECK_THROWS_AS(erf_saliency(model, toy_image(19, 96), 1, 1e-3, false), ConfigError);
    }
}

TEST_CASE("flop accountant against the published table magnitudes") {
    struct Row {
        const char* name;
        double params_m, flops_g;
    };
    const Row rows[] = {{"micro", 12.8, 2.7}, {"tiny", 28.2, 5.7}};
    for (const auto& row : rows) {
        auto cfg = ModelConfig::preset(row.name);
        const double params = static_cast<double>(count_params(cfg)) / 1e6;
        CHECK(std::abs(params - row.params_m) / row.params_m <= 0.02);
        const auto total = count_flops(cfg, 224, 224, InferenceMode::Normal).total();
        const double flops = static_cast<double>(total.flops(1)) / 1e9;
        CHECK(std::abs(flops - row.flops_g) / row.flops_g <= 0.05);
    }
    SUBCASE("AA minus PFA is exactly HWk^2C") {
        CHECK(aa_attention_macs(56, 56, 48, 3, 7, 7) - pfa_attention_macs(56, 56, 48, 3, 7, 7) ==
              56ull * 56 * 9 * 48);
    }
}

TEST_CASE("plan cache is shared and thread-safe") {
    auto model = build_model<float>(toy_config(), 20);
    auto p1 = model.plan(64, 64, InferenceMode::Normal, BiasMode::Extrapolate);
    auto p2 = model.plan(64, 64, InferenceMode::Normal, BiasMode::Extrapolate);
    CHECK(p1.get() == p2.get());
    auto p3 = model.plan(96, 96, InferenceMode::Normal, BiasMode::Extrapolate);
    CHECK(p1.get() != p3.get());
    // linear mode pins the pooled grid to 7x7, which cannot fit the 4x4
    // stage-3 feature map at this resolution
    CHECK_THROWS_AS(model.plan(64, 64, InferenceMode::Linear, BiasMode::Extrapolate),
                    ShapeError);
}
