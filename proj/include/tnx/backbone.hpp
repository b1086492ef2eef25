#pragma once

#include <array>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "tnx/agg_attention.hpp"
#include "tnx/conv_glu.hpp"

namespace tnx {

enum class MixerKind { AggregatedAttention, Mhsa };
enum class PoolMode { Ratio, Fixed };
enum class InferenceMode { Normal, Linear };
enum class BiasMode { Extrapolate, Interpolate };

constexpr int kHeadDim = 24;
constexpr int kTrainResolution = 224;

struct StageConfig {
    int channels = 0;
    int blocks = 0;
    double mlp_ratio = 0.0;
    MixerKind mixer = MixerKind::AggregatedAttention;
    int window_k = 0;  // 0 for MHSA stages
    int pool = 0;      // ratio divisor or fixed extent; 0 for MHSA stages
};

struct ModelConfig {
    std::array<StageConfig, 4> stages;
    PoolMode pool_mode = PoolMode::Ratio;
    int num_classes = 1000;
    // QLV + LKV toggle: drops the query embedding and positional tokens
    bool query_embedding_and_tokens = true;

    static ModelConfig preset(const std::string& name);

    int heads(int stage) const { return stages[stage].channels / kHeadDim; }
};

ModelConfig parse_config_text(const std::string& text);
ModelConfig load_config_file(const std::string& path);
std::string config_to_text(const ModelConfig& config);

void validate_config(const ModelConfig& config);

// Pooled extent for one stage at a given input resolution. Normal mode ties
// the pooled grid to the input; linear mode pins it to the training
// resolution, making the attention cost linear in sequence length.
int pooled_extent(const ModelConfig& config, int stage, int input_extent, InferenceMode mode);

struct PatchEmbedSpec {
    int k, stride, pad;
};
inline PatchEmbedSpec patch_embed_spec(int stage) {
    return stage == 0 ? PatchEmbedSpec{7, 4, 3} : PatchEmbedSpec{3, 2, 1};
}

// ---------------------------------------------------------------------------
// Model parameter structs.
// ---------------------------------------------------------------------------
template <typename T>
struct PatchEmbedParams {
    Tensor<T> weight;  // [Cout, Cin, k, k]
    Tensor<T> bias;    // [Cout]
    LayerNormParams<T> norm;
};

template <typename T>
struct BlockParams {
    LayerNormParams<T> norm1;
    std::optional<AggAttentionParams<T>> agg;
    std::optional<MhsaParams<T>> mhsa;
    LinearParams<T> out_proj;
    LayerNormParams<T> norm2;
    ConvGluParams<T> glu;
};

template <typename T>
struct StageParams {
    PatchEmbedParams<T> embed;
    std::vector<BlockParams<T>> blocks;
};

template <typename T>
struct HeadParams {
    LayerNormParams<T> norm;
    LinearParams<T> fc;
};

// Per-resolution forward plan: geometry, relative coordinates and one CPB
// grid per attention block. Cached per (H, W, mode, bias mode) so repeated
// inference at one resolution pays the coordinate setup once.
template <typename T>
struct StagePlan {
    int feat_h = 0, feat_w = 0;
    int pool_h = 0, pool_w = 0;
    WindowGeometry geom;                // mixer A only
    std::vector<CpbGrid<T>> cpb_grids;  // one per block, mixer A only
};

template <typename T>
struct ForwardPlan {
    std::array<StagePlan<T>, 4> stages;
};

template <typename T>
class Model {
public:
    ModelConfig config;
    std::vector<StageParams<T>> stages;
    HeadParams<T> head;

    Model() = default;
    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;

    std::shared_ptr<const ForwardPlan<T>> plan(int h, int w, InferenceMode mode,
                                               BiasMode bias_mode) const;

private:
    struct PlanKey {
        int h, w;
        int mode, bias;
        bool operator<(const PlanKey& o) const {
            return std::tie(h, w, mode, bias) < std::tie(o.h, o.w, o.mode, o.bias);
        }
    };
    // memo keyed by resolution/mode; boxed so the model itself stays movable
    struct PlanCache {
        std::mutex mutex;
        std::map<PlanKey, std::shared_ptr<const ForwardPlan<T>>> plans;
    };
    mutable std::unique_ptr<PlanCache> cache_ = std::make_unique<PlanCache>();
};

enum class InitKind { TruncNormal, Zero, One, TauInit, CpbOutZero };

// Enumerates every stored tensor with its archive name and init rule. The
// builder, the initializer, the serializer and the loader all walk this one
// enumeration, so names, shapes and counts cannot drift apart.
template <typename T, typename Fn>
void visit_params(Model<T>& model, Fn&& fn);

template <typename T>
Model<T> build_model(const ModelConfig& config, std::uint64_t seed);

std::uint64_t count_params(const ModelConfig& config);

template <typename T>
std::uint64_t walk_param_count(Model<T>& model) {
    std::uint64_t total = 0;
    visit_params(model, [&](const std::string&, Tensor<T>& t, InitKind) { total += t.size(); });
    return total;
}

template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& image, InferenceMode mode,
                  BiasMode bias_mode = BiasMode::Extrapolate);

template <typename T>
Tensor<T> forward_to_stage(const Model<T>& model, const Tensor<T>& image, int stage,
                           InferenceMode mode, BiasMode bias_mode = BiasMode::Extrapolate);

// |d(stage center unit)/d(input)| by central finite differences, channel
// summed and normalized to [0,1]. Guarded to desk-scale inputs unless
// force is set.
template <typename T>
Tensor<T> erf_saliency(const Model<T>& model, const Tensor<T>& image, int stage,
                       double step = 1e-3, bool force = false,
                       InferenceMode mode = InferenceMode::Normal);

// ---------------------------------------------------------------------------
// Implementation.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename Fn>
void visit_linear(const std::string& prefix, LinearParams<T>& p, Fn&& fn,
                  InitKind weight_init = InitKind::TruncNormal) {
    fn(prefix + ".weight", p.weight, weight_init);
    fn(prefix + ".bias", p.bias,
       weight_init == InitKind::CpbOutZero ? InitKind::CpbOutZero : InitKind::Zero);
}

template <typename T, typename Fn>
void visit_norm(const std::string& prefix, LayerNormParams<T>& p, Fn&& fn) {
    fn(prefix + ".gamma", p.gamma, InitKind::One);
    fn(prefix + ".beta", p.beta, InitKind::Zero);
}

}  // namespace detail

template <typename T, typename Fn>
void visit_params(Model<T>& model, Fn&& fn) {
    const ModelConfig& cfg = model.config;
    for (std::size_t s = 0; s < 4; ++s) {
        const std::string sp = "stages." + std::to_string(s);
        StageParams<T>& stage = model.stages[s];
        fn(sp + ".embed.conv.weight", stage.embed.weight, InitKind::TruncNormal);
        fn(sp + ".embed.conv.bias", stage.embed.bias, InitKind::Zero);
        detail::visit_norm(sp + ".embed.norm", stage.embed.norm, fn);
        for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
            const std::string bp = sp + ".blocks." + std::to_string(b);
            BlockParams<T>& blk = stage.blocks[b];
            detail::visit_norm(bp + ".norm1", blk.norm1, fn);
            if (blk.agg) {
                AggAttentionParams<T>& a = *blk.agg;
                detail::visit_linear(bp + ".attn.q", a.base.q_proj, fn);
                detail::visit_linear(bp + ".attn.k", a.base.k_proj, fn);
                detail::visit_linear(bp + ".attn.v", a.base.v_proj, fn);
                detail::visit_linear(bp + ".attn.pool_proj", a.base.pool_proj, fn);
                detail::visit_norm(bp + ".attn.pool_norm", a.base.pool_norm, fn);
                fn(bp + ".attn.window_bias", a.base.window_bias, InitKind::TruncNormal);
                if (cfg.query_embedding_and_tokens) {
                    fn(bp + ".attn.qe", a.qe, InitKind::TruncNormal);
                    fn(bp + ".attn.pos_tokens", a.pos_tokens, InitKind::TruncNormal);
                }
                fn(bp + ".attn.tau_raw", a.tau_raw, InitKind::TauInit);
                detail::visit_linear(bp + ".attn.cpb.fc1", a.cpb.fc1, fn);
                detail::visit_linear(bp + ".attn.cpb.fc2", a.cpb.fc2, fn, InitKind::CpbOutZero);
            } else {
                MhsaParams<T>& m = *blk.mhsa;
                detail::visit_linear(bp + ".attn.q", m.q_proj, fn);
                detail::visit_linear(bp + ".attn.k", m.k_proj, fn);
                detail::visit_linear(bp + ".attn.v", m.v_proj, fn);
                if (cfg.query_embedding_and_tokens)
                    fn(bp + ".attn.qe", m.qe, InitKind::TruncNormal);
                fn(bp + ".attn.tau_raw", m.tau_raw, InitKind::TauInit);
            }
            detail::visit_linear(bp + ".attn.out_proj", blk.out_proj, fn);
            detail::visit_norm(bp + ".norm2", blk.norm2, fn);
            detail::visit_linear(bp + ".glu.w1", blk.glu.w1, fn);
            detail::visit_linear(bp + ".glu.w2", blk.glu.w2, fn);
            fn(bp + ".glu.dw.weight", blk.glu.dw_filter, InitKind::TruncNormal);
            fn(bp + ".glu.dw.bias", blk.glu.dw_bias, InitKind::Zero);
            detail::visit_linear(bp + ".glu.w3", blk.glu.w3, fn);
        }
    }
    detail::visit_norm("head.norm", model.head.norm, fn);
    detail::visit_linear("head.fc", model.head.fc, fn);
}

template <typename T>
Model<T> allocate_model(const ModelConfig& config) {
    validate_config(config);
    Model<T> model;
    model.config = config;
    model.stages.resize(4);
    int in_channels = 3;
    for (int s = 0; s < 4; ++s) {
        const StageConfig& sc = config.stages[s];
        const PatchEmbedSpec pe = patch_embed_spec(s);
        StageParams<T>& stage = model.stages[s];
        stage.embed.weight = Tensor<T>({static_cast<std::size_t>(sc.channels),
                                        static_cast<std::size_t>(in_channels),
                                        static_cast<std::size_t>(pe.k),
                                        static_cast<std::size_t>(pe.k)});
        stage.embed.bias = Tensor<T>({static_cast<std::size_t>(sc.channels)});
        stage.embed.norm.gamma = Tensor<T>({static_cast<std::size_t>(sc.channels)});
        stage.embed.norm.beta = Tensor<T>({static_cast<std::size_t>(sc.channels)});
        const std::size_t c = sc.channels;
        const std::size_t heads = config.heads(s);
        const std::size_t hidden = conv_glu_hidden(c, sc.mlp_ratio);
        stage.blocks.resize(sc.blocks);
        for (auto& blk : stage.blocks) {
            blk.norm1.gamma = Tensor<T>({c});
            blk.norm1.beta = Tensor<T>({c});
            auto make_linear = [](std::size_t out, std::size_t in) {
                LinearParams<T> p;
                p.weight = Tensor<T>({out, in});
                p.bias = Tensor<T>({out});
                return p;
            };
            if (sc.mixer == MixerKind::AggregatedAttention) {
                AggAttentionParams<T> a;
                a.base.q_proj = make_linear(c, c);
                a.base.k_proj = make_linear(c, c);
                a.base.v_proj = make_linear(c, c);
                a.base.pool_proj = make_linear(c, c);
                a.base.pool_norm.gamma = Tensor<T>({c});
                a.base.pool_norm.beta = Tensor<T>({c});
                a.base.heads = static_cast<int>(heads);
                a.base.head_dim = kHeadDim;
                const std::size_t slots = static_cast<std::size_t>(sc.window_k) * sc.window_k;
                a.base.window_bias = Tensor<T>({heads, slots});
                if (config.query_embedding_and_tokens) {
                    a.qe = Tensor<T>({heads, static_cast<std::size_t>(kHeadDim)});
                    a.pos_tokens =
                        Tensor<T>({heads, static_cast<std::size_t>(kHeadDim), slots});
                } else {
                    a.qe = Tensor<T>::full({heads, static_cast<std::size_t>(kHeadDim)}, T(0));
                    a.pos_tokens = Tensor<T>::full(
                        {heads, static_cast<std::size_t>(kHeadDim), slots}, T(0));
                }
                a.tau_raw = Tensor<T>({heads});
                a.cpb.fc1 = make_linear(512, 2);
                a.cpb.fc2 = make_linear(heads, 512);
                blk.agg = std::move(a);
            } else {
                MhsaParams<T> m;
                m.q_proj = make_linear(c, c);
                m.k_proj = make_linear(c, c);
                m.v_proj = make_linear(c, c);
                m.qe = Tensor<T>({heads, static_cast<std::size_t>(kHeadDim)});
                if (!config.query_embedding_and_tokens)
                    m.qe = Tensor<T>::full({heads, static_cast<std::size_t>(kHeadDim)}, T(0));
                m.tau_raw = Tensor<T>({heads});
                m.heads = static_cast<int>(heads);
                m.head_dim = kHeadDim;
                blk.mhsa = std::move(m);
            }
            blk.out_proj = make_linear(c, c);
            blk.norm2.gamma = Tensor<T>({c});
            blk.norm2.beta = Tensor<T>({c});
            blk.glu.w1 = make_linear(hidden, c);
            blk.glu.w2 = make_linear(hidden, c);
            blk.glu.dw_filter = Tensor<T>({hidden, 3, 3});
            blk.glu.dw_bias = Tensor<T>({hidden});
            blk.glu.w3 = make_linear(c, hidden);
            blk.glu.variant = ConvGluVariant::ConvGLU;
        }
        in_channels = sc.channels;
    }
    const std::size_t c4 = config.stages[3].channels;
    model.head.norm.gamma = Tensor<T>({c4});
    model.head.norm.beta = Tensor<T>({c4});
    model.head.fc.weight =
        Tensor<T>({static_cast<std::size_t>(config.num_classes), c4});
    model.head.fc.bias = Tensor<T>({static_cast<std::size_t>(config.num_classes)});
    return model;
}

// Deterministic init: every tensor draws from its own stream seeded by
// (global seed, tensor name), so results do not depend on visit order.
template <typename T>
Model<T> build_model(const ModelConfig& config, std::uint64_t seed) {
    Model<T> model = allocate_model<T>(config);
    struct Task {
        Tensor<T>* tensor;
        InitKind init;
        std::uint64_t seed;
    };
    std::vector<Task> tasks;
    visit_params(model, [&](const std::string& name, Tensor<T>& t, InitKind init) {
        tasks.push_back({&t, init, seed ^ fnv1a64(name)});
    });
    const double tau_init = softplus_inverse(1.0 / 0.24);
    parallel_for(tasks.size(), [&](std::size_t i) {
        Tensor<T>& t = *tasks[i].tensor;
        switch (tasks[i].init) {
            case InitKind::Zero:
            case InitKind::CpbOutZero:
                std::fill(t.data(), t.data() + t.size(), T(0));
                break;
            case InitKind::One:
                std::fill(t.data(), t.data() + t.size(), T(1));
                break;
            case InitKind::TauInit:
                std::fill(t.data(), t.data() + t.size(), static_cast<T>(tau_init));
                break;
            case InitKind::TruncNormal: {
                Rng rng(tasks[i].seed);
                for (std::size_t j = 0; j < t.size(); ++j)
                    t[j] = static_cast<T>(rng.truncated_normal(0.02));
                break;
            }
        }
    });
    return model;
}

template <typename T>
std::shared_ptr<const ForwardPlan<T>> Model<T>::plan(int h, int w, InferenceMode mode,
                                                     BiasMode bias_mode) const {
    const PlanKey key{h, w, static_cast<int>(mode), static_cast<int>(bias_mode)};
    {
        std::lock_guard<std::mutex> lock(cache_->mutex);
        auto it = cache_->plans.find(key);
        if (it != cache_->plans.end()) return it->second;
    }
    auto plan = std::make_shared<ForwardPlan<T>>();
    int fh = h, fw = w;
    for (int s = 0; s < 4; ++s) {
        const StageConfig& sc = config.stages[s];
        const PatchEmbedSpec pe = patch_embed_spec(s);
        fh = (fh + 2 * pe.pad - pe.k) / pe.stride + 1;
        fw = (fw + 2 * pe.pad - pe.k) / pe.stride + 1;
        StagePlan<T>& sp = plan->stages[s];
        sp.feat_h = fh;
        sp.feat_w = fw;
        if (sc.mixer != MixerKind::AggregatedAttention) continue;
        sp.pool_h = pooled_extent(config, s, h, mode);
        sp.pool_w = pooled_extent(config, s, w, mode);
        if (sp.pool_h > fh || sp.pool_w > fw)
            throw ShapeError("stage " + std::to_string(s + 1) + " pooled grid " +
                             std::to_string(sp.pool_h) + "x" + std::to_string(sp.pool_w) +
                             " exceeds feature map " + std::to_string(fh) + "x" +
                             std::to_string(fw) + "; increase the input resolution");
        sp.geom = build_geometry(fh, fw, sc.window_k, sp.pool_h, sp.pool_w);
        RelativeCoords<T> coords = build_relative_coords<T>(fh, fw, sp.pool_h, sp.pool_w);
        sp.cpb_grids.reserve(stages[s].blocks.size());
        for (const auto& blk : stages[s].blocks) {
            CpbGrid<T> grid = build_cpb_grid(coords, blk.agg->cpb);
            if (bias_mode == BiasMode::Interpolate && (h != kTrainResolution ||
                                                       w != kTrainResolution)) {
                // resample the training-resolution bias table instead of
                // extrapolating through the MLP
                const int th = kTrainResolution, tw = kTrainResolution;
                int tfh = th, tfw = tw;
                for (int q = 0; q <= s; ++q) {
                    const PatchEmbedSpec qe = patch_embed_spec(q);
                    tfh = (tfh + 2 * qe.pad - qe.k) / qe.stride + 1;
                    tfw = (tfw + 2 * qe.pad - qe.k) / qe.stride + 1;
                }
                const int tp_h = pooled_extent(config, s, th, mode);
                const int tp_w = pooled_extent(config, s, tw, mode);
                RelativeCoords<T> tcoords = build_relative_coords<T>(tfh, tfw, tp_h, tp_w);
                CpbGrid<T> tgrid = build_cpb_grid(tcoords, blk.agg->cpb);
                grid.values = interpolate_bias(tgrid.values, grid.n_uh, grid.n_uw);
            }
            sp.cpb_grids.push_back(std::move(grid));
        }
    }
    std::lock_guard<std::mutex> lock(cache_->mutex);
    auto [it, inserted] = cache_->plans.emplace(key, std::move(plan));
    return it->second;
}

namespace detail {

template <typename T>
Tensor<T> block_forward(const BlockParams<T>& blk, const Tensor<T>& rows,
                        const StagePlan<T>& sp, std::size_t block_index) {
    const std::size_t fh = sp.feat_h, fw = sp.feat_w;
    Tensor<T> x = rows;
    {
        Tensor<T> y = layernorm(x, blk.norm1);
        Tensor<T> attn_rows;
        if (blk.agg) {
            attn_rows = aggregated_attention_detailed(rows_to_chw(y, fh, fw), *blk.agg, sp.geom,
                                                      sp.cpb_grids[block_index],
                                                      SimilarityScaling::LengthScaledCosine)
                            .out_rows;
        } else {
            attn_rows = chw_to_rows(mhsa_stage4_forward(rows_to_chw(y, fh, fw), *blk.mhsa));
        }
        Tensor<T> projected = linear(attn_rows, blk.out_proj);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += projected[i];
    }
    {
        Tensor<T> y = layernorm(x, blk.norm2);
        Tensor<T> mixed = chw_to_rows(conv_glu_forward(rows_to_chw(y, fh, fw), blk.glu));
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += mixed[i];
    }
    return x;
}

template <typename T>
Tensor<T> run_stages(const Model<T>& model, const Tensor<T>& image, int last_stage,
                     InferenceMode mode, BiasMode bias_mode) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw ShapeError("forward expects an image tensor [3,H,W], got " + image.shape_str());
    const int h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
    if (h % 32 != 0 || w % 32 != 0)
        throw ShapeError("input extents must be multiples of 32 (got " + std::to_string(h) + "x" +
                         std::to_string(w) + "); pad or resize the image");
    auto plan = model.plan(h, w, mode, bias_mode);
    Tensor<T> planar = image;
    Tensor<T> rows;
    for (int s = 0; s <= last_stage; ++s) {
        const StageParams<T>& stage = model.stages[s];
        const StagePlan<T>& sp = plan->stages[s];
        const PatchEmbedSpec pe = patch_embed_spec(s);
        planar = conv2d(planar, stage.embed.weight, stage.embed.bias, pe.stride, pe.pad);
        rows = layernorm(chw_to_rows(planar), stage.embed.norm);
        for (std::size_t b = 0; b < stage.blocks.size(); ++b)
            rows = block_forward(stage.blocks[b], rows, sp, b);
        if (s < last_stage) planar = rows_to_chw(rows, sp.feat_h, sp.feat_w);
    }
    return rows_to_chw(rows, plan->stages[last_stage].feat_h, plan->stages[last_stage].feat_w);
}

}  // namespace detail

template <typename T>
Tensor<T> forward_to_stage(const Model<T>& model, const Tensor<T>& image, int stage,
                           InferenceMode mode, BiasMode bias_mode) {
    if (stage < 1 || stage > 4) throw ConfigError("stage must be in 1..4");
    return detail::run_stages(model, image, stage - 1, mode, bias_mode);
}

template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& image, InferenceMode mode,
                  BiasMode bias_mode) {
    Tensor<T> feat = detail::run_stages(model, image, 3, mode, bias_mode);
    Tensor<T> rows = layernorm(chw_to_rows(feat), model.head.norm);
    const std::size_t n = rows.dim(0), c = rows.dim(1);
    Tensor<T> pooled({1, c});
    for (std::size_t j = 0; j < c; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += rows.at(i, j);
        pooled.at(0, j) = static_cast<T>(acc / static_cast<double>(n));
    }
    Tensor<T> logits = linear(pooled, model.head.fc);
    return Tensor<T>({static_cast<std::size_t>(model.config.num_classes)}, logits.release());
}

template <typename T>
Tensor<T> erf_saliency(const Model<T>& model, const Tensor<T>& image, int stage, double step,
                       bool force, InferenceMode mode) {
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("erf expects [3,H,W]");
    const std::size_t h = image.dim(1), w = image.dim(2);
    if (!force && (h > 64 || w > 64))
        throw ConfigError("erf input larger than 64x64; pass force to override the guard");
    auto probe = [&](const Tensor<T>& img) {
        Tensor<T> feat = forward_to_stage(model, img, stage, mode);
        const std::size_t ci = feat.dim(1) / 2, cj = feat.dim(2) / 2;
        double acc = 0.0;
        for (std::size_t c = 0; c < feat.dim(0); ++c) acc += feat.at(c, ci, cj);
        return acc;
    };
    Tensor<T> grid({h, w});
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            double total = 0.0;
            for (std::size_t c = 0; c < 3; ++c) {
                Tensor<T> plus = image;
                Tensor<T> minus = image;
                plus.at(c, i, j) += static_cast<T>(step);
                minus.at(c, i, j) -= static_cast<T>(step);
                total += std::abs((probe(plus) - probe(minus)) / (2.0 * step));
            }
            grid.at(i, j) = static_cast<T>(total);
        }
    }
    T maxv = T(0);
    for (std::size_t i = 0; i < grid.size(); ++i) maxv = std::max(maxv, grid[i]);
    if (maxv > T(0))
        for (std::size_t i = 0; i < grid.size(); ++i) grid[i] /= maxv;
    return grid;
}

}  // namespace tnx
