#include "tnx/flops.hpp"

#include "tnx/agg_attention.hpp"
#include "tnx/conv_glu.hpp"

namespace tnx {

namespace {

constexpr std::uint64_t kCpbHidden = 512;

struct StageShape {
    std::uint64_t fh, fw, ph, pw;
};

std::uint64_t linear_params(std::uint64_t out, std::uint64_t in) { return out * in + out; }

std::uint64_t glu_params(std::uint64_t c, double ratio) {
    const std::uint64_t h = conv_glu_hidden(c, ratio);
    return 2 * linear_params(h, c) + (9 * h + h) + linear_params(c, h);
}

std::uint64_t attn_params(const ModelConfig& cfg, int s) {
    const StageConfig& sc = cfg.stages[s];
    const std::uint64_t c = sc.channels;
    const std::uint64_t heads = cfg.heads(s);
    std::uint64_t p = 0;
    if (sc.mixer == MixerKind::AggregatedAttention) {
        p += 4 * linear_params(c, c);  // q, k, v, pool linear
        p += 2 * c;                    // pool norm
        p += heads * static_cast<std::uint64_t>(sc.window_k) * sc.window_k;
        if (cfg.query_embedding_and_tokens)
            p += heads * kHeadDim + heads * kHeadDim * sc.window_k * sc.window_k;
        p += heads;  // tau
        p += linear_params(kCpbHidden, 2) + linear_params(heads, kCpbHidden);
    } else {
        p += 3 * linear_params(c, c);
        if (cfg.query_embedding_and_tokens) p += heads * kHeadDim;
        p += heads;
    }
    p += linear_params(c, c);  // output projection
    return p;
}

std::uint64_t block_params(const ModelConfig& cfg, int s) {
    const StageConfig& sc = cfg.stages[s];
    const std::uint64_t c = sc.channels;
    return 2 * c + attn_params(cfg, s) + 2 * c + glu_params(c, sc.mlp_ratio);
}

std::uint64_t embed_params(const ModelConfig& cfg, int s) {
    const std::uint64_t cin = s == 0 ? 3 : cfg.stages[s - 1].channels;
    const std::uint64_t cout = cfg.stages[s].channels;
    const PatchEmbedSpec pe = patch_embed_spec(s);
    return cout * cin * pe.k * pe.k + cout + 2 * cout;
}

// unique rows of the relative-coordinate table for the CPB MLP
std::uint64_t cpb_unique_rows(int fh, int fw, int ph, int pw) {
    const auto rc = build_relative_coords<double>(fh, fw, ph, pw);
    return static_cast<std::uint64_t>(rc.unique_rows());
}

}  // namespace

std::uint64_t count_params(const ModelConfig& config) {
    validate_config(config);
    std::uint64_t total = 0;
    for (int s = 0; s < 4; ++s)
        total += embed_params(config, s) +
                 static_cast<std::uint64_t>(config.stages[s].blocks) * block_params(config, s);
    const std::uint64_t c4 = config.stages[3].channels;
    total += 2 * c4 + linear_params(config.num_classes, c4);
    return total;
}

FlopReport count_flops(const ModelConfig& config, int h, int w, InferenceMode mode) {
    validate_config(config);
    if (h % 32 != 0 || w % 32 != 0)
        throw ShapeError("count_flops resolution must be a multiple of 32");
    FlopReport report;
    std::array<StageShape, 4> shapes;
    std::uint64_t fh = h, fw = w;
    for (int s = 0; s < 4; ++s) {
        const PatchEmbedSpec pe = patch_embed_spec(s);
        fh = (fh + 2 * pe.pad - pe.k) / pe.stride + 1;
        fw = (fw + 2 * pe.pad - pe.k) / pe.stride + 1;
        shapes[s] = {fh, fw,
                     static_cast<std::uint64_t>(pooled_extent(config, s, h, mode)),
                     static_cast<std::uint64_t>(pooled_extent(config, s, w, mode))};
    }

    std::uint64_t cin = 3;
    for (int s = 0; s < 4; ++s) {
        const StageConfig& sc = config.stages[s];
        const StageShape& sh = shapes[s];
        const std::uint64_t c = sc.channels;
        const std::uint64_t heads = config.heads(s);
        const std::uint64_t hw = sh.fh * sh.fw;
        const std::uint64_t plen = sh.ph * sh.pw;
        const std::string prefix = "stage" + std::to_string(s + 1);
        const PatchEmbedSpec pe = patch_embed_spec(s);

        FlopLine embed;
        embed.section = prefix + ".embed";
        embed.params = embed_params(config, s);
        embed.mac_units = hw * c * cin * pe.k * pe.k;
        embed.other_units = hw * c + 8 * hw * c;  // bias + layernorm
        report.lines.push_back(embed);

        FlopLine attn;
        attn.section = prefix + ".attention";
        attn.params = (2 * c + attn_params(config, s) + 2 * c) * sc.blocks;  // incl. block norms
        FlopLine glu;
        glu.section = prefix + ".convglu";
        glu.params = glu_params(c, sc.mlp_ratio) * sc.blocks;
        const std::uint64_t hidden = conv_glu_hidden(c, sc.mlp_ratio);

        std::uint64_t attn_mac = 0, attn_other = 0;
        if (sc.mixer == MixerKind::AggregatedAttention) {
            const std::uint64_t k = sc.window_k;
            attn_mac = aa_attention_macs(sh.fh, sh.fw, c, k, sh.ph, sh.pw);
            const std::uint64_t n_u = cpb_unique_rows(static_cast<int>(sh.fh),
                                                      static_cast<int>(sh.fw),
                                                      static_cast<int>(sh.ph),
                                                      static_cast<int>(sh.pw));
            attn_mac += n_u * (2 * kCpbHidden + kCpbHidden * heads);
            attn_other += n_u * (kCpbHidden + kCpbHidden + heads);  // fc1 bias, relu, fc2 bias
            attn_other += 5 * hw * c + 2 * plen * c;                // projection biases
            attn_other += 5 * hw * c + hw * c + 8 * plen * c;       // act-and-pool
            attn_other += 3 * (2 * hw * c + plen * c);              // l2 normalization
            attn_other += hw * c;                                   // query embedding add
            attn_other += heads * hw * (k * k + plen) * 7;          // scale+bias+softmax
            attn_other += heads * hw * k * k;                       // positional-attention add
        } else {
            attn_mac = mhsa_macs(sh.fh, sh.fw, c);
            attn_other += 4 * hw * c;            // projection biases
            attn_other += 3 * 2 * hw * c;        // l2 normalization
            attn_other += hw * c;                // query embedding add
            attn_other += heads * hw * hw * 7;   // scale+softmax
        }
        attn_other += 8 * hw * c + hw * c;  // block norm1 + residual add
        attn.mac_units = attn_mac * sc.blocks;
        attn.other_units = attn_other * sc.blocks;
        report.lines.push_back(attn);

        std::uint64_t glu_other = 0;
        glu_other += hw * (2 * hidden + hidden) + hw * c;  // biases (fc1 both branches, dw, fc2)
        glu_other += 5 * hw * hidden;                       // gelu
        glu_other += hw * hidden;                           // gating product
        glu_other += 8 * hw * c + hw * c;                   // block norm2 + residual add
        glu.mac_units = conv_glu_flops(c, sh.fh, sh.fw,
                                       static_cast<std::uint64_t>(sc.mlp_ratio + 0.5), 3) *
                        sc.blocks;
        glu.other_units = glu_other * sc.blocks;
        report.lines.push_back(glu);

        cin = c;
    }

    FlopLine head;
    head.section = "head";
    const std::uint64_t c4 = config.stages[3].channels;
    const std::uint64_t hw4 = shapes[3].fh * shapes[3].fw;
    head.params = 2 * c4 + linear_params(config.num_classes, c4);
    head.mac_units = c4 * static_cast<std::uint64_t>(config.num_classes);
    head.other_units = 8 * hw4 * c4 + hw4 * c4 + config.num_classes;
    report.lines.push_back(head);
    return report;
}

}  // namespace tnx
