#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tnx/backbone.hpp"

namespace tnx {

// Attention-layer complexity in multiply-accumulate units:
//   PFA: 5*H*W*C^2 + 2*Hp*Wp*C^2 + 2*H*W*Hp*Wp*C + 2*H*W*k^2*C
//   AA:  PFA + H*W*k^2*C   (the positional-attention product)
inline std::uint64_t pfa_attention_macs(std::uint64_t h, std::uint64_t w, std::uint64_t c,
                                        std::uint64_t k, std::uint64_t ph, std::uint64_t pw) {
    return 5 * h * w * c * c + 2 * ph * pw * c * c + 2 * h * w * ph * pw * c +
           2 * h * w * k * k * c;
}
inline std::uint64_t aa_attention_macs(std::uint64_t h, std::uint64_t w, std::uint64_t c,
                                       std::uint64_t k, std::uint64_t ph, std::uint64_t pw) {
    return pfa_attention_macs(h, w, c, k, ph, pw) + h * w * k * k * c;
}
inline std::uint64_t mhsa_macs(std::uint64_t h, std::uint64_t w, std::uint64_t c) {
    return 4 * h * w * c * c + 2 * (h * w) * (h * w) * c;
}

// One accountant row. mac_units are multiply-accumulate pairs; other_units
// are element ops counted once (bias adds, LayerNorm at 8/element, softmax
// and GELU at 5/element, l2-normalization at 3/element, plain adds/products
// at 1/element). FLOPs under a convention: mac_units * factor + other_units.
struct FlopLine {
    std::string section;
    std::uint64_t params = 0;
    std::uint64_t mac_units = 0;
    std::uint64_t other_units = 0;

    std::uint64_t flops(int mac_factor) const { return mac_units * mac_factor + other_units; }
};

struct FlopReport {
    std::vector<FlopLine> lines;
    FlopLine total() const {
        FlopLine t;
        t.section = "total";
        for (const auto& l : lines) {
            t.params += l.params;
            t.mac_units += l.mac_units;
            t.other_units += l.other_units;
        }
        return t;
    }
};

std::uint64_t count_params(const ModelConfig& config);
FlopReport count_flops(const ModelConfig& config, int h, int w, InferenceMode mode);

}  // namespace tnx
