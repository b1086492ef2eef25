#pragma once

#include <cstdint>

#include "tnx/ops.hpp"

namespace tnx {

enum class ConvGluVariant { ConvGLU, Type1, Type2, Type3 };

inline const char* to_string(ConvGluVariant v) {
    switch (v) {
        case ConvGluVariant::ConvGLU: return "ConvGLU";
        case ConvGluVariant::Type1: return "Type1";
        case ConvGluVariant::Type2: return "Type2";
        case ConvGluVariant::Type3: return "Type3";
    }
    return "?";
}

// Gated channel mixer. hidden = round(2/3 * R * C) so the parameter volume
// matches a plain ConvFFN of expansion ratio R.
template <typename T>
struct ConvGluParams {
    LinearParams<T> w1;  // value branch, C -> hidden
    LinearParams<T> w2;  // gate branch, C -> hidden
    Tensor<T> dw_filter; // [hidden, 3, 3]
    Tensor<T> dw_bias;   // [hidden]
    LinearParams<T> w3;  // hidden -> C
    ConvGluVariant variant = ConvGluVariant::ConvGLU;

    std::size_t hidden() const { return w1.out_dim(); }
};

inline std::size_t conv_glu_hidden(std::size_t channels, double ratio) {
    const double raw = 2.0 / 3.0 * ratio * static_cast<double>(channels);
    const auto rounded = static_cast<std::size_t>(raw + 0.5);
    return rounded == 0 ? 1 : rounded;
}

// ConvGLU(X) = W3( (XW1+B1) .* GELU(DWConv(XW2+B2)) ); the Type-1/2/3
// ablation variants reorder DWConv and GELU around the gate product. The
// output projection is shared across variants.
template <typename T>
Tensor<T> conv_glu_forward(const Tensor<T>& x, const ConvGluParams<T>& params) {
    if (x.rank() != 3) throw ShapeError("conv_glu_forward expects [C,H,W]");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (params.w1.in_dim() != c || params.w2.in_dim() != c)
        throw ShapeError("conv_glu input channels do not match params");
    Tensor<T> rows = chw_to_rows(x);
    Tensor<T> value = linear(rows, params.w1);  // [HW, hidden]
    Tensor<T> gate = linear(rows, params.w2);

    auto dwconv = [&](const Tensor<T>& t) {
        return chw_to_rows(
            depthwise_conv3x3(rows_to_chw(t, h, w), params.dw_filter, params.dw_bias));
    };

    Tensor<T> mixed;
    switch (params.variant) {
        case ConvGluVariant::ConvGLU:
            mixed = hadamard(value, gelu(dwconv(gate)));
            break;
        case ConvGluVariant::Type1:
            mixed = hadamard(value, dwconv(gelu(gate)));
            break;
        case ConvGluVariant::Type2:
            mixed = hadamard(dwconv(value), gelu(gate));
            break;
        case ConvGluVariant::Type3:
            mixed = dwconv(hadamard(value, gelu(gate)));
            break;
        default:
            throw ConfigError("unknown ConvGLU variant");
    }
    return rows_to_chw(linear(mixed, params.w3), h, w);
}

// Complexity formulas (multiply-accumulate units). ConvGLU trades a third
// of the depthwise-conv work against ConvFFN at equal parameter volume.
inline std::uint64_t conv_glu_flops(std::uint64_t c, std::uint64_t h, std::uint64_t w,
                                    std::uint64_t r, std::uint64_t k) {
    const std::uint64_t matmul = 2 * r * h * w * c * c;
    // (2/3)*R*H*W*C*k^2, rounded to nearest integer
    const std::uint64_t dw2 = 2 * r * h * w * c * k * k;
    return matmul + (dw2 + 1) / 3;
}

inline std::uint64_t conv_ffn_flops(std::uint64_t c, std::uint64_t h, std::uint64_t w,
                                    std::uint64_t r, std::uint64_t k) {
    return 2 * r * h * w * c * c + r * h * w * c * k * k;
}

}  // namespace tnx
