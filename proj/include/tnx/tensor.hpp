#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "tnx/common.hpp"

namespace tnx {

// Dense row-major tensor. Extents are fixed at construction; every op in the
// library returns a new tensor, so values can be shared freely across threads.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
        data_.assign(checked_size(dims_), T(0));
    }

    Tensor(std::vector<std::size_t> dims, std::vector<T> data)
        : dims_(std::move(dims)), data_(std::move(data)) {
        if (checked_size(dims_) != data_.size())
            throw ShapeError("tensor data length does not match extents");
    }

    static Tensor full(std::vector<std::size_t> dims, T value) {
        Tensor t(std::move(dims));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    std::size_t rank() const { return dims_.size(); }
    std::size_t dim(std::size_t i) const { return dims_[i]; }
    const std::vector<std::size_t>& dims() const { return dims_; }
    std::size_t size() const { return data_.size(); }

    const T* data() const { return data_.data(); }
    T* data() { return data_.data(); }
    const std::vector<T>& vec() const { return data_; }

    T operator[](std::size_t i) const { return data_[i]; }
    T& operator[](std::size_t i) { return data_[i]; }

    // moves the flat buffer out; the tensor is empty afterwards
    std::vector<T> release() {
        dims_.clear();
        return std::move(data_);
    }

    T at(std::size_t i) const { return data_[i]; }
    T at(std::size_t i, std::size_t j) const { return data_[i * dims_[1] + j]; }
    T at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * dims_[1] + j) * dims_[2] + k];
    }
    T at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return data_[((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
    }
    T& at(std::size_t i) { return data_[i]; }
    T& at(std::size_t i, std::size_t j) { return data_[i * dims_[1] + j]; }
    T& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * dims_[1] + j) * dims_[2] + k];
    }
    T& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        return data_[((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
    }

    bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < dims_.size(); ++i) {
            if (i) os << 'x';
            os << dims_[i];
        }
        os << ']';
        return os.str();
    }

private:
    static std::size_t checked_size(const std::vector<std::size_t>& dims) {
        std::size_t n = 1;
        for (std::size_t d : dims) {
            if (d == 0) throw ShapeError("tensor extents must be positive");
            n *= d;
        }
        return n;
    }

    std::vector<std::size_t> dims_;
    std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using MaskTensor = Tensor<std::uint8_t>;

template <typename T>
struct LinearParams {
    Tensor<T> weight;  // [out, in]
    Tensor<T> bias;    // [out]; empty means no bias

    std::size_t out_dim() const { return weight.dim(0); }
    std::size_t in_dim() const { return weight.dim(1); }
    bool has_bias() const { return bias.size() != 0; }
};

template <typename T>
struct LayerNormParams {
    Tensor<T> gamma;  // [C]
    Tensor<T> beta;   // [C]
    T eps = T(1e-6);
};

template <typename T>
constexpr std::uint8_t dtype_code() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                  "archive dtypes are f32 and f64");
    return std::is_same_v<T, float> ? 0 : 1;
}

}  // namespace tnx
