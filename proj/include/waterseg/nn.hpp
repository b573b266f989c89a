#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "waterseg/lora.hpp"
#include "waterseg/ops.hpp"
#include "waterseg/tensor.hpp"

namespace waterseg::nn {

template <typename T>
struct NamedParam {
    std::string name;
    BasicTensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(int64_t in_features, int64_t out_features, std::mt19937_64& rng, bool with_bias = true);

    BasicTensor<T> forward(const BasicTensor<T>& x) const;
    void collect(const std::string& prefix, ParamList<T>& out) const;

    int64_t in_features() const { return weight.dim(1); }
    int64_t out_features() const { return weight.dim(0); }

    BasicTensor<T> weight; // [out, in]
    BasicTensor<T> bias;   // [out] or undefined
    std::optional<LoraAdapter<T>> adapter;
};

template <typename T>
class LayerNorm {
public:
    LayerNorm() = default;
    explicit LayerNorm(int64_t dim, double eps = 1e-6);

    BasicTensor<T> forward(const BasicTensor<T>& x) const;
    void collect(const std::string& prefix, ParamList<T>& out) const;

    BasicTensor<T> gamma;
    BasicTensor<T> beta;
    double eps = 1e-6;
};

template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(int64_t in_channels, int64_t out_channels, int kernel, ops::Conv2dParams params, std::mt19937_64& rng);

    BasicTensor<T> forward(const BasicTensor<T>& x) const;
    void collect(const std::string& prefix, ParamList<T>& out) const;

    BasicTensor<T> weight; // [out, in/groups, k, k]
    BasicTensor<T> bias;
    ops::Conv2dParams params;
};

// [B,N,D] tokens on an HxW grid <-> [B,D,H,W] feature map.
template <typename T>
BasicTensor<T> tokens_to_spatial(const BasicTensor<T>& tokens, int64_t height, int64_t width);

template <typename T>
BasicTensor<T> spatial_to_tokens(const BasicTensor<T>& x);

std::vector<double> truncated_normal(std::mt19937_64& rng, std::size_t n, double std_dev);

extern template class Linear<float>;
extern template class Linear<double>;
extern template class LayerNorm<float>;
extern template class LayerNorm<double>;
extern template class Conv2d<float>;
extern template class Conv2d<double>;

} // namespace waterseg::nn
