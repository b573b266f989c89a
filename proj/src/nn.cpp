#include "waterseg/nn.hpp"

#include <cmath>

#include "waterseg/errors.hpp"

namespace waterseg::nn {

std::vector<double> truncated_normal(std::mt19937_64& rng, std::size_t n, double std_dev) {
    std::normal_distribution<double> dist(0.0, std_dev);
    std::vector<double> out;
    out.reserve(n);
    while (out.size() < n) {
        const double v = dist(rng);
        if (std::abs(v) <= 2.0 * std_dev) out.push_back(v);
    }
    return out;
}

namespace {

template <typename T>
std::vector<T> cast_all(const std::vector<double>& values) {
    return std::vector<T>(values.begin(), values.end());
}

} // namespace

template <typename T>
Linear<T>::Linear(int64_t in_features, int64_t out_features, std::mt19937_64& rng, bool with_bias) {
    const auto n = static_cast<std::size_t>(in_features * out_features);
    weight = BasicTensor<T>::from_data({out_features, in_features}, cast_all<T>(truncated_normal(rng, n, 0.02)),
                                       true);
    if (with_bias) bias = BasicTensor<T>::zeros({out_features}, true);
}

template <typename T>
BasicTensor<T> Linear<T>::forward(const BasicTensor<T>& x) const {
    if (adapter && !adapter->merged()) return lora_forward(*adapter, x, bias);
    return ops::linear(x, weight, bias);
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
    if (adapter) {
        out.push_back({prefix + ".lora_A", adapter->a()});
        out.push_back({prefix + ".lora_B", adapter->b()});
    }
}

template <typename T>
LayerNorm<T>::LayerNorm(int64_t dim, double eps_)
    : gamma(BasicTensor<T>::full({dim}, T(1), true)), beta(BasicTensor<T>::zeros({dim}, true)), eps(eps_) {}

template <typename T>
BasicTensor<T> LayerNorm<T>::forward(const BasicTensor<T>& x) const {
    return ops::layer_norm(x, gamma, beta, eps);
}

template <typename T>
void LayerNorm<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", gamma});
    out.push_back({prefix + ".bias", beta});
}

template <typename T>
Conv2d<T>::Conv2d(int64_t in_channels, int64_t out_channels, int kernel, ops::Conv2dParams p, std::mt19937_64& rng)
    : params(p) {
    if (p.groups <= 0 || in_channels % p.groups != 0 || out_channels % p.groups != 0) {
        throw ConfigError("conv: channels " + std::to_string(in_channels) + "->" + std::to_string(out_channels) +
                          " not divisible by groups " + std::to_string(p.groups));
    }
    const int64_t fan_out = static_cast<int64_t>(kernel) * kernel * out_channels / p.groups;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_out)));
    const auto n = static_cast<std::size_t>(out_channels * (in_channels / p.groups) * kernel * kernel);
    std::vector<T> w(n);
    for (auto& v : w) v = static_cast<T>(dist(rng));
    weight = BasicTensor<T>::from_data({out_channels, in_channels / p.groups, kernel, kernel}, std::move(w), true);
    bias = BasicTensor<T>::zeros({out_channels}, true);
}

template <typename T>
BasicTensor<T> Conv2d<T>::forward(const BasicTensor<T>& x) const {
    return ops::conv2d(x, weight, bias, params);
}

template <typename T>
void Conv2d<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

template <typename T>
BasicTensor<T> tokens_to_spatial(const BasicTensor<T>& tokens, int64_t height, int64_t width) {
    if (tokens.ndim() != 3 || tokens.dim(1) != height * width) {
        throw ShapeError("tokens " + shape_str(tokens.shape()) + " do not form a " + std::to_string(height) + "x" +
                         std::to_string(width) + " grid");
    }
    auto grid = ops::reshape(tokens, {tokens.dim(0), height, width, tokens.dim(2)});
    return ops::permute(grid, {0, 3, 1, 2});
}

template <typename T>
BasicTensor<T> spatial_to_tokens(const BasicTensor<T>& x) {
    if (x.ndim() != 4) throw ShapeError("expected [B,C,H,W] feature map, got " + shape_str(x.shape()));
    auto hwc = ops::permute(x, {0, 2, 3, 1});
    return ops::reshape(hwc, {x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

template class Linear<float>;
template class Linear<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;
template class Conv2d<float>;
template class Conv2d<double>;

template BasicTensor<float> tokens_to_spatial(const BasicTensor<float>&, int64_t, int64_t);
template BasicTensor<double> tokens_to_spatial(const BasicTensor<double>&, int64_t, int64_t);
template BasicTensor<float> spatial_to_tokens(const BasicTensor<float>&);
template BasicTensor<double> spatial_to_tokens(const BasicTensor<double>&);

} // namespace waterseg::nn
