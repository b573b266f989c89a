#pragma once

#include <vector>

#include "waterseg/tensor.hpp"

// Differentiable operations. Each op records a gradient rule on the current
// thread's tape when gradient mode is on and any input requires grad.
namespace waterseg::ops {

// Elementwise with numpy-style broadcasting.
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& a, T factor);

template <typename T> BasicTensor<T> sum(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& a);

template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);
template <typename T> BasicTensor<T> permute(const BasicTensor<T>& a, const std::vector<int>& axes);
template <typename T> BasicTensor<T> transpose(const BasicTensor<T>& a, int axis0, int axis1);
template <typename T> BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis);

// [..., m, n] x [..., n, p] -> [..., m, p]; batch dims broadcast.
template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// x[..., k] * weight[d, k]^T + bias[d]. bias may be undefined.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias);

struct Conv2dParams {
    int stride = 1;
    int padding = 0;
    int groups = 1;
};

// Cross-correlation. x[B,C,H,W], weight[O,C/groups,kh,kw], bias[O] or undefined.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      Conv2dParams params);

int64_t conv_output_size(int64_t in, int64_t kernel, int64_t stride, int64_t padding);

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          double eps);

// Softmax over the last axis.
template <typename T> BasicTensor<T> softmax(const BasicTensor<T>& x);

// Exact (erf) GELU.
template <typename T> BasicTensor<T> gelu(const BasicTensor<T>& x);

// Bilinear resize of x[B,C,H,W], align_corners = false.
template <typename T> BasicTensor<T> bilinear_upsample2d(const BasicTensor<T>& x, int64_t out_h, int64_t out_w);

// Mean binary cross-entropy over all elements; targets must be exactly 0 or 1.
template <typename T>
BasicTensor<T> binary_cross_entropy_with_logits(const BasicTensor<T>& logits, const BasicTensor<T>& target);

} // namespace waterseg::ops
