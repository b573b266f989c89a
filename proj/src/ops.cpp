#include "waterseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "waterseg/errors.hpp"

namespace waterseg::ops {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
bool wants_grad(std::initializer_list<const BasicTensor<T>*> inputs) {
    if (!grad_enabled()) return false;
    for (const auto* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

template <typename T, typename Fn>
void attach(BasicTensor<T>& out, std::vector<NodePtr<T>> inputs, Fn&& fn) {
    out.node()->requires_grad = true;
    Tape<T>::current().record(std::move(inputs), out.node_ptr(), std::forward<Fn>(fn));
}

template <typename T>
BasicTensor<T> make(Shape shape, std::vector<T> data) {
    return BasicTensor<T>::from_data(std::move(shape), std::move(data), false);
}

// C[m,p] += A[m,n] * B[n,p]
template <typename T>
void gemm_nn(int64_t m, int64_t n, int64_t p, const T* A, const T* B, T* C) {
    for (int64_t i = 0; i < m; ++i) {
        T* c = C + i * p;
        for (int64_t k = 0; k < n; ++k) {
            const T a = A[i * n + k];
            const T* b = B + k * p;
            for (int64_t j = 0; j < p; ++j) c[j] += a * b[j];
        }
    }
}

// C[m,p] += A[n,m]^T * B[n,p]
template <typename T>
void gemm_tn(int64_t m, int64_t n, int64_t p, const T* A, const T* B, T* C) {
    for (int64_t k = 0; k < n; ++k) {
        const T* b = B + k * p;
        for (int64_t i = 0; i < m; ++i) {
            const T a = A[k * m + i];
            T* c = C + i * p;
            for (int64_t j = 0; j < p; ++j) c[j] += a * b[j];
        }
    }
}

template <typename T>
std::vector<T> transposed(int64_t rows, int64_t cols, const T* src) {
    std::vector<T> out(static_cast<std::size_t>(rows * cols));
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
    return out;
}

// C[m,p] += A[m,n] * B[p,n]^T
template <typename T>
void gemm_nt(int64_t m, int64_t n, int64_t p, const T* A, const T* B, T* C) {
    const auto bt = transposed(p, n, B);
    gemm_nn(m, n, p, A, bt.data(), C);
}

std::vector<int64_t> contiguous_strides(const Shape& shape) {
    std::vector<int64_t> strides(shape.size(), 1);
    for (int64_t i = static_cast<int64_t>(shape.size()) - 2; i >= 0; --i) {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    return strides;
}

struct BroadcastPlan {
    Shape out;
    std::vector<int64_t> a_strides; // aligned to out, 0 on broadcast axes
    std::vector<int64_t> b_strides;
    bool identical = false;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
    BroadcastPlan plan;
    const std::size_t n = std::max(a.size(), b.size());
    plan.out.assign(n, 1);
    std::vector<int64_t> ad(n, 1), bd(n, 1);
    std::copy(a.begin(), a.end(), ad.begin() + static_cast<std::ptrdiff_t>(n - a.size()));
    std::copy(b.begin(), b.end(), bd.begin() + static_cast<std::ptrdiff_t>(n - b.size()));
    for (std::size_t i = 0; i < n; ++i) {
        if (ad[i] != bd[i] && ad[i] != 1 && bd[i] != 1) {
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        plan.out[i] = std::max(ad[i], bd[i]);
    }
    const auto as = contiguous_strides(ad);
    const auto bs = contiguous_strides(bd);
    plan.a_strides.resize(n);
    plan.b_strides.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        plan.a_strides[i] = ad[i] == 1 ? 0 : as[i];
        plan.b_strides[i] = bd[i] == 1 ? 0 : bs[i];
    }
    plan.identical = (a == b);
    return plan;
}

// Calls fn(out_index, a_index, b_index) for every output element in order.
template <typename Fn>
void for_each_broadcast(const BroadcastPlan& plan, Fn&& fn) {
    const int64_t total = shape_numel(plan.out);
    if (plan.identical) {
        for (int64_t i = 0; i < total; ++i) fn(i, i, i);
        return;
    }
    const std::size_t n = plan.out.size();
    std::vector<int64_t> counter(n, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t i = 0; i < total; ++i) {
        fn(i, ia, ib);
        for (int64_t ax = static_cast<int64_t>(n) - 1; ax >= 0; --ax) {
            if (++counter[ax] < plan.out[ax]) {
                ia += plan.a_strides[ax];
                ib += plan.b_strides[ax];
                break;
            }
            ia -= plan.a_strides[ax] * (plan.out[ax] - 1);
            ib -= plan.b_strides[ax] * (plan.out[ax] - 1);
            counter[ax] = 0;
        }
    }
}

template <typename T, typename Fwd, typename GradA, typename GradB>
BasicTensor<T> binary_op(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* name, Fwd fwd,
                         GradA grad_a, GradB grad_b) {
    auto plan = plan_broadcast(a.shape(), b.shape(), name);
    std::vector<T> data(static_cast<std::size_t>(shape_numel(plan.out)));
    const auto ad = a.data();
    const auto bd = b.data();
    for_each_broadcast(plan, [&](int64_t o, int64_t i, int64_t j) { data[o] = fwd(ad[i], bd[j]); });
    auto out = make<T>(plan.out, std::move(data));
    if (wants_grad({&a, &b})) {
        auto* an = a.node();
        auto* bn = b.node();
        auto* on = out.node();
        attach(out, {a.node_ptr(), b.node_ptr()}, [an, bn, on, plan, grad_a, grad_b]() {
            for_each_broadcast(plan, [&](int64_t o, int64_t i, int64_t j) {
                const T g = on->grad[o];
                if (an->requires_grad) an->grad[i] += grad_a(g, an->data[i], bn->data[j]);
                if (bn->requires_grad) bn->grad[j] += grad_b(g, an->data[i], bn->data[j]);
            });
        });
    }
    return out;
}

} // namespace

int64_t conv_output_size(int64_t in, int64_t kernel, int64_t stride, int64_t padding) {
    const int64_t span = in + 2 * padding - kernel;
    if (span < 0 || stride <= 0) return 0;
    return span / stride + 1;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return binary_op(
        a, b, "add", [](T x, T y) { return x + y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return binary_op(
        a, b, "sub", [](T x, T y) { return x - y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return binary_op(
        a, b, "mul", [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
        [](T g, T x, T) { return g * x; });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
    std::vector<T> data(a.data().begin(), a.data().end());
    for (auto& v : data) v *= factor;
    auto out = make<T>(a.shape(), std::move(data));
    if (wants_grad({&a})) {
        auto* an = a.node();
        auto* on = out.node();
        attach(out, {a.node_ptr()}, [an, on, factor]() {
            for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * factor;
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
    T total = 0;
    for (T v : a.data()) total += v;
    auto out = make<T>({1}, {total});
    if (wants_grad({&a})) {
        auto* an = a.node();
        auto* on = out.node();
        attach(out, {a.node_ptr()}, [an, on]() {
            const T g = on->grad[0];
            for (auto& v : an->grad) v += g;
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
    int64_t known = 1;
    int infer = -1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) throw ShapeError("reshape: more than one inferred dimension");
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0 && known > 0) shape[infer] = a.numel() / known;
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    auto out = make<T>(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
    if (wants_grad({&a})) {
        auto* an = a.node();
        auto* on = out.node();
        attach(out, {a.node_ptr()}, [an, on]() {
            for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& a, const std::vector<int>& axes) {
    const std::size_t n = a.shape().size();
    if (axes.size() != n) throw ShapeError("permute: axis count does not match rank of " + shape_str(a.shape()));
    std::vector<bool> seen(n, false);
    for (int ax : axes) {
        if (ax < 0 || static_cast<std::size_t>(ax) >= n || seen[ax]) throw ShapeError("permute: invalid axes");
        seen[ax] = true;
    }
    const auto in_strides = contiguous_strides(a.shape());
    Shape out_shape(n);
    std::vector<int64_t> src_strides(n);
    for (std::size_t i = 0; i < n; ++i) {
        out_shape[i] = a.shape()[axes[i]];
        src_strides[i] = in_strides[axes[i]];
    }
    // index map: out linear index -> source linear index
    const int64_t total = a.numel();
    std::vector<int64_t> src_index(static_cast<std::size_t>(total));
    {
        std::vector<int64_t> counter(n, 0);
        int64_t s = 0;
        for (int64_t i = 0; i < total; ++i) {
            src_index[i] = s;
            for (int64_t ax = static_cast<int64_t>(n) - 1; ax >= 0; --ax) {
                if (++counter[ax] < out_shape[ax]) {
                    s += src_strides[ax];
                    break;
                }
                s -= src_strides[ax] * (out_shape[ax] - 1);
                counter[ax] = 0;
            }
        }
    }
    std::vector<T> data(static_cast<std::size_t>(total));
    const auto ad = a.data();
    for (int64_t i = 0; i < total; ++i) data[i] = ad[src_index[i]];
    auto out = make<T>(out_shape, std::move(data));
    if (wants_grad({&a})) {
        auto* an = a.node();
        auto* on = out.node();
        attach(out, {a.node_ptr()}, [an, on, src_index = std::move(src_index)]() {
            for (std::size_t i = 0; i < src_index.size(); ++i) an->grad[src_index[i]] += on->grad[i];
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a, int axis0, int axis1) {
    const int n = static_cast<int>(a.ndim());
    if (axis0 < 0) axis0 += n;
    if (axis1 < 0) axis1 += n;
    std::vector<int> axes(n);
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes.at(axis0), axes.at(axis1));
    return permute(a, axes);
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& ref = parts[0].shape();
    const int n = static_cast<int>(ref.size());
    if (axis < 0) axis += n;
    if (axis < 0 || axis >= n) throw ShapeError("concat: axis out of range");
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == ref.size();
        for (int i = 0; ok && i < n; ++i) ok = (i == axis) || s[i] == ref[i];
        if (!ok) throw ShapeError("concat: incompatible shapes " + shape_str(ref) + " and " + shape_str(s));
        out_shape[axis] += s[axis];
    }
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= ref[i];
    for (int i = axis + 1; i < n; ++i) inner *= ref[i];
    std::vector<T> data(static_cast<std::size_t>(shape_numel(out_shape)));
    const int64_t out_row = out_shape[axis] * inner;
    std::vector<int64_t> offsets;
    int64_t offset = 0;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        const int64_t row = p.shape()[axis] * inner;
        const auto pd = p.data();
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(pd.begin() + o * row, row, data.begin() + o * out_row + offset);
        offset += row;
    }
    auto out = make<T>(out_shape, std::move(data));
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (grad_enabled() && any) {
        std::vector<NodePtr<T>> inputs;
        std::vector<TensorNode<T>*> raw;
        std::vector<int64_t> rows;
        for (const auto& p : parts) {
            inputs.push_back(p.node_ptr());
            raw.push_back(p.node());
            rows.push_back(p.shape()[axis] * inner);
        }
        auto* on = out.node();
        attach(out, std::move(inputs), [raw, rows, offsets, on, outer, out_row]() {
            for (std::size_t k = 0; k < raw.size(); ++k) {
                if (!raw[k]->requires_grad) continue;
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t j = 0; j < rows[k]; ++j)
                        raw[k]->grad[o * rows[k] + j] += on->grad[o * out_row + offsets[k] + j];
            }
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.ndim() < 2 || b.ndim() < 2) {
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const int64_t m = a.dim(-2), n = a.dim(-1), n2 = b.dim(-2), p = b.dim(-1);
    if (n != n2) {
        throw ShapeError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    Shape abatch(a.shape().begin(), a.shape().end() - 2);
    Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    if (abatch.empty()) abatch = {1};
    if (bbatch.empty()) bbatch = {1};
    auto plan = plan_broadcast(abatch, bbatch, "matmul");
    Shape out_shape = plan.out;
    if (a.ndim() == 2 && b.ndim() == 2) out_shape.clear();
    out_shape.push_back(m);
    out_shape.push_back(p);
    std::vector<T> data(static_cast<std::size_t>(shape_numel(out_shape)), T(0));
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    for_each_broadcast(plan, [&](int64_t o, int64_t i, int64_t j) {
        gemm_nn(m, n, p, ad + i * m * n, bd + j * n * p, data.data() + o * m * p);
    });
    auto out = make<T>(out_shape, std::move(data));
    if (wants_grad({&a, &b})) {
        auto* an = a.node();
        auto* bn = b.node();
        auto* on = out.node();
        attach(out, {a.node_ptr(), b.node_ptr()}, [an, bn, on, plan, m, n, p]() {
            for_each_broadcast(plan, [&](int64_t o, int64_t i, int64_t j) {
                const T* g = on->grad.data() + o * m * p;
                if (an->requires_grad) gemm_nt(m, p, n, g, bn->data.data() + j * n * p, an->grad.data() + i * m * n);
                if (bn->requires_grad) gemm_tn(n, m, p, an->data.data() + i * m * n, g, bn->grad.data() + j * n * p);
            });
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
    if (weight.ndim() != 2) throw ShapeError("linear: weight must be 2-D, got " + shape_str(weight.shape()));
    const int64_t d = weight.dim(0), k = weight.dim(1);
    if (x.dim(-1) != k) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != d)) {
        throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    const int64_t rows = x.numel() / k;
    Shape out_shape = x.shape();
    out_shape.back() = d;
    std::vector<T> data(static_cast<std::size_t>(rows * d), T(0));
    if (bias.defined()) {
        const auto bd = bias.data();
        for (int64_t r = 0; r < rows; ++r) std::copy(bd.begin(), bd.end(), data.begin() + r * d);
    }
    const auto wt = transposed(d, k, weight.data().data());
    gemm_nn(rows, k, d, x.data().data(), wt.data(), data.data());
    auto out = make<T>(std::move(out_shape), std::move(data));
    if (wants_grad({&x, &weight, &bias})) {
        auto* xn = x.node();
        auto* wn = weight.node();
        auto* bn = bias.defined() ? bias.node() : nullptr;
        std::vector<NodePtr<T>> inputs{x.node_ptr(), weight.node_ptr()};
        if (bn) inputs.push_back(bias.node_ptr());
        auto* on = out.node();
        attach(out, std::move(inputs), [xn, wn, bn, on, rows, d, k]() {
            const T* g = on->grad.data();
            if (xn->requires_grad) gemm_nn(rows, d, k, g, wn->data.data(), xn->grad.data());
            if (wn->requires_grad) gemm_tn(d, rows, k, g, xn->data.data(), wn->grad.data());
            if (bn && bn->requires_grad) {
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < d; ++j) bn->grad[j] += g[r * d + j];
            }
        });
    }
    return out;
}

namespace {

struct ConvGeometry {
    int64_t batch, channels, height, width;
    int64_t out_channels, kh, kw;
    int64_t out_h, out_w;
    int64_t groups, cin_per_group, cout_per_group;
    int64_t stride, padding;

    int64_t patch() const { return cin_per_group * kh * kw; }
    int64_t positions() const { return out_h * out_w; }
};

template <typename T>
void im2col(const ConvGeometry& g, const T* x, int64_t group, std::vector<T>& cols) {
    const int64_t P = g.positions();
    cols.assign(static_cast<std::size_t>(g.patch() * P), T(0));
    for (int64_t c = 0; c < g.cin_per_group; ++c) {
        const T* plane = x + (group * g.cin_per_group + c) * g.height * g.width;
        for (int64_t ky = 0; ky < g.kh; ++ky) {
            for (int64_t kx = 0; kx < g.kw; ++kx) {
                T* row = cols.data() + ((c * g.kh + ky) * g.kw + kx) * P;
                for (int64_t oy = 0; oy < g.out_h; ++oy) {
                    const int64_t iy = oy * g.stride + ky - g.padding;
                    if (iy < 0 || iy >= g.height) continue;
                    for (int64_t ox = 0; ox < g.out_w; ++ox) {
                        const int64_t ix = ox * g.stride + kx - g.padding;
                        if (ix >= 0 && ix < g.width) row[oy * g.out_w + ox] = plane[iy * g.width + ix];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const std::vector<T>& cols, int64_t group, T* dx) {
    const int64_t P = g.positions();
    for (int64_t c = 0; c < g.cin_per_group; ++c) {
        T* plane = dx + (group * g.cin_per_group + c) * g.height * g.width;
        for (int64_t ky = 0; ky < g.kh; ++ky) {
            for (int64_t kx = 0; kx < g.kw; ++kx) {
                const T* row = cols.data() + ((c * g.kh + ky) * g.kw + kx) * P;
                for (int64_t oy = 0; oy < g.out_h; ++oy) {
                    const int64_t iy = oy * g.stride + ky - g.padding;
                    if (iy < 0 || iy >= g.height) continue;
                    for (int64_t ox = 0; ox < g.out_w; ++ox) {
                        const int64_t ix = ox * g.stride + kx - g.padding;
                        if (ix >= 0 && ix < g.width) plane[iy * g.width + ix] += row[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

} // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      Conv2dParams params) {
    if (x.ndim() != 4 || weight.ndim() != 4) {
        throw ShapeError("conv2d: expected 4-D input and weight, got " + shape_str(x.shape()) + " and " +
                         shape_str(weight.shape()));
    }
    ConvGeometry g{};
    g.batch = x.dim(0);
    g.channels = x.dim(1);
    g.height = x.dim(2);
    g.width = x.dim(3);
    g.out_channels = weight.dim(0);
    g.kh = weight.dim(2);
    g.kw = weight.dim(3);
    g.groups = params.groups;
    g.stride = params.stride;
    g.padding = params.padding;
    if (g.groups <= 0 || g.channels % g.groups != 0 || g.out_channels % g.groups != 0) {
        throw ShapeError("conv2d: channels " + std::to_string(g.channels) + "/" + std::to_string(g.out_channels) +
                         " not divisible by groups " + std::to_string(g.groups));
    }
    g.cin_per_group = g.channels / g.groups;
    g.cout_per_group = g.out_channels / g.groups;
    if (weight.dim(1) != g.cin_per_group) {
        throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " does not match input " +
                         shape_str(x.shape()) + " with groups " + std::to_string(g.groups));
    }
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != g.out_channels)) {
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(g.out_channels) + " output channels");
    }
    g.out_h = conv_output_size(g.height, g.kh, g.stride, g.padding);
    g.out_w = conv_output_size(g.width, g.kw, g.stride, g.padding);
    if (g.out_h < 1 || g.out_w < 1) {
        throw ShapeError("conv2d: non-positive output size for input " + shape_str(x.shape()) + ", kernel " +
                         shape_str(weight.shape()) + ", stride " + std::to_string(g.stride) + ", padding " +
                         std::to_string(g.padding));
    }
    const int64_t P = g.positions();
    const int64_t K = g.patch();
    std::vector<T> data(static_cast<std::size_t>(g.batch * g.out_channels * P), T(0));
    std::vector<T> cols;
    const T* xd = x.data().data();
    const T* wd = weight.data().data();
    for (int64_t b = 0; b < g.batch; ++b) {
        for (int64_t grp = 0; grp < g.groups; ++grp) {
            im2col(g, xd + b * g.channels * g.height * g.width, grp, cols);
            T* out = data.data() + (b * g.out_channels + grp * g.cout_per_group) * P;
            gemm_nn(g.cout_per_group, K, P, wd + grp * g.cout_per_group * K, cols.data(), out);
        }
        if (bias.defined()) {
            const auto bd = bias.data();
            for (int64_t o = 0; o < g.out_channels; ++o) {
                T* out = data.data() + (b * g.out_channels + o) * P;
                for (int64_t i = 0; i < P; ++i) out[i] += bd[o];
            }
        }
    }
    auto out = make<T>({g.batch, g.out_channels, g.out_h, g.out_w}, std::move(data));
    if (wants_grad({&x, &weight, &bias})) {
        auto* xn = x.node();
        auto* wn = weight.node();
        auto* bn = bias.defined() ? bias.node() : nullptr;
        std::vector<NodePtr<T>> inputs{x.node_ptr(), weight.node_ptr()};
        if (bn) inputs.push_back(bias.node_ptr());
        auto* on = out.node();
        attach(out, std::move(inputs), [xn, wn, bn, on, g]() {
            const int64_t P = g.positions();
            const int64_t K = g.patch();
            const int64_t in_plane = g.channels * g.height * g.width;
            std::vector<T> cols;
            std::vector<T> dcols;
            for (int64_t b = 0; b < g.batch; ++b) {
                for (int64_t grp = 0; grp < g.groups; ++grp) {
                    const T* go = on->grad.data() + (b * g.out_channels + grp * g.cout_per_group) * P;
                    if (wn->requires_grad) {
                        im2col(g, xn->data.data() + b * in_plane, grp, cols);
                        gemm_nt(g.cout_per_group, P, K, go, cols.data(),
                                wn->grad.data() + grp * g.cout_per_group * K);
                    }
                    if (xn->requires_grad) {
                        dcols.assign(static_cast<std::size_t>(K * P), T(0));
                        gemm_tn(K, g.cout_per_group, P, wn->data.data() + grp * g.cout_per_group * K, go,
                                dcols.data());
                        col2im_add(g, dcols, grp, xn->grad.data() + b * in_plane);
                    }
                }
                if (bn && bn->requires_grad) {
                    for (int64_t o = 0; o < g.out_channels; ++o) {
                        const T* go = on->grad.data() + (b * g.out_channels + o) * P;
                        T acc = 0;
                        for (int64_t i = 0; i < P; ++i) acc += go[i];
                        bn->grad[o] += acc;
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          double eps) {
    const int64_t d = x.dim(-1);
    if (gamma.numel() != d || beta.numel() != d) {
        throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match last axis of " + shape_str(x.shape()));
    }
    const int64_t rows = x.numel() / d;
    std::vector<T> data(static_cast<std::size_t>(x.numel()));
    std::vector<T> xhat(data.size());
    std::vector<T> rstd(static_cast<std::size_t>(rows));
    const auto xd = x.data();
    const auto gd = gamma.data();
    const auto bd = beta.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = xd.data() + r * d;
        T mu = 0;
        for (int64_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<T>(d);
        T var = 0;
        for (int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(d);
        const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
        rstd[r] = rs;
        for (int64_t j = 0; j < d; ++j) {
            const T h = (row[j] - mu) * rs;
            xhat[r * d + j] = h;
            data[r * d + j] = h * gd[j] + bd[j];
        }
    }
    auto out = make<T>(x.shape(), std::move(data));
    if (wants_grad({&x, &gamma, &beta})) {
        auto* xn = x.node();
        auto* gn = gamma.node();
        auto* bn = beta.node();
        auto* on = out.node();
        attach(out, {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
               [xn, gn, bn, on, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)]() {
                   std::vector<T> dxhat(static_cast<std::size_t>(d));
                   for (int64_t r = 0; r < rows; ++r) {
                       const T* g = on->grad.data() + r * d;
                       const T* h = xhat.data() + r * d;
                       if (gn->requires_grad)
                           for (int64_t j = 0; j < d; ++j) gn->grad[j] += g[j] * h[j];
                       if (bn->requires_grad)
                           for (int64_t j = 0; j < d; ++j) bn->grad[j] += g[j];
                       if (!xn->requires_grad) continue;
                       T mean_d = 0, mean_dh = 0;
                       for (int64_t j = 0; j < d; ++j) {
                           dxhat[j] = g[j] * gn->data[j];
                           mean_d += dxhat[j];
                           mean_dh += dxhat[j] * h[j];
                       }
                       mean_d /= static_cast<T>(d);
                       mean_dh /= static_cast<T>(d);
                       for (int64_t j = 0; j < d; ++j)
                           xn->grad[r * d + j] += rstd[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                   }
               });
    }
    return out;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
    const int64_t n = x.dim(-1);
    const int64_t rows = x.numel() / n;
    std::vector<T> data(static_cast<std::size_t>(x.numel()));
    const auto xd = x.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = xd.data() + r * n;
        T* o = data.data() + r * n;
        const T mx = *std::max_element(row, row + n);
        T total = 0;
        for (int64_t j = 0; j < n; ++j) {
            o[j] = std::exp(row[j] - mx);
            total += o[j];
        }
        for (int64_t j = 0; j < n; ++j) o[j] /= total;
    }
    auto out = make<T>(x.shape(), std::move(data));
    if (wants_grad({&x})) {
        auto* xn = x.node();
        auto* on = out.node();
        attach(out, {x.node_ptr()}, [xn, on, rows, n]() {
            for (int64_t r = 0; r < rows; ++r) {
                const T* y = on->data.data() + r * n;
                const T* g = on->grad.data() + r * n;
                T dot = 0;
                for (int64_t j = 0; j < n; ++j) dot += g[j] * y[j];
                for (int64_t j = 0; j < n; ++j) xn->grad[r * n + j] += y[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    std::vector<T> data(static_cast<std::size_t>(x.numel()));
    const auto xd = x.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const T v = xd[i];
        data[i] = T(0.5) * v * (T(1) + std::erf(v * static_cast<T>(inv_sqrt2)));
    }
    auto out = make<T>(x.shape(), std::move(data));
    if (wants_grad({&x})) {
        auto* xn = x.node();
        auto* on = out.node();
        attach(out, {x.node_ptr()}, [xn, on]() {
            constexpr double inv_sqrt_2pi = 0.39894228040143267794;
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                const T v = xn->data[i];
                const T cdf = T(0.5) * (T(1) + std::erf(v * static_cast<T>(inv_sqrt2)));
                const T pdf = static_cast<T>(inv_sqrt_2pi) * std::exp(T(-0.5) * v * v);
                xn->grad[i] += on->grad[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

namespace {

struct InterpAxis {
    std::vector<int64_t> i0, i1;
    std::vector<double> w0, w1;
};

InterpAxis interp_axis(int64_t in, int64_t out) {
    InterpAxis a;
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t d = 0; d < out; ++d) {
        double src = scale * (static_cast<double>(d) + 0.5) - 0.5;
        if (src < 0) src = 0;
        const auto lo = static_cast<int64_t>(src);
        const int64_t hi = lo < in - 1 ? lo + 1 : lo;
        const double l1 = src - static_cast<double>(lo);
        a.i0.push_back(lo);
        a.i1.push_back(hi);
        a.w0.push_back(1.0 - l1);
        a.w1.push_back(l1);
    }
    return a;
}

} // namespace

template <typename T>
BasicTensor<T> bilinear_upsample2d(const BasicTensor<T>& x, int64_t out_h, int64_t out_w) {
    if (x.ndim() != 4) throw ShapeError("bilinear_upsample2d: expected [B,C,H,W], got " + shape_str(x.shape()));
    if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_upsample2d: output size must be positive");
    const int64_t planes = x.dim(0) * x.dim(1);
    const int64_t H = x.dim(2), W = x.dim(3);
    const auto ay = interp_axis(H, out_h);
    const auto ax = interp_axis(W, out_w);
    std::vector<T> data(static_cast<std::size_t>(planes * out_h * out_w));
    const auto xd = x.data();
    for (int64_t p = 0; p < planes; ++p) {
        const T* src = xd.data() + p * H * W;
        T* dst = data.data() + p * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
            const T* r0 = src + ay.i0[oy] * W;
            const T* r1 = src + ay.i1[oy] * W;
            const T wy0 = static_cast<T>(ay.w0[oy]), wy1 = static_cast<T>(ay.w1[oy]);
            for (int64_t ox = 0; ox < out_w; ++ox) {
                const T wx0 = static_cast<T>(ax.w0[ox]), wx1 = static_cast<T>(ax.w1[ox]);
                dst[oy * out_w + ox] = wy0 * (wx0 * r0[ax.i0[ox]] + wx1 * r0[ax.i1[ox]]) +
                                       wy1 * (wx0 * r1[ax.i0[ox]] + wx1 * r1[ax.i1[ox]]);
            }
        }
    }
    auto out = make<T>({x.dim(0), x.dim(1), out_h, out_w}, std::move(data));
    if (wants_grad({&x})) {
        auto* xn = x.node();
        auto* on = out.node();
        attach(out, {x.node_ptr()}, [xn, on, ay, ax, planes, H, W, out_h, out_w]() {
            for (int64_t p = 0; p < planes; ++p) {
                T* src = xn->grad.data() + p * H * W;
                const T* g = on->grad.data() + p * out_h * out_w;
                for (int64_t oy = 0; oy < out_h; ++oy) {
                    T* r0 = src + ay.i0[oy] * W;
                    T* r1 = src + ay.i1[oy] * W;
                    const T wy0 = static_cast<T>(ay.w0[oy]), wy1 = static_cast<T>(ay.w1[oy]);
                    for (int64_t ox = 0; ox < out_w; ++ox) {
                        const T v = g[oy * out_w + ox];
                        const T wx0 = static_cast<T>(ax.w0[ox]), wx1 = static_cast<T>(ax.w1[ox]);
                        r0[ax.i0[ox]] += v * wy0 * wx0;
                        r0[ax.i1[ox]] += v * wy0 * wx1;
                        r1[ax.i0[ox]] += v * wy1 * wx0;
                        r1[ax.i1[ox]] += v * wy1 * wx1;
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> binary_cross_entropy_with_logits(const BasicTensor<T>& logits, const BasicTensor<T>& target) {
    if (logits.shape() != target.shape()) {
        throw ShapeError("binary_cross_entropy_with_logits: logits " + shape_str(logits.shape()) +
                         " and target " + shape_str(target.shape()) + " differ");
    }
    const auto z = logits.data();
    const auto t = target.data();
    for (T v : t) {
        if (v != T(0) && v != T(1)) throw ValidationError("binary_cross_entropy_with_logits: target is not binary");
    }
    const auto n = static_cast<T>(logits.numel());
    double total = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const T v = z[i];
        total += static_cast<double>(std::max(v, T(0)) - v * t[i] + std::log1p(std::exp(-std::abs(v))));
    }
    auto out = make<T>({1}, {static_cast<T>(total / static_cast<double>(n))});
    if (wants_grad({&logits})) {
        auto* zn = logits.node();
        auto* tn = target.node();
        auto* on = out.node();
        attach(out, {logits.node_ptr(), target.node_ptr()}, [zn, tn, on, n]() {
            const T g = on->grad[0] / n;
            for (std::size_t i = 0; i < zn->data.size(); ++i) {
                const T s = T(1) / (T(1) + std::exp(-zn->data[i]));
                zn->grad[i] += g * (s - tn->data[i]);
            }
        });
    }
    return out;
}

#define WATERSEG_INSTANTIATE_OPS(T)                                                                             \
    template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                \
    template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                \
    template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                \
    template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                  \
    template BasicTensor<T> sum(const BasicTensor<T>&);                                                       \
    template BasicTensor<T> mean(const BasicTensor<T>&);                                                      \
    template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                            \
    template BasicTensor<T> permute(const BasicTensor<T>&, const std::vector<int>&);                          \
    template BasicTensor<T> transpose(const BasicTensor<T>&, int, int);                                       \
    template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, int);                                  \
    template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                             \
    template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);      \
    template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,       \
                                   Conv2dParams);                                                              \
    template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,   \
                                       double);                                                                \
    template BasicTensor<T> softmax(const BasicTensor<T>&);                                                   \
    template BasicTensor<T> gelu(const BasicTensor<T>&);                                                      \
    template BasicTensor<T> bilinear_upsample2d(const BasicTensor<T>&, int64_t, int64_t);                     \
    template BasicTensor<T> binary_cross_entropy_with_logits(const BasicTensor<T>&, const BasicTensor<T>&);

WATERSEG_INSTANTIATE_OPS(float)
WATERSEG_INSTANTIATE_OPS(double)

#undef WATERSEG_INSTANTIATE_OPS

} // namespace waterseg::ops
