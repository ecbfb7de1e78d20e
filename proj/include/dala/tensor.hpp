#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a node that owns its values, an optional
// gradient buffer and, for results of recorded operations, the parents and
// backward rule that produced it. Values are never modified after an
// operation writes them; only gradient buffers (and parameter values inside
// an optimizer step) change afterwards.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dala/error.hpp"
#include "dala/random.hpp"

namespace dala {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

inline thread_local bool grad_recording = true;

template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Adds this node's gradient into each non-null sink (one per parent).
    std::function<void(const std::vector<T>& grad_out, std::span<T* const> sinks)> backward;
};

}  // namespace detail

/// Disables lineage recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_recording) { detail::grad_recording = false; }
    ~NoGradGuard() { detail::grad_recording = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <class T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) : node_(std::make_shared<detail::Node<T>>()) {
        for (auto d : shape)
            if (d == 0) throw DimensionError("tensor dimension must be positive, got " + shape_str(shape));
        if (values.size() != shape_numel(shape))
            throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                                 shape_str(shape));
        for (const auto& v : values)
            if (!std::isfinite(v)) throw NumericError("non-finite value in tensor of shape " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->data = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

    static Tensor randn(Shape shape, Rng& rng, T stddev = T{1}, bool requires_grad = false) {
        std::normal_distribution<double> dist(0.0, 1.0);
        std::vector<T> v(shape_numel(shape));
        for (auto& x : v) x = static_cast<T>(dist(rng) * static_cast<double>(stddev));
        return Tensor(std::move(shape), std::move(v), requires_grad);
    }

    explicit operator bool() const { return static_cast<bool>(node_); }

    const Shape& shape() const { return node().shape; }
    std::size_t rank() const { return node().shape.size(); }
    std::size_t dim(std::size_t i) const { return node().shape.at(i); }
    std::size_t numel() const { return node().data.size(); }

    std::span<const T> data() const { return node().data; }
    /// Direct write access; reserved for optimizers and weight loading.
    std::span<T> mutable_data() { return node().data; }
    T item() const {
        if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
        return node().data[0];
    }
    T at(std::size_t flat) const { return node().data.at(flat); }

    bool requires_grad() const { return node().requires_grad; }
    void set_requires_grad(bool on) {
        if (!is_leaf()) throw UsageError("requires_grad can only be changed on leaf tensors");
        node().requires_grad = on;
    }
    bool is_leaf() const { return node().is_leaf; }
    const char* op_name() const { return node().op; }

    bool has_grad() const { return !node().grad.empty(); }
    std::span<const T> grad() const { return node().grad; }
    std::span<T> mutable_grad() { return node().grad; }
    void zero_grad() { node().grad.clear(); }

    /// New leaf holding a copy of the values, with no lineage.
    Tensor detach() const { return Tensor(shape(), node().data, false); }

    const NodePtr& node_ptr() const { return node_; }

    static Tensor from_node(NodePtr n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    detail::Node<T>& node() const {
        if (!node_) throw UsageError("use of an empty tensor handle");
        return *node_;
    }

    NodePtr node_;
};

namespace detail {

template <class T>
using BackwardFn = std::function<void(const std::vector<T>&, std::span<T* const>)>;

template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values, std::vector<Tensor<T>> inputs,
                      BackwardFn<T> backward) {
    for (const auto& v : values)
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->op = op;
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs && grad_recording) {
        node->requires_grad = true;
        node->is_leaf = false;
        node->parents.reserve(inputs.size());
        for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
        node->backward = std::move(backward);
    }
    return Tensor<T>::from_node(std::move(node));
}

template <class T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
    if (t.rank() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                             shape_str(t.shape()));
}


template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using MutMap = Eigen::Map<RowMatrix<T>>;

// c[m x n] += a[m x k] * b[k x n]
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
    using I = Eigen::Index;
    MutMap<T>(c, I(m), I(n)).noalias() += ConstMap<T>(a, I(m), I(k)) * ConstMap<T>(b, I(k), I(n));
}

// c[m x n] += a[k x m]^T * b[k x n]
template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
    using I = Eigen::Index;
    MutMap<T>(c, I(m), I(n)).noalias() += ConstMap<T>(a, I(k), I(m)).transpose() * ConstMap<T>(b, I(k), I(n));
}

// c[m x n] += a[m x k] * b[n x k]^T
template <class T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
    using I = Eigen::Index;
    MutMap<T>(c, I(m), I(n)).noalias() += ConstMap<T>(a, I(m), I(k)) * ConstMap<T>(b, I(n), I(k)).transpose();
}

struct ConvGeometry {
    std::size_t channels, height, width, kh, kw, stride, pad, out_h, out_w;
    std::size_t patch() const { return channels * kh * kw; }
    std::size_t out_area() const { return out_h * out_w; }
    bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <class T>
void im2col(const ConvGeometry& g, const T* img, T* cols) {
    const std::size_t area = g.out_area();
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ki = 0; ki < g.kh; ++ki)
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                T* row = cols + ((c * g.kh + ki) * g.kw + kj) * area;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    T* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
                        std::fill(dst, dst + g.out_w, T{0});
                        continue;
                    }
                    const T* src = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? T{0}
                                                                                          : src[static_cast<std::size_t>(ix)];
                    }
                }
            }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* cols, T* img) {
    const std::size_t area = g.out_area();
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ki = 0; ki < g.kh; ++ki)
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * area;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    T* dst = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width))
                            dst[static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
                    }
                }
            }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Cross-correlation of input[N,C,H,W] with kernel[K,C,kh,kw].
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, std::size_t padding) {
    detail::require_rank(input, 4, "conv2d");
    detail::require_rank(kernel, 4, "conv2d");
    if (stride == 0) throw ConfigError("conv2d: stride must be positive");
    const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::size_t k = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kernel.dim(1) != c)
        throw DimensionError("conv2d: input has " + std::to_string(c) + " channels, kernel expects " +
                             std::to_string(kernel.dim(1)));
    if (kh > h + 2 * padding || kw > w + 2 * padding)
        throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                             shape_str(input.shape()));
    const detail::ConvGeometry g{c, h, w, kh, kw, stride, padding, (h + 2 * padding - kh) / stride + 1,
                                 (w + 2 * padding - kw) / stride + 1};
    const std::size_t in_sz = c * h * w, out_sz = k * g.out_area();
    std::vector<T> out(n * out_sz, T{0});
    std::vector<T> cols(g.is_pointwise() ? 0 : g.patch() * g.out_area());
    const T* x = input.data().data();
    const T* wt = kernel.data().data();
    for (std::size_t s = 0; s < n; ++s) {
        const T* col = x + s * in_sz;
        if (!g.is_pointwise()) {
            detail::im2col(g, x + s * in_sz, cols.data());
            col = cols.data();
        }
        detail::gemm_nn(k, g.patch(), g.out_area(), wt, col, out.data() + s * out_sz);
    }
    return detail::make_result<T>(
        "conv2d", {n, k, g.out_h, g.out_w}, std::move(out), {input, kernel},
        [input, kernel, g, n, k, in_sz, out_sz](const std::vector<T>& gout, std::span<T* const> sinks) {
            T* gin = sinks[0];
            T* gker = sinks[1];
            const T* x = input.data().data();
            const T* wt = kernel.data().data();
            std::vector<T> cols(g.is_pointwise() ? 0 : g.patch() * g.out_area());
            std::vector<T> gcols(g.is_pointwise() || !gin ? 0 : g.patch() * g.out_area());
            for (std::size_t s = 0; s < n; ++s) {
                const T* go = gout.data() + s * out_sz;
                if (gker) {
                    const T* col = x + s * in_sz;
                    if (!g.is_pointwise()) {
                        detail::im2col(g, x + s * in_sz, cols.data());
                        col = cols.data();
                    }
                    detail::gemm_nt(k, g.out_area(), g.patch(), go, col, gker);
                }
                if (gin) {
                    if (g.is_pointwise()) {
                        detail::gemm_tn(g.patch(), k, g.out_area(), wt, go, gin + s * in_sz);
                    } else {
                        std::fill(gcols.begin(), gcols.end(), T{0});
                        detail::gemm_tn(g.patch(), k, g.out_area(), wt, go, gcols.data());
                        detail::col2im_add(g, gcols.data(), gin + s * in_sz);
                    }
                }
            }
        });
}

/// Max pooling without padding. Gradient goes to the first maximum in row-major scan order.
template <class T>
Tensor<T> max_pool2d(const Tensor<T>& input, std::size_t window, std::size_t stride) {
    detail::require_rank(input, 4, "max_pool2d");
    if (window == 0 || stride == 0) throw ConfigError("max_pool2d: window and stride must be positive");
    const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (window > h || window > w)
        throw DimensionError("max_pool2d: window " + std::to_string(window) + " larger than input " +
                             shape_str(input.shape()));
    const std::size_t oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
    std::vector<T> out(n * c * oh * ow);
    std::vector<std::size_t> arg(out.size());
    const T* x = input.data().data();
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const std::size_t base = plane * h * w;
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
                std::size_t best = base + oy * stride * w + ox * stride;
                for (std::size_t ky = 0; ky < window; ++ky)
                    for (std::size_t kx = 0; kx < window; ++kx) {
                        const std::size_t idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if (x[idx] > x[best]) best = idx;
                    }
                out[o] = x[best];
                arg[o] = best;
            }
    }
    return detail::make_result<T>("max_pool2d", {n, c, oh, ow}, std::move(out), {input},
                                  [arg = std::move(arg)](const std::vector<T>& gout, std::span<T* const> sinks) {
                                      if (T* gin = sinks[0])
                                          for (std::size_t i = 0; i < gout.size(); ++i) gin[arg[i]] += gout[i];
                                  });
}

/// Average over floor-based half-open bins [floor(j*H/out), floor((j+1)*H/out)).
template <class T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
    detail::require_rank(input, 4, "adaptive_avg_pool2d");
    const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (out_h == 0 || out_w == 0) throw DimensionError("adaptive_avg_pool2d: output size must be positive");
    if (out_h > h || out_w > w)
        throw DimensionError("adaptive_avg_pool2d: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                             " larger than input " + shape_str(input.shape()));
    auto bin = [](std::size_t j, std::size_t in, std::size_t out) {
        return std::pair{j * in / out, (j + 1) * in / out};
    };
    std::vector<T> out(n * c * out_h * out_w);
    const T* x = input.data().data();
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const T* p = x + plane * h * w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            const auto [y0, y1] = bin(oy, h, out_h);
            for (std::size_t ox = 0; ox < out_w; ++ox, ++o) {
                const auto [x0, x1] = bin(ox, w, out_w);
                T acc{0};
                for (std::size_t y = y0; y < y1; ++y)
                    for (std::size_t xx = x0; xx < x1; ++xx) acc += p[y * w + xx];
                out[o] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
            }
        }
    }
    return detail::make_result<T>(
        "adaptive_avg_pool2d", {n, c, out_h, out_w}, std::move(out), {input},
        [=](const std::vector<T>& gout, std::span<T* const> sinks) {
            T* gin = sinks[0];
            if (!gin) return;
            std::size_t o = 0;
            for (std::size_t plane = 0; plane < n * c; ++plane) {
                T* p = gin + plane * h * w;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const auto [y0, y1] = bin(oy, h, out_h);
                    for (std::size_t ox = 0; ox < out_w; ++ox, ++o) {
                        const auto [x0, x1] = bin(ox, w, out_w);
                        const T share = gout[o] / static_cast<T>((y1 - y0) * (x1 - x0));
                        for (std::size_t y = y0; y < y1; ++y)
                            for (std::size_t xx = x0; xx < x1; ++xx) p[y * w + xx] += share;
                    }
                }
            }
        });
}

/// input[N,D] * weight[D,M] + bias[M].
template <class T>
Tensor<T> fully_connected(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
    detail::require_rank(input, 2, "fully_connected");
    detail::require_rank(weight, 2, "fully_connected");
    detail::require_rank(bias, 1, "fully_connected");
    const std::size_t n = input.dim(0), d = input.dim(1), m = weight.dim(1);
    if (weight.dim(0) != d || bias.dim(0) != m)
        throw DimensionError("fully_connected: input " + shape_str(input.shape()) + ", weight " +
                             shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
    std::vector<T> out(n * m);
    for (std::size_t i = 0; i < n; ++i) std::copy(bias.data().begin(), bias.data().end(), out.begin() + i * m);
    detail::gemm_nn(n, d, m, input.data().data(), weight.data().data(), out.data());
    return detail::make_result<T>(
        "fully_connected", {n, m}, std::move(out), {input, weight, bias},
        [input, weight, n, d, m](const std::vector<T>& gout, std::span<T* const> sinks) {
            if (sinks[0]) detail::gemm_nt(n, m, d, gout.data(), weight.data().data(), sinks[0]);
            if (sinks[1]) detail::gemm_tn(d, n, m, input.data().data(), gout.data(), sinks[1]);
            if (sinks[2])
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) sinks[2][j] += gout[i * m + j];
        });
}

/// x if x > 0 else slope*x; derivative at 0 is slope.
template <class T>
Tensor<T> leaky_relu(const Tensor<T>& input, T slope = T(0.01)) {
    if (slope < T{0}) throw ConfigError("leaky_relu: slope must be non-negative");
    std::vector<T> out(input.numel());
    const auto x = input.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T{0} ? x[i] : slope * x[i];
    return detail::make_result<T>("leaky_relu", input.shape(), std::move(out), {input},
                                  [input, slope](const std::vector<T>& gout, std::span<T* const> sinks) {
                                      T* gin = sinks[0];
                                      if (!gin) return;
                                      const auto x = input.data();
                                      for (std::size_t i = 0; i < gout.size(); ++i)
                                          gin[i] += x[i] > T{0} ? gout[i] : slope * gout[i];
                                  });
}

/// max(0, x); subgradient at 0 is 0.
template <class T>
Tensor<T> relu(const Tensor<T>& input) {
    std::vector<T> out(input.numel());
    const auto x = input.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
    return detail::make_result<T>("relu", input.shape(), std::move(out), {input},
                                  [input](const std::vector<T>& gout, std::span<T* const> sinks) {
                                      T* gin = sinks[0];
                                      if (!gin) return;
                                      const auto x = input.data();
                                      for (std::size_t i = 0; i < gout.size(); ++i)
                                          if (x[i] > T{0}) gin[i] += gout[i];
                                  });
}

/// Multiplies every spatial position of channel c in input[N,C,H,W] by gate[N,C].
template <class T>
Tensor<T> channel_scale(const Tensor<T>& input, const Tensor<T>& gate) {
    detail::require_rank(input, 4, "channel_scale");
    detail::require_rank(gate, 2, "channel_scale");
    const std::size_t n = input.dim(0), c = input.dim(1), area = input.dim(2) * input.dim(3);
    if (gate.dim(0) != n || gate.dim(1) != c)
        throw DimensionError("channel_scale: gate " + shape_str(gate.shape()) + " does not match input " +
                             shape_str(input.shape()));
    std::vector<T> out(input.numel());
    const auto x = input.data();
    const auto gt = gate.data();
    for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t i = 0; i < area; ++i) out[p * area + i] = x[p * area + i] * gt[p];
    return detail::make_result<T>("channel_scale", input.shape(), std::move(out), {input, gate},
                                  [input, gate, n, c, area](const std::vector<T>& gout, std::span<T* const> sinks) {
                                      const auto x = input.data();
                                      const auto gt = gate.data();
                                      for (std::size_t p = 0; p < n * c; ++p) {
                                          T acc{0};
                                          for (std::size_t i = 0; i < area; ++i) {
                                              if (sinks[0]) sinks[0][p * area + i] += gout[p * area + i] * gt[p];
                                              acc += gout[p * area + i] * x[p * area + i];
                                          }
                                          if (sinks[1]) sinks[1][p] += acc;
                                      }
                                  });
}

/// Inverted dropout. Inference mode returns the input handle itself.
template <class T>
Tensor<T> dropout(const Tensor<T>& input, double rate, bool training, std::uint64_t seed) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout: rate must lie in [0,1)");
    if (!training || rate == 0.0) return input;
    auto rng = make_rng(seed, {0xd50ULL});
    std::vector<T> mask(input.numel());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (auto& m : mask) m = uniform01(rng) < rate ? T{0} : keep_scale;
    std::vector<T> out(input.numel());
    const auto x = input.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
    return detail::make_result<T>("dropout", input.shape(), std::move(out), {input},
                                  [mask = std::move(mask)](const std::vector<T>& gout, std::span<T* const> sinks) {
                                      if (T* gin = sinks[0])
                                          for (std::size_t i = 0; i < gout.size(); ++i) gin[i] += gout[i] * mask[i];
                                  });
}

/// Elementwise sum of two same-shape tensors.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_result<T>("add", a.shape(), std::move(out), {a, b},
                                  [](const std::vector<T>& gout, std::span<T* const> sinks) {
                                      for (T* s : sinks)
                                          if (s)
                                              for (std::size_t i = 0; i < gout.size(); ++i) s[i] += gout[i];
                                  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& input) {
    T acc{0};
    for (auto v : input.data()) acc += v;
    const std::size_t count = input.numel();
    return detail::make_result<T>("sum", {1}, {acc}, {input},
                                  [count](const std::vector<T>& gout, std::span<T* const> sinks) {
                                      if (T* gin = sinks[0])
                                          for (std::size_t i = 0; i < count; ++i) gin[i] += gout[0];
                                  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& input, Shape shape) {
    if (shape_numel(shape) != input.numel())
        throw DimensionError("reshape: " + shape_str(input.shape()) + " to " + shape_str(shape));
    return detail::make_result<T>("reshape", std::move(shape), std::vector<T>(input.data().begin(), input.data().end()),
                                  {input}, [](const std::vector<T>& gout, std::span<T* const> sinks) {
                                      if (T* gin = sinks[0])
                                          for (std::size_t i = 0; i < gout.size(); ++i) gin[i] += gout[i];
                                  });
}

/// Scalar element (row, col) of a rank-2 tensor, e.g. one class score of one sample.
template <class T>
Tensor<T> select(const Tensor<T>& input, std::size_t row, std::size_t col) {
    detail::require_rank(input, 2, "select");
    if (row >= input.dim(0) || col >= input.dim(1))
        throw DimensionError("select: index (" + std::to_string(row) + "," + std::to_string(col) +
                             ") outside " + shape_str(input.shape()));
    const std::size_t flat = row * input.dim(1) + col;
    return detail::make_result<T>("select", {1}, {input.data()[flat]}, {input},
                                  [flat](const std::vector<T>& gout, std::span<T* const> sinks) {
                                      if (T* gin = sinks[0]) gin[flat] += gout[0];
                                  });
}

/// Mean over the batch of -log softmax(logits)[label], max-subtracted.
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
    detail::require_rank(logits, 2, "softmax_cross_entropy");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    if (labels.size() != n)
        throw InputError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(n));
    std::vector<T> probs(n * k);
    double loss = 0.0;
    const auto z = logits.data();
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
            throw InputError("softmax_cross_entropy: label " + std::to_string(labels[i]) + " outside [0," +
                             std::to_string(k) + ")");
        const T* row = z.data() + i * k;
        const T mx = *std::max_element(row, row + k);
        T denom{0};
        for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - mx) / denom;
        loss += static_cast<double>(std::log(denom) - (row[labels[i]] - mx));
    }
    std::vector<int> lab(labels.begin(), labels.end());
    return detail::make_result<T>(
        "softmax_cross_entropy", {1}, {static_cast<T>(loss / static_cast<double>(n))}, {logits},
        [probs = std::move(probs), lab = std::move(lab), n, k](const std::vector<T>& gout, std::span<T* const> sinks) {
            T* gin = sinks[0];
            if (!gin) return;
            const T scale = gout[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < k; ++j) {
                    const T onehot = static_cast<std::size_t>(lab[i]) == j ? T{1} : T{0};
                    gin[i * k + j] += scale * (probs[i * k + j] - onehot);
                }
        });
}

template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    return softmax_cross_entropy(logits, std::span<const int>(labels));
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

/// Back-propagates from a scalar. Leaf gradients accumulate across calls;
/// intermediate gradients are recomputed from zero on every call and kept
/// afterwards so callers can read them (Grad-CAM reads feature-map gradients).
/// With accumulate_leaves=false leaf buffers are left untouched.
template <class T>
void backward(const Tensor<T>& loss, bool accumulate_leaves = true) {
    if (!loss) throw UsageError("backward on an empty tensor handle");
    if (loss.numel() != 1) throw UsageError("backward requires a scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad() || loss.is_leaf())
        throw UsageError("backward on a tensor with no recorded lineage (detached or built without gradients)");

    using NodeT = detail::Node<T>;
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> seen;
    std::vector<std::pair<NodeT*, std::size_t>> stack{{loss.node_ptr().get(), 0}};
    seen.insert(loss.node_ptr().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeT* p = node->parents[next++].get();
            if (p->requires_grad && !p->is_leaf && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // order is post-order: parents before children. Reset intermediates.
    for (NodeT* n : order) n->grad.assign(n->data.size(), T{0});
    loss.node_ptr()->grad[0] = T{1};

    std::vector<T*> sinks;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT* n = *it;
        sinks.assign(n->parents.size(), nullptr);
        bool any = false;
        for (std::size_t i = 0; i < n->parents.size(); ++i) {
            NodeT* p = n->parents[i].get();
            if (!p->requires_grad) continue;
            if (p->is_leaf) {
                if (!accumulate_leaves) continue;
                if (p->grad.empty()) p->grad.assign(p->data.size(), T{0});
            }
            sinks[i] = p->grad.data();
            any = true;
        }
        if (any) n->backward(n->grad, sinks);
    }
}

}  // namespace dala
