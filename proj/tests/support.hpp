#pragma once

// Test-side oracles: naive loop implementations, finite differences and
// scratch directories. Nothing here calls into the code under test except to
// evaluate the function being differentiated.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "dala/cam.hpp"
#include "dala/tensor.hpp"

namespace dala_test {

namespace fs = std::filesystem;

class TempDir {
public:
    explicit TempDir(const std::string& tag = "dala") {
        static std::uint64_t counter = 0;
        std::random_device rd;
        path_ = fs::temp_directory_path() /
                (tag + "-" + std::to_string(rd()) + "-" + std::to_string(++counter));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& s) const { return path_ / s; }

private:
    fs::path path_;
};

// ---------------------------------------------------------------------------
// Naive loop oracles, row-major NCHW
// ---------------------------------------------------------------------------

inline std::vector<double> conv2d_naive(const std::vector<double>& x, std::size_t n, std::size_t c, std::size_t h,
                                        std::size_t w, const std::vector<double>& k, std::size_t kout,
                                        std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
                                        std::size_t& oh, std::size_t& ow) {
    oh = (h + 2 * pad - kh) / stride + 1;
    ow = (w + 2 * pad - kw) / stride + 1;
    std::vector<double> y(n * kout * oh * ow, 0.0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < kout; ++o)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    double acc = 0.0;
                    for (std::size_t ch = 0; ch < c; ++ch)
                        for (std::size_t u = 0; u < kh; ++u)
                            for (std::size_t v = 0; v < kw; ++v) {
                                const long yy = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                                const long xx = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                                if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w))
                                    continue;
                                acc += x[((b * c + ch) * h + static_cast<std::size_t>(yy)) * w +
                                         static_cast<std::size_t>(xx)] *
                                       k[((o * c + ch) * kh + u) * kw + v];
                            }
                    y[((b * kout + o) * oh + i) * ow + j] = acc;
                }
    return y;
}

inline std::vector<double> max_pool_naive(const std::vector<double>& x, std::size_t planes, std::size_t h,
                                          std::size_t w, std::size_t win, std::size_t stride, std::size_t& oh,
                                          std::size_t& ow) {
    oh = (h - win) / stride + 1;
    ow = (w - win) / stride + 1;
    std::vector<double> y;
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                double m = -INFINITY;
                for (std::size_t u = 0; u < win; ++u)
                    for (std::size_t v = 0; v < win; ++v) m = std::max(m, x[(p * h + i * stride + u) * w + j * stride + v]);
                y.push_back(m);
            }
    return y;
}

inline std::vector<double> adaptive_pool_naive(const std::vector<double>& x, std::size_t planes, std::size_t h,
                                               std::size_t w, std::size_t oh, std::size_t ow) {
    std::vector<double> y;
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                const std::size_t y0 = i * h / oh, y1 = (i + 1) * h / oh;
                const std::size_t x0 = j * w / ow, x1 = (j + 1) * w / ow;
                double s = 0.0;
                for (std::size_t yy = y0; yy < y1; ++yy)
                    for (std::size_t xx = x0; xx < x1; ++xx) s += x[(p * h + yy) * w + xx];
                y.push_back(s / static_cast<double>((y1 - y0) * (x1 - x0)));
            }
    return y;
}

inline std::vector<double> matmul_naive(const std::vector<double>& a, const std::vector<double>& b,
                                        const std::vector<double>& bias, std::size_t n, std::size_t d,
                                        std::size_t m) {
    std::vector<double> y(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double s = bias.empty() ? 0.0 : bias[j];
            for (std::size_t k = 0; k < d; ++k) s += a[i * d + k] * b[k * m + j];
            y[i * m + j] = s;
        }
    return y;
}

template <class T>
std::vector<double> as_double(const dala::Tensor<T>& t) {
    return std::vector<double>(t.data().begin(), t.data().end());
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

/// Uniform values in [-1,1] with |v| >= margin (kept away from activation kinks).
inline std::vector<double> random_away_from_zero(std::size_t n, std::mt19937_64& rng, double margin = 1e-2) {
    std::uniform_real_distribution<double> u(margin, 1.0);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(n);
    for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
    return v;
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Sign pattern of every relu / leaky_relu input reachable from `out`, in a
/// fixed traversal order. Two evaluations with equal signatures lie on the
/// same linear piece of every activation.
inline std::vector<bool> activation_signature(const dala::Tensor<double>& out) {
    std::vector<bool> sig;
    std::vector<const dala::detail::Node<double>*> stack{out.node_ptr().get()};
    std::unordered_set<const void*> seen;
    while (!stack.empty()) {
        const auto* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        const std::string op = n->op;
        if ((op == "relu" || op == "leaky_relu") && !n->parents.empty())
            for (double v : n->parents[0]->data) sig.push_back(v > 0.0);
        for (const auto& p : n->parents) stack.push_back(p.get());
    }
    return sig;
}

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    bool kink_crossed = false;  // some probe moved an activation across its kink
};

/// Relative error with a 1e-6 floor on the denominator so that gradients that
/// are zero up to rounding are compared absolutely.
inline double rel_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// Central differences (step eps) of the scalar `f()` w.r.t. the listed
/// coordinates of `leaves`, against the gradients left by one backward pass.
/// `coords` holds (leaf index, flat element) pairs; empty = every element.
inline GradCheck check_gradients(const std::function<dala::Tensor<double>()>& f,
                                 std::vector<dala::Tensor<double>> leaves,
                                 std::vector<std::pair<std::size_t, std::size_t>> coords = {}, double eps = 1e-4) {
    for (auto& l : leaves) l.zero_grad();
    const auto base = f();
    const auto base_sig = activation_signature(base);
    dala::backward(base);
    std::vector<std::vector<double>> analytic;
    for (const auto& l : leaves) {
        std::vector<double> g(l.numel(), 0.0);
        if (l.has_grad()) std::copy(l.grad().begin(), l.grad().end(), g.begin());
        analytic.push_back(std::move(g));
    }
    if (coords.empty())
        for (std::size_t li = 0; li < leaves.size(); ++li)
            for (std::size_t e = 0; e < leaves[li].numel(); ++e) coords.emplace_back(li, e);
    GradCheck r;
    // Probes are recorded too: the signature walks their lineage.
    for (auto [li, e] : coords) {
        auto values = leaves[li].mutable_data();
        const double orig = values[e];
        values[e] = orig + eps;
        const auto plus = f();
        const double fp = plus.item();
        const bool same_p = activation_signature(plus) == base_sig;
        values[e] = orig - eps;
        const auto minus = f();
        const double fm = minus.item();
        const bool same_m = activation_signature(minus) == base_sig;
        values[e] = orig;
        if (!same_p || !same_m) r.kink_crossed = true;
        const double numeric = (fp - fm) / (2.0 * eps);
        r.max_rel_error = std::max(r.max_rel_error, rel_error(analytic[li][e], numeric));
        ++r.coordinates;
    }
    return r;
}

/// Scalar sum(y * r) for a fixed random r, built from recorded ops so the
/// output gradient is non-uniform.
inline dala::Tensor<double> weighted_sum(const dala::Tensor<double>& y, const std::vector<double>& r) {
    const auto n = y.numel();
    const dala::Tensor<double> w({n, 1}, r);
    const dala::Tensor<double> b({1}, {0.0});
    return dala::reshape(dala::fully_connected(dala::reshape(y, {1, n}), w, b), {1});
}

// ---------------------------------------------------------------------------
// Heatmap oracles
// ---------------------------------------------------------------------------

__extension__ typedef unsigned __int128 u128;

/// Exhaustive Otsu: every split level t (classes <= t and > t) scored with
/// exact integer arithmetic. w1*w2*(mu1-mu2)^2 is proportional to
/// (n2*S1 - n1*S2)^2 / (n1*n2), so candidates are compared by cross
/// multiplication. Strictly larger wins, so the lowest level keeps ties; no
/// admissible split gives 0. Keep n * S below 2^64 and the products in range.
inline std::size_t otsu_bruteforce(const std::vector<std::uint64_t>& hist) {
    std::size_t best = 0;
    u128 best_num = 0, best_den = 1;
    for (std::size_t t = 0; t + 1 < hist.size(); ++t) {
        std::uint64_t n1 = 0, s1 = 0, n2 = 0, s2 = 0;
        for (std::size_t i = 0; i < hist.size(); ++i) {
            if (i <= t) {
                n1 += hist[i];
                s1 += hist[i] * i;
            } else {
                n2 += hist[i];
                s2 += hist[i] * i;
            }
        }
        if (n1 == 0 || n2 == 0) continue;
        const u128 a = static_cast<u128>(n2) * s1, b = static_cast<u128>(n1) * s2;
        const u128 d = a > b ? a - b : b - a;
        const u128 num = d * d, den = static_cast<u128>(n1) * n2;
        if (num * best_den > best_num * den) {
            best_num = num;
            best_den = den;
            best = t;
        }
    }
    return best;
}

/// Map whose values sit exactly on the histogram levels, in a shuffled order.
inline dala::CamMap map_from_histogram(const std::vector<std::uint64_t>& hist, std::size_t width,
                                       std::mt19937_64& rng) {
    std::vector<double> v;
    for (std::size_t i = 0; i < hist.size(); ++i)
        v.insert(v.end(), hist[i], static_cast<double>(i) / static_cast<double>(hist.size() - 1));
    std::shuffle(v.begin(), v.end(), rng);
    while (v.size() % width) v.push_back(0.0);
    const std::size_t height = v.size() / width;
    return dala::CamMap(width, height, std::move(v));
}

/// Opening by definition: a pixel survives erosion when the whole k x k window
/// lies inside the image and on foreground; dilation marks every pixel of the
/// window around a surviving pixel.
inline std::vector<std::uint8_t> open_naive(const std::vector<std::uint8_t>& m, std::size_t w, std::size_t h,
                                            std::size_t k) {
    const long r = static_cast<long>(k / 2), W = static_cast<long>(w), H = static_cast<long>(h);
    std::vector<std::uint8_t> eroded(m.size(), 0), out(m.size(), 0);
    for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x) {
            bool all = true;
            for (long dy = -r; dy <= r; ++dy)
                for (long dx = -r; dx <= r; ++dx) {
                    const long yy = y + dy, xx = x + dx;
                    if (yy < 0 || xx < 0 || yy >= H || xx >= W || !m[static_cast<std::size_t>(yy * W + xx)]) all = false;
                }
            eroded[static_cast<std::size_t>(y * W + x)] = all;
        }
    for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x) {
            if (!eroded[static_cast<std::size_t>(y * W + x)]) continue;
            for (long dy = -r; dy <= r; ++dy)
                for (long dx = -r; dx <= r; ++dx) {
                    const long yy = y + dy, xx = x + dx;
                    if (yy >= 0 && xx >= 0 && yy < H && xx < W) out[static_cast<std::size_t>(yy * W + xx)] = 1;
                }
        }
    return out;
}

inline std::vector<std::uint8_t> random_mask(std::size_t n, double density, std::mt19937_64& rng) {
    std::bernoulli_distribution on(density);
    std::vector<std::uint8_t> m(n);
    for (auto& v : m) v = on(rng);
    return m;
}

/// Two-class model over a fixed feature map A [1,C,H,W]: the class-0 score is
/// the spatial mean of channel `channel` (or a constant when `constant`), the
/// class-1 score is zero. The input is ignored.
struct ChannelMeanModel {
    dala::Tensor<double> features;
    std::size_t channel = 0;
    bool constant = false;

    std::size_t num_classes() const { return 2; }

    std::pair<dala::Tensor<double>, dala::Tensor<double>> forward_features(const dala::Tensor<double>&,
                                                                           const std::string& layer) const {
        if (layer != "features") throw dala::UsageError("unknown layer " + layer);
        const std::size_t c = features.dim(1);
        auto feature = dala::reshape(features, features.shape());
        auto pooled = dala::reshape(dala::adaptive_avg_pool2d(feature, 1, 1), {1, c});
        std::vector<double> w(c * 2, 0.0);
        if (!constant) w[channel * 2] = 1.0;
        auto logits = dala::fully_connected(pooled, dala::Tensor<double>({c, 2}, w),
                                            dala::Tensor<double>({2}, {constant ? 3.0 : 0.0, 0.0}));
        return {logits, feature};
    }
};

}  // namespace dala_test
