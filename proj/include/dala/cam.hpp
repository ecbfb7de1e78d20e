#pragma once

// Grad-CAM and the dynamic-threshold variant: noise ensembling, weighted
// averaging, Otsu thresholding and morphological opening.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dala/error.hpp"
#include "dala/fsutil.hpp"
#include "dala/image.hpp"
#include "dala/random.hpp"
#include "dala/tensor.hpp"

namespace dala {

/// Heatmap with values in [0,1]. Its support is the set of strictly positive cells.
class CamMap {
public:
    CamMap() = default;
    CamMap(std::size_t width, std::size_t height) : width_(width), height_(height), values_(width * height, 0.0) {
        if (width == 0 || height == 0) throw InputError("cam map: size must be positive");
    }
    CamMap(std::size_t width, std::size_t height, std::vector<double> values)
        : width_(width), height_(height), values_(std::move(values)) {
        if (width == 0 || height == 0) throw InputError("cam map: size must be positive");
        if (values_.size() != width * height) throw InputError("cam map: value count does not match size");
        for (double v : values_)
            if (!(v >= 0.0 && v <= 1.0)) throw InputError("cam map: value outside [0,1]");
    }

    std::size_t width() const { return width_; }
    std::size_t height() const { return height_; }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }
    double at(std::size_t x, std::size_t y) const { return values_[y * width_ + x]; }
    const std::vector<double>& values() const { return values_; }

    std::vector<std::uint8_t> support() const {
        std::vector<std::uint8_t> s(values_.size());
        for (std::size_t i = 0; i < s.size(); ++i) s[i] = values_[i] > 0.0 ? 1 : 0;
        return s;
    }
    std::size_t support_size() const {
        return static_cast<std::size_t>(std::count_if(values_.begin(), values_.end(), [](double v) { return v > 0.0; }));
    }

    bool operator==(const CamMap&) const = default;

private:
    std::size_t width_ = 0;
    std::size_t height_ = 0;
    std::vector<double> values_;
};

struct DtGradCamConfig {
    std::size_t ensemble = 10;  // N
    double sigma = 0.1;         // noise level on [-1,1]-normalised inputs
    double w_start = 1.0;
    double w_end = 0.5;
    bool renormalize = true;  // min-max after the weighted average
    bool otsu_enabled = true;
    std::size_t otsu_bins = 256;
    bool morphology_enabled = true;
    std::size_t morph_kernel = 3;
    std::uint64_t seed = 0;
    // Resample the averaged map before thresholding; 0 keeps feature resolution.
    std::size_t upsample_width = 0;
    std::size_t upsample_height = 0;

    void validate() const {
        if (ensemble < 1) throw ConfigError("dt-gradcam: ensemble size must be at least 1");
        if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("dt-gradcam: sigma must be non-negative");
        if (!(w_end > 0.0) || !(w_start >= w_end)) throw ConfigError("dt-gradcam: weights need w_start >= w_end > 0");
        if (otsu_bins < 2) throw ConfigError("dt-gradcam: otsu needs at least 2 bins");
        if (morph_kernel < 1 || morph_kernel % 2 == 0) throw ConfigError("dt-gradcam: morphology kernel must be odd");
        if ((upsample_width == 0) != (upsample_height == 0))
            throw ConfigError("dt-gradcam: set both upsample dimensions or neither");
    }
};

/// Min-max rescale to [0,1]. All-zero input is returned unchanged; a constant
/// positive input becomes all ones.
inline std::vector<double> minmax_normalize(std::vector<double> v) {
    if (v.empty()) return v;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double mn = *lo, mx = *hi;
    if (mx == mn) {
        std::fill(v.begin(), v.end(), mx > 0.0 ? 1.0 : 0.0);
        return v;
    }
    const double range = mx - mn;
    for (auto& x : v) x = std::clamp((x - mn) / range, 0.0, 1.0);
    return v;
}

/// x + sigma * N(0,1), one independent draw per element per member.
template <class T>
std::vector<Tensor<T>> noisy_inputs(const Tensor<T>& x, const DtGradCamConfig& config) {
    if (!(config.sigma >= 0.0)) throw ConfigError("noisy_inputs: sigma must be non-negative");
    std::vector<Tensor<T>> out;
    out.reserve(config.ensemble);
    for (std::size_t i = 0; i < config.ensemble; ++i) {
        if (config.sigma == 0.0) {
            out.push_back(x.detach());
            continue;
        }
        auto rng = make_rng(config.seed, {0x5e7ULL, i});
        std::normal_distribution<double> normal(0.0, 1.0);
        std::vector<T> v(x.data().begin(), x.data().end());
        for (auto& e : v) e = static_cast<T>(static_cast<double>(e) + config.sigma * normal(rng));
        out.emplace_back(x.shape(), std::move(v));
    }
    return out;
}

/// Channel weights: spatial mean of the gradient of each channel of sample 0.
template <class T>
std::vector<double> gradcam_weights(std::span<const T> grad, const Shape& feature_shape) {
    if (feature_shape.size() != 4) throw DimensionError("gradcam: feature map must be [N,C,H,W]");
    const std::size_t c = feature_shape[1], area = feature_shape[2] * feature_shape[3];
    std::vector<double> alpha(c, 0.0);
    if (grad.empty()) return alpha;
    for (std::size_t k = 0; k < c; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < area; ++i) acc += static_cast<double>(grad[k * area + i]);
        alpha[k] = acc / static_cast<double>(area);
    }
    return alpha;
}

/// ReLU of the alpha-weighted channel sum of sample 0, min-max normalised.
template <class T>
CamMap gradcam_from_weights(const Tensor<T>& feature, const std::vector<double>& alpha) {
    const std::size_t c = feature.dim(1), h = feature.dim(2), w = feature.dim(3), area = h * w;
    if (alpha.size() != c) throw DimensionError("gradcam: weight count does not match channel count");
    std::vector<double> cam(area, 0.0);
    const auto a = feature.data();
    for (std::size_t k = 0; k < c; ++k) {
        if (alpha[k] == 0.0) continue;
        for (std::size_t i = 0; i < area; ++i) cam[i] += alpha[k] * static_cast<double>(a[k * area + i]);
    }
    for (auto& v : cam) v = std::max(v, 0.0);
    return CamMap(w, h, minmax_normalize(std::move(cam)));
}

namespace detail {

template <class T>
Tensor<T> as_batch(const Tensor<T>& input) {
    if (input.rank() == 3) return reshape(input.detach(), {1, input.dim(0), input.dim(1), input.dim(2)});
    if (input.rank() == 4 && input.dim(0) == 1) return input;
    throw DimensionError("gradcam: expected one image [C,H,W] or [1,C,H,W], got " + shape_str(input.shape()));
}

}  // namespace detail

/// Vanilla Grad-CAM at the resolution of `layer`.
///
/// `model` must provide num_classes() and forward_features(input, layer)
/// returning {logits, feature map}. Parameter gradient buffers are not touched.
template <class Model, class T>
CamMap gradcam(const Model& model, const Tensor<T>& input, int target_class, const std::string& layer) {
    if (target_class < 0 || static_cast<std::size_t>(target_class) >= model.num_classes())
        throw UsageError("gradcam: class " + std::to_string(target_class) + " outside [0," +
                         std::to_string(model.num_classes()) + ")");
    const auto x = detail::as_batch(input);
    auto [logits, feature] = model.forward_features(x, layer);
    auto score = select(logits, 0, static_cast<std::size_t>(target_class));
    std::vector<double> alpha(feature.dim(1), 0.0);
    if (score.requires_grad()) {
        backward(score, /*accumulate_leaves=*/false);
        if (feature.has_grad()) alpha = gradcam_weights<T>(feature.grad(), feature.shape());
    }
    return gradcam_from_weights(feature, alpha);
}

/// Linearly decreasing weights from w_start to w_end over N members.
inline std::vector<double> weight_schedule(const DtGradCamConfig& config) {
    if (config.ensemble < 1) throw ConfigError("weight_schedule: ensemble size must be at least 1");
    const std::size_t n = config.ensemble;
    if (n == 1) return {config.w_start};
    std::vector<double> w(n);
    const double span = config.w_start - config.w_end;
    for (std::size_t i = 0; i < n; ++i)
        w[i] = config.w_start - span * static_cast<double>(i) / static_cast<double>(n - 1);
    w.back() = config.w_end;
    return w;
}

/// sum(w_i * L_i) / sum(w_i), summed in index order, then optionally min-max
/// normalised.
inline CamMap weighted_average(const std::vector<CamMap>& maps, const std::vector<double>& weights,
                               bool renormalize = true) {
    if (maps.empty()) throw InputError("weighted_average: no maps");
    if (maps.size() != weights.size()) throw InputError("weighted_average: map and weight counts differ");
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw InputError("weighted_average: weights must have a positive sum");
    const auto w0 = maps[0].width(), h0 = maps[0].height();
    std::vector<double> acc(w0 * h0, 0.0);
    for (std::size_t m = 0; m < maps.size(); ++m) {
        if (maps[m].width() != w0 || maps[m].height() != h0) throw InputError("weighted_average: map sizes differ");
        const auto& v = maps[m].values();
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weights[m] * v[i];
    }
    for (auto& v : acc) v = std::clamp(v / total, 0.0, 1.0);
    return CamMap(w0, h0, renormalize ? minmax_normalize(std::move(acc)) : std::move(acc));
}

/// 8-bit style quantisation level of a value in [0,1] for a `bins`-level histogram.
inline std::size_t quantize_level(double v, std::size_t bins) {
    const double q = std::floor(std::clamp(v, 0.0, 1.0) * static_cast<double>(bins - 1) + 0.5);
    return std::min(static_cast<std::size_t>(q), bins - 1);
}

namespace detail {

__extension__ typedef unsigned __int128 u128;

// a * b as a 192-bit value (hi, lo).
inline std::pair<std::uint64_t, u128> mul_wide(u128 a, std::uint64_t b) {
    const u128 p0 = static_cast<u128>(static_cast<std::uint64_t>(a)) * b;
    const u128 p1 = static_cast<u128>(static_cast<std::uint64_t>(a >> 64)) * b;
    const u128 lo = p0 + (p1 << 64);
    return {static_cast<std::uint64_t>(p1 >> 64) + (lo < p0 ? 1 : 0), lo};
}

}  // namespace detail

/// Otsu split level on a histogram: level t separates {<= t} from {> t}.
/// Lowest level wins ties; a histogram without any admissible split gives 0.
///
/// w1 * w2 * (mu1 - mu2)^2 equals (n2*S1 - n1*S2)^2 / (N^2 * n1 * n2), so
/// candidates are compared exactly by cross-multiplying integers; floating
/// rounding cannot reorder tied or nearly tied splits.
inline std::size_t otsu_level(const std::vector<std::uint64_t>& hist) {
    if (hist.size() < 2) throw ConfigError("otsu: at least 2 bins required");
    std::uint64_t total = 0, total_sum = 0;
    for (std::size_t i = 0; i < hist.size(); ++i) {
        total += hist[i];
        total_sum += hist[i] * i;
    }
    if (total == 0) throw InputError("otsu: empty histogram");
    using detail::u128;
    std::uint64_t n1 = 0, sum1 = 0;
    std::size_t best = 0;
    u128 best_num = 0;
    std::uint64_t best_den = 1;
    for (std::size_t t = 0; t + 1 < hist.size(); ++t) {
        n1 += hist[t];
        sum1 += hist[t] * t;
        const std::uint64_t n2 = total - n1, sum2 = total_sum - sum1;
        if (n1 == 0 || n2 == 0) continue;
        const u128 a = static_cast<u128>(n2) * sum1, b = static_cast<u128>(n1) * sum2;
        const auto d = static_cast<std::uint64_t>(a > b ? a - b : b - a);
        const u128 num = static_cast<u128>(d) * d;
        const std::uint64_t den = n1 * n2;
        if (detail::mul_wide(num, best_den) > detail::mul_wide(best_num, den)) {
            best_num = num;
            best_den = den;
            best = t;
        }
    }
    return best;
}

/// Otsu threshold of a heatmap. Values are quantised to `bins` levels
/// (level = round(v * (bins - 1))) and the optimal split level t is found on
/// the histogram. T is the largest map value at a level <= t, so
/// apply_threshold keeps exactly the cells above level t; 0 when no split
/// exists. On-grid maps give T = t / (bins - 1).
inline double otsu_threshold(const CamMap& map, std::size_t bins = 256) {
    if (map.empty()) throw InputError("otsu: empty map");
    if (bins < 2) throw ConfigError("otsu: at least 2 bins required");
    std::vector<std::uint64_t> hist(bins, 0);
    for (double v : map.values()) ++hist[quantize_level(v, bins)];
    const std::size_t t = otsu_level(hist);
    double threshold = 0.0;
    for (double v : map.values())
        if (quantize_level(v, bins) <= t) threshold = std::max(threshold, v);
    return threshold;
}

/// Keeps values strictly above T, zeroes the rest.
inline CamMap apply_threshold(const CamMap& map, double threshold) {
    auto v = map.values();
    for (auto& x : v)
        if (!(x > threshold)) x = 0.0;
    return CamMap(map.width(), map.height(), std::move(v));
}

namespace detail {

// Square erosion and dilation, done separably. Cells outside the image count
// as background.
inline std::vector<std::uint8_t> erode(const std::vector<std::uint8_t>& m, std::size_t w, std::size_t h, std::size_t r) {
    std::vector<std::uint8_t> tmp(m.size()), out(m.size());
    auto inside = [](std::ptrdiff_t i, std::size_t n) { return i >= 0 && i < static_cast<std::ptrdiff_t>(n); };
    const auto rr = static_cast<std::ptrdiff_t>(r);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            std::uint8_t ok = 1;
            for (std::ptrdiff_t d = -rr; d <= rr && ok; ++d) {
                const auto xx = static_cast<std::ptrdiff_t>(x) + d;
                ok = inside(xx, w) && m[y * w + static_cast<std::size_t>(xx)];
            }
            tmp[y * w + x] = ok;
        }
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            std::uint8_t ok = 1;
            for (std::ptrdiff_t d = -rr; d <= rr && ok; ++d) {
                const auto yy = static_cast<std::ptrdiff_t>(y) + d;
                ok = inside(yy, h) && tmp[static_cast<std::size_t>(yy) * w + x];
            }
            out[y * w + x] = ok;
        }
    return out;
}

inline std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& m, std::size_t w, std::size_t h,
                                        std::size_t r) {
    std::vector<std::uint8_t> tmp(m.size()), out(m.size());
    auto inside = [](std::ptrdiff_t i, std::size_t n) { return i >= 0 && i < static_cast<std::ptrdiff_t>(n); };
    const auto rr = static_cast<std::ptrdiff_t>(r);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            std::uint8_t any = 0;
            for (std::ptrdiff_t d = -rr; d <= rr && !any; ++d) {
                const auto xx = static_cast<std::ptrdiff_t>(x) + d;
                any = inside(xx, w) && m[y * w + static_cast<std::size_t>(xx)];
            }
            tmp[y * w + x] = any;
        }
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            std::uint8_t any = 0;
            for (std::ptrdiff_t d = -rr; d <= rr && !any; ++d) {
                const auto yy = static_cast<std::ptrdiff_t>(y) + d;
                any = inside(yy, h) && tmp[static_cast<std::size_t>(yy) * w + x];
            }
            out[y * w + x] = any;
        }
    return out;
}

}  // namespace detail

/// Binary opening of a mask with a kernel x kernel square.
inline std::vector<std::uint8_t> open_mask(const std::vector<std::uint8_t>& mask, std::size_t width,
                                           std::size_t height, std::size_t kernel) {
    if (kernel < 1 || kernel % 2 == 0)
        throw ConfigError("morphology: kernel must be odd and positive, got " + std::to_string(kernel));
    if (mask.size() != width * height) throw InputError("morphology: mask size mismatch");
    const std::size_t r = kernel / 2;
    return detail::dilate(detail::erode(mask, width, height, r), width, height, r);
}

/// Opening applied to the support; values outside the cleaned support are zeroed.
inline CamMap morphological_open(const CamMap& map, std::size_t kernel) {
    const auto cleaned = open_mask(map.support(), map.width(), map.height(), kernel);
    auto v = map.values();
    for (std::size_t i = 0; i < v.size(); ++i)
        if (!cleaned[i]) v[i] = 0.0;
    return CamMap(map.width(), map.height(), std::move(v));
}

/// Bilinear resampling with half-pixel centres, clamped to [0,1].
inline CamMap upsample_bilinear(const CamMap& map, std::size_t out_w, std::size_t out_h) {
    if (out_w == 0 || out_h == 0) throw InputError("upsample: target size must be positive");
    if (out_w == map.width() && out_h == map.height()) return map;
    std::vector<double> out(out_w * out_h);
    resize_bilinear_plane(map.values().data(), map.width(), map.height(), out.data(), out_w, out_h);
    for (auto& v : out) v = std::clamp(v, 0.0, 1.0);
    return CamMap(out_w, out_h, std::move(out));
}

/// Every intermediate of the dynamic-threshold pipeline.
struct DtGradCamResult {
    std::vector<CamMap> members;  // one Grad-CAM per noisy input
    CamMap averaged;              // weighted average (resampled if configured)
    double threshold = 0.0;
    CamMap thresholded;
    CamMap final_map;
};

template <class Model, class T>
DtGradCamResult dt_gradcam_stages(const Model& model, const Tensor<T>& input, int target_class,
                                  const std::string& layer, const DtGradCamConfig& config) {
    config.validate();
    DtGradCamResult r;
    for (const auto& noisy : noisy_inputs(detail::as_batch(input), config))
        r.members.push_back(gradcam(model, noisy, target_class, layer));
    r.averaged = weighted_average(r.members, weight_schedule(config), config.renormalize);
    if (config.upsample_width != 0)
        r.averaged = upsample_bilinear(r.averaged, config.upsample_width, config.upsample_height);
    r.threshold = config.otsu_enabled ? otsu_threshold(r.averaged, config.otsu_bins) : 0.0;
    r.thresholded = apply_threshold(r.averaged, r.threshold);
    r.final_map = config.morphology_enabled ? morphological_open(r.thresholded, config.morph_kernel) : r.thresholded;
    return r;
}

/// Noise-ensembled, weighted, Otsu-thresholded and morphologically cleaned Grad-CAM.
template <class Model, class T>
CamMap dt_gradcam(const Model& model, const Tensor<T>& input, int target_class, const std::string& layer,
                  const DtGradCamConfig& config) {
    return dt_gradcam_stages(model, input, target_class, layer, config).final_map;
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

inline Image heatmap_gray(const CamMap& map) {
    Image img(map.width(), map.height(), 1);
    for (std::size_t i = 0; i < map.size(); ++i) img.pixels[i] = to_byte(map.values()[i]);
    return img;
}

/// Jet-coloured heatmap blended 50/50 over `base` (gray bases are replicated).
inline Image heatmap_overlay(const CamMap& map, const Image& base) {
    const CamMap m = upsample_bilinear(map, base.width, base.height);
    Image out(base.width, base.height, 3);
    for (std::size_t y = 0; y < base.height; ++y)
        for (std::size_t x = 0; x < base.width; ++x) {
            const auto rgb = jet(m.at(x, y));
            for (std::size_t c = 0; c < 3; ++c) {
                const double b = base.at(x, y, base.channels == 3 ? c : 0) / 255.0;
                out.at(x, y, c) = to_byte(0.5 * b + 0.5 * rgb[c]);
            }
        }
    return out;
}

/// Writes the grayscale heatmap and, when a base image is given, the overlay.
inline void render_heatmap(const CamMap& map, const Image* base, const std::filesystem::path& gray_path,
                           const std::filesystem::path& overlay_path = {}) {
    write_png(gray_path, heatmap_gray(map));
    if (base) {
        if (overlay_path.empty()) throw UsageError("render_heatmap: overlay path required with a base image");
        write_png(overlay_path, heatmap_overlay(map, *base));
    }
}

/// Row-major values, comma-separated, 9 significant digits.
inline std::string cam_to_csv(const CamMap& map) {
    std::string out;
    char buf[32];
    for (std::size_t y = 0; y < map.height(); ++y) {
        for (std::size_t x = 0; x < map.width(); ++x) {
            std::snprintf(buf, sizeof buf, "%.9g", map.at(x, y));
            if (x) out.push_back(',');
            out += buf;
        }
        out.push_back('\n');
    }
    return out;
}

inline void write_cam_csv(const CamMap& map, const std::filesystem::path& path) {
    write_file_atomic(path, cam_to_csv(map));
}

}  // namespace dala
