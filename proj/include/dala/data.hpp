#pragma once

// Dataset manifests, stratified splitting, preprocessing, augmentation and the
// synthetic localization dataset.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "dala/error.hpp"
#include "dala/fsutil.hpp"
#include "dala/image.hpp"
#include "dala/random.hpp"
#include "dala/tensor.hpp"

namespace dala {

namespace fs = std::filesystem;

struct ManifestEntry {
    std::string image;  // relative to the manifest root
    int label = 0;
    std::optional<std::string> mask;

    bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
    fs::path root;
    std::vector<std::string> class_names;
    std::vector<ManifestEntry> entries;
    std::vector<std::string> warnings;
    std::vector<std::string> errors;  // files excluded from the listing

    std::size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }
    fs::path image_path(std::size_t i) const { return root / entries.at(i).image; }
    std::optional<fs::path> mask_path(std::size_t i) const {
        const auto& m = entries.at(i).mask;
        return m ? std::optional<fs::path>(root / *m) : std::nullopt;
    }

    /// FNV-1a over class names and the ordered (path, label, mask) listing.
    std::string checksum() const {
        Fnv1a h;
        for (const auto& c : class_names) {
            h.update(c);
            h.update("\x1f", 1);
        }
        for (const auto& e : entries) {
            h.update(e.image);
            h.update_int<std::int32_t>(e.label);
            h.update(e.mask.value_or(""));
            h.update("\x1e", 1);
        }
        return h.hex();
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(class_names.size(), 0);
        for (const auto& e : entries) ++counts.at(static_cast<std::size_t>(e.label));
        return counts;
    }

    void validate() const {
        std::set<std::string> seen;
        for (const auto& e : entries) {
            if (e.label < 0 || static_cast<std::size_t>(e.label) >= class_names.size())
                throw InputError("manifest: label " + std::to_string(e.label) + " outside class table for " + e.image);
            if (!seen.insert(e.image).second) throw InputError("manifest: duplicate path " + e.image);
        }
    }

    DatasetManifest subset(const std::vector<std::size_t>& indices) const {
        DatasetManifest m;
        m.root = root;
        m.class_names = class_names;
        for (auto i : indices) m.entries.push_back(entries.at(i));
        return m;
    }
};

inline nlohmann::json to_json(const DatasetManifest& m) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries) {
        nlohmann::json j{{"image", e.image}, {"label", e.label}};
        j["mask"] = e.mask ? nlohmann::json(*e.mask) : nlohmann::json(nullptr);
        entries.push_back(j);
    }
    return {{"root", m.root.string()}, {"classes", m.class_names}, {"checksum", m.checksum()},
            {"entries", entries},      {"warnings", m.warnings},   {"errors", m.errors}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
        m.root = j.at("root").get<std::string>();
        m.class_names = j.at("classes").get<std::vector<std::string>>();
        for (const auto& e : j.at("entries")) {
            ManifestEntry entry{e.at("image").get<std::string>(), e.at("label").get<int>(), std::nullopt};
            if (e.contains("mask") && !e.at("mask").is_null()) entry.mask = e.at("mask").get<std::string>();
            m.entries.push_back(std::move(entry));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("manifest: malformed JSON: ") + e.what());
    }
    m.validate();
    return m;
}

/// Reads a manifest JSON file; a relative root is resolved against the file's directory.
inline DatasetManifest load_manifest(const fs::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    auto m = manifest_from_json(j);
    if (m.root.is_relative()) m.root = (path.parent_path() / m.root).lexically_normal();
    return m;
}

namespace detail {

inline bool has_png_extension(const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext == ".png";
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

/// Lists root/<class>/*.png in lexicographic order with optional masks from
/// root/<class>_masks/<same name>. Undecodable images or masks whose size
/// differs from their image are excluded and listed in `errors`.
inline DatasetManifest scan_directory(const fs::path& root) {
    if (!fs::is_directory(root)) throw IoError("scan_directory: " + root.string() + " is not a directory");
    DatasetManifest m;
    m.root = root;
    std::vector<std::string> classes;
    for (const auto& d : fs::directory_iterator(root))
        if (d.is_directory() && !detail::ends_with(d.path().filename().string(), "_masks"))
            classes.push_back(d.path().filename().string());
    std::sort(classes.begin(), classes.end());
    m.class_names = classes;
    if (classes.empty()) m.warnings.push_back("no class directories under " + root.string());
    for (std::size_t label = 0; label < classes.size(); ++label) {
        const auto dir = root / classes[label];
        const auto mask_dir = root / (classes[label] + "_masks");
        std::vector<std::string> files;
        for (const auto& f : fs::directory_iterator(dir))
            if (f.is_regular_file() && detail::has_png_extension(f.path())) files.push_back(f.path().filename().string());
        std::sort(files.begin(), files.end());
        if (files.empty()) m.warnings.push_back("class directory " + classes[label] + " contains no PNG files");
        for (const auto& name : files) {
            const auto rel = (fs::path(classes[label]) / name).generic_string();
            std::pair<std::size_t, std::size_t> dims;
            try {
                dims = png_dimensions(dir / name);
            } catch (const Error& e) {
                m.errors.push_back(e.what());
                continue;
            }
            ManifestEntry entry{rel, static_cast<int>(label), std::nullopt};
            if (fs::exists(mask_dir / name)) {
                try {
                    if (png_dimensions(mask_dir / name) != dims) {
                        m.errors.push_back((mask_dir / name).string() + ": mask size differs from image");
                        continue;
                    }
                } catch (const Error& e) {
                    m.errors.push_back(e.what());
                    continue;
                }
                entry.mask = (fs::path(classes[label] + "_masks") / name).generic_string();
            }
            m.entries.push_back(std::move(entry));
        }
    }
    if (m.entries.empty()) m.warnings.push_back("manifest is empty");
    return m;
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

struct SplitSpec {
    double train = 0.6;
    double val = 0.1;
    double test = 0.3;
    std::uint64_t seed = 0;
    bool stratified = true;

    void validate() const {
        if (!(train > 0.0 && val > 0.0 && test > 0.0)) throw ConfigError("split: ratios must be positive");
        if (std::abs(train + val + test - 1.0) > 1e-9) throw ConfigError("split: ratios must sum to 1");
    }
};

struct Split {
    DatasetManifest train, val, test;
};

/// Largest-remainder apportionment of n items over ratios. Equal remainders
/// (within 1e-9) go to the larger ratio, then to the later part.
inline std::vector<std::size_t> apportion(std::size_t n, const std::vector<double>& ratios) {
    std::vector<std::size_t> counts(ratios.size());
    std::vector<double> rem(ratios.size());
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        const double exact = ratios[i] * static_cast<double>(n);
        double fl = std::floor(exact);
        if (exact - fl > 1.0 - 1e-9) fl += 1.0;  // 119.99999999 counts as 120
        counts[i] = static_cast<std::size_t>(fl);
        rem[i] = std::max(0.0, exact - fl);
        assigned += counts[i];
    }
    std::vector<std::size_t> order(ratios.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (std::abs(rem[a] - rem[b]) > 1e-9) return rem[a] > rem[b];
        if (ratios[a] != ratios[b]) return ratios[a] > ratios[b];
        return a > b;
    });
    for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++counts[order[i % order.size()]];
    return counts;
}

/// Shuffles each class with the seed, then cuts contiguous train/val/test runs.
/// Stratified splits hit the global largest-remainder totals exactly while
/// every class stays within one sample of its proportional share.
inline Split stratified_split(const DatasetManifest& manifest, const SplitSpec& spec) {
    spec.validate();
    manifest.validate();
    const std::vector<double> ratios{spec.train, spec.val, spec.test};
    const auto totals = apportion(manifest.size(), ratios);
    std::vector<std::size_t> part_of(manifest.size());
    std::vector<std::vector<std::size_t>> parts(3);

    if (!spec.stratified) {
        std::vector<std::size_t> idx(manifest.size());
        std::iota(idx.begin(), idx.end(), 0);
        auto rng = make_rng(spec.seed, {0x5b17ULL});
        std::shuffle(idx.begin(), idx.end(), rng);
        std::size_t pos = 0;
        for (std::size_t p = 0; p < 3; ++p)
            for (std::size_t i = 0; i < totals[p]; ++i) parts[p].push_back(idx[pos++]);
    } else {
        const std::size_t k = manifest.class_names.size();
        std::vector<std::vector<std::size_t>> members(k);
        for (std::size_t i = 0; i < manifest.size(); ++i)
            members[static_cast<std::size_t>(manifest.entries[i].label)].push_back(i);
        for (std::size_t c = 0; c < k; ++c)
            if (!members[c].empty() && members[c].size() < 3)
                throw ConfigError("split: class '" + manifest.class_names[c] + "' has " +
                                  std::to_string(members[c].size()) + " samples; stratified splitting needs 3");
        // Per-class floors, then hand the leftover units to classes so both the
        // class sizes and the global totals come out exact.
        std::vector<std::array<std::size_t, 3>> counts(k);
        std::vector<std::array<double, 3>> frac(k);
        std::vector<std::size_t> row_left(k);
        std::array<std::size_t, 3> col_left = {totals[0], totals[1], totals[2]};
        for (std::size_t c = 0; c < k; ++c) {
            std::size_t used = 0;
            for (std::size_t p = 0; p < 3; ++p) {
                const double exact = ratios[p] * static_cast<double>(members[c].size());
                double fl = std::floor(exact);
                if (exact - fl > 1.0 - 1e-9) fl += 1.0;
                counts[c][p] = static_cast<std::size_t>(fl);
                frac[c][p] = std::max(0.0, exact - fl);
                used += counts[c][p];
                col_left[p] -= counts[c][p];
            }
            row_left[c] = members[c].size() - used;
        }
        std::array<std::size_t, 3> part_order{0, 1, 2};
        std::sort(part_order.begin(), part_order.end(), [&](std::size_t a, std::size_t b) {
            if (col_left[a] != col_left[b]) return col_left[a] > col_left[b];
            return a < b;
        });
        for (std::size_t p : part_order) {
            for (std::size_t unit = 0; unit < col_left[p]; ++unit) {
                std::optional<std::size_t> best;
                for (std::size_t c = 0; c < k; ++c) {
                    if (row_left[c] == 0) continue;
                    if (!best || row_left[c] > row_left[*best] ||
                        (row_left[c] == row_left[*best] && frac[c][p] > frac[*best][p] + 1e-9))
                        best = c;
                }
                if (!best) throw ConfigError("split: ratios cannot be met for this manifest");
                ++counts[*best][p];
                --row_left[*best];
                frac[*best][p] = -1.0;  // one extra unit per class and part at most
            }
        }
        for (std::size_t c = 0; c < k; ++c) {
            auto idx = members[c];
            auto rng = make_rng(spec.seed, {0x5b17ULL, c});
            std::shuffle(idx.begin(), idx.end(), rng);
            std::size_t pos = 0;
            for (std::size_t p = 0; p < 3; ++p)
                for (std::size_t i = 0; i < counts[c][p]; ++i) parts[p].push_back(idx[pos++]);
        }
        for (auto& part : parts) std::sort(part.begin(), part.end());
    }
    return {manifest.subset(parts[0]), manifest.subset(parts[1]), manifest.subset(parts[2])};
}

// ---------------------------------------------------------------------------
// Preprocessing and augmentation
// ---------------------------------------------------------------------------

/// Image as three [0,255] planes (gray is replicated).
inline std::vector<double> image_planes(const Image& img) {
    std::vector<double> planes(3 * img.width * img.height);
    const std::size_t area = img.width * img.height;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < area; ++i)
            planes[c * area + i] = img.pixels[i * img.channels + (img.channels == 3 ? c : 0)];
    return planes;
}

/// Bilinear resize to side x side, then v / 127.5 - 1 per channel.
template <class T = float>
Tensor<T> preprocess(const Image& img, std::size_t target_side) {
    if (target_side == 0) throw ConfigError("preprocess: target side must be positive");
    const auto planes = image_planes(img);
    const std::size_t area = img.width * img.height, out_area = target_side * target_side;
    std::vector<double> resized(out_area);
    std::vector<T> out(3 * out_area);
    for (std::size_t c = 0; c < 3; ++c) {
        resize_bilinear_plane(planes.data() + c * area, img.width, img.height, resized.data(), target_side, target_side);
        for (std::size_t i = 0; i < out_area; ++i) out[c * out_area + i] = static_cast<T>(resized[i] / 127.5 - 1.0);
    }
    return Tensor<T>({3, target_side, target_side}, std::move(out));
}

template <class T = float>
Tensor<T> load_and_preprocess(const fs::path& path, std::size_t target_side = 224) {
    return preprocess<T>(read_png(path), target_side);
}

/// Binary mask (nonzero = foreground) resampled to side x side by nearest neighbour.
inline std::vector<std::uint8_t> load_mask(const fs::path& path, std::size_t width, std::size_t height) {
    const auto img = read_png(path);
    std::vector<std::uint8_t> out(width * height);
    for (std::size_t y = 0; y < height; ++y) {
        const auto sy = std::min(img.height - 1, static_cast<std::size_t>((y + 0.5) * img.height / height));
        for (std::size_t x = 0; x < width; ++x) {
            const auto sx = std::min(img.width - 1, static_cast<std::size_t>((x + 0.5) * img.width / width));
            out[y * width + x] = img.at(sx, sy, 0) != 0 ? 1 : 0;
        }
    }
    return out;
}

struct AugmentSpec {
    double rotation_degrees = 15.0;  // uniform in [-r, r]
    double flip_probability = 0.5;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(flip_probability >= 0.0 && flip_probability <= 1.0))
            throw ConfigError("augment: flip probability must lie in [0,1]");
        if (!(rotation_degrees >= 0.0)) throw ConfigError("augment: rotation range must be non-negative");
    }
};

struct AugmentDraw {
    double angle_degrees = 0.0;
    bool flip = false;
};

inline AugmentDraw augment_draw(const AugmentSpec& spec, std::uint64_t sample_index, std::uint64_t epoch) {
    auto rng = make_rng(spec.seed, {0xa06ULL, sample_index, epoch});
    AugmentDraw d;
    d.angle_degrees = (2.0 * uniform01(rng) - 1.0) * spec.rotation_degrees;
    d.flip = uniform01(rng) < spec.flip_probability;
    return d;
}

/// Rotation about the centre (bilinear, edge-replicate) followed by an
/// optional horizontal flip; deterministic in (seed, sample_index, epoch).
template <class T>
Tensor<T> augment(const Tensor<T>& image, const AugmentSpec& spec, std::uint64_t sample_index, std::uint64_t epoch = 0) {
    spec.validate();
    if (image.rank() != 3) throw DimensionError("augment: expected [C,H,W], got " + shape_str(image.shape()));
    const auto draw = augment_draw(spec, sample_index, epoch);
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    std::vector<T> src(image.data().begin(), image.data().end());
    std::vector<T> dst = src;
    if (draw.angle_degrees != 0.0) {
        const double a = draw.angle_degrees * std::numbers::pi / 180.0;
        const double cs = std::cos(a), sn = std::sin(a);
        const double cx = (static_cast<double>(w) - 1.0) / 2.0, cy = (static_cast<double>(h) - 1.0) / 2.0;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
                const double sx = std::clamp(cs * dx + sn * dy + cx, 0.0, static_cast<double>(w - 1));
                const double sy = std::clamp(-sn * dx + cs * dy + cy, 0.0, static_cast<double>(h - 1));
                const auto x0 = static_cast<std::size_t>(sx), y0 = static_cast<std::size_t>(sy);
                const auto x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
                const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const T* p = src.data() + ch * h * w;
                    const double top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                    const double bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                    dst[ch * h * w + y * w + x] = static_cast<T>(top * (1.0 - fy) + bot * fy);
                }
            }
    }
    if (draw.flip) {
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h; ++y) {
                T* row = dst.data() + ch * h * w + y * w;
                std::reverse(row, row + w);
            }
    }
    return Tensor<T>(image.shape(), std::move(dst));
}

// ---------------------------------------------------------------------------
// In-memory datasets
// ---------------------------------------------------------------------------

template <class T = float>
struct LoadedDataset {
    std::vector<Tensor<T>> images;  // [3,S,S] each
    std::vector<int> labels;
    std::vector<std::string> class_names;
    std::vector<std::string> paths;
    std::size_t side = 0;

    std::size_t size() const { return images.size(); }
};

template <class T = float>
LoadedDataset<T> load_dataset(const DatasetManifest& m, std::size_t side) {
    LoadedDataset<T> d;
    d.class_names = m.class_names;
    d.side = side;
    for (std::size_t i = 0; i < m.size(); ++i) {
        d.images.push_back(load_and_preprocess<T>(m.image_path(i), side));
        d.labels.push_back(m.entries[i].label);
        d.paths.push_back(m.entries[i].image);
    }
    return d;
}

/// Stacks images[indices] into one [N,3,S,S] batch.
template <class T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& images, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw InputError("stack_batch: empty batch");
    const auto& first = images.at(indices[0]);
    std::vector<T> data;
    data.reserve(indices.size() * first.numel());
    for (auto i : indices) {
        const auto& im = images.at(i);
        if (im.shape() != first.shape()) throw DimensionError("stack_batch: images differ in shape");
        data.insert(data.end(), im.data().begin(), im.data().end());
    }
    Shape shape{indices.size()};
    shape.insert(shape.end(), first.shape().begin(), first.shape().end());
    return Tensor<T>(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// Synthetic localization dataset
// ---------------------------------------------------------------------------

/// Two classes on a shared textured background (gray level, faint oriented
/// stripes, pixel noise). "lesion" images add a bright Gaussian blob placed at
/// random inside a quadrant; its half-maximum region is the ground-truth mask.
/// "normal" images carry no blob and no mask.
struct SyntheticSpec {
    std::size_t side = 32;
    std::size_t samples_per_class = 100;
    double base_level = 100.0;
    double noise = 6.0;              // pixel noise std, gray levels
    double stripe_amplitude = 12.0;  // gray levels
    double blob_amplitude = 110.0;   // gray levels at the blob centre
    double blob_sigma = 0.1;         // fraction of the side
    int lesion_quadrant = -1;        // 0..3 fixed quadrant, -1 random per image
    std::uint64_t seed = 0;

    void validate() const {
        if (side < 8) throw ConfigError("synthetic: side must be at least 8");
        if (samples_per_class < 1) throw ConfigError("synthetic: at least one sample per class");
        if (lesion_quadrant < -1 || lesion_quadrant > 3) throw ConfigError("synthetic: quadrant must be -1..3");
        if (!(blob_sigma > 0.0) || !(noise >= 0.0)) throw ConfigError("synthetic: blob sigma > 0 and noise >= 0 required");
    }
};

struct SyntheticSample {
    Image image;
    Image mask;  // empty (0x0) for normal samples
    double blob_x = 0.0, blob_y = 0.0;
};

inline SyntheticSample synthesize_sample(const SyntheticSpec& spec, bool lesion, std::size_t index) {
    auto rng = make_rng(spec.seed, {lesion ? 0x1e5ULL : 0x40dULL, index});
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t n = spec.side;
    const double theta = uniform01(rng) * std::numbers::pi;
    const double period = 4.0 + 4.0 * uniform01(rng);
    const double phase = uniform01(rng) * 2.0 * std::numbers::pi;
    const double sigma = spec.blob_sigma * static_cast<double>(n);
    SyntheticSample s;
    if (lesion) {
        const int q = spec.lesion_quadrant >= 0 ? spec.lesion_quadrant : static_cast<int>(uniform01(rng) * 4.0);
        const double half = static_cast<double>(n) / 2.0;
        const double margin = std::min(sigma, half / 2.0);
        s.blob_x = (q % 2) * half + margin + uniform01(rng) * (half - 2.0 * margin);
        s.blob_y = (q / 2) * half + margin + uniform01(rng) * (half - 2.0 * margin);
        s.mask = Image(n, n, 1);
    }
    s.image = Image(n, n, 1);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const double u = static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta);
            double v = spec.base_level + spec.stripe_amplitude * std::sin(2.0 * std::numbers::pi * u / period + phase);
            if (spec.noise > 0.0) v += spec.noise * normal(rng);
            if (lesion) {
                const double dx = static_cast<double>(x) + 0.5 - s.blob_x, dy = static_cast<double>(y) + 0.5 - s.blob_y;
                const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                v += spec.blob_amplitude * g;
                s.mask.at(x, y) = g >= 0.5 ? 255 : 0;
            }
            s.image.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
        }
    return s;
}

inline constexpr const char* kLesionClass = "lesion";
inline constexpr const char* kNormalClass = "normal";

/// Writes <out>/lesion, <out>/lesion_masks, <out>/normal and manifest.json.
inline DatasetManifest generate_synthetic(const SyntheticSpec& spec, const fs::path& out_dir) {
    spec.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir)) throw IoError("generate: cannot create " + out_dir.string());
    DatasetManifest m;
    m.root = out_dir;
    m.class_names = {kLesionClass, kNormalClass};
    for (int label = 0; label < 2; ++label) {
        const bool lesion = label == 0;
        const std::string cls = m.class_names[static_cast<std::size_t>(label)];
        for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
            char name[32];
            std::snprintf(name, sizeof name, "%s_%05zu.png", cls.c_str(), i);
            const auto s = synthesize_sample(spec, lesion, i);
            const auto rel = (fs::path(cls) / name).generic_string();
            write_png(out_dir / rel, s.image);
            ManifestEntry e{rel, label, std::nullopt};
            if (lesion) {
                const auto mrel = (fs::path(cls + "_masks") / name).generic_string();
                write_png(out_dir / mrel, s.mask);
                e.mask = mrel;
            }
            m.entries.push_back(std::move(e));
        }
    }
    auto j = to_json(m);
    j["root"] = ".";  // relative to the manifest file, so trees are relocatable
    write_file_atomic(out_dir / "manifest.json", j.dump(2) + "\n");
    return m;
}

}  // namespace dala
