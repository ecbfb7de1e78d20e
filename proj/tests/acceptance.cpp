// Acceptance run: one PASS/FAIL line per criterion. Tolerances and sizes are
// fixed below; exit status is non-zero when any criterion fails.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dala/cam.hpp"
#include "dala/cam_eval.hpp"
#include "dala/data.hpp"
#include "dala/metrics.hpp"
#include "dala/nn.hpp"
#include "dala/train.hpp"
#include "support.hpp"

using namespace dala;
using dala_test::check_gradients;
using dala_test::random_vector;
using dala_test::weighted_sum;

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr int kGradInstances = 20;
constexpr double kGradSeconds = 60.0;
constexpr int kOtsuHistograms = 1000;
constexpr double kOtsuSeconds = 10.0;
constexpr int kDegeneracyFixtures = 12;
constexpr double kIdentityTolerance = 1e-12;
constexpr int kIdentityFixtures = 100;
constexpr double kHandTolerance = 1e-4;
constexpr std::size_t kTrainPerClass = 500;
constexpr std::size_t kTrainSide = 32;
constexpr std::size_t kTrainEpochs = 12;
constexpr double kTrainMinValAccuracy = 0.95;
constexpr double kTrainSeconds = 300.0;
constexpr std::size_t kCamSide = 64;
constexpr std::size_t kCamEpochs = 8;
constexpr std::size_t kCamMinSamples = 50;
constexpr double kCamRecallMargin = 0.02;
constexpr std::size_t kSweepEpochs = 3;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            if (pass) detail.clear();
            pass = false;
            detail += (detail.empty() ? "" : "; ") + what;
        }
    }
};

int failures = 0;

void report(int id, const char* name, const std::function<Outcome()>& body) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        o = body();
    } catch (const std::exception& e) {
        o.pass = false;
        o.detail = std::string("exception: ") + e.what();
    }
    if (!o.pass) ++failures;
    std::printf("%s %2d %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
    char buf[96];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

std::string fmt(const char* f, double a, double b) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, a, b);
    return buf;
}

// ---------------------------------------------------------------------------
// 1. gradients
// ---------------------------------------------------------------------------

struct GradCase {
    std::string name;
    // Builds one random instance: the scalar function and its leaves, and the
    // coordinates to probe (empty = all).
    std::function<void(std::mt19937_64&, std::function<Tensor<double>()>&, std::vector<Tensor<double>>&,
                       std::vector<std::pair<std::size_t, std::size_t>>&)>
        make;
};

Tensor<double> leaf(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return Tensor<double>(std::move(s), random_vector(n, rng, lo, hi), true);
}

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) { return lo + rng() % (hi - lo + 1); }

std::vector<GradCase> grad_cases() {
    std::vector<GradCase> cases;
    cases.push_back({"conv2d", [](auto& rng, auto& f, auto& leaves, auto&) {
                         const std::size_t n = pick(rng, 1, 2), c = pick(rng, 1, 3), oc = pick(rng, 1, 3);
                         const std::size_t k = pick(rng, 1, 3), stride = pick(rng, 1, 2), pad = pick(rng, 0, 1);
                         const std::size_t h = pick(rng, k, 6), w = pick(rng, k, 6);
                         auto x = leaf({n, c, h, w}, rng), kern = leaf({oc, c, k, k}, rng);
                         const auto out_n = conv2d(x, kern, stride, pad).numel();
                         const auto r = random_vector(out_n, rng);
                         f = [x, kern, stride, pad, r] { return weighted_sum(conv2d(x, kern, stride, pad), r); };
                         leaves = {x, kern};
                     }});
    cases.push_back({"fully_connected", [](auto& rng, auto& f, auto& leaves, auto&) {
                         const std::size_t n = pick(rng, 1, 4), i = pick(rng, 1, 6), o = pick(rng, 1, 5);
                         auto x = leaf({n, i}, rng), w = leaf({i, o}, rng), b = leaf({o}, rng);
                         const auto r = random_vector(n * o, rng);
                         f = [x, w, b, r] { return weighted_sum(fully_connected(x, w, b), r); };
                         leaves = {x, w, b};
                     }});
    cases.push_back({"adaptive_avg_pool2d", [](auto& rng, auto& f, auto& leaves, auto&) {
                         const std::size_t n = pick(rng, 1, 2), c = pick(rng, 1, 3), h = pick(rng, 1, 7), w = pick(rng, 1, 7);
                         const std::size_t oh = pick(rng, 1, h), ow = pick(rng, 1, w);
                         auto x = leaf({n, c, h, w}, rng);
                         const auto r = random_vector(n * c * oh * ow, rng);
                         f = [x, oh, ow, r] { return weighted_sum(adaptive_avg_pool2d(x, oh, ow), r); };
                         leaves = {x};
                     }});
    cases.push_back({"leaky_relu", [](auto& rng, auto& f, auto& leaves, auto&) {
                         const std::size_t n = pick(rng, 1, 30);
                         Tensor<double> x({n}, dala_test::random_away_from_zero(n, rng), true);
                         const double slope = std::uniform_real_distribution<double>(0.0, 0.3)(rng);
                         const auto r = random_vector(n, rng);
                         f = [x, slope, r] { return weighted_sum(leaky_relu(x, slope), r); };
                         leaves = {x};
                     }});
    cases.push_back({"relu", [](auto& rng, auto& f, auto& leaves, auto&) {
                         const std::size_t n = pick(rng, 1, 30);
                         Tensor<double> x({n}, dala_test::random_away_from_zero(n, rng), true);
                         const auto r = random_vector(n, rng);
                         f = [x, r] { return weighted_sum(relu(x), r); };
                         leaves = {x};
                     }});
    cases.push_back({"channel_scale", [](auto& rng, auto& f, auto& leaves, auto&) {
                         const std::size_t n = pick(rng, 1, 2), c = pick(rng, 1, 4), h = pick(rng, 1, 4), w = pick(rng, 1, 4);
                         auto x = leaf({n, c, h, w}, rng), g = leaf({n, c}, rng);
                         const auto r = random_vector(n * c * h * w, rng);
                         f = [x, g, r] { return weighted_sum(channel_scale(x, g), r); };
                         leaves = {x, g};
                     }});
    cases.push_back({"attention_forward", [](auto& rng, auto& f, auto& leaves, auto&) {
                         const std::size_t c = pick(rng, 2, 8), red = pick(rng, 1, 4), n = pick(rng, 1, 2);
                         Rng init(rng());
                         auto a = std::make_shared<AttentionModule<double>>(c, red, 0.01, init);
                         const std::size_t hidden = AttentionModule<double>::hidden_width(c, red);
                         auto b1 = a->fc1_bias(), b2 = a->fc2_bias();
                         const auto v1 = dala_test::random_away_from_zero(hidden, rng, 0.05);
                         std::copy(v1.begin(), v1.end(), b1.mutable_data().begin());
                         const auto v2 = random_vector(c, rng, -0.5, 0.5);
                         std::copy(v2.begin(), v2.end(), b2.mutable_data().begin());
                         auto x = leaf({n, c, 3, 3}, rng);
                         const auto r = random_vector(n * c * 9, rng);
                         f = [a, x, r] { return weighted_sum(a->forward(x), r); };
                         leaves = {x, a->fc1_weight(), a->fc1_bias(), a->fc2_weight(), a->fc2_bias()};
                     }});
    cases.push_back({"toy backbone", [](auto& rng, auto& f, auto& leaves, auto& coords) {
                         auto net = std::make_shared<Backbone<double>>(BackboneConfig::toy(8), rng());
                         auto x = leaf({1, 3, 8, 8}, rng);
                         const std::vector<int> label{static_cast<int>(rng() % 2)};
                         f = [net, x, label] { return softmax_cross_entropy(net->forward(x).logits, label); };
                         leaves = {x};
                         for (const auto& p : net->parameters()) leaves.push_back(p);
                         for (int i = 0; i < 16; ++i) coords.emplace_back(0, rng() % x.numel());
                         for (int i = 0; i < 48; ++i) {
                             const std::size_t li = 1 + rng() % (leaves.size() - 1);
                             coords.emplace_back(li, rng() % leaves[li].numel());
                         }
                     }});
    return cases;
}

Outcome gradients() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(2024);
    std::string summary;
    for (const auto& c : grad_cases()) {
        int accepted = 0, attempts = 0;
        double worst = 0.0;
        while (accepted < kGradInstances && attempts < 20 * kGradInstances) {
            ++attempts;
            std::function<Tensor<double>()> f;
            std::vector<Tensor<double>> leaves;
            std::vector<std::pair<std::size_t, std::size_t>> coords;
            c.make(rng, f, leaves, coords);
            const auto g = check_gradients(f, leaves, coords, 1e-4);
            if (g.kink_crossed) continue;  // the probe left the linear piece; draw another instance
            worst = std::max(worst, g.max_rel_error);
            ++accepted;
        }
        o.require(accepted == kGradInstances, c.name + ": only " + std::to_string(accepted) + " usable instances");
        o.require(worst < kGradTolerance, c.name + fmt(": max rel error %.3g", worst));
        summary += (summary.empty() ? "" : ", ") + c.name + fmt(" %.1e", worst);
    }
    const double secs = seconds_since(t0);
    o.require(secs < kGradSeconds, fmt("took %.1fs", secs));
    if (o.pass) o.detail = std::to_string(kGradInstances) + " instances each; max rel error " + summary;
    return o;
}

// ---------------------------------------------------------------------------
// 2. Otsu
// ---------------------------------------------------------------------------

std::vector<std::uint64_t> random_histogram(std::mt19937_64& rng, int kind) {
    std::vector<std::uint64_t> h(256, 0);
    switch (kind) {
        case 0:  // dense uniform counts
            for (auto& v : h) v = rng() % 50;
            break;
        case 1:  // a few occupied bins, many ties possible
            for (int i = 0; i < 1 + static_cast<int>(rng() % 6); ++i) h[rng() % 256] += 1 + rng() % 4;
            break;
        case 2: {  // two Gaussian modes
            std::normal_distribution<double> a(40.0 + rng() % 60, 5.0 + rng() % 20), b(150.0 + rng() % 80, 5.0 + rng() % 20);
            for (int i = 0; i < 3000; ++i) {
                const double v = (i % 3 ? a : b)(rng);
                h[static_cast<std::size_t>(std::clamp(v, 0.0, 255.0))] += 1;
            }
            break;
        }
        default:  // heavy spike at zero, like a ReLU map
            h[0] = 500 + rng() % 2000;
            for (std::size_t i = 1 + rng() % 100; i < 256; i += 1 + rng() % 7) h[i] = rng() % 30;
    }
    return h;
}

Outcome otsu() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(9);
    int map_checks = 0;
    for (int i = 0; i < kOtsuHistograms; ++i) {
        const auto h = random_histogram(rng, i % 4);
        const auto expect = dala_test::otsu_bruteforce(h);
        const auto got = otsu_level(h);
        if (got != expect) {
            o.require(false, "histogram " + std::to_string(i) + ": level " + std::to_string(got) + " vs " +
                                 std::to_string(expect));
            continue;
        }
        // Through a map: the cut keeps exactly the cells above the chosen level.
        std::uint64_t total = 0;
        for (auto v : h) total += v;
        if (total == 0 || total > 20000) continue;
        const auto map = dala_test::map_from_histogram(h, 1, rng);
        const auto cut = apply_threshold(map, otsu_threshold(map, 256));
        std::size_t above = 0;
        for (std::size_t b = expect + 1; b < 256; ++b) above += h[b];
        bool ok = cut.support_size() == above;
        for (std::size_t k = 0; k < map.size() && ok; ++k)
            ok = (cut.values()[k] > 0.0) == (map.values()[k] > 0.0 && quantize_level(map.values()[k], 256) > expect);
        o.require(ok, "histogram " + std::to_string(i) + ": map cut disagrees with level " + std::to_string(expect));
        ++map_checks;
    }
    std::vector<std::uint64_t> constant(256, 0);
    constant[137] = 4096;
    o.require(otsu_level(constant) == dala_test::otsu_bruteforce(constant) && otsu_level(constant) == 0,
              "constant histogram");
    const CamMap flat(8, 8, std::vector<double>(64, 0.6));
    o.require(apply_threshold(flat, otsu_threshold(flat)) == flat, "constant map not preserved");
    const double secs = seconds_since(t0);
    o.require(secs < kOtsuSeconds, fmt("took %.1fs", secs));
    if (o.pass)
        o.detail = std::to_string(kOtsuHistograms) + " histograms + constant case equal to brute force; " +
                   std::to_string(map_checks) + " also checked through maps";
    return o;
}

// ---------------------------------------------------------------------------
// 3-5. CAM degeneracy, weight schedule, metric identities
// ---------------------------------------------------------------------------

Tensor<float> random_image(std::size_t side, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto v = random_vector(3 * side * side, rng);
    return Tensor<float>({3, side, side}, std::vector<float>(v.begin(), v.end()));
}

Outcome degeneracy() {
    Outcome o;
    DtGradCamConfig cfg;
    cfg.ensemble = 1;
    cfg.sigma = 0.0;
    cfg.otsu_enabled = false;
    cfg.morphology_enabled = false;
    int fixtures = 0;
    for (int i = 0; i < kDegeneracyFixtures; ++i) {
        const std::size_t side = i % 2 ? 32 : 16;
        auto arch = BackboneConfig::toy(side);
        if (i % 3 == 0) arch.attention_stages.clear();
        const Backbone<float> net(arch, 100 + static_cast<std::uint64_t>(i));
        const auto x = random_image(side, 200 + static_cast<std::uint64_t>(i));
        const std::string layer = i % 4 == 3 ? "layer3" : "layer4";
        o.require(dt_gradcam(net, x, i % 2, layer, cfg) == gradcam(net, x, i % 2, layer),
                  "network fixture " + std::to_string(i));
        ++fixtures;
    }
    std::mt19937_64 rng(5);
    for (int i = 0; i < 3; ++i) {
        dala_test::ChannelMeanModel m{Tensor<double>({1, 3, 4, 5}, random_vector(60, rng), true),
                                      static_cast<std::size_t>(i), i == 2};
        const auto x = Tensor<double>::zeros({1, 1, 1, 1});
        o.require(dt_gradcam(m, x, 0, "features", cfg) == gradcam(m, x, 0, "features"),
                  "analytic fixture " + std::to_string(i));
        ++fixtures;
    }
    if (o.pass) o.detail = std::to_string(fixtures) + " fixtures bitwise equal";
    return o;
}

Outcome schedule() {
    Outcome o;
    for (std::size_t n : {1, 2, 3, 10, 100}) {
        DtGradCamConfig c;
        c.ensemble = n;
        const auto w = weight_schedule(c);
        const std::string tag = "N=" + std::to_string(n);
        o.require(w.size() == n, tag + ": size");
        o.require(w.front() == 1.0, tag + ": first weight");
        if (n > 1) o.require(w.back() == 0.5, tag + ": last weight");
        for (std::size_t i = 1; i < w.size(); ++i) o.require(w[i] <= w[i - 1], tag + ": increase at " + std::to_string(i));
        for (double v : w) o.require(v >= 0.5 && v <= 1.0, tag + ": weight outside [0.5,1]");
    }
    if (o.pass) o.detail = "N in {1,2,3,10,100}: starts at 1.0, ends at 0.5, non-increasing (N=1 is the single weight 1.0)";
    return o;
}

Outcome identities() {
    Outcome o;
    std::mt19937_64 rng(77);
    double worst_dice = 0.0, worst_iba = 0.0, worst_auc = 0.0;
    for (int i = 0; i < kIdentityFixtures; ++i) {
        const std::size_t n = 16 + rng() % 400;
        const double d1 = 0.05 + 0.9 * dala::uniform01(rng), d2 = 0.05 + 0.9 * dala::uniform01(rng);
        auto truth = dala_test::random_mask(n, d1, rng);
        truth[rng() % n] = 1;
        const auto pred = dala_test::random_mask(n, d2, rng);
        const auto s = heatmap_metrics(pred, truth);
        std::uint64_t inter = 0, p = 0, g = 0;
        for (std::size_t k = 0; k < n; ++k) {
            inter += pred[k] && truth[k];
            p += pred[k] != 0;
            g += truth[k] != 0;
        }
        o.require(s.dice == s.f1, "dice differs from pixel F1");
        o.require(s.dice == static_cast<double>(2 * inter) / static_cast<double>(p + g), "dice counting");
        o.require(s.iou == static_cast<double>(inter) / static_cast<double>(p + g - inter), "iou counting");
        worst_dice = std::max(worst_dice, std::abs(s.dice - 2.0 * s.iou / (1.0 + s.iou)));
    }
    for (int i = 0; i < kIdentityFixtures; ++i) {
        std::vector<std::vector<std::uint64_t>> rows{{1 + rng() % 200, rng() % 200}, {rng() % 200, 1 + rng() % 200}};
        const auto cm = ConfusionMatrix::from_rows(rows);
        const auto v = iba(cm, 0.0);
        const double g = gmean(cm);
        o.require(v.has_value(), "iba undefined on a defined matrix");
        if (v) worst_iba = std::max(worst_iba, std::abs(*v - g * g));
    }
    for (int i = 0; i < kIdentityFixtures; ++i) {
        const std::size_t n = 4 + rng() % 200;
        const bool discrete = i % 2 == 0;  // coarse scores produce ties
        std::vector<ScoredPrediction> a, b;
        for (std::size_t k = 0; k < n; ++k) {
            const int label = k < 2 ? static_cast<int>(k) : static_cast<int>(rng() % 2);
            double s = dala::uniform01(rng);
            if (discrete) s = std::floor(s * 5.0) / 5.0;
            a.push_back({label, {1.0 - s, s}});
            const double t = std::exp(3.0 * s) + s * s * s;  // strictly increasing
            b.push_back({label, {-t, t}});
        }
        worst_auc = std::max(worst_auc, std::abs(auc_roc(a, 1) - auc_roc(b, 1)));
    }
    o.require(worst_dice <= kIdentityTolerance, fmt("dice vs 2iou/(1+iou) %.3g", worst_dice));
    o.require(worst_iba <= kIdentityTolerance, fmt("iba(0) vs gmean^2 %.3g", worst_iba));
    o.require(worst_auc <= kIdentityTolerance, fmt("auc transform %.3g", worst_auc));
    if (o.pass)
        o.detail = std::to_string(kIdentityFixtures) + " fixtures each; max deviations " +
                   fmt("dice %.1e, iba %.1e", worst_dice, worst_iba) + fmt(", auc %.1e", worst_auc);
    return o;
}

// ---------------------------------------------------------------------------
// 6-7. hand count, split
// ---------------------------------------------------------------------------

Outcome hand_count() {
    Outcome o;
    const auto cm = ConfusionMatrix::from_rows({{50, 10}, {5, 35}});
    const auto r = binary_rates(cm, 1);
    auto near = [&](const std::optional<double>& v, double expect, const char* what) {
        o.require(v && std::abs(*v - expect) <= kHandTolerance, std::string(what) + fmt(" = %.6f", v.value_or(-1.0)));
    };
    o.require(accuracy(cm) == 0.85, fmt("accuracy %.6f", accuracy(cm)));
    o.require(r.sensitivity && *r.sensitivity == 0.875, "sensitivity");
    near(r.specificity, 50.0 / 60.0, "specificity");
    near(r.ppv, 35.0 / 45.0, "ppv");
    near(r.npv, 50.0 / 55.0, "npv");
    near(gmean(cm), std::sqrt(0.875 * 50.0 / 60.0), "gmean");
    near(r.specificity, 0.8333, "specificity (published)");
    near(r.ppv, 0.7778, "ppv (published)");
    near(r.npv, 0.9091, "npv (published)");
    near(gmean(cm), 0.8539, "gmean (published)");
    if (o.pass)
        o.detail = fmt("accuracy %.4f, sensitivity %.4f", accuracy(cm), *r.sensitivity) +
                   fmt(", specificity %.4f, ppv %.4f", *r.specificity, *r.ppv) +
                   fmt(", npv %.4f, gmean %.4f", *r.npv, gmean(cm));
    return o;
}

DatasetManifest listing(const std::vector<std::size_t>& per_class) {
    DatasetManifest m;
    m.root = "/virtual";
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        m.class_names.push_back("c" + std::to_string(c));
        for (std::size_t i = 0; i < per_class[c]; ++i)
            m.entries.push_back({"c" + std::to_string(c) + "/" + std::to_string(i) + ".png", static_cast<int>(c), {}});
    }
    return m;
}

Outcome split() {
    Outcome o;
    auto sizes = [](const Split& s) { return std::vector<std::size_t>{s.train.size(), s.val.size(), s.test.size()}; };
    const std::vector<std::size_t> big{1197, 199, 599}, small{240, 40, 120};
    o.require(sizes(stratified_split(listing({625, 1370}), {})) == big, "1995 images");
    o.require(sizes(stratified_split(listing({1995}), {})) == big, "1995 images, one class");
    o.require(sizes(stratified_split(listing({100, 100, 100, 100}), {})) == small, "400 images");
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::size_t> per_class(1 + rng() % 4);
        for (auto& n : per_class) n = 3 + rng() % 150;
        const auto m = listing(per_class);
        SplitSpec spec;
        spec.seed = rng();
        const auto s = stratified_split(m, spec);
        std::map<std::string, int> seen;
        for (const auto* part : {&s.train, &s.val, &s.test})
            for (const auto& e : part->entries) ++seen[e.image];
        bool partition = seen.size() == m.size();
        for (const auto& [name, count] : seen) partition = partition && count == 1;
        o.require(partition, "trial " + std::to_string(trial) + ": not a partition");
        o.require(sizes(s) == apportion(m.size(), {0.6, 0.1, 0.3}), "trial " + std::to_string(trial) + ": sizes");
        const double ratios[3] = {0.6, 0.1, 0.3};
        int p = 0;
        for (const auto* part : {&s.train, &s.val, &s.test}) {
            const auto counts = part->class_counts();
            for (std::size_t c = 0; c < per_class.size(); ++c)
                o.require(std::abs(static_cast<double>(counts[c]) - ratios[p] * static_cast<double>(per_class[c])) <= 1.0,
                          "trial " + std::to_string(trial) + ": class share off by more than one");
            ++p;
        }
    }
    if (o.pass) o.detail = "1995 -> 1197/199/599, 400 -> 240/40/120; 100 random manifests partitioned and stratified";
    return o;
}

// ---------------------------------------------------------------------------
// 8, 11, 12. training, sweep, checkpoint
// ---------------------------------------------------------------------------

struct Splits {
    DatasetManifest test_manifest;
    LoadedDataset<float> train, val, test;
};

Splits synthetic_splits(const std::filesystem::path& dir, std::size_t side, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.side = side;
    spec.samples_per_class = kTrainPerClass;
    spec.seed = seed;
    const auto m = generate_synthetic(spec, dir);
    SplitSpec ss;
    ss.seed = seed;
    const auto s = stratified_split(m, ss);
    return {s.test, load_dataset<float>(s.train, side), load_dataset<float>(s.val, side), load_dataset<float>(s.test, side)};
}

TrainConfig paper_config(std::size_t side, std::size_t epochs) {
    TrainConfig c;  // lr 1e-4, batch 32, dropout 0.25, Adam
    c.backbone = insert_attention(BackboneConfig::toy(side), 4);
    c.epochs = epochs;
    c.seed = 1;
    c.augment.seed = 1;
    return c;
}

bool same_parameters(const Backbone<float>& a, const Backbone<float>& b) {
    const auto pa = a.named_parameters(), pb = b.named_parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].first != pb[i].first || pa[i].second.shape() != pb[i].second.shape()) return false;
        const auto x = pa[i].second.data(), y = pb[i].second.data();
        if (std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0) return false;
    }
    return true;
}

std::optional<TrainResult<float>> trained;  // shared by criteria 8 and 12

Outcome training(const Splits& d) {
    Outcome o;
    const auto c = paper_config(kTrainSide, kTrainEpochs);
    const auto t0 = std::chrono::steady_clock::now();
    auto a = train(c, d.train, d.val);
    const double secs = seconds_since(t0);
    const auto b = train(c, d.train, d.val);
    o.require(a.report.best_val_accuracy >= kTrainMinValAccuracy, fmt("best val accuracy %.4f", a.report.best_val_accuracy));
    o.require(a.report.to_json(false) == b.report.to_json(false), "repeat report differs");
    o.require(same_parameters(a.model, b.model), "repeat weights differ");
    o.require(secs < kTrainSeconds, fmt("training took %.1fs", secs));
    if (o.pass)
        o.detail = fmt("best val accuracy %.4f at epoch ", a.report.best_val_accuracy) +
                   std::to_string(a.report.best_epoch) + " of " + std::to_string(kTrainEpochs) +
                   fmt(", %.1fs per run, repeat bit-identical", secs);
    trained = std::move(a);
    return o;
}

Outcome sweep(const Splits& d) {
    Outcome o;
    auto base = paper_config(kTrainSide, kSweepEpochs);
    const auto a = stage_sweep(base, {1, 2, 3, 4}, d.train, d.val, d.test);
    const auto b = stage_sweep(base, {1, 2, 3, 4}, d.train, d.val, d.test);
    o.require(a.rows.size() == 4, "row count");
    o.require(a.to_json() == b.to_json(), "repeat differs");
    const auto j = a.to_json();
    o.require(j["columns"] == nlohmann::json{"Accuracy", "F1", "AUC-ROC"}, "columns");
    for (const auto& r : a.rows) {
        o.require(r.data_order_checksum == a.rows[0].data_order_checksum, "data order differs between variants");
        o.require(r.train_data_checksum == a.rows[0].train_data_checksum, "training data differs between variants");
        o.require(r.auc_roc.has_value(), "missing AUC");
        for (double v : {r.accuracy, r.f1_macro, r.f1_weighted, r.auc_roc.value_or(-1.0)})
            o.require(v >= 0.0 && v <= 1.0, r.variant + ": metric outside [0,1]");
    }
    if (o.pass) {
        o.detail = "4 variants, seed-stable;";
        for (const auto& r : a.rows) o.detail += " " + r.variant + fmt(" acc %.3f", r.accuracy);
    }
    return o;
}

Outcome checkpoint(const Splits& d, const std::filesystem::path& dir) {
    Outcome o;
    if (!trained) {
        o.require(false, "no trained model (training criterion errored)");
        return o;
    }
    const auto path = dir / "model.dala";
    save_checkpoint(trained->model, path);
    const auto loaded = load_checkpoint<float>(path);
    o.require(loaded.config() == trained->model.config(), "architecture differs");
    o.require(same_parameters(loaded, trained->model), "parameters differ");
    const auto before = evaluate(trained->model, d.test), after = evaluate(loaded, d.test);
    o.require(before == after, "metrics differ");
    save_checkpoint(loaded, dir / "again.dala");
    o.require(read_file(path) == read_file(dir / "again.dala"), "re-save not byte-identical");
    if (o.pass)
        o.detail = std::to_string(loaded.num_parameters()) + " parameters bitwise equal; test accuracy " +
                   fmt("%.4f both ways", after["accuracy"].get<double>());
    return o;
}

// ---------------------------------------------------------------------------
// 9-10. CAM localisation and pipeline invariants
// ---------------------------------------------------------------------------

Outcome localisation(const std::filesystem::path& dir) {
    Outcome o;
    const auto d = synthetic_splits(dir, kCamSide, 1);
    const auto r = train(paper_config(kCamSide, kCamEpochs), d.train, d.val);
    CamEvalConfig cfg;  // class 0 = lesion, layer4, N=10, sigma 0.1, vanilla cut 0.5
    cfg.dt.seed = 1;
    const auto rep = evaluate_cams(r.model, d.test_manifest, cfg);
    o.require(rep.samples >= kCamMinSamples, std::to_string(rep.samples) + " samples");
    o.require(rep.dt.iou >= rep.gradcam.iou, fmt("IoU dt %.4f < gradcam %.4f", rep.dt.iou, rep.gradcam.iou));
    o.require(rep.dt.recall >= rep.gradcam.recall + kCamRecallMargin,
              fmt("recall dt %.4f vs gradcam %.4f", rep.dt.recall, rep.gradcam.recall));
    o.detail = std::to_string(rep.samples) + " lesion images; " +
               fmt("IoU dt %.4f vs gradcam %.4f", rep.dt.iou, rep.gradcam.iou) +
               fmt(", recall dt %.4f vs gradcam %.4f", rep.dt.recall, rep.gradcam.recall) +
               fmt(", val accuracy %.4f", r.report.best_val_accuracy);
    return o;
}

Outcome invariants() {
    Outcome o;
    int maps = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Backbone<float> net(BackboneConfig::toy(32), seed);
        DtGradCamConfig cfg;
        cfg.ensemble = 3 + seed % 4;
        cfg.seed = seed;
        if (seed % 2) cfg.upsample_width = cfg.upsample_height = 32;
        const auto r = dt_gradcam_stages(net, random_image(32, 300 + seed), static_cast<int>(seed % 2), "layer4", cfg);
        std::vector<const CamMap*> stages{&r.averaged, &r.thresholded, &r.final_map};
        for (const auto& m : r.members) stages.push_back(&m);
        for (const auto* m : stages) {
            for (double v : m->values()) o.require(v >= 0.0 && v <= 1.0, "value outside [0,1]");
            ++maps;
        }
        const auto sa = r.averaged.support(), st = r.thresholded.support(), sf = r.final_map.support();
        for (std::size_t i = 0; i < sa.size(); ++i) o.require(sf[i] <= st[i] && st[i] <= sa[i], "support grew");
    }
    std::mt19937_64 rng(8);
    for (int i = 0; i < 100; ++i) {
        const std::size_t w = 4 + rng() % 40, h = 4 + rng() % 40, k = 1 + 2 * (rng() % 3);
        const auto m = dala_test::random_mask(w * h, 0.2 + 0.7 * dala::uniform01(rng), rng);
        const auto once = open_mask(m, w, h, k);
        o.require(open_mask(once, w, h, k) == once, "opening not idempotent on mask " + std::to_string(i));
        o.require(once == dala_test::open_naive(m, w, h, k), "opening differs from definition on mask " + std::to_string(i));
        for (std::size_t p = 0; p < m.size(); ++p) o.require(once[p] <= m[p], "opening added pixels");
    }
    if (o.pass)
        o.detail = std::to_string(maps) + " maps in [0,1], support non-increasing; opening idempotent on 100 masks";
    return o;
}

}  // namespace

int main() {
    dala_test::TempDir dir("dala-acceptance");
    std::optional<Splits> data32;
    auto data = [&]() -> const Splits& {
        if (!data32) data32 = synthetic_splits(dir / "synthetic32", kTrainSide, 1);
        return *data32;
    };
    report(1, "gradient correctness", gradients);
    report(2, "otsu oracle equivalence", otsu);
    report(3, "dt grad-cam degeneracy", degeneracy);
    report(4, "weight schedule", schedule);
    report(5, "metric identities", identities);
    report(6, "hand-count metric oracle", hand_count);
    report(7, "split fidelity", split);
    report(8, "toy training", [&] { return training(data()); });
    report(9, "cam localisation direction", [&] { return localisation(dir / "synthetic64"); });
    report(10, "pipeline invariants", invariants);
    report(11, "stage sweep harness", [&] { return sweep(data()); });
    report(12, "checkpoint round trip", [&] { return checkpoint(data(), dir.path()); });
    std::printf("%d of 12 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
