#pragma once

// Localization scores of vanilla and dynamic-threshold Grad-CAM against
// ground-truth masks.

#include <cstdio>
#include <string>
#include <vector>

#include "json.hpp"

#include "dala/cam.hpp"
#include "dala/data.hpp"
#include "dala/metrics.hpp"
#include "dala/nn.hpp"

namespace dala {

struct CamEvalConfig {
    int target_class = 0;
    std::string layer = "layer4";
    DtGradCamConfig dt;           // upsample size is set per sample to the mask size
    double vanilla_threshold = 0.5;  // fixed cut on the min-max normalised vanilla map
};

struct MeanHeatmapScores {
    double iou = 0.0, dice = 0.0, recall = 0.0, f1 = 0.0;
};

struct CamEvalReport {
    MeanHeatmapScores gradcam, dt;
    std::size_t samples = 0;
    std::size_t excluded_empty = 0;  // masks without foreground
    std::vector<HeatmapScores> gradcam_rows, dt_rows;
    std::vector<std::string> paths;
    std::vector<std::string> warnings;

    nlohmann::json to_json() const {
        auto scores = [](const MeanHeatmapScores& s) {
            return nlohmann::json{{"iou", s.iou}, {"dice", s.dice}, {"recall", s.recall}, {"f1", s.f1}};
        };
        return {{"methods", {{"gradcam", scores(gradcam)}, {"dt", scores(dt)}}},
                {"samples", samples},
                {"excluded_empty_masks", excluded_empty},
                {"warnings", warnings}};
    }

    std::string to_text() const {
        std::string s;
        char buf[128];
        std::snprintf(buf, sizeof buf, "%-8s  %8s  %8s  %8s  %8s\n", "Method", "IoU", "Dice", "Recall", "F1");
        s += buf;
        for (const auto& [name, m] : {std::pair{"gradcam", gradcam}, std::pair{"dt", dt}}) {
            std::snprintf(buf, sizeof buf, "%-8s  %8.4f  %8.4f  %8.4f  %8.4f\n", name, m.iou, m.dice, m.recall, m.f1);
            s += buf;
        }
        std::snprintf(buf, sizeof buf, "samples: %zu, excluded empty masks: %zu\n", samples, excluded_empty);
        return s + buf;
    }
};

/// Scores every entry of `manifest` labelled `target_class` that carries a
/// mask. Vanilla maps are upsampled to the mask and cut at a fixed level; DT
/// maps are upsampled before Otsu and morphology and scored on their support.
template <class T>
CamEvalReport evaluate_cams(const Backbone<T>& model, const DatasetManifest& manifest, const CamEvalConfig& config) {
    config.dt.validate();
    if (config.target_class < 0 || static_cast<std::size_t>(config.target_class) >= model.num_classes())
        throw UsageError("cam-eval: class " + std::to_string(config.target_class) + " outside the model classes");
    const std::size_t side = model.config().input_side;
    CamEvalReport report;
    MeanHeatmapScores sum_v, sum_d;
    for (std::size_t i = 0; i < manifest.size(); ++i) {
        if (manifest.entries[i].label != config.target_class || !manifest.entries[i].mask) continue;
        const auto mask = load_mask(*manifest.mask_path(i), side, side);
        std::size_t fg = 0;
        for (auto m : mask) fg += m;
        if (fg == 0) {
            ++report.excluded_empty;
            continue;
        }
        const auto input = load_and_preprocess<T>(manifest.image_path(i), side);
        const auto vanilla = upsample_bilinear(gradcam(model, input, config.target_class, config.layer), side, side);
        auto dt_cfg = config.dt;
        dt_cfg.upsample_width = side;
        dt_cfg.upsample_height = side;
        dt_cfg.seed = derive_seed(config.dt.seed, {i});
        const auto dt = dt_gradcam(model, input, config.target_class, config.layer, dt_cfg);
        const auto hv = heatmap_metrics(binarize_cam_for_eval(vanilla, BinarizeMode::fixed(config.vanilla_threshold)), mask);
        const auto hd = heatmap_metrics(binarize_cam_for_eval(dt, BinarizeMode::support()), mask);
        for (auto [acc, h] : {std::pair{&sum_v, hv}, std::pair{&sum_d, hd}}) {
            acc->iou += h.iou;
            acc->dice += h.dice;
            acc->recall += h.recall;
            acc->f1 += h.f1;
        }
        report.gradcam_rows.push_back(hv);
        report.dt_rows.push_back(hd);
        report.paths.push_back(manifest.entries[i].image);
        ++report.samples;
    }
    if (report.excluded_empty)
        report.warnings.push_back(std::to_string(report.excluded_empty) + " sample(s) with empty masks excluded");
    if (report.samples == 0) throw InputError("cam-eval: no samples with non-empty masks for the target class");
    const double n = static_cast<double>(report.samples);
    for (auto [dst, src] : {std::pair{&report.gradcam, sum_v}, std::pair{&report.dt, sum_d}}) {
        dst->iou = src.iou / n;
        dst->dice = src.dice / n;
        dst->recall = src.recall / n;
        dst->f1 = src.f1 / n;
    }
    return report;
}

}  // namespace dala
