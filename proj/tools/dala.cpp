// dala: command-line driver for data generation, training, evaluation and
// Grad-CAM explanations.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dala/cam.hpp"
#include "dala/cam_eval.hpp"
#include "dala/data.hpp"
#include "dala/metrics.hpp"
#include "dala/nn.hpp"
#include "dala/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

/// --config FILE: a JSON object whose keys are flag names without dashes.
/// Its entries are spliced in front of the command-line flags so explicit
/// flags win (every scalar option keeps the last value given).
std::vector<std::string> config_arguments(const fs::path& path) {
    json j;
    try {
        j = json::parse(dala::read_file(path));
    } catch (const json::exception& e) {
        throw dala::ConfigError(path.string() + ": invalid JSON: " + e.what());
    } catch (const dala::IoError& e) {
        throw dala::ConfigError(e.what());
    }
    if (!j.is_object()) throw dala::ConfigError(path.string() + ": config must be a JSON object");
    std::vector<std::string> args;
    auto scalar = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
    for (const auto& [key, value] : j.items()) {
        const std::string flag = "--" + key;
        if (value.is_boolean()) {
            if (value.get<bool>()) args.push_back(flag);
        } else if (value.is_array()) {
            std::string joined;
            for (const auto& v : value) joined += (joined.empty() ? "" : ",") + scalar(v);
            args.push_back(flag);
            args.push_back(joined);
        } else if (!value.is_null()) {
            args.push_back(flag);
            args.push_back(scalar(value));
        }
    }
    return args;
}

std::vector<std::string> expand_config(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    std::optional<std::string> config;
    for (std::size_t i = 1; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) config = args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) config = args[i].substr(9);
    }
    if (!config || args.size() < 2) return args;
    auto extra = config_arguments(*config);
    std::size_t sub = 1;
    while (sub < args.size() && args[sub].rfind("-", 0) == 0) ++sub;
    args.insert(args.begin() + static_cast<std::ptrdiff_t>(std::min(sub + 1, args.size())), extra.begin(), extra.end());
    return args;
}

std::uint64_t resolve_seed(const CLI::Option* flag, std::uint64_t value) {
    if (flag->count() > 0) return value;
    if (const char* env = std::getenv("DALA_SEED")) {
        try {
            std::size_t used = 0;
            const auto v = std::stoull(env, &used);
            if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw dala::ConfigError(std::string("DALA_SEED is not an unsigned integer: ") + env);
        }
    }
    return 0;
}

std::set<int> parse_stage_list(const std::string& text) {
    std::set<int> stages;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        if (item == "baseline") {
            stages.insert(0);
            continue;
        }
        try {
            std::size_t used = 0;
            const int s = std::stoi(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            stages.insert(s);
        } catch (const std::exception&) {
            throw dala::ConfigError("stage list: '" + item + "' is not a stage number");
        }
    }
    for (int s : stages)
        if (s < 0 || s > 4) throw dala::ConfigError("stage " + std::to_string(s) + " outside {baseline(0),1..4}");
    return stages;
}

void require_file(const fs::path& path, const std::string& what) {
    if (path.empty()) throw dala::UsageError(what + " path is required");
    if (!fs::is_regular_file(path)) throw dala::UsageError(what + " not found: " + path.string());
}

void require_dir(const fs::path& path, const std::string& what) {
    if (path.empty()) throw dala::UsageError(what + " path is required");
    if (!fs::is_directory(path)) throw dala::UsageError(what + " is not a directory: " + path.string());
}

void write_json(const fs::path& path, const json& j) { dala::write_file_atomic(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Option groups shared between subcommands
// ---------------------------------------------------------------------------

struct SeedOption {
    std::uint64_t value = 0;
    CLI::Option* flag = nullptr;
    void add(CLI::App* app) { flag = app->add_option("--seed", value, "Global seed (falls back to DALA_SEED, then 0)"); }
    std::uint64_t get() const { return resolve_seed(flag, value); }
};

struct SplitOptions {
    fs::path data;
    dala::SplitSpec spec;
    bool no_stratify = false;

    void add(CLI::App* app) {
        app->add_option("--data", data, "Dataset root (<class>/*.png, optional <class>_masks/)");
        app->add_option("--train-ratio", spec.train, "Training fraction");
        app->add_option("--val-ratio", spec.val, "Validation fraction");
        app->add_option("--test-ratio", spec.test, "Test fraction");
        app->add_flag("--no-stratify", no_stratify, "Split without per-class stratification");
    }

    dala::SplitSpec resolved(std::uint64_t seed) const {
        auto s = spec;
        s.seed = seed;
        s.stratified = !no_stratify;
        s.validate();
        return s;
    }

    dala::Split load(std::uint64_t seed) const {
        require_dir(data, "--data");
        const auto manifest = dala::scan_directory(data);
        for (const auto& w : manifest.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
        for (const auto& e : manifest.errors) std::fprintf(stderr, "excluded: %s\n", e.c_str());
        if (manifest.empty()) throw dala::InputError("no images under " + data.string());
        return dala::stratified_split(manifest, resolved(seed));
    }
};

struct TrainOptions {
    dala::TrainConfig config;
    std::size_t side = 32;
    std::string backbone = "toy";
    bool no_augment = false;

    void add(CLI::App* app) {
        app->add_option("--epochs", config.epochs, "Training epochs")->capture_default_str();
        app->add_option("--batch-size", config.batch_size, "Mini-batch size")->capture_default_str();
        app->add_option("--lr", config.learning_rate, "Initial (constant) learning rate")->capture_default_str();
        app->add_option("--dropout", config.dropout, "Dropout rate before the classifier")->capture_default_str();
        app->add_option("--side", side, "Input side in pixels")->capture_default_str();
        app->add_option("--backbone", backbone, "Backbone preset: toy or resnet50")->capture_default_str();
        app->add_option("--rotation", config.augment.rotation_degrees, "Augmentation rotation range in degrees");
        app->add_option("--flip-prob", config.augment.flip_probability, "Horizontal flip probability");
        app->add_flag("--no-augment", no_augment, "Disable augmentation");
    }

    dala::TrainConfig resolved(std::uint64_t seed, std::size_t classes, const std::set<int>& stages) const {
        auto c = config;
        c.seed = seed;
        c.augment.seed = seed;
        c.augment_enabled = !no_augment;
        if (backbone == "toy") {
            c.backbone = dala::BackboneConfig::toy(side);
        } else if (backbone == "resnet50") {
            c.backbone = dala::BackboneConfig{};
            c.backbone.input_side = side;
        } else {
            throw dala::ConfigError("--backbone must be toy or resnet50, got '" + backbone + "'");
        }
        c.backbone.num_classes = classes;
        c.backbone.attention_stages.clear();
        for (int s : stages)
            if (s > 0) c.backbone = dala::insert_attention(c.backbone, s);
        c.progress = true;
        c.validate();
        return c;
    }
};

struct DtOptions {
    dala::DtGradCamConfig config;
    bool no_otsu = false;
    bool no_morph = false;
    bool no_renormalize = false;

    void add(CLI::App* app) {
        app->add_option("--N", config.ensemble, "Noisy ensemble size")->capture_default_str();
        app->add_option("--sigma", config.sigma, "Noise level on [-1,1] inputs")->capture_default_str();
        app->add_option("--w-start", config.w_start, "Weight of the first ensemble member");
        app->add_option("--w-end", config.w_end, "Weight of the last ensemble member");
        app->add_option("--morph-kernel", config.morph_kernel, "Opening kernel (odd)")->capture_default_str();
        app->add_option("--otsu-bins", config.otsu_bins, "Histogram bins for Otsu");
        app->add_flag("--no-otsu", no_otsu, "Skip Otsu thresholding");
        app->add_flag("--no-morph", no_morph, "Skip morphological opening");
        app->add_flag("--no-renormalize", no_renormalize, "Keep the raw weighted average");
    }

    dala::DtGradCamConfig resolved(std::uint64_t seed) const {
        auto c = config;
        c.otsu_enabled = !no_otsu;
        c.morphology_enabled = !no_morph;
        c.renormalize = !no_renormalize;
        c.seed = seed;
        c.validate();
        return c;
    }
};

json dt_config_json(const dala::DtGradCamConfig& c) {
    return {{"N", c.ensemble},           {"sigma", c.sigma},
            {"w_start", c.w_start},      {"w_end", c.w_end},
            {"renormalize", c.renormalize}, {"otsu", c.otsu_enabled},
            {"otsu_bins", c.otsu_bins},  {"morphology", c.morphology_enabled},
            {"morph_kernel", c.morph_kernel}, {"seed", c.seed},
            {"upsample", {c.upsample_width, c.upsample_height}}};
}

void check_layer(const dala::Backbone<float>& model, const std::string& layer) {
    const auto names = model.stage_names();
    if (std::find(names.begin(), names.end(), layer) == names.end())
        throw dala::UsageError("unknown layer '" + layer + "'");
}

std::string make_run_id(std::uint64_t seed) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[64];
    std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
    return std::string(buf) + "-s" + std::to_string(seed);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DALA toolkit: synthetic data, attention ResNet training and DT Grad-CAM"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    std::string config_path;
    auto add_config = [&](CLI::App* sub) { sub->add_option("--config", config_path, "JSON file of flag defaults"); };

    // generate
    auto* gen = app.add_subcommand("generate", "Write the synthetic lesion/normal dataset");
    fs::path gen_out;
    dala::SyntheticSpec synth;
    SeedOption gen_seed;
    add_config(gen);
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen_seed.add(gen);
    gen->add_option("--side", synth.side, "Image side")->capture_default_str();
    gen->add_option("--samples-per-class", synth.samples_per_class, "Images per class")->capture_default_str();
    gen->add_option("--noise", synth.noise, "Pixel noise std (gray levels)");
    gen->add_option("--stripe-amplitude", synth.stripe_amplitude, "Background stripe amplitude");
    gen->add_option("--blob-amplitude", synth.blob_amplitude, "Lesion blob peak amplitude");
    gen->add_option("--blob-sigma", synth.blob_sigma, "Blob std as a fraction of the side");
    gen->add_option("--quadrant", synth.lesion_quadrant, "Fixed lesion quadrant 0..3 (-1 random)");

    // split
    auto* split = app.add_subcommand("split", "Write stratified train/val/test manifests");
    SplitOptions split_opts;
    fs::path split_out;
    SeedOption split_seed;
    add_config(split);
    split_opts.add(split);
    split->add_option("--out", split_out, "Output directory for train/val/test.json")->required();
    split_seed.add(split);

    // train
    auto* tr = app.add_subcommand("train", "Train one model and keep the best-validation checkpoint");
    SplitOptions tr_split;
    TrainOptions tr_opts;
    SeedOption tr_seed;
    fs::path tr_out;
    std::string tr_stages = "4";
    add_config(tr);
    tr_split.add(tr);
    tr_opts.add(tr);
    tr_seed.add(tr);
    tr->add_option("--stage", tr_stages, "Attention stage(s), comma separated; 0 or 'baseline' for none")
        ->capture_default_str();
    tr->add_option("--out", tr_out, "Output directory (model.dala, train_report.json)")->required();

    // sweep
    auto* sw = app.add_subcommand("sweep", "Train one model per attention placement and compare");
    SplitOptions sw_split;
    TrainOptions sw_opts;
    SeedOption sw_seed;
    fs::path sw_out;
    std::string sw_stages = "0,1,2,3,4";
    add_config(sw);
    sw_split.add(sw);
    sw_opts.add(sw);
    sw_seed.add(sw);
    sw->add_option("--stages", sw_stages, "Placements to compare (0 = baseline)")->capture_default_str();
    sw->add_option("--out", sw_out, "Output directory (sweep.json, sweep.txt)")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "Classification metrics of a checkpoint on the test split");
    SplitOptions ev_split;
    SeedOption ev_seed;
    fs::path ev_ckpt, ev_out;
    std::string ev_part = "test";
    double ev_alpha = 0.1;
    add_config(ev);
    ev_split.add(ev);
    ev_seed.add(ev);
    ev->add_option("--checkpoint", ev_ckpt, "Model checkpoint")->required();
    ev->add_option("--split", ev_part, "Which split to score: train, val, test or all")->capture_default_str();
    ev->add_option("--iba-alpha", ev_alpha, "IBA dominance weight")->capture_default_str();
    ev->add_option("--out", ev_out, "Output directory (metrics.json, metrics.csv, predictions.json)")->required();

    // explain
    auto* ex = app.add_subcommand("explain", "Grad-CAM and DT Grad-CAM heatmaps for one image");
    fs::path ex_ckpt, ex_image, ex_out;
    std::string ex_method = "both", ex_layer = "layer4", ex_run_id;
    int ex_class = -1;
    std::size_t ex_upsample = 0;
    DtOptions ex_dt;
    SeedOption ex_seed;
    add_config(ex);
    ex->add_option("--checkpoint", ex_ckpt, "Model checkpoint")->required();
    ex->add_option("--image", ex_image, "Input PNG")->required();
    ex->add_option("--out", ex_out, "Output directory")->required();
    ex->add_option("--method", ex_method, "gradcam, dt or both")->capture_default_str();
    ex->add_option("--layer", ex_layer, "Stage whose activation is explained")->capture_default_str();
    ex->add_option("--class", ex_class, "Target class (default: predicted class)");
    ex->add_option("--upsample", ex_upsample, "Resample the DT average to this side before thresholding (0 = off)");
    ex->add_option("--run-id", ex_run_id, "Output subdirectory (default: UTC timestamp and seed)");
    ex_dt.add(ex);
    ex_seed.add(ex);

    // cam-eval
    auto* ce = app.add_subcommand("cam-eval", "Mean IoU/Dice/Recall/F1 of Grad-CAM and DT Grad-CAM against masks");
    SplitOptions ce_split;
    SeedOption ce_seed;
    DtOptions ce_dt;
    fs::path ce_ckpt, ce_out;
    std::string ce_layer = "layer4", ce_class;
    double ce_vanilla_t = 0.5;
    add_config(ce);
    ce_split.add(ce);
    ce_seed.add(ce);
    ce_dt.add(ce);
    ce->add_option("--checkpoint", ce_ckpt, "Model checkpoint")->required();
    ce->add_option("--layer", ce_layer, "Stage whose activation is explained")->capture_default_str();
    ce->add_option("--class", ce_class, "Masked class name or index (default: first class with masks)");
    ce->add_option("--vanilla-threshold", ce_vanilla_t, "Fixed cut for vanilla Grad-CAM")->capture_default_str();
    ce->add_option("--out", ce_out, "Output directory (cam_eval.json, cam_eval.txt)")->required();

    try {
        const auto args = expand_config(argc, argv);
        std::vector<const char*> cargs;
        for (const auto& a : args) cargs.push_back(a.c_str());
        app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    } catch (const dala::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    }

    // Validation failures (ConfigError/UsageError) are raised before any
    // output is written and map to exit code 2.
    try {
        if (gen->parsed()) {
            synth.seed = gen_seed.get();
            synth.validate();
            const auto m = dala::generate_synthetic(synth, gen_out);
            std::printf("wrote %zu images (%s) to %s, checksum %s\n", m.size(), "lesion, normal",
                        gen_out.string().c_str(), m.checksum().c_str());
        } else if (split->parsed()) {
            const auto s = split_opts.load(split_seed.get());
            write_json(split_out / "train.json", dala::to_json(s.train));
            write_json(split_out / "val.json", dala::to_json(s.val));
            write_json(split_out / "test.json", dala::to_json(s.test));
            std::printf("train %zu, val %zu, test %zu\n", s.train.size(), s.val.size(), s.test.size());
        } else if (tr->parsed() || sw->parsed()) {
            const bool sweep = sw->parsed();
            const auto& sopts = sweep ? sw_split : tr_split;
            const auto& topts = sweep ? sw_opts : tr_opts;
            const auto seed = (sweep ? sw_seed : tr_seed).get();
            const auto stages = parse_stage_list(sweep ? sw_stages : tr_stages);
            if (stages.empty()) throw dala::ConfigError("no attention stage given");
            if (!sweep && stages.count(0) && stages.size() > 1)
                throw dala::ConfigError("--stage baseline cannot be combined with other stages");
            sopts.resolved(seed);
            require_dir(sopts.data, "--data");
            const auto split_result = sopts.load(seed);
            const auto classes = split_result.train.class_names.size();
            auto cfg = topts.resolved(seed, classes, sweep ? std::set<int>{} : stages);
            const auto tset = dala::load_dataset<float>(split_result.train, topts.side);
            const auto vset = dala::load_dataset<float>(split_result.val, topts.side);
            const auto out = sweep ? sw_out : tr_out;
            if (!sweep) {
                cfg.checkpoint_path = out / "model.dala";
                const auto result = dala::train(cfg, tset, vset);
                auto report = result.report.to_json();
                report["class_names"] = split_result.train.class_names;
                write_json(out / "train_report.json", report);
                std::printf("best epoch %zu, val accuracy %.4f, checkpoint %s\n", result.report.best_epoch,
                            result.report.best_val_accuracy, cfg.checkpoint_path.string().c_str());
            } else {
                const auto test = dala::load_dataset<float>(split_result.test, topts.side);
                cfg.checkpoint_path = out / "model.dala";
                const auto report = dala::stage_sweep(cfg, stages, tset, vset, test);
                write_json(out / "sweep.json", report.to_json());
                dala::write_file_atomic(out / "sweep.txt", report.to_text());
                std::printf("%s", report.to_text().c_str());
            }
        } else if (ev->parsed()) {
            require_file(ev_ckpt, "checkpoint");
            if (ev_part != "train" && ev_part != "val" && ev_part != "test" && ev_part != "all")
                throw dala::ConfigError("--split must be train, val, test or all");
            const auto seed = ev_seed.get();
            ev_split.resolved(seed);
            require_dir(ev_split.data, "--data");
            const auto model = dala::load_checkpoint<float>(ev_ckpt);
            const auto s = ev_split.load(seed);
            dala::DatasetManifest part = ev_part == "train" ? s.train : ev_part == "val" ? s.val : s.test;
            if (ev_part == "all") {
                part = s.train;
                for (const auto* extra : {&s.val, &s.test})
                    part.entries.insert(part.entries.end(), extra->entries.begin(), extra->entries.end());
            }
            const auto data = dala::load_dataset<float>(part, model.config().input_side);
            const auto preds = dala::predict(model, data);
            auto report = dala::report_from_predictions(preds, part.class_names, ev_alpha);
            write_json(ev_out / "metrics.json", report);
            dala::write_file_atomic(ev_out / "metrics.csv", dala::report_csv_header() + dala::report_csv_row(report));
            write_json(ev_out / "predictions.json",
                       {{"class_names", part.class_names}, {"paths", data.paths},
                        {"predictions", dala::predictions_to_json(preds)}});
            std::printf("%s\n", report.dump(2).c_str());
        } else if (ex->parsed()) {
            require_file(ex_ckpt, "checkpoint");
            require_file(ex_image, "image");
            if (ex_method != "gradcam" && ex_method != "dt" && ex_method != "both")
                throw dala::ConfigError("--method must be gradcam, dt or both");
            const auto seed = ex_seed.get();
            auto dt_cfg = ex_dt.resolved(seed);
            dt_cfg.upsample_width = dt_cfg.upsample_height = ex_upsample;
            dt_cfg.validate();
            const auto model = dala::load_checkpoint<float>(ex_ckpt);
            check_layer(model, ex_layer);
            if (ex_class >= static_cast<int>(model.num_classes()) || ex_class < -1)
                throw dala::UsageError("--class " + std::to_string(ex_class) + " outside the model classes");
            const auto image = dala::read_png(ex_image);
            const auto input = dala::preprocess<float>(image, model.config().input_side);
            int predicted = 0;
            {
                dala::NoGradGuard guard;
                const auto logits = model.forward(dala::detail::as_batch(input)).logits.data();
                for (std::size_t c = 1; c < logits.size(); ++c)
                    if (logits[c] > logits[static_cast<std::size_t>(predicted)]) predicted = static_cast<int>(c);
            }
            const int target = ex_class >= 0 ? ex_class : predicted;
            const auto dir = ex_out / (ex_run_id.empty() ? make_run_id(seed) : ex_run_id);
            json meta{{"image", ex_image.string()},    {"checkpoint", ex_ckpt.string()},
                      {"target_class", target},        {"predicted_class", predicted},
                      {"class_forced", ex_class >= 0}, {"layer", ex_layer},
                      {"method", ex_method},           {"seed", seed}};
            auto emit = [&](const std::string& name, const dala::CamMap& map) {
                const auto shown = dala::upsample_bilinear(map, image.width, image.height);
                dala::render_heatmap(shown, &image, dir / (name + ".png"), dir / (name + "_overlay.png"));
                dala::write_cam_csv(map, dir / (name + ".csv"));
            };
            if (ex_method != "dt") emit("gradcam", dala::gradcam(model, input, target, ex_layer));
            if (ex_method != "gradcam") {
                const auto st = dala::dt_gradcam_stages(model, input, target, ex_layer, dt_cfg);
                emit("dtgradcam", st.final_map);
                meta["dt"] = dt_config_json(dt_cfg);
                meta["dt"]["threshold"] = st.threshold;
            }
            write_json(dir / "meta.json", meta);
            std::printf("%s\n", dir.string().c_str());
        } else if (ce->parsed()) {
            require_file(ce_ckpt, "checkpoint");
            const auto seed = ce_seed.get();
            const auto dt_cfg = ce_dt.resolved(seed);
            ce_split.resolved(seed);
            require_dir(ce_split.data, "--data");
            const auto model = dala::load_checkpoint<float>(ce_ckpt);
            check_layer(model, ce_layer);
            const auto s = ce_split.load(seed);
            int target = -1;
            if (!ce_class.empty()) {
                for (std::size_t c = 0; c < s.test.class_names.size(); ++c)
                    if (s.test.class_names[c] == ce_class) target = static_cast<int>(c);
                if (target < 0) {
                    try {
                        target = std::stoi(ce_class);
                    } catch (const std::exception&) {
                        throw dala::UsageError("--class '" + ce_class + "' is neither a class name nor an index");
                    }
                }
            } else {
                for (const auto& e : s.test.entries)
                    if (e.mask) {
                        target = e.label;
                        break;
                    }
                if (target < 0) throw dala::UsageError("no masks in the test split");
            }
            dala::CamEvalConfig cfg{target, ce_layer, dt_cfg, ce_vanilla_t};
            const auto report = dala::evaluate_cams(model, s.test, cfg);
            for (const auto& w : report.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
            auto j = report.to_json();
            j["target_class"] = target;
            j["layer"] = ce_layer;
            j["dt"] = dt_config_json(dt_cfg);
            j["vanilla_threshold"] = ce_vanilla_t;
            write_json(ce_out / "cam_eval.json", j);
            dala::write_file_atomic(ce_out / "cam_eval.txt", report.to_text());
            std::printf("%s", report.to_text().c_str());
        }
    } catch (const dala::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const dala::UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRuntime;
    }
    return 0;
}
