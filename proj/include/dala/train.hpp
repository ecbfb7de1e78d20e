#pragma once

// Seeded training loop, evaluation and the attention-placement sweep.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "dala/data.hpp"
#include "dala/error.hpp"
#include "dala/metrics.hpp"
#include "dala/nn.hpp"
#include "dala/optim.hpp"
#include "dala/random.hpp"
#include "dala/tensor.hpp"

namespace dala {

struct TrainConfig {
    double learning_rate = 1e-4;  // initial and constant
    std::size_t batch_size = 32;
    std::size_t epochs = 50;
    double dropout = 0.25;
    std::uint64_t seed = 0;
    BackboneConfig backbone = BackboneConfig::toy();
    AugmentSpec augment;
    bool augment_enabled = true;
    std::filesystem::path checkpoint_path;  // best checkpoint; empty = keep in memory only
    bool progress = false;                  // per-epoch lines on stderr

    void validate() const {
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train: learning rate must be > 0");
        if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("train: dropout must lie in [0,1)");
        effective_backbone().validate();
        augment.validate();
    }

    /// Backbone config with the training dropout rate applied.
    BackboneConfig effective_backbone() const {
        auto b = backbone;
        b.dropout = dropout;
        return b;
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    char lr[32];
    std::snprintf(lr, sizeof lr, "%.4f", c.learning_rate);
    return {{"learning_rate", c.learning_rate},
            {"learning_rate_text", std::string(lr)},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"dropout", c.dropout},
            {"seed", c.seed},
            {"optimizer", {{"name", "adam"}, {"beta1", 0.9}, {"beta2", 0.999}, {"eps", 1e-8}}},
            {"backbone", to_json(c.effective_backbone())},
            {"augment",
             {{"enabled", c.augment_enabled},
              {"rotation_degrees", c.augment.rotation_degrees},
              {"flip_probability", c.augment.flip_probability},
              {"seed", c.augment.seed}}}};
}

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
    double val_f1_macro = 0.0;
    bool val_dropout_active = false;  // instrumentation: must stay false
    double seconds = 0.0;             // wall clock since training start
};

struct TrainReport {
    nlohmann::json config;
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    double best_val_accuracy = 0.0;
    double convergence_seconds = 0.0;  // wall clock to the end of the best epoch
    std::string checkpoint_path;
    std::string data_order_checksum;  // FNV-1a over every epoch's sample order
    std::string train_manifest_checksum;

    /// Wall-clock fields are omitted so that runs can be compared for equality.
    nlohmann::json to_json(bool include_timing = true) const {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& e : epochs) {
            nlohmann::json r{{"epoch", e.epoch},
                             {"train_loss", e.train_loss},
                             {"train_accuracy", e.train_accuracy},
                             {"val_loss", e.val_loss},
                             {"val_accuracy", e.val_accuracy},
                             {"val_f1_macro", e.val_f1_macro},
                             {"val_dropout_active", e.val_dropout_active}};
            if (include_timing) r["seconds"] = e.seconds;
            rows.push_back(r);
        }
        nlohmann::json j{{"config", config},
                         {"epochs", rows},
                         {"epoch_count", epochs.size()},
                         {"best_epoch", best_epoch},
                         {"best_val_accuracy", best_val_accuracy},
                         {"checkpoint_path", checkpoint_path},
                         {"data_order_checksum", data_order_checksum},
                         {"train_data_checksum", train_manifest_checksum}};
        if (include_timing) j["convergence_seconds"] = convergence_seconds;
        return j;
    }
};

template <class T>
struct TrainResult {
    TrainReport report;
    Backbone<T> model;  // parameters of the best epoch
};

/// Softmax probabilities and argmax predictions in inference mode.
struct Predictions {
    std::vector<int> labels;
    std::vector<int> predicted;
    std::vector<std::vector<double>> probabilities;
    double mean_loss = 0.0;

    std::vector<ScoredPrediction> scored() const {
        std::vector<ScoredPrediction> out;
        for (std::size_t i = 0; i < labels.size(); ++i) out.push_back({labels[i], probabilities[i]});
        return out;
    }
};

namespace detail {

inline std::string dataset_checksum(const std::vector<std::string>& paths, const std::vector<int>& labels) {
    Fnv1a h;
    for (std::size_t i = 0; i < paths.size(); ++i) {
        h.update(paths[i]);
        h.update_int<std::int32_t>(labels[i]);
    }
    return h.hex();
}

template <class T>
void check_dataset(const LoadedDataset<T>& d, std::size_t classes, const char* what) {
    if (d.size() == 0) throw InputError(std::string("train: ") + what + " split is empty");
    for (int l : d.labels)
        if (l < 0 || static_cast<std::size_t>(l) >= classes)
            throw InputError(std::string("train: ") + what + " label " + std::to_string(l) + " outside the " +
                             std::to_string(classes) + " model classes");
}

}  // namespace detail

template <class T>
Predictions predict(const Backbone<T>& model, const LoadedDataset<T>& data, std::size_t batch_size = 32) {
    NoGradGuard guard;
    Predictions p;
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        std::vector<std::size_t> idx(std::min(batch_size, data.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        const auto out = model.forward(stack_batch(data.images, idx));
        if (out.dropout_active) throw UsageError("predict: dropout active during inference");
        const auto logits = out.logits.data();
        const std::size_t k = out.logits.dim(1);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, static_cast<double>(logits[r * k + c]));
            std::vector<double> prob(k);
            double z = 0.0;
            for (std::size_t c = 0; c < k; ++c) z += prob[c] = std::exp(static_cast<double>(logits[r * k + c]) - mx);
            int best = 0;
            for (std::size_t c = 0; c < k; ++c) {
                prob[c] /= z;
                if (logits[r * k + c] > logits[r * k + static_cast<std::size_t>(best)]) best = static_cast<int>(c);
            }
            const int label = data.labels[idx[r]];
            if (label >= 0 && static_cast<std::size_t>(label) < k)
                loss_sum += -(static_cast<double>(logits[r * k + static_cast<std::size_t>(label)]) - mx - std::log(z));
            p.labels.push_back(label);
            p.predicted.push_back(best);
            p.probabilities.push_back(std::move(prob));
        }
    }
    p.mean_loss = data.size() ? loss_sum / static_cast<double>(data.size()) : 0.0;
    return p;
}

inline nlohmann::json report_from_predictions(const Predictions& p, const std::vector<std::string>& class_names,
                                              double iba_alpha = 0.1) {
    const auto cm = confusion(p.predicted, p.labels, class_names.size(), class_names);
    const auto scored = p.scored();
    return classification_report(cm, scored, iba_alpha);
}

inline nlohmann::json predictions_to_json(const Predictions& p) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < p.labels.size(); ++i)
        rows.push_back({{"label", p.labels[i]}, {"predicted", p.predicted[i]}, {"probabilities", p.probabilities[i]}});
    return rows;
}

template <class T>
TrainResult<T> train(const TrainConfig& config, const LoadedDataset<T>& train_set, const LoadedDataset<T>& val_set) {
    config.validate();
    const auto arch = config.effective_backbone();
    detail::check_dataset(train_set, arch.num_classes, "training");
    detail::check_dataset(val_set, arch.num_classes, "validation");
    if (!train_set.class_names.empty() && train_set.class_names.size() != arch.num_classes)
        throw ConfigError("train: dataset has " + std::to_string(train_set.class_names.size()) +
                          " classes but the backbone has " + std::to_string(arch.num_classes));

    TrainResult<T> result{{}, Backbone<T>(arch, derive_seed(config.seed, {0x1417ULL}))};
    auto& model = result.model;
    auto& report = result.report;
    report.config = to_json(config);
    report.checkpoint_path = config.checkpoint_path.string();
    report.train_manifest_checksum = detail::dataset_checksum(train_set.paths, train_set.labels);
    Adam<T> opt(model.parameters(), AdamOptions{config.learning_rate});
    auto params = model.parameters();
    std::vector<std::vector<T>> best_values;
    std::optional<double> best_acc;
    Fnv1a order_hash;
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
    if (config.progress)
        std::fprintf(stderr, "train: lr %s, batch %zu, epochs %zu, %zu train / %zu val samples\n",
                     report.config["learning_rate_text"].template get<std::string>().c_str(), config.batch_size, config.epochs,
                     train_set.size(), val_set.size());

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::vector<std::size_t> order(train_set.size());
        std::iota(order.begin(), order.end(), 0);
        auto rng = make_rng(config.seed, {0x5a11ULL, epoch});
        std::shuffle(order.begin(), order.end(), rng);
        for (auto i : order) order_hash.update_int<std::uint64_t>(i);

        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0, batch = 0; start < order.size(); start += config.batch_size, ++batch) {
            const std::size_t n = std::min(config.batch_size, order.size() - start);
            std::vector<T> data;
            std::vector<int> labels;
            for (std::size_t r = 0; r < n; ++r) {
                const auto idx = order[start + r];
                const auto& img = train_set.images[idx];
                if (config.augment_enabled) {
                    const auto a = augment(img, config.augment, idx, epoch);
                    data.insert(data.end(), a.data().begin(), a.data().end());
                } else {
                    data.insert(data.end(), img.data().begin(), img.data().end());
                }
                labels.push_back(train_set.labels[idx]);
            }
            Shape shape{n};
            shape.insert(shape.end(), train_set.images[0].shape().begin(), train_set.images[0].shape().end());
            Tensor<T> input(std::move(shape), std::move(data));
            opt.zero_grad();
            Tensor<T> loss;
            ForwardOutput<T> out;
            try {
                out = model.forward(input, {true, derive_seed(config.seed, {0xd40ULL, epoch, batch})});
                loss = softmax_cross_entropy(out.logits, labels);
                backward(loss);
            } catch (const NumericError& e) {
                throw NumericError("train: divergence at epoch " + std::to_string(epoch) + " batch " +
                                   std::to_string(batch) + ": " + e.what());
            }
            opt.step();
            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(n);
            const auto logits = out.logits.data();
            const std::size_t k = out.logits.dim(1);
            for (std::size_t r = 0; r < n; ++r) {
                std::size_t best = 0;
                for (std::size_t c = 1; c < k; ++c)
                    if (logits[r * k + c] > logits[r * k + best]) best = c;
                if (static_cast<int>(best) == labels[r]) ++correct;
            }
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(train_set.size());
        rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(train_set.size());
        if (!std::isfinite(rec.train_loss))
            throw NumericError("train: divergence at epoch " + std::to_string(epoch) + ", loss is not finite");
        {
            NoGradGuard guard;
            std::vector<std::size_t> probe{0};
            rec.val_dropout_active = model.forward(stack_batch(val_set.images, probe)).dropout_active;
        }
        const auto vp = predict(model, val_set, config.batch_size);
        const auto cm = confusion(vp.predicted, vp.labels, arch.num_classes);
        rec.val_loss = vp.mean_loss;
        rec.val_accuracy = accuracy(cm);
        rec.val_f1_macro = f1(cm).macro;
        rec.seconds = elapsed();
        report.epochs.push_back(rec);
        if (config.progress)
            std::fprintf(stderr, "epoch %zu/%zu  loss %.4f  acc %.4f  val_loss %.4f  val_acc %.4f  %.1fs\n", epoch,
                         config.epochs, rec.train_loss, rec.train_accuracy, rec.val_loss, rec.val_accuracy, rec.seconds);

        if (!best_acc || rec.val_accuracy > *best_acc) {  // ties keep the earlier epoch
            best_acc = rec.val_accuracy;
            report.best_epoch = epoch;
            report.best_val_accuracy = rec.val_accuracy;
            report.convergence_seconds = rec.seconds;
            best_values.clear();
            for (const auto& p : params) best_values.emplace_back(p.data().begin(), p.data().end());
            if (!config.checkpoint_path.empty()) save_checkpoint(model, config.checkpoint_path);
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto dst = params[i].mutable_data();
        std::copy(best_values[i].begin(), best_values[i].end(), dst.begin());
    }
    report.data_order_checksum = order_hash.hex();
    return result;
}

template <class T>
nlohmann::json evaluate(const Backbone<T>& model, const LoadedDataset<T>& test_set, double iba_alpha = 0.1) {
    detail::check_dataset(test_set, model.num_classes(), "test");
    auto names = test_set.class_names;
    if (names.size() != model.num_classes()) names.clear();
    if (names.empty())
        for (std::size_t c = 0; c < model.num_classes(); ++c) names.push_back("class" + std::to_string(c));
    return report_from_predictions(predict(model, test_set), names, iba_alpha);
}

template <class T = float>
nlohmann::json evaluate(const std::filesystem::path& checkpoint, const LoadedDataset<T>& test_set,
                        double iba_alpha = 0.1) {
    return evaluate(load_checkpoint<T>(checkpoint), test_set, iba_alpha);
}

// ---------------------------------------------------------------------------
// Attention-placement sweep
// ---------------------------------------------------------------------------

struct SweepRow {
    std::string variant;  // "baseline" or "layer-<k>"
    int stage = 0;        // 0 = no attention
    double accuracy = 0.0;
    double f1_macro = 0.0;
    double f1_weighted = 0.0;
    std::optional<double> auc_roc;
    double best_val_accuracy = 0.0;
    std::size_t best_epoch = 0;
    std::string data_order_checksum;
    std::string train_data_checksum;
};

struct SweepReport {
    std::vector<SweepRow> rows;

    nlohmann::json to_json() const {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& r : rows)
            out.push_back({{"variant", r.variant},
                           {"stage", r.stage},
                           {"accuracy", r.accuracy},
                           {"f1", {r.f1_macro, r.f1_weighted}},
                           {"auc_roc", optional_json(r.auc_roc)},
                           {"best_val_accuracy", r.best_val_accuracy},
                           {"best_epoch", r.best_epoch},
                           {"data_order_checksum", r.data_order_checksum},
                           {"train_data_checksum", r.train_data_checksum}});
        return {{"columns", {"Accuracy", "F1", "AUC-ROC"}}, {"rows", out}};
    }

    std::string to_text() const {
        std::string s;
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-10s  %8s  %15s  %8s\n", "Variant", "Accuracy", "F1", "AUC-ROC");
        s += buf;
        for (const auto& r : rows) {
            char f1pair[40];
            std::snprintf(f1pair, sizeof f1pair, "%.4f/%.4f", r.f1_macro, r.f1_weighted);
            char auc[16] = "n/a";
            if (r.auc_roc) std::snprintf(auc, sizeof auc, "%.4f", *r.auc_roc);
            std::snprintf(buf, sizeof buf, "%-10s  %8.4f  %15s  %8s\n", r.variant.c_str(), r.accuracy, f1pair, auc);
            s += buf;
        }
        return s;
    }
};

/// Trains one model per attention placement with identical seeds and data.
/// Stage 0 in `stages` requests the no-attention baseline.
template <class T>
SweepReport stage_sweep(const TrainConfig& base, const std::set<int>& stages, const LoadedDataset<T>& train_set,
                        const LoadedDataset<T>& val_set, const LoadedDataset<T>& test_set) {
    for (int s : stages)
        if (s < 0 || s > 4) throw ConfigError("sweep: stage " + std::to_string(s) + " outside {baseline,1..4}");
    if (stages.empty()) throw ConfigError("sweep: no stages requested");
    base.validate();
    SweepReport report;
    for (int s : stages) {
        TrainConfig cfg = base;
        cfg.backbone.attention_stages.clear();
        if (s > 0) cfg.backbone = insert_attention(cfg.backbone, s);
        if (!base.checkpoint_path.empty()) {
            auto p = base.checkpoint_path;
            cfg.checkpoint_path = p.replace_filename(p.stem().string() + "-" + cfg.backbone.label() + p.extension().string());
        }
        const auto result = train(cfg, train_set, val_set);
        const nlohmann::json metrics = evaluate(result.model, test_set);
        SweepRow row;
        row.variant = cfg.backbone.label();
        row.stage = s;
        row.accuracy = metrics.at("accuracy").get<double>();
        row.f1_macro = metrics.at("f1_macro").get<double>();
        row.f1_weighted = metrics.at("f1_weighted").get<double>();
        if (!metrics.at("auc_roc").is_null()) row.auc_roc = metrics.at("auc_roc").get<double>();
        row.best_val_accuracy = result.report.best_val_accuracy;
        row.best_epoch = result.report.best_epoch;
        row.data_order_checksum = result.report.data_order_checksum;
        row.train_data_checksum = result.report.train_manifest_checksum;
        report.rows.push_back(std::move(row));
    }
    return report;
}

}  // namespace dala
