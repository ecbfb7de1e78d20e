#pragma once

// Dual-activated lightweight channel attention and a ResNet-style backbone
// with per-stage attention insertion.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dala/checkpoint.hpp"
#include "dala/tensor.hpp"

namespace dala {

/// Channel attention: global average squeeze, FC, LeakyReLU, FC, ReLU, then
/// per-channel rescaling of the input.
///
/// The gate comes out of a ReLU, so it is non-negative but not bounded by 1:
/// a channel can be amplified as well as suppressed.
template <class T>
class AttentionModule {
public:
    AttentionModule() = default;

    AttentionModule(std::size_t channels, std::size_t reduction, T leaky_slope, Rng& rng)
        : channels_(channels), hidden_(hidden_width(channels, reduction)), slope_(leaky_slope) {
        if (channels == 0) throw ConfigError("attention: channel count must be positive");
        if (leaky_slope < T{0}) throw ConfigError("attention: leaky slope must be non-negative");
        fc1_weight_ = Tensor<T>::randn({channels_, hidden_}, rng, static_cast<T>(std::sqrt(2.0 / channels_)), true);
        fc1_bias_ = Tensor<T>::zeros({hidden_}, true);
        fc2_weight_ = Tensor<T>::randn({hidden_, channels_}, rng, static_cast<T>(std::sqrt(2.0 / hidden_)), true);
        fc2_bias_ = Tensor<T>::zeros({channels_}, true);
    }

    /// Bottleneck width: channels / reduction, at least 1.
    static std::size_t hidden_width(std::size_t channels, std::size_t reduction) {
        if (reduction == 0) throw ConfigError("attention: reduction ratio must be positive");
        return std::max<std::size_t>(1, channels / reduction);
    }

    /// Learnable scalar count: two weight matrices plus both biases.
    static std::size_t parameter_count(std::size_t channels, std::size_t reduction) {
        const auto h = hidden_width(channels, reduction);
        return 2 * channels * h + h + channels;
    }

    /// Per-sample gates [N,C] for input [N,C,H,W].
    Tensor<T> gate(const Tensor<T>& input) const {
        check_input(input);
        const auto n = input.dim(0);
        auto squeezed = reshape(adaptive_avg_pool2d(input, 1, 1), {n, channels_});
        auto hidden = leaky_relu(fully_connected(squeezed, fc1_weight_, fc1_bias_), slope_);
        return relu(fully_connected(hidden, fc2_weight_, fc2_bias_));
    }

    Tensor<T> forward(const Tensor<T>& input) const { return channel_scale(input, gate(input)); }

    std::size_t channels() const { return channels_; }
    std::size_t hidden() const { return hidden_; }
    T slope() const { return slope_; }

    Tensor<T>& fc1_weight() { return fc1_weight_; }
    Tensor<T>& fc1_bias() { return fc1_bias_; }
    Tensor<T>& fc2_weight() { return fc2_weight_; }
    Tensor<T>& fc2_bias() { return fc2_bias_; }

    void collect(const std::string& prefix, std::vector<std::pair<std::string, Tensor<T>>>& out) const {
        out.emplace_back(prefix + "fc1.weight", fc1_weight_);
        out.emplace_back(prefix + "fc1.bias", fc1_bias_);
        out.emplace_back(prefix + "fc2.weight", fc2_weight_);
        out.emplace_back(prefix + "fc2.bias", fc2_bias_);
    }

private:
    void check_input(const Tensor<T>& input) const {
        if (input.rank() != 4 || input.dim(1) != channels_)
            throw DimensionError("attention: expected [N," + std::to_string(channels_) + ",H,W], got " +
                                 shape_str(input.shape()));
    }

    std::size_t channels_ = 0;
    std::size_t hidden_ = 0;
    T slope_ = T(0.01);
    Tensor<T> fc1_weight_, fc1_bias_, fc2_weight_, fc2_bias_;
};

enum class BlockKind { basic, bottleneck };

inline std::string to_string(BlockKind kind) { return kind == BlockKind::basic ? "basic" : "bottleneck"; }

struct StageConfig {
    std::size_t width = 64;   // basic: output channels; bottleneck: inner width
    std::size_t blocks = 1;
    std::size_t stride = 1;   // applied by the first block of the stage

    bool operator==(const StageConfig&) const = default;
};

struct BackboneConfig {
    std::size_t in_channels = 3;
    std::size_t stem_channels = 64;
    std::size_t stem_kernel = 7;
    std::size_t stem_stride = 2;
    bool stem_pool = true;  // 3x3 stride-2 max pool after the stem
    BlockKind block = BlockKind::bottleneck;
    std::size_t expansion = 4;  // bottleneck only
    std::vector<StageConfig> stages{{64, 3, 1}, {128, 4, 2}, {256, 6, 2}, {512, 3, 2}};
    std::set<int> attention_stages{4};
    std::size_t reduction = 16;
    double leaky_slope = 0.01;
    std::size_t num_classes = 2;
    double dropout = 0.25;
    std::size_t input_side = 224;

    /// Output channels of stage `stage` (1-based).
    std::size_t stage_channels(int stage) const {
        const auto& s = stages.at(static_cast<std::size_t>(stage - 1));
        return block == BlockKind::bottleneck ? s.width * expansion : s.width;
    }

    void validate() const {
        if (stages.empty() || stages.size() > 4) throw ConfigError("backbone: between 1 and 4 stages required");
        if (in_channels == 0 || stem_channels == 0 || stem_kernel == 0 || stem_stride == 0)
            throw ConfigError("backbone: stem sizes must be positive");
        for (std::size_t i = 0; i < stages.size(); ++i)
            if (stages[i].width == 0 || stages[i].blocks == 0 || stages[i].stride == 0)
                throw ConfigError("backbone: stage " + std::to_string(i + 1) + " has a zero width, block count or stride");
        for (int s : attention_stages)
            if (s < 1 || s > static_cast<int>(stages.size()))
                throw ConfigError("backbone: attention stage " + std::to_string(s) + " outside 1.." +
                                  std::to_string(stages.size()));
        if (reduction == 0) throw ConfigError("backbone: reduction ratio must be positive");
        if (leaky_slope < 0.0) throw ConfigError("backbone: leaky slope must be non-negative");
        if (num_classes < 2) throw ConfigError("backbone: at least two classes required");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("backbone: dropout must lie in [0,1)");
        if (block == BlockKind::bottleneck && expansion == 0) throw ConfigError("backbone: expansion must be positive");
        if (input_side == 0) throw ConfigError("backbone: input side must be positive");
    }

    /// "baseline" without attention, otherwise e.g. "layer-4" or "layer-2+4".
    std::string label() const {
        if (attention_stages.empty()) return "baseline";
        std::string s = "layer-";
        bool first = true;
        for (int st : attention_stages) {
            s += (first ? "" : "+") + std::to_string(st);
            first = false;
        }
        return s;
    }

    /// Scaled-down topology for desk-scale experiments: basic blocks of
    /// widths 8/16/32/64, one block per stage, 3x3 stem without pooling.
    static BackboneConfig toy(std::size_t input_side = 32) {
        BackboneConfig c;
        c.stem_channels = 8;
        c.stem_kernel = 3;
        c.stem_stride = 1;
        c.stem_pool = false;
        c.block = BlockKind::basic;
        c.stages = {{8, 1, 1}, {16, 1, 2}, {32, 1, 2}, {64, 1, 1}};
        c.input_side = input_side;
        return c;
    }

    bool operator==(const BackboneConfig&) const = default;
};

/// Returns a copy of `config` with attention on the final block of `stage`.
inline BackboneConfig insert_attention(BackboneConfig config, int stage) {
    if (stage < 1 || stage > 4) throw ConfigError("insert_attention: stage " + std::to_string(stage) + " outside 1..4");
    if (stage > static_cast<int>(config.stages.size()))
        throw ConfigError("insert_attention: configuration has only " + std::to_string(config.stages.size()) +
                          " stages");
    config.attention_stages.insert(stage);
    return config;
}

inline nlohmann::json to_json(const BackboneConfig& c) {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& s : c.stages) stages.push_back({{"width", s.width}, {"blocks", s.blocks}, {"stride", s.stride}});
    return {{"in_channels", c.in_channels},
            {"stem_channels", c.stem_channels},
            {"stem_kernel", c.stem_kernel},
            {"stem_stride", c.stem_stride},
            {"stem_pool", c.stem_pool},
            {"block", to_string(c.block)},
            {"expansion", c.expansion},
            {"stages", stages},
            {"attention_stages", std::vector<int>(c.attention_stages.begin(), c.attention_stages.end())},
            {"reduction", c.reduction},
            {"leaky_slope", c.leaky_slope},
            {"num_classes", c.num_classes},
            {"dropout", c.dropout},
            {"input_side", c.input_side}};
}

/// Missing keys keep the value already present in `base`.
inline BackboneConfig backbone_from_json(const nlohmann::json& j, BackboneConfig base = {}) {
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
        };
        get("in_channels", base.in_channels);
        get("stem_channels", base.stem_channels);
        get("stem_kernel", base.stem_kernel);
        get("stem_stride", base.stem_stride);
        get("stem_pool", base.stem_pool);
        if (j.contains("block")) {
            const auto b = j.at("block").get<std::string>();
            if (b == "basic")
                base.block = BlockKind::basic;
            else if (b == "bottleneck")
                base.block = BlockKind::bottleneck;
            else
                throw ConfigError("backbone: unknown block kind '" + b + "'");
        }
        get("expansion", base.expansion);
        if (j.contains("stages")) {
            base.stages.clear();
            for (const auto& s : j.at("stages"))
                base.stages.push_back({s.at("width").get<std::size_t>(), s.at("blocks").get<std::size_t>(),
                                       s.value("stride", std::size_t{1})});
        }
        if (j.contains("attention_stages")) {
            base.attention_stages.clear();
            for (int s : j.at("attention_stages").get<std::vector<int>>()) base.attention_stages.insert(s);
        }
        get("reduction", base.reduction);
        get("leaky_slope", base.leaky_slope);
        get("num_classes", base.num_classes);
        get("dropout", base.dropout);
        get("input_side", base.input_side);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("backbone: malformed architecture JSON: ") + e.what());
    }
    return base;
}

template <class T>
struct ConvLayer {
    Tensor<T> kernel;
    std::size_t stride = 1;
    std::size_t padding = 0;

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, kernel, stride, padding); }
};

template <class T>
ConvLayer<T> make_conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, Rng& rng) {
    const T stddev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(in * k * k)));
    return {Tensor<T>::randn({out, in, k, k}, rng, stddev, true), stride, k / 2};
}

/// Residual block: relu(main(x) + skip(x)). The main path is conv3x3-relu-conv3x3
/// (basic) or conv1x1-relu-conv3x3-relu-conv1x1 (bottleneck); when attention is
/// enabled it rescales the main-path output before the skip addition.
template <class T>
class ResidualBlock {
public:
    ResidualBlock() = default;

    ResidualBlock(BlockKind kind, std::size_t in, std::size_t width, std::size_t out, std::size_t stride,
                  bool attention, std::size_t reduction, T slope, Rng& rng) {
        if (kind == BlockKind::basic) {
            convs_.push_back(make_conv<T>(in, out, 3, stride, rng));
            convs_.push_back(make_conv<T>(out, out, 3, 1, rng));
        } else {
            convs_.push_back(make_conv<T>(in, width, 1, 1, rng));
            convs_.push_back(make_conv<T>(width, width, 3, stride, rng));
            convs_.push_back(make_conv<T>(width, out, 1, 1, rng));
        }
        if (in != out || stride != 1) projection_ = make_conv<T>(in, out, 1, stride, rng);
        if (attention) attention_ = AttentionModule<T>(out, reduction, slope, rng);
        out_channels_ = out;
    }

    Tensor<T> forward(const Tensor<T>& input) const {
        Tensor<T> main = input;
        for (std::size_t i = 0; i < convs_.size(); ++i) {
            main = convs_[i](main);
            if (i + 1 < convs_.size()) main = relu(main);
        }
        if (attention_) main = attention_->forward(main);
        Tensor<T> skip = projection_ ? (*projection_)(input) : input;
        if (skip.shape() != main.shape())
            throw DimensionError("residual block: main path " + shape_str(main.shape()) + " vs skip " +
                                 shape_str(skip.shape()));
        return relu(add(main, skip));
    }

    bool has_attention() const { return attention_.has_value(); }
    AttentionModule<T>* attention() { return attention_ ? &*attention_ : nullptr; }
    std::vector<ConvLayer<T>>& convs() { return convs_; }
    std::optional<ConvLayer<T>>& projection() { return projection_; }
    std::size_t out_channels() const { return out_channels_; }

    void collect(const std::string& prefix, std::vector<std::pair<std::string, Tensor<T>>>& out) const {
        for (std::size_t i = 0; i < convs_.size(); ++i)
            out.emplace_back(prefix + "conv" + std::to_string(i + 1) + ".weight", convs_[i].kernel);
        if (projection_) out.emplace_back(prefix + "downsample.weight", projection_->kernel);
        if (attention_) attention_->collect(prefix + "attention.", out);
    }

private:
    std::vector<ConvLayer<T>> convs_;
    std::optional<ConvLayer<T>> projection_;
    std::optional<AttentionModule<T>> attention_;
    std::size_t out_channels_ = 0;
};

/// Closed-form learnable parameter count for a configuration.
inline std::size_t parameter_count(const BackboneConfig& c) {
    c.validate();
    std::size_t total = c.stem_channels * c.in_channels * c.stem_kernel * c.stem_kernel;
    std::size_t in = c.stem_channels;
    for (std::size_t s = 0; s < c.stages.size(); ++s) {
        const auto& st = c.stages[s];
        const std::size_t out = c.stage_channels(static_cast<int>(s + 1));
        for (std::size_t b = 0; b < st.blocks; ++b) {
            const std::size_t stride = b == 0 ? st.stride : 1;
            if (c.block == BlockKind::basic)
                total += out * in * 9 + out * out * 9;
            else
                total += st.width * in + st.width * st.width * 9 + out * st.width;
            if (in != out || stride != 1) total += out * in;
            in = out;
        }
        if (c.attention_stages.count(static_cast<int>(s + 1)))
            total += AttentionModule<double>::parameter_count(out, c.reduction);
    }
    total += in * c.num_classes + c.num_classes;
    return total;
}

struct ForwardOptions {
    bool training = false;
    std::uint64_t dropout_seed = 0;
};

template <class T>
struct ForwardOutput {
    Tensor<T> logits;
    std::map<std::string, Tensor<T>> features;  // "stem", "layer1".."layer4"
    bool dropout_active = false;

    const Tensor<T>& feature(const std::string& name) const {
        auto it = features.find(name);
        if (it == features.end()) throw UsageError("unknown stage '" + name + "'");
        return it->second;
    }
};

/// ResNet-style classifier: stem, up to four residual stages, global average
/// pooling, dropout, linear head.
template <class T>
class Backbone {
public:
    using value_type = T;

    Backbone() = default;

    explicit Backbone(BackboneConfig config, std::uint64_t seed = 0) : config_(std::move(config)) {
        config_.validate();
        auto rng = make_rng(seed, {0x1a17ULL});
        stem_ = make_conv<T>(config_.in_channels, config_.stem_channels, config_.stem_kernel, config_.stem_stride, rng);
        std::size_t in = config_.stem_channels;
        for (std::size_t s = 0; s < config_.stages.size(); ++s) {
            const auto& st = config_.stages[s];
            const std::size_t out = config_.stage_channels(static_cast<int>(s + 1));
            const bool attn = config_.attention_stages.count(static_cast<int>(s + 1)) > 0;
            std::vector<ResidualBlock<T>> blocks;
            for (std::size_t b = 0; b < st.blocks; ++b) {
                blocks.emplace_back(config_.block, in, st.width, out, b == 0 ? st.stride : 1,
                                    attn && b + 1 == st.blocks, config_.reduction, static_cast<T>(config_.leaky_slope),
                                    rng);
                in = out;
            }
            stages_.push_back(std::move(blocks));
        }
        const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in)));
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        std::vector<T> w(in * config_.num_classes);
        for (auto& v : w) v = static_cast<T>(u(rng)) * bound;
        fc_weight_ = Tensor<T>({in, config_.num_classes}, std::move(w), true);
        fc_bias_ = Tensor<T>::zeros({config_.num_classes}, true);
    }

    const BackboneConfig& config() const { return config_; }
    std::size_t num_classes() const { return config_.num_classes; }

    std::vector<std::string> stage_names() const {
        std::vector<std::string> names{"stem"};
        for (std::size_t s = 0; s < stages_.size(); ++s) names.push_back("layer" + std::to_string(s + 1));
        return names;
    }

    ForwardOutput<T> forward(const Tensor<T>& input, ForwardOptions opt = {}) const {
        if (input.rank() != 4 || input.dim(1) != config_.in_channels)
            throw DimensionError("backbone: expected [N," + std::to_string(config_.in_channels) + ",S,S], got " +
                                 shape_str(input.shape()));
        ForwardOutput<T> out;
        Tensor<T> x = relu(stem_(input));
        if (config_.stem_pool) x = max_pool2d(x, 3, 2);
        out.features["stem"] = x;
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            for (const auto& block : stages_[s]) x = block.forward(x);
            out.features["layer" + std::to_string(s + 1)] = x;
        }
        const auto n = x.dim(0);
        Tensor<T> pooled = reshape(adaptive_avg_pool2d(x, 1, 1), {n, x.dim(1)});
        out.dropout_active = opt.training && config_.dropout > 0.0;
        pooled = dropout(pooled, config_.dropout, opt.training, opt.dropout_seed);
        out.logits = fully_connected(pooled, fc_weight_, fc_bias_);
        return out;
    }

    /// Logits and one named stage activation, inference mode.
    std::pair<Tensor<T>, Tensor<T>> forward_features(const Tensor<T>& input, const std::string& layer) const {
        auto out = forward(input);
        return {out.logits, out.feature(layer)};
    }

    std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        out.emplace_back("stem.weight", stem_.kernel);
        for (std::size_t s = 0; s < stages_.size(); ++s)
            for (std::size_t b = 0; b < stages_[s].size(); ++b)
                stages_[s][b].collect("layer" + std::to_string(s + 1) + "." + std::to_string(b) + ".", out);
        out.emplace_back("fc.weight", fc_weight_);
        out.emplace_back("fc.bias", fc_bias_);
        return out;
    }

    std::vector<Tensor<T>> parameters() const {
        std::vector<Tensor<T>> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    std::size_t num_parameters() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named_parameters()) n += t.numel();
        return n;
    }

    void zero_grad() const {
        for (auto& [name, t] : named_parameters()) {
            auto copy = t;
            copy.zero_grad();
        }
    }

    ResidualBlock<T>& block(int stage, std::size_t index) {
        return stages_.at(static_cast<std::size_t>(stage - 1)).at(index);
    }
    ConvLayer<T>& stem() { return stem_; }
    Tensor<T>& fc_weight() { return fc_weight_; }
    Tensor<T>& fc_bias() { return fc_bias_; }

private:
    BackboneConfig config_;
    ConvLayer<T> stem_;
    std::vector<std::vector<ResidualBlock<T>>> stages_;
    Tensor<T> fc_weight_, fc_bias_;
};

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

/// Record carrying the architecture JSON, one UTF-8 byte per float value.
inline constexpr const char* kArchitectureRecord = "__architecture__";

template <class T>
std::vector<NamedArray> model_to_arrays(const Backbone<T>& model) {
    std::vector<NamedArray> arrays;
    const std::string arch = to_json(model.config()).dump();
    NamedArray a{kArchitectureRecord, {static_cast<std::uint32_t>(arch.size())}, {}};
    for (unsigned char ch : arch) a.values.push_back(static_cast<float>(ch));
    arrays.push_back(std::move(a));
    for (const auto& [name, t] : model.named_parameters()) {
        NamedArray p{name, {}, {}};
        for (auto d : t.shape()) p.dims.push_back(static_cast<std::uint32_t>(d));
        for (auto v : t.data()) p.values.push_back(static_cast<float>(v));
        arrays.push_back(std::move(p));
    }
    return arrays;
}

inline BackboneConfig architecture_from_arrays(const std::vector<NamedArray>& arrays, const std::string& path) {
    if (arrays.empty() || arrays.front().name != kArchitectureRecord)
        throw FormatError(path + ": checkpoint has no architecture record");
    std::string text;
    for (float f : arrays.front().values) {
        if (!(f >= 0.0f && f <= 255.0f) || f != std::floor(f)) throw FormatError(path + ": corrupt architecture record");
        text.push_back(static_cast<char>(static_cast<unsigned char>(f)));
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": architecture record is not valid JSON: " + e.what());
    }
    return backbone_from_json(j);
}

/// Copies every parameter from `arrays` into `model`. Fails, naming the
/// tensor, on any missing, extra or differently shaped entry; nothing is
/// written unless every entry matches.
template <class T>
void load_parameters(Backbone<T>& model, const std::vector<NamedArray>& arrays, const std::string& path,
                     bool check_only = false) {
    std::map<std::string, const NamedArray*> by_name;
    for (const auto& a : arrays)
        if (a.name != kArchitectureRecord) by_name[a.name] = &a;
    auto params = model.named_parameters();
    for (const auto& [name, t] : params) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError(path + ": architecture mismatch, tensor '" + name + "' missing");
        Shape dims(it->second->dims.begin(), it->second->dims.end());
        if (dims != t.shape())
            throw FormatError(path + ": architecture mismatch, tensor '" + name + "' has shape " + shape_str(dims) +
                              ", model expects " + shape_str(t.shape()));
    }
    if (by_name.size() != params.size()) {
        for (const auto& [name, a] : by_name) {
            bool known = std::any_of(params.begin(), params.end(), [&](const auto& p) { return p.first == name; });
            if (!known) throw FormatError(path + ": architecture mismatch, unexpected tensor '" + name + "'");
        }
    }
    if (check_only) return;
    for (auto& [name, t] : params) {
        auto dst = t.mutable_data();
        const auto& src = by_name.at(name)->values;
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
    }
}

template <class T>
void save_checkpoint(const Backbone<T>& model, const std::filesystem::path& path) {
    write_checkpoint_file(path, model_to_arrays(model));
}

/// Rebuilds the architecture stored in the file and loads its weights.
template <class T = float>
Backbone<T> load_checkpoint(const std::filesystem::path& path) {
    const auto arrays = read_checkpoint_file(path);
    Backbone<T> model(architecture_from_arrays(arrays, path.string()));
    load_parameters(model, arrays, path.string());
    return model;
}

/// Loads weights into an existing model; the stored architecture must match.
template <class T>
void load_checkpoint_into(Backbone<T>& model, const std::filesystem::path& path) {
    const auto arrays = read_checkpoint_file(path);
    const auto stored = architecture_from_arrays(arrays, path.string());
    load_parameters(model, arrays, path.string(), true);
    if (!(stored == model.config()))
        throw FormatError(path.string() + ": architecture mismatch, stored " + to_json(stored).dump() + " vs model " +
                          to_json(model.config()).dump());
    load_parameters(model, arrays, path.string());
}

}  // namespace dala
