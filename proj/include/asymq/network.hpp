// Copyright 2026 The asymq Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

/**
 * @file network.hpp
 * @brief Small dense/convolutional networks with per-layer fake quantizers,
 *        quantizer calibration and the SGD training loop.
 *
 * Quantizer sites: an input quantizer in front of the first layer, one weight
 * quantizer per dense/conv layer and one activation quantizer on the output of
 * every activation layer. Logits are left in float.
 */

#pragma once

#include <asymq/binary_io.hpp>
#include <asymq/datasets.hpp>
#include <asymq/initializers.hpp>
#include <asymq/quantizer.hpp>
#include <asymq/tensor.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace asymq {

enum class LayerKind : std::uint8_t { dense, conv2d, activation, flatten };

inline std::string_view layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::activation: return "activation";
        case LayerKind::flatten: return "flatten";
    }
    return "?";
}

struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    std::size_t units = 0;  ///< dense outputs or conv output channels
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;
    Activation activation = Activation::identity;
    std::optional<QuantConfig> weight_quant;
    std::optional<QuantConfig> act_quant;

    static LayerSpec dense(std::size_t units) {
        LayerSpec s;
        s.units = units;
        return s;
    }
    static LayerSpec conv(std::size_t channels, std::size_t kernel, std::size_t stride = 1, std::size_t padding = 0) {
        LayerSpec s;
        s.kind = LayerKind::conv2d;
        s.units = channels;
        s.kernel = kernel;
        s.stride = stride;
        s.padding = padding;
        return s;
    }
    static LayerSpec act(Activation a) {
        LayerSpec s;
        s.kind = LayerKind::activation;
        s.activation = a;
        return s;
    }
    static LayerSpec flatten() {
        LayerSpec s;
        s.kind = LayerKind::flatten;
        return s;
    }

    bool has_weights() const { return kind == LayerKind::dense || kind == LayerKind::conv2d; }
};

struct NetworkSpec {
    Shape input_shape;  ///< per sample: {C, H, W} or {features}
    std::size_t classes = 0;
    std::vector<LayerSpec> layers;
    std::optional<QuantConfig> input_quant;

    /// Per-sample output shape of every layer; throws on inconsistent shapes.
    std::vector<Shape> output_shapes() const {
        std::vector<Shape> shapes;
        Shape cur = input_shape;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const LayerSpec& l = layers[i];
            const std::string where = "layer " + std::to_string(i) + " (" + std::string(layer_kind_name(l.kind)) + ")";
            switch (l.kind) {
                case LayerKind::dense:
                    if (cur.size() != 1) throw std::invalid_argument(where + ": dense input must be flat, got " + shape_str(cur));
                    if (l.units == 0) throw std::invalid_argument(where + ": zero units");
                    cur = Shape{l.units};
                    break;
                case LayerKind::conv2d: {
                    if (cur.size() != 3) throw std::invalid_argument(where + ": conv input must be CHW, got " + shape_str(cur));
                    const auto h = conv_out_extent(cur[1], l.kernel, l.stride, l.padding);
                    const auto w = conv_out_extent(cur[2], l.kernel, l.stride, l.padding);
                    if (h == 0 || w == 0 || l.units == 0) throw std::invalid_argument(where + ": non-positive output extent");
                    cur = Shape{l.units, h, w};
                    break;
                }
                case LayerKind::activation: break;
                case LayerKind::flatten: cur = Shape{shape_numel(cur)}; break;
            }
            shapes.push_back(cur);
        }
        return shapes;
    }

    void validate() const {
        if (input_shape.empty()) throw std::invalid_argument("network: empty input shape");
        auto shapes = output_shapes();
        if (shapes.empty() || shapes.back() != Shape{classes}) {
            throw std::invalid_argument("network: final output must be [" + std::to_string(classes) + "] logits");
        }
        for (const auto& l : layers) {
            if (l.weight_quant && l.weight_quant->offset_enabled) {
                throw std::invalid_argument("network: weight quantizers must not carry an offset");
            }
        }
    }
};

/// Three conv layers and two dense layers for [1, 8, 8] inputs (about 12k parameters).
inline NetworkSpec make_conv_net(Activation act, std::size_t classes = 10, Shape input = {1, 8, 8}) {
    NetworkSpec s{std::move(input), classes, {}, std::nullopt};
    s.layers = {LayerSpec::conv(8, 3, 1, 1),  LayerSpec::act(act), LayerSpec::conv(16, 3, 2, 1), LayerSpec::act(act),
                LayerSpec::conv(16, 3, 1, 1), LayerSpec::act(act), LayerSpec::flatten(),         LayerSpec::dense(32),
                LayerSpec::act(act),          LayerSpec::dense(classes)};
    s.validate();
    return s;
}

inline NetworkSpec make_mlp(Activation act, std::size_t inputs, std::size_t classes, std::vector<std::size_t> hidden) {
    NetworkSpec s{Shape{inputs}, classes, {}, std::nullopt};
    for (auto h : hidden) {
        s.layers.push_back(LayerSpec::dense(h));
        s.layers.push_back(LayerSpec::act(act));
    }
    s.layers.push_back(LayerSpec::dense(classes));
    s.validate();
    return s;
}

/// Architecture by name: "swish" / "relu" / "hswish" / "leaky_relu" conv nets for
/// digits, or "mlp-<activation>" for the spiral.
inline NetworkSpec make_architecture(std::string_view name, const Dataset& data) {
    if (name.rfind("mlp-", 0) == 0) {
        return make_mlp(parse_activation(name.substr(4)), data.sample_size(), data.classes, {32, 32});
    }
    return make_conv_net(parse_activation(name), data.classes, data.sample_shape);
}

enum class GradScaleMode : std::uint8_t { lsq, unit };

struct QuantPlan {
    int weight_bits = 4;
    int act_bits = 4;
    int config = 4;  ///< activation parametrization 1-4
    int input_bits = 8;
    GradScaleMode grad_scale = GradScaleMode::lsq;
};

/// Attaches a signed symmetric weight quantizer to every dense/conv layer, the chosen
/// activation configuration to every activation layer and an unsigned input quantizer.
inline NetworkSpec attach_quantizers(NetworkSpec spec, const QuantPlan& plan) {
    const QuantConfig act = table_config(plan.config, plan.act_bits);
    const QuantConfig weights = weight_config(plan.weight_bits);
    for (auto& l : spec.layers) {
        l.weight_quant = l.has_weights() ? std::optional(weights) : std::nullopt;
        l.act_quant = l.kind == LayerKind::activation ? std::optional(act) : std::nullopt;
    }
    // The input grid spans the observed data range: unsigned codes with the offset pinned
    // at the calibration minimum, so signed inputs (the spiral) are representable too.
    spec.input_quant = QuantConfig::make(plan.input_bits, false, true, OffsetMode::fixed_xmin);
    return spec;
}

inline NetworkSpec strip_quantizers(NetworkSpec spec) {
    for (auto& l : spec.layers) {
        l.weight_quant.reset();
        l.act_quant.reset();
    }
    spec.input_quant.reset();
    return spec;
}

// ---------------------------------------------------------------------------
// Runtime objects
// ---------------------------------------------------------------------------

struct Quantizer {
    std::string name;
    QuantConfig config;
    Tensor scale;   ///< shape {1}
    Tensor offset;  ///< shape {1}; held at 0 when the config has no offset
    float grad_scale = 1.0f;
    float observed_min = 0.0f;  ///< calibration range of the quantizer input
    float observed_max = 0.0f;

    static Quantizer make(std::string name, const QuantConfig& cfg, float grad_scale) {
        Quantizer q{std::move(name), cfg, Tensor::scalar(1.0f, true), Tensor::scalar(0.0f, cfg.learns_offset()),
                    grad_scale};
        return q;
    }

    QuantizerState state() const {
        QuantizerState st;
        st.scale = scale.item();
        st.offset = config.offset_enabled ? offset.item() : 0.0f;
        st.scale_trainable = scale.requires_grad();
        st.offset_trainable = offset.requires_grad();
        st.grad_scale = grad_scale;
        return st;
    }

    void set(float s, float beta) {
        scale[0] = std::max(s, kMinScale);
        offset[0] = config.offset_enabled ? beta : 0.0f;
    }

    Quantizer clone() const {
        Quantizer q = *this;
        q.scale = scale.clone();
        q.offset = offset.clone();
        return q;
    }
};

struct Layer {
    LayerSpec spec;
    Shape in_shape;   ///< per sample
    Shape out_shape;  ///< per sample
    Tensor weight;    ///< dense [out, in]; conv [O, C, k, k]
    Tensor bias;      ///< dense [out]; conv [O, 1, 1]
    std::optional<Quantizer> weight_q;
    std::optional<Quantizer> act_q;
};

enum class ParamRole : std::uint8_t { weight, bias, scale, offset };

struct ParamRef {
    Tensor tensor;
    ParamRole role;
};

/// Custom fake-quantization kernel; defaults to fake_quantize().
using QuantizeFn = std::function<Tensor(const Tensor& x, const Quantizer& q)>;

/// Called with (site index, pre-quantization tensor) at every activation quantizer
/// site. Site 0 is the input quantizer; activation layers follow in order.
using SiteObserver = std::function<void(std::size_t site, const Tensor& values)>;

class Network {
public:
    static Network create(const NetworkSpec& spec, std::uint64_t seed) {
        spec.validate();
        Network net;
        net.input_shape_ = spec.input_shape;
        net.classes_ = spec.classes;
        const auto shapes = spec.output_shapes();
        std::mt19937_64 rng(seed);
        Shape cur = spec.input_shape;
        for (std::size_t i = 0; i < spec.layers.size(); ++i) {
            Layer layer;
            layer.spec = spec.layers[i];
            layer.spec.weight_quant.reset();  // quantizers are attached separately
            layer.spec.act_quant.reset();
            layer.in_shape = cur;
            layer.out_shape = shapes[i];
            if (layer.spec.kind == LayerKind::dense) {
                const std::size_t fan_in = cur[0];
                layer.weight = he_normal(Shape{layer.spec.units, fan_in}, fan_in, rng);
                layer.bias = Tensor(Shape{layer.spec.units}, 0.0f, true);
            } else if (layer.spec.kind == LayerKind::conv2d) {
                const std::size_t fan_in = cur[0] * layer.spec.kernel * layer.spec.kernel;
                layer.weight = he_normal(Shape{layer.spec.units, cur[0], layer.spec.kernel, layer.spec.kernel}, fan_in, rng);
                layer.bias = Tensor(Shape{layer.spec.units, 1, 1}, 0.0f, true);
            }
            net.layers_.push_back(std::move(layer));
            cur = shapes[i];
        }
        net.attach(spec);
        return net;
    }

    /// Deep copy: no storage is shared with the source.
    Network clone() const {
        Network n = *this;
        for (auto& l : n.layers_) {
            if (l.weight.defined()) l.weight = l.weight.clone();
            if (l.bias.defined()) l.bias = l.bias.clone();
            if (l.weight_q) l.weight_q = l.weight_q->clone();
            if (l.act_q) l.act_q = l.act_q->clone();
        }
        if (n.input_q_) n.input_q_ = n.input_q_->clone();
        return n;
    }

    /// Copy of this network's weights with the quantizers of `plan` attached (uninitialized scales).
    Network with_quantizers(const QuantPlan& plan) const {
        Network n = clone();
        n.attach(attach_quantizers(n.spec(), plan), plan.grad_scale);
        n.quantize_ = true;
        return n;
    }

    /// Copy with every quantizer removed.
    Network without_quantizers() const {
        Network n = clone();
        n.attach(strip_quantizers(n.spec()));
        n.quantize_ = false;
        return n;
    }

    NetworkSpec spec() const {
        NetworkSpec s{input_shape_, classes_, {}, std::nullopt};
        for (const auto& l : layers_) {
            LayerSpec ls = l.spec;
            if (l.weight_q) ls.weight_quant = l.weight_q->config;
            if (l.act_q) ls.act_quant = l.act_q->config;
            s.layers.push_back(ls);
        }
        if (input_q_) s.input_quant = input_q_->config;
        return s;
    }

    const Shape& input_shape() const { return input_shape_; }
    std::size_t classes() const { return classes_; }
    std::vector<Layer>& layers() { return layers_; }
    const std::vector<Layer>& layers() const { return layers_; }
    std::optional<Quantizer>& input_quantizer() { return input_q_; }
    const std::optional<Quantizer>& input_quantizer() const { return input_q_; }

    bool has_quantizers() const {
        if (input_q_) return true;
        for (const auto& l : layers_)
            if (l.weight_q || l.act_q) return true;
        return false;
    }

    bool quantization_enabled() const { return quantize_; }
    void set_quantization_enabled(bool on) { quantize_ = on; }

    void set_quantize_fn(QuantizeFn fn) { quantize_fn_ = std::move(fn); }

    /// Activation quantizer sites in forward order (input quantizer first when present).
    std::vector<Quantizer*> activation_sites() {
        std::vector<Quantizer*> out;
        if (input_q_) out.push_back(&*input_q_);
        for (auto& l : layers_)
            if (l.act_q) out.push_back(&*l.act_q);
        return out;
    }
    std::vector<const Quantizer*> activation_sites() const {
        std::vector<const Quantizer*> out;
        if (input_q_) out.push_back(&*input_q_);
        for (const auto& l : layers_)
            if (l.act_q) out.push_back(&*l.act_q);
        return out;
    }

    std::vector<Quantizer*> weight_quantizers() {
        std::vector<Quantizer*> out;
        for (auto& l : layers_)
            if (l.weight_q) out.push_back(&*l.weight_q);
        return out;
    }

    std::vector<ParamRef> parameters() {
        std::vector<ParamRef> out;
        for (auto& l : layers_) {
            if (l.weight.defined()) out.push_back({l.weight, ParamRole::weight});
            if (l.bias.defined()) out.push_back({l.bias, ParamRole::bias});
        }
        for (Quantizer* q : all_quantizers()) {
            if (q->scale.requires_grad()) out.push_back({q->scale, ParamRole::scale});
            if (q->offset.requires_grad()) out.push_back({q->offset, ParamRole::offset});
        }
        return out;
    }

    std::vector<Quantizer*> all_quantizers() {
        std::vector<Quantizer*> out;
        if (input_q_) out.push_back(&*input_q_);
        for (auto& l : layers_) {
            if (l.weight_q) out.push_back(&*l.weight_q);
            if (l.act_q) out.push_back(&*l.act_q);
        }
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers_) {
            if (l.weight.defined()) n += l.weight.size();
            if (l.bias.defined()) n += l.bias.size();
        }
        return n;
    }

    /// Forward pass over a batch [B, ...input_shape]. Records onto the active tape.
    Tensor forward(const Tensor& x, const SiteObserver& observe = {}) const {
        Shape expected{x.shape().empty() ? 0 : x.dim(0)};
        expected.insert(expected.end(), input_shape_.begin(), input_shape_.end());
        if (x.shape() != expected) {
            throw std::invalid_argument("forward: input " + shape_str(x.shape()) + " does not match " + shape_str(expected));
        }
        std::size_t site = 0;
        Tensor h = x;
        if (input_q_) {
            if (observe) observe(site, h);
            if (quantize_) h = quantize(h, *input_q_);
            ++site;
        }
        for (const auto& l : layers_) {
            switch (l.spec.kind) {
                case LayerKind::dense: {
                    Tensor w = (quantize_ && l.weight_q) ? quantize(l.weight, *l.weight_q) : l.weight;
                    h = add(matmul_nt(h, w), l.bias);
                    break;
                }
                case LayerKind::conv2d: {
                    Tensor w = (quantize_ && l.weight_q) ? quantize(l.weight, *l.weight_q) : l.weight;
                    h = add(conv2d(h, w, l.spec.stride, l.spec.padding), l.bias);
                    break;
                }
                case LayerKind::activation:
                    h = activate(h, l.spec.activation);
                    if (l.act_q) {
                        if (observe) observe(site, h);
                        if (quantize_) h = quantize(h, *l.act_q);
                        ++site;
                    }
                    break;
                case LayerKind::flatten: h = flatten(h); break;
            }
        }
        return h;
    }

    Tensor quantize(const Tensor& x, const Quantizer& q) const {
        if (quantize_fn_) return quantize_fn_(x, q);
        return fake_quantize(x, q.scale, q.offset, q.config, q.grad_scale);
    }

private:
    static Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
        std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(std::max<std::size_t>(fan_in, 1))));
        Tensor t(std::move(shape), 0.0f, true);
        for (auto& v : t.data()) v = dist(rng);
        return t;
    }

    // Installs fresh (uninitialized) quantizers for the configs named in `spec`.
    void attach(const NetworkSpec& spec, GradScaleMode mode = GradScaleMode::lsq) {
        spec.validate();
        auto g = [mode](std::size_t elements, const QuantConfig& cfg) {
            return mode == GradScaleMode::lsq ? lsq_grad_scale(elements, cfg.p()) : 1.0f;
        };
        input_q_.reset();
        if (spec.input_quant) {
            input_q_ = Quantizer::make("input", *spec.input_quant, g(shape_numel(input_shape_), *spec.input_quant));
            input_q_->scale.set_requires_grad(false);
        }
        std::size_t act_index = 0;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            Layer& l = layers_[i];
            const LayerSpec& ls = spec.layers.at(i);
            l.weight_q.reset();
            l.act_q.reset();
            if (ls.weight_quant) {
                l.weight_q = Quantizer::make("layer" + std::to_string(i) + ".weight", *ls.weight_quant,
                                             g(l.weight.size(), *ls.weight_quant));
            }
            if (ls.act_quant) {
                l.act_q = Quantizer::make("layer" + std::to_string(i) + ".act" + std::to_string(act_index++),
                                          *ls.act_quant, g(shape_numel(l.out_shape), *ls.act_quant));
            }
        }
    }

    friend Network read_checkpoint(std::istream& is);

    Shape input_shape_;
    std::size_t classes_ = 0;
    std::vector<Layer> layers_;
    std::optional<Quantizer> input_q_;
    bool quantize_ = false;
    QuantizeFn quantize_fn_;
};

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

struct ActivationRange {
    std::string name;
    float min = 0.0f;
    float max = 0.0f;
    bool degenerate() const { return !(max > min); }
};

/// Running min/max of every activation quantizer's input over `batches`, evaluated
/// on the float network (quantizers bypassed).
inline std::vector<ActivationRange> estimate_activation_range(const Network& net, std::span<const Tensor> batches) {
    Network probe = net.clone();
    probe.set_quantization_enabled(false);
    auto sites = probe.activation_sites();
    std::vector<RangeTracker> trackers(sites.size());
    NoGradScope no_grad;
    for (const Tensor& b : batches) {
        probe.forward(b, [&](std::size_t site, const Tensor& v) { trackers.at(site).observe(v.data()); });
    }
    std::vector<ActivationRange> out;
    for (std::size_t i = 0; i < sites.size(); ++i) {
        out.push_back({sites[i]->name, trackers[i].empty() ? 0.0f : trackers[i].min,
                       trackers[i].empty() ? 0.0f : trackers[i].max});
    }
    return out;
}

/// MSE search budget used during network calibration: a lighter refinement than the
/// stand-alone defaults, since every activation site of every run is calibrated.
inline MseInitOptions network_mse_defaults() {
    MseInitOptions o;
    o.total_steps = 400;
    o.search_samples = 8192;
    o.refine_samples = 16384;
    return o;
}

struct CalibrationOptions {
    std::size_t batches = 4;
    std::size_t batch_size = 128;
    std::uint64_t seed = 0;
    MseInitOptions mse = network_mse_defaults();
};

inline std::vector<Tensor> calibration_batches(const Dataset& data, const CalibrationOptions& opt) {
    auto order = permutation(data.size(), opt.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<Tensor> out;
    for (std::size_t b = 0; b < opt.batches; ++b) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < opt.batch_size; ++i) idx.push_back(order[(b * opt.batch_size + i) % order.size()]);
        out.push_back(data.batch(idx));
    }
    return out;
}

/// Initializes every quantizer of `net` with `scheme`.
///
/// Weights: min-max (scale only), LSQ, or the Gaussian 3-sigma rule.
/// Activations: min-max over the first batch, LSQ over the first batch (offset 0),
/// or MSE minimization over all batches. Fixed-offset quantizers keep their
/// offset frozen (0, or the observed minimum) and only the scale is initialized.
/// The input quantizer is always min-max over all batches.
inline InitReport initialize_quantizers(Network& net, std::span<const Tensor> batches, InitScheme scheme,
                                        const MseInitOptions& mse_opt = network_mse_defaults()) {
    if (batches.empty()) throw std::invalid_argument("initialize_quantizers: no calibration batches");
    InitReport report;
    report.scheme = scheme;
    report.batches_used = batches.size();

    for (auto& l : net.layers()) {
        if (!l.weight_q) continue;
        Quantizer& q = *l.weight_q;
        auto w = l.weight.data();
        const auto [lo, hi] = std::minmax_element(w.begin(), w.end());
        q.observed_min = *lo;
        q.observed_max = *hi;
        float s = 1.0f;
        switch (scheme) {
            case InitScheme::minmax: s = init_minmax(*lo, *hi, q.config.n(), q.config.p()).scale; break;
            case InitScheme::lsq: s = init_lsq(w, q.config.p()); break;
            case InitScheme::lsqplus: s = init_lsqplus_weight(w, q.config.bits); break;
        }
        q.set(s, 0.0f);
        report.entries.push_back({q.name, q.scale.item(), 0.0f, quantization_mse(w, {q.scale.item(), 0.0f}, q.config)});
    }

    // Gather float activations at every site.
    Network probe = net.clone();
    probe.set_quantization_enabled(false);
    const std::size_t n_sites = probe.activation_sites().size();
    std::vector<std::vector<float>> first(n_sites), all(n_sites);
    {
        NoGradScope no_grad;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            probe.forward(batches[b], [&](std::size_t site, const Tensor& v) {
                auto d = v.data();
                if (b == 0) first[site].assign(d.begin(), d.end());
                all[site].insert(all[site].end(), d.begin(), d.end());
            });
        }
    }

    auto sites = net.activation_sites();
    for (std::size_t i = 0; i < sites.size(); ++i) {
        Quantizer& q = *sites[i];
        const auto [lo_all, hi_all] = std::minmax_element(all[i].begin(), all[i].end());
        q.observed_min = *lo_all;
        q.observed_max = *hi_all;
        const auto [lo1, hi1] = std::minmax_element(first[i].begin(), first[i].end());
        const bool is_input = net.input_quantizer() && i == 0;
        std::optional<float> frozen;
        if (q.config.offset_enabled && q.config.offset_mode == OffsetMode::fixed_zero) frozen = 0.0f;
        if (q.config.offset_enabled && q.config.offset_mode == OffsetMode::fixed_xmin) frozen = q.observed_min;

        ScaleOffset so;
        const InitScheme site_scheme = is_input ? InitScheme::minmax : scheme;
        switch (site_scheme) {
            case InitScheme::minmax:
                so = is_input ? init_minmax(*lo_all, *hi_all, q.config.n(), q.config.p())
                              : init_minmax(*lo1, *hi1, q.config.n(), q.config.p());
                break;
            case InitScheme::lsq:
                so = {init_lsq(first[i], q.config.p()), 0.0f};
                break;
            case InitScheme::lsqplus:
                so = init_lsqplus_activation(std::span<const float>(all[i]), q.config, frozen, mse_opt).params;
                break;
        }
        if (!q.config.offset_enabled) so.offset = 0.0f;
        if (frozen) so.offset = *frozen;
        q.set(so.scale, so.offset);
        report.entries.push_back({q.name, q.scale.item(), q.config.offset_enabled ? q.offset.item() : 0.0f,
                                  quantization_mse(all[i], {q.scale.item(), q.offset.item()}, q.config)});
    }
    return report;
}

/// Freezes every offset-enabled activation quantizer at 0 or at its observed minimum.
inline void fixed_offset_mode(Network& net, OffsetMode mode) {
    if (mode == OffsetMode::learned) throw std::invalid_argument("fixed_offset_mode: mode must be fixed_zero or fixed_xmin");
    bool any = false;
    for (Layer& l : net.layers()) {
        if (!l.act_q || !l.act_q->config.offset_enabled) continue;
        Quantizer* q = &*l.act_q;
        any = true;
        q->config.offset_mode = mode;
        q->offset.set_requires_grad(false);
        q->offset.drop_grad();
        q->offset[0] = mode == OffsetMode::fixed_zero ? 0.0f : q->observed_min;
    }
    if (!any) throw std::invalid_argument("fixed_offset_mode: network has no offset-enabled quantizers");
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    float lr = 0.05f;
    float momentum = 0.9f;
    float weight_decay = 1e-4f;
    std::uint64_t seed = 1;
    float scale_lr_mult = 1.0f;
    float offset_lr_mult = 1.0f;
    std::size_t max_steps = 0;  ///< stop after this many steps when non-zero
};

class SgdMomentum {
public:
    explicit SgdMomentum(const TrainConfig& cfg) : cfg_(cfg) {}

    void step(std::vector<ParamRef>& params) {
        if (velocity_.size() != params.size()) {
            velocity_.assign(params.size(), {});
            for (std::size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i].tensor.size(), 0.0f);
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            ParamRef& p = params[i];
            if (!p.tensor.has_grad()) continue;
            float lr = cfg_.lr;
            float decay = 0.0f;
            switch (p.role) {
                case ParamRole::weight: decay = cfg_.weight_decay; break;
                case ParamRole::bias: break;
                case ParamRole::scale: lr *= cfg_.scale_lr_mult; break;
                case ParamRole::offset: lr *= cfg_.offset_lr_mult; break;
            }
            auto w = p.tensor.data();
            auto g = std::as_const(p.tensor).grad();
            auto& v = velocity_[i];
            for (std::size_t k = 0; k < w.size(); ++k) {
                v[k] = cfg_.momentum * v[k] + (g[k] + decay * w[k]);
                w[k] -= lr * v[k];
            }
            if (p.role == ParamRole::scale) {
                for (auto& s : w) s = std::max(s, kMinScale);
            }
        }
    }

private:
    TrainConfig cfg_;
    std::vector<std::vector<float>> velocity_;
};

struct EpochMetrics {
    std::size_t step = 0;
    double loss = 0.0;
    double train_acc = 0.0;
    double val_acc = 0.0;
};

struct TrainTrace {
    std::vector<EpochMetrics> epochs;
    std::vector<float> step_losses;
    double max_abs_offset_grad = 0.0;  ///< largest |d offset| seen by any step
    double min_scale_seen = std::numeric_limits<double>::infinity();
    double final_val_acc() const { return epochs.empty() ? 0.0 : epochs.back().val_acc; }
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline double accuracy(const Network& net, const Dataset& data, std::size_t batch_size = 256) {
    if (data.size() == 0) return 0.0;
    NoGradScope no_grad;
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        idx.clear();
        for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
        Tensor logits = net.forward(data.batch(idx));
        const std::size_t c = net.classes();
        for (std::size_t b = 0; b < idx.size(); ++b) {
            auto row = logits.data().subspan(b * c, c);
            const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
            if (pred == data.labels[idx[b]]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Mini-batch SGD with momentum on cross-entropy. Deterministic given cfg.seed.
inline TrainTrace train(Network& net, const Dataset& train_data, const Dataset& val_data, const TrainConfig& cfg) {
    TrainTrace trace;
    if (cfg.batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
    auto params = net.parameters();
    SgdMomentum opt(cfg);
    std::mt19937_64 rng(cfg.seed);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order = permutation(train_data.size(), rng());
        double loss_sum = 0.0;
        std::size_t correct = 0, seen = 0;
        for (std::size_t start = 0; start + cfg.batch_size <= order.size(); start += cfg.batch_size) {
            std::span<const std::size_t> idx(order.data() + start, cfg.batch_size);
            Tensor x = train_data.batch(idx);
            auto labels = train_data.batch_labels(idx);
            for (auto& p : params) p.tensor.drop_grad();

            GradTape tape;
            TapeScope scope(tape);
            Tensor logits = net.forward(x);
            Tensor loss = softmax_cross_entropy(logits, labels);
            const float lv = loss.item();
            if (!std::isfinite(lv)) throw TrainingDiverged("train: non-finite loss at step " + std::to_string(step));
            backward(loss);
            for (auto& p : params) {
                if (p.role == ParamRole::offset && p.tensor.has_grad()) {
                    trace.max_abs_offset_grad =
                        std::max(trace.max_abs_offset_grad, static_cast<double>(std::abs(std::as_const(p.tensor).grad()[0])));
                }
            }
            opt.step(params);
            for (auto& p : params) {
                if (p.role == ParamRole::scale) trace.min_scale_seen = std::min<double>(trace.min_scale_seen, p.tensor[0]);
            }

            trace.step_losses.push_back(lv);
            loss_sum += lv;
            const std::size_t c = net.classes();
            for (std::size_t b = 0; b < labels.size(); ++b) {
                auto row = logits.data().subspan(b * c, c);
                if (std::max_element(row.begin(), row.end()) - row.begin() == labels[b]) ++correct;
            }
            seen += labels.size();
            ++step;
            if (cfg.max_steps && step >= cfg.max_steps) break;
        }
        for (auto& p : params) p.tensor.drop_grad();
        const std::size_t batches = std::max<std::size_t>(seen / cfg.batch_size, 1);
        trace.epochs.push_back({step, loss_sum / static_cast<double>(batches),
                                seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0,
                                accuracy(net, val_data)});
        if (cfg.max_steps && step >= cfg.max_steps) break;
    }
    return trace;
}

/// Float training of a network without quantizers.
inline Network pretrain_float(const NetworkSpec& spec, const DataSplit& data, const TrainConfig& cfg,
                              TrainTrace* trace_out = nullptr) {
    Network net = Network::create(strip_quantizers(spec), cfg.seed);
    TrainTrace trace = train(net, data.train, data.validation, cfg);
    if (trace_out) *trace_out = std::move(trace);
    return net;
}

struct QatResult {
    Network net;
    InitReport init;
    TrainTrace trace;
};

/// Quantization-aware fine-tuning from a float network: attach quantizers, initialize
/// them with `scheme` on calibration batches, optionally freeze offsets, then train.
inline QatResult train_qat(const Network& pretrained, const DataSplit& data, const QuantPlan& plan,
                           const TrainConfig& cfg, InitScheme scheme, const CalibrationOptions& calib = {},
                           std::optional<OffsetMode> fixed_offset = std::nullopt) {
    Network net = pretrained.has_quantizers() ? pretrained.without_quantizers() : pretrained.clone();
    net = net.with_quantizers(plan);
    CalibrationOptions c = calib;
    c.seed = calib.seed ^ cfg.seed;
    auto batches = calibration_batches(data.train, c);
    if (fixed_offset && *fixed_offset != OffsetMode::learned) {
        // Observed minima are needed before the frozen offsets can be placed.
        auto ranges = estimate_activation_range(net, batches);
        auto sites = net.activation_sites();
        for (std::size_t i = 0; i < sites.size(); ++i) sites[i]->observed_min = ranges[i].min;
        fixed_offset_mode(net, *fixed_offset);
    }
    InitReport report = initialize_quantizers(net, batches, scheme, c.mse);
    TrainTrace trace = train(net, data.train, data.validation, cfg);
    return {std::move(net), std::move(report), std::move(trace)};
}

// ---------------------------------------------------------------------------
// Checkpoints and metric traces
// ---------------------------------------------------------------------------

inline constexpr std::string_view kCheckpointMagic = "ASYMQCKP";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_tensor(BinaryWriter& w, const Tensor& t) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (float v : t.data()) w.put<float>(v);
}

inline Tensor read_tensor(BinaryReader& r, bool requires_grad) {
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError("tensor rank " + std::to_string(rank) + " too large");
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>();
    const std::size_t n = shape_numel(shape);
    if (n > (1u << 26)) throw FormatError("tensor too large");
    std::vector<float> data(n);
    for (auto& v : data) v = r.get<float>();
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

inline void write_quantizer(BinaryWriter& w, const std::optional<Quantizer>& q) {
    w.put<std::uint8_t>(q ? 1 : 0);
    if (!q) return;
    w.put_string(q->name);
    w.put<std::int32_t>(q->config.bits);
    w.put<std::uint8_t>(q->config.is_signed);
    w.put<std::uint8_t>(q->config.offset_enabled);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(q->config.offset_mode));
    w.put<float>(q->scale.item());
    w.put<float>(q->offset.item());
    w.put<float>(q->grad_scale);
    w.put<float>(q->observed_min);
    w.put<float>(q->observed_max);
    w.put<std::uint8_t>(q->scale.requires_grad());
}

inline std::optional<Quantizer> read_quantizer(BinaryReader& r) {
    if (!r.get<std::uint8_t>()) return std::nullopt;
    std::string name = r.get_string();
    const int bits = r.get<std::int32_t>();
    const bool is_signed = r.get<std::uint8_t>() != 0;
    const bool offset = r.get<std::uint8_t>() != 0;
    const auto mode = r.get<std::uint8_t>();
    if (mode > 2) throw FormatError("bad offset mode");
    QuantConfig cfg;
    try {
        cfg = QuantConfig::make(bits, is_signed, offset, static_cast<OffsetMode>(mode));
    } catch (const std::invalid_argument& e) {
        throw FormatError(e.what());
    }
    Quantizer q = Quantizer::make(std::move(name), cfg, 1.0f);
    q.scale[0] = r.get<float>();
    q.offset[0] = r.get<float>();
    q.grad_scale = r.get<float>();
    q.observed_min = r.get<float>();
    q.observed_max = r.get<float>();
    q.scale.set_requires_grad(r.get<std::uint8_t>() != 0);
    return q;
}

}  // namespace detail

/// Versioned binary checkpoint: architecture, weights and every quantizer's
/// (bits, signedness, offset mode, scale, offset, gradient scale).
inline void write_checkpoint(std::ostream& os, const Network& net) {
    BinaryWriter w(os);
    w.put_magic(kCheckpointMagic);
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put_vector<std::uint32_t>(std::vector<std::uint32_t>(net.input_shape().begin(), net.input_shape().end()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(net.classes()));
    w.put<std::uint8_t>(net.quantization_enabled());
    detail::write_quantizer(w, net.input_quantizer());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(net.layers().size()));
    for (const auto& l : net.layers()) {
        w.put<std::uint8_t>(static_cast<std::uint8_t>(l.spec.kind));
        w.put<std::uint8_t>(static_cast<std::uint8_t>(l.spec.activation));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(l.spec.units));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(l.spec.kernel));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(l.spec.stride));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(l.spec.padding));
        if (l.spec.has_weights()) {
            detail::write_tensor(w, l.weight);
            detail::write_tensor(w, l.bias);
        }
        detail::write_quantizer(w, l.weight_q);
        detail::write_quantizer(w, l.act_q);
    }
    if (!w.ok()) throw std::runtime_error("write_checkpoint: stream error");
}

inline Network read_checkpoint(std::istream& is) {
    BinaryReader r(is);
    r.expect_magic(kCheckpointMagic);
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    auto dims = r.get_vector<std::uint32_t>(8);
    NetworkSpec spec;
    spec.input_shape.assign(dims.begin(), dims.end());
    spec.classes = r.get<std::uint32_t>();
    const bool quantize = r.get<std::uint8_t>() != 0;
    auto input_q = detail::read_quantizer(r);
    const auto n_layers = r.get<std::uint32_t>();
    if (n_layers > 1024) throw FormatError("too many layers");
    struct Loaded {
        Tensor weight, bias;
        std::optional<Quantizer> wq, aq;
    };
    std::vector<Loaded> loaded;
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        LayerSpec ls;
        const auto kind = r.get<std::uint8_t>();
        const auto act = r.get<std::uint8_t>();
        if (kind > 3 || act > 4) throw FormatError("bad layer record");
        ls.kind = static_cast<LayerKind>(kind);
        ls.activation = static_cast<Activation>(act);
        ls.units = r.get<std::uint32_t>();
        ls.kernel = r.get<std::uint32_t>();
        ls.stride = r.get<std::uint32_t>();
        ls.padding = r.get<std::uint32_t>();
        Loaded l;
        if (ls.has_weights()) {
            l.weight = detail::read_tensor(r, true);
            l.bias = detail::read_tensor(r, true);
        }
        l.wq = detail::read_quantizer(r);
        l.aq = detail::read_quantizer(r);
        spec.layers.push_back(ls);
        loaded.push_back(std::move(l));
    }
    try {
        spec.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("checkpoint describes an invalid network: ") + e.what());
    }
    Network net = Network::create(spec, 0);
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        Layer& l = net.layers_[i];
        if (l.spec.has_weights()) {
            if (loaded[i].weight.shape() != l.weight.shape() || loaded[i].bias.shape() != l.bias.shape()) {
                throw FormatError("layer " + std::to_string(i) + ": parameter shape mismatch");
            }
            l.weight = loaded[i].weight;
            l.bias = loaded[i].bias;
        }
        l.weight_q = std::move(loaded[i].wq);
        l.act_q = std::move(loaded[i].aq);
        if (l.weight_q && l.weight_q->config.offset_enabled) throw FormatError("weight quantizer with offset");
    }
    net.input_q_ = std::move(input_q);
    net.quantize_ = quantize;
    return net;
}

inline void save_checkpoint(const std::string& path, const Network& net) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    write_checkpoint(os, net);
}

inline Network load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    return read_checkpoint(is);
}

inline void write_trace_csv(std::ostream& os, const TrainTrace& trace) {
    os << "step,loss,train_acc,val_acc\n";
    os.precision(17);
    for (const auto& e : trace.epochs) os << e.step << ',' << e.loss << ',' << e.train_acc << ',' << e.val_acc << '\n';
}

}  // namespace asymq
