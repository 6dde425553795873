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
 * @file integer_inference.hpp
 * @brief Fixed-point inference with the activation offset folded into the bias.
 *
 * For a layer with symmetric weights ŵ = w̄·s_w and affine inputs x̂ = x̄·s_x + β:
 *
 *   ŵ·x̂ + b = s_w·s_x·(w̄·x̄) + [b + β·s_w·Σ w̄]
 *
 * The bracket is input-independent and is precomputed per output. For padded
 * convolutions the padded taps hold x̂ = 0 rather than x̂ = β, so the sum of w̄
 * only runs over the taps that land inside the image, which makes the folded bias
 * a per-output-position map.
 *
 * Both the integer path and the reference simulated path run in double precision
 * after the integer accumulation, so the comparison measures the folding identity
 * rather than float32 association noise.
 */

#pragma once

#include <asymq/binary_io.hpp>
#include <asymq/network.hpp>
#include <asymq/quantizer.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace asymq {

/// Frozen parameters of one activation quantizer for inference.
struct QuantParams {
    QuantConfig config;
    float scale = 1.0f;
    float offset = 0.0f;  ///< 0 when the config has no offset

    static QuantParams from(const Quantizer& q) {
        return {q.config, q.scale.item(), q.config.offset_enabled ? q.offset.item() : 0.0f};
    }
    double beta() const { return config.offset_enabled ? static_cast<double>(offset) : 0.0; }
};

/// Integer code of a real value under `q`, evaluated in double with round-half-to-even.
inline std::int32_t requantize(double y, const QuantParams& q) {
    const auto [n, p] = q.config.bounds();
    const double u = q.config.offset_enabled ? (y - static_cast<double>(q.offset)) / q.scale : y / q.scale;
    return static_cast<std::int32_t>(std::nearbyint(std::clamp(u, static_cast<double>(n), static_cast<double>(p))));
}

inline double dequantize(std::int32_t code, const QuantParams& q) {
    return q.config.offset_enabled ? code * static_cast<double>(q.scale) + q.offset : code * static_cast<double>(q.scale);
}

struct FoldedLayer {
    LayerKind kind = LayerKind::dense;
    Shape in_shape;   ///< per sample
    Shape out_shape;  ///< per sample
    std::size_t kernel = 1, stride = 1, padding = 0;

    Shape weight_shape;                      ///< [out, in] or [O, C, k, k]
    std::vector<std::int32_t> weight_codes;  ///< w̄ in the weight quantizer's [n, p]
    QuantConfig weight_config;
    float weight_scale = 1.0f;
    QuantParams input;  ///< quantizer producing this layer's input codes

    double combined_scale = 1.0;     ///< s_w · s_x
    std::vector<double> folded_bias;  ///< dense: [out]; conv: [O·H·W] per output position
    std::vector<float> bias;          ///< original float bias, kept for unfolding

    std::size_t outputs() const { return weight_shape.at(0); }
    std::size_t fan_in() const { return weight_codes.size() / std::max<std::size_t>(outputs(), 1); }
};

/// Folds a dense/conv layer whose input is produced by `input`.
inline FoldedLayer fold(const Layer& layer, const QuantParams& input) {
    if (!layer.spec.has_weights()) throw std::invalid_argument("fold: layer has no weights");
    if (!layer.weight_q) throw std::invalid_argument("fold: layer has no weight quantizer");
    const Quantizer& wq = *layer.weight_q;
    if (wq.config.offset_enabled) {
        throw std::invalid_argument("fold: weight quantizer carries an offset; folding needs symmetric weights");
    }
    FoldedLayer f;
    f.kind = layer.spec.kind;
    f.in_shape = layer.in_shape;
    f.out_shape = layer.out_shape;
    f.kernel = layer.spec.kernel;
    f.stride = layer.spec.stride;
    f.padding = layer.spec.padding;
    f.weight_shape = layer.weight.shape();
    f.weight_config = wq.config;
    f.weight_scale = wq.scale.item();
    f.input = input;
    f.combined_scale = static_cast<double>(f.weight_scale) * static_cast<double>(input.scale);
    f.bias.assign(layer.bias.data().begin(), layer.bias.data().end());

    const QuantizerState ws{f.weight_scale, 0.0f};
    auto w = layer.weight.data();
    f.weight_codes.resize(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) f.weight_codes[i] = static_cast<std::int32_t>(quantize_code(w[i], ws, wq.config));

    const double beta_sw = input.beta() * static_cast<double>(f.weight_scale);
    const std::size_t out = f.outputs();
    if (f.kind == LayerKind::dense) {
        const std::size_t k = f.fan_in();
        f.folded_bias.resize(out);
        for (std::size_t o = 0; o < out; ++o) {
            std::int64_t row = 0;
            for (std::size_t i = 0; i < k; ++i) row += f.weight_codes[o * k + i];
            f.folded_bias[o] = static_cast<double>(f.bias[o]) + beta_sw * static_cast<double>(row);
        }
    } else {
        const std::size_t c = f.in_shape[0], h = f.in_shape[1], wd = f.in_shape[2];
        const std::size_t oh = f.out_shape[1], ow = f.out_shape[2], k = f.kernel;
        f.folded_bias.resize(out * oh * ow);
        for (std::size_t o = 0; o < out; ++o) {
            for (std::size_t y = 0; y < oh; ++y) {
                for (std::size_t x = 0; x < ow; ++x) {
                    std::int64_t taps = 0;
                    for (std::size_t ci = 0; ci < c; ++ci) {
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            const long long iy = static_cast<long long>(y * f.stride + ky) - static_cast<long long>(f.padding);
                            if (iy < 0 || iy >= static_cast<long long>(h)) continue;
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long long ix = static_cast<long long>(x * f.stride + kx) - static_cast<long long>(f.padding);
                                if (ix < 0 || ix >= static_cast<long long>(wd)) continue;
                                taps += f.weight_codes[((o * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    f.folded_bias[(o * oh + y) * ow + x] = static_cast<double>(f.bias[o]) + beta_sw * static_cast<double>(taps);
                }
            }
        }
    }
    return f;
}

/// Inference-time parameters recovered from a folded layer: the quantized weights
/// ŵ = w̄·s_w (float, identical to the fake-quantized weights) and the float bias.
struct UnfoldedLayer {
    Tensor weight;
    Tensor bias;
    float weight_scale = 1.0f;
    QuantParams input;
};

inline UnfoldedLayer unfold(const FoldedLayer& f) {
    UnfoldedLayer u;
    u.weight = Tensor(f.weight_shape);
    auto w = u.weight.data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(f.weight_codes[i]) * f.weight_scale;
    u.bias = f.kind == LayerKind::dense ? Tensor(Shape{f.outputs()}, f.bias) : Tensor(Shape{f.outputs(), 1, 1}, f.bias);
    u.weight_scale = f.weight_scale;
    u.input = f.input;
    return u;
}

/// One step of a folded network: a folded layer, an activation (optionally followed
/// by re-quantization to the next layer's codes), or a flatten.
struct FoldedStep {
    LayerKind kind = LayerKind::dense;
    std::optional<FoldedLayer> layer;   ///< dense / conv2d
    Activation activation = Activation::identity;
    std::optional<QuantParams> requant;  ///< activation steps with a quantizer
};

struct FoldedNetwork {
    Shape input_shape;
    std::size_t classes = 0;
    QuantParams input;
    std::vector<FoldedStep> steps;
};

/// Folds every dense/conv layer of a quantized network. Every weight layer must read
/// its input from a quantizer (the input quantizer, or an activation quantizer).
inline FoldedNetwork fold(const Network& net) {
    if (!net.input_quantizer()) throw std::invalid_argument("fold: network has no input quantizer");
    FoldedNetwork f;
    f.input_shape = net.input_shape();
    f.classes = net.classes();
    f.input = QuantParams::from(*net.input_quantizer());
    std::optional<QuantParams> codes = f.input;
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
        const Layer& l = net.layers()[i];
        FoldedStep step;
        step.kind = l.spec.kind;
        switch (l.spec.kind) {
            case LayerKind::dense:
            case LayerKind::conv2d:
                if (!codes) {
                    throw std::invalid_argument("fold: layer " + std::to_string(i) + " does not read quantized codes");
                }
                step.layer = fold(l, *codes);
                codes.reset();
                break;
            case LayerKind::activation:
                step.activation = l.spec.activation;
                if (l.act_q) {
                    step.requant = QuantParams::from(*l.act_q);
                    codes = step.requant;
                } else {
                    codes.reset();
                }
                break;
            case LayerKind::flatten: break;
        }
        f.steps.push_back(std::move(step));
    }
    return f;
}

// ---------------------------------------------------------------------------
// Integer path
// ---------------------------------------------------------------------------

namespace detail {

inline std::int64_t checked_mac(std::int64_t acc, std::int64_t a, std::int64_t b) {
    std::int64_t prod = 0;
    if (__builtin_mul_overflow(a, b, &prod) || __builtin_add_overflow(acc, prod, &acc)) {
        throw std::overflow_error("integer accumulator overflow");
    }
    return acc;
}

// Integer accumulation w̄·x̄ for one sample; `x` holds the input codes.
inline std::vector<std::int64_t> integer_accumulate(const FoldedLayer& f, std::span<const std::int32_t> x) {
    const std::size_t out = f.outputs();
    if (f.kind == LayerKind::dense) {
        const std::size_t k = f.fan_in();
        std::vector<std::int64_t> acc(out, 0);
        for (std::size_t o = 0; o < out; ++o) {
            std::int64_t a = 0;
            for (std::size_t i = 0; i < k; ++i) a = checked_mac(a, f.weight_codes[o * k + i], x[i]);
            acc[o] = a;
        }
        return acc;
    }
    const std::size_t c = f.in_shape[0], h = f.in_shape[1], w = f.in_shape[2];
    const std::size_t oh = f.out_shape[1], ow = f.out_shape[2], k = f.kernel;
    std::vector<std::int64_t> acc(out * oh * ow, 0);
    for (std::size_t o = 0; o < out; ++o) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t xx = 0; xx < ow; ++xx) {
                std::int64_t a = 0;
                for (std::size_t ci = 0; ci < c; ++ci) {
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        const long long iy = static_cast<long long>(y * f.stride + ky) - static_cast<long long>(f.padding);
                        if (iy < 0 || iy >= static_cast<long long>(h)) continue;
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const long long ix = static_cast<long long>(xx * f.stride + kx) - static_cast<long long>(f.padding);
                            if (ix < 0 || ix >= static_cast<long long>(w)) continue;
                            a = checked_mac(a, f.weight_codes[((o * c + ci) * k + ky) * k + kx],
                                            x[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)]);
                        }
                    }
                }
                acc[(o * oh + y) * ow + xx] = a;
            }
        }
    }
    return acc;
}

inline void check_batch(const Tensor& x, const Shape& sample) {
    Shape expected{x.shape().empty() ? 0 : x.dim(0)};
    expected.insert(expected.end(), sample.begin(), sample.end());
    if (x.shape() != expected) {
        throw std::invalid_argument("inference: input " + shape_str(x.shape()) + " does not match " + shape_str(expected));
    }
}

}  // namespace detail

/// Integer inference of a single folded layer: codes in, real outputs out.
inline std::vector<double> integer_layer_forward(const FoldedLayer& f, std::span<const std::int32_t> codes) {
    auto acc = detail::integer_accumulate(f, codes);
    std::vector<double> out(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<double>(acc[i]) * f.combined_scale + f.folded_bias[i];
    return out;
}

/// Logits [B, classes] in double. Per-input floating-point work is limited to the
/// scale-and-bias of each accumulator, the activation functions and re-quantization.
inline std::vector<double> integer_forward(const FoldedNetwork& f, const Tensor& x) {
    detail::check_batch(x, f.input_shape);
    const std::size_t batch = x.dim(0);
    const std::size_t in_size = shape_numel(f.input_shape);
    std::vector<double> logits;
    logits.reserve(batch * f.classes);
    for (std::size_t b = 0; b < batch; ++b) {
        auto sample = x.data().subspan(b * in_size, in_size);
        std::vector<std::int32_t> codes(in_size);
        for (std::size_t i = 0; i < in_size; ++i) codes[i] = requantize(sample[i], f.input);
        std::vector<double> real;
        bool have_codes = true;
        for (const auto& step : f.steps) {
            switch (step.kind) {
                case LayerKind::dense:
                case LayerKind::conv2d:
                    if (!have_codes) throw std::logic_error("integer_forward: weight layer without input codes");
                    real = integer_layer_forward(*step.layer, codes);
                    have_codes = false;
                    break;
                case LayerKind::activation:
                    for (auto& v : real) v = activation_value(step.activation, v);
                    if (step.requant) {
                        codes.resize(real.size());
                        for (std::size_t i = 0; i < real.size(); ++i) codes[i] = requantize(real[i], *step.requant);
                        have_codes = true;
                    }
                    break;
                case LayerKind::flatten: break;
            }
        }
        if (real.size() != f.classes) throw std::logic_error("integer_forward: network does not end in logits");
        logits.insert(logits.end(), real.begin(), real.end());
    }
    return logits;
}

// ---------------------------------------------------------------------------
// Simulated-quantization reference path (double precision)
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> real_layer_forward(const Layer& l, std::span<const double> x, std::span<const double> w) {
    const std::size_t out = l.weight.dim(0);
    auto bias = l.bias.data();
    if (l.spec.kind == LayerKind::dense) {
        const std::size_t k = x.size();
        std::vector<double> y(out);
        for (std::size_t o = 0; o < out; ++o) {
            double a = 0.0;
            for (std::size_t i = 0; i < k; ++i) a += w[o * k + i] * x[i];
            y[o] = a + bias[o];
        }
        return y;
    }
    const std::size_t c = l.in_shape[0], h = l.in_shape[1], wd = l.in_shape[2];
    const std::size_t oh = l.out_shape[1], ow = l.out_shape[2], k = l.spec.kernel, s = l.spec.stride, p = l.spec.padding;
    std::vector<double> y(out * oh * ow);
    for (std::size_t o = 0; o < out; ++o) {
        for (std::size_t yy = 0; yy < oh; ++yy) {
            for (std::size_t xx = 0; xx < ow; ++xx) {
                double a = 0.0;
                for (std::size_t ci = 0; ci < c; ++ci) {
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        const long long iy = static_cast<long long>(yy * s + ky) - static_cast<long long>(p);
                        if (iy < 0 || iy >= static_cast<long long>(h)) continue;
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const long long ix = static_cast<long long>(xx * s + kx) - static_cast<long long>(p);
                            if (ix < 0 || ix >= static_cast<long long>(wd)) continue;
                            a += w[((o * c + ci) * k + ky) * k + kx] *
                                 x[(ci * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)];
                        }
                    }
                }
                y[(o * oh + yy) * ow + xx] = a + bias[o];
            }
        }
    }
    return y;
}

}  // namespace detail

/// Fake-quantized forward pass in double: x̂ = x̄·s + β, ŵ = w̄·s_w, float layers on
/// the dequantized values. Quantized networks only.
inline std::vector<double> simulated_forward(const Network& net, const Tensor& x) {
    if (!net.input_quantizer()) throw std::invalid_argument("simulated_forward: network has no input quantizer");
    detail::check_batch(x, net.input_shape());
    const QuantParams in_q = QuantParams::from(*net.input_quantizer());
    std::vector<std::vector<double>> weights;
    for (const auto& l : net.layers()) {
        if (!l.spec.has_weights()) {
            weights.emplace_back();
            continue;
        }
        if (!l.weight_q) throw std::invalid_argument("simulated_forward: unquantized weight layer");
        const QuantizerState ws{l.weight_q->scale.item(), 0.0f};
        std::vector<double> w(l.weight.size());
        auto src = l.weight.data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            w[i] = static_cast<double>(quantize_code(src[i], ws, l.weight_q->config)) * static_cast<double>(ws.scale);
        }
        weights.push_back(std::move(w));
    }
    const std::size_t batch = x.dim(0);
    const std::size_t in_size = shape_numel(net.input_shape());
    std::vector<double> logits;
    for (std::size_t b = 0; b < batch; ++b) {
        auto sample = x.data().subspan(b * in_size, in_size);
        std::vector<double> h(in_size);
        for (std::size_t i = 0; i < in_size; ++i) h[i] = dequantize(requantize(sample[i], in_q), in_q);
        for (std::size_t li = 0; li < net.layers().size(); ++li) {
            const Layer& l = net.layers()[li];
            switch (l.spec.kind) {
                case LayerKind::dense:
                case LayerKind::conv2d: h = detail::real_layer_forward(l, h, weights[li]); break;
                case LayerKind::activation:
                    for (auto& v : h) v = activation_value(l.spec.activation, v);
                    if (l.act_q) {
                        const QuantParams q = QuantParams::from(*l.act_q);
                        for (auto& v : h) v = dequantize(requantize(v, q), q);
                    }
                    break;
                case LayerKind::flatten: break;
            }
        }
        logits.insert(logits.end(), h.begin(), h.end());
    }
    return logits;
}

struct FoldComparison {
    double max_abs = 0.0;       ///< max |integer − simulated|
    double max_relative = 0.0;  ///< max |integer − simulated| / (1 + |simulated|)
    std::size_t elements = 0;
    bool exact = true;  ///< every element bit-identical
};

inline FoldComparison compare_paths(std::span<const double> integer, std::span<const double> simulated) {
    if (integer.size() != simulated.size()) throw std::invalid_argument("compare_paths: size mismatch");
    FoldComparison c;
    c.elements = integer.size();
    for (std::size_t i = 0; i < integer.size(); ++i) {
        const double d = std::abs(integer[i] - simulated[i]);
        c.max_abs = std::max(c.max_abs, d);
        c.max_relative = std::max(c.max_relative, d / (1.0 + std::abs(simulated[i])));
        if (integer[i] != simulated[i]) c.exact = false;
    }
    return c;
}

// ---------------------------------------------------------------------------
// Accumulator audit
// ---------------------------------------------------------------------------

struct AccumulatorBound {
    std::size_t step = 0;
    std::int64_t bound = 0;   ///< max over outputs of Σ|w̄|·max(|n|, |p|)
    int magnitude_bits = 0;   ///< bits for |acc| ≤ bound
    int signed_bits = 0;      ///< magnitude bits + sign
    bool fits_int32 = true;
};

inline int bits_for_magnitude(std::int64_t bound) {
    return bound <= 0 ? 0 : static_cast<int>(std::bit_width(static_cast<std::uint64_t>(bound)));
}

inline AccumulatorBound accumulator_bound(const FoldedLayer& f) {
    AccumulatorBound r;
    const auto [n, p] = f.input.config.bounds();
    const std::int64_t max_code = std::max(std::abs(static_cast<std::int64_t>(n)), std::abs(static_cast<std::int64_t>(p)));
    const std::size_t out = f.outputs();
    const std::size_t k = f.fan_in();
    for (std::size_t o = 0; o < out; ++o) {
        std::int64_t row = 0;
        for (std::size_t i = 0; i < k; ++i) row += std::abs(static_cast<std::int64_t>(f.weight_codes[o * k + i]));
        std::int64_t bound = 0;
        if (__builtin_mul_overflow(row, max_code, &bound)) bound = std::numeric_limits<std::int64_t>::max();  // saturate
        r.bound = std::max(r.bound, bound);
    }
    r.magnitude_bits = bits_for_magnitude(r.bound);
    r.signed_bits = r.magnitude_bits + 1;
    r.fits_int32 = r.bound <= std::numeric_limits<std::int32_t>::max();
    return r;
}

inline std::vector<AccumulatorBound> accumulator_audit(const FoldedNetwork& f) {
    std::vector<AccumulatorBound> out;
    for (std::size_t i = 0; i < f.steps.size(); ++i) {
        if (!f.steps[i].layer) continue;
        AccumulatorBound b = accumulator_bound(*f.steps[i].layer);
        b.step = i;
        out.push_back(b);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Folded-model export
// ---------------------------------------------------------------------------

inline constexpr std::string_view kFoldedMagic = "ASYMQFLD";
inline constexpr std::uint32_t kFoldedVersion = 1;

namespace detail {

inline void write_qparams(BinaryWriter& w, const QuantParams& q) {
    w.put<std::int32_t>(q.config.bits);
    w.put<std::uint8_t>(q.config.is_signed);
    w.put<std::uint8_t>(q.config.offset_enabled);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(q.config.offset_mode));
    w.put<float>(q.scale);
    w.put<float>(q.offset);
}

inline QuantParams read_qparams(BinaryReader& r) {
    QuantParams q;
    const int bits = r.get<std::int32_t>();
    const bool is_signed = r.get<std::uint8_t>() != 0;
    const bool offset = r.get<std::uint8_t>() != 0;
    const auto mode = r.get<std::uint8_t>();
    if (mode > 2) throw FormatError("bad offset mode");
    try {
        q.config = QuantConfig::make(bits, is_signed, offset, static_cast<OffsetMode>(mode));
    } catch (const std::invalid_argument& e) {
        throw FormatError(e.what());
    }
    q.scale = r.get<float>();
    q.offset = r.get<float>();
    if (!(q.scale > 0.0f)) throw FormatError("non-positive scale");
    return q;
}

inline void write_shape(BinaryWriter& w, const Shape& s) {
    w.put_vector<std::uint32_t>(std::vector<std::uint32_t>(s.begin(), s.end()));
}

inline Shape read_shape(BinaryReader& r) {
    auto v = r.get_vector<std::uint32_t>(8);
    return Shape(v.begin(), v.end());
}

}  // namespace detail

inline void write_folded(std::ostream& os, const FoldedNetwork& f) {
    BinaryWriter w(os);
    w.put_magic(kFoldedMagic);
    w.put<std::uint32_t>(kFoldedVersion);
    detail::write_shape(w, f.input_shape);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(f.classes));
    detail::write_qparams(w, f.input);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(f.steps.size()));
    for (const auto& s : f.steps) {
        w.put<std::uint8_t>(static_cast<std::uint8_t>(s.kind));
        w.put<std::uint8_t>(static_cast<std::uint8_t>(s.activation));
        w.put<std::uint8_t>(s.requant ? 1 : 0);
        if (s.requant) detail::write_qparams(w, *s.requant);
        if (!s.layer) continue;
        const FoldedLayer& l = *s.layer;
        detail::write_shape(w, l.in_shape);
        detail::write_shape(w, l.out_shape);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(l.kernel));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(l.stride));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(l.padding));
        detail::write_shape(w, l.weight_shape);
        w.put_vector(l.weight_codes);
        detail::write_qparams(w, {l.weight_config, l.weight_scale, 0.0f});
        detail::write_qparams(w, l.input);
        w.put<double>(l.combined_scale);
        w.put_vector(l.folded_bias);
        w.put_vector(l.bias);
    }
    if (!w.ok()) throw std::runtime_error("write_folded: stream error");
}

inline FoldedNetwork read_folded(std::istream& is) {
    BinaryReader r(is);
    r.expect_magic(kFoldedMagic);
    const auto version = r.get<std::uint32_t>();
    if (version != kFoldedVersion) throw FormatError("unsupported folded-model version " + std::to_string(version));
    FoldedNetwork f;
    f.input_shape = detail::read_shape(r);
    f.classes = r.get<std::uint32_t>();
    f.input = detail::read_qparams(r);
    const auto n = r.get<std::uint32_t>();
    if (n > 1024) throw FormatError("too many steps");
    for (std::uint32_t i = 0; i < n; ++i) {
        FoldedStep s;
        const auto kind = r.get<std::uint8_t>();
        const auto act = r.get<std::uint8_t>();
        if (kind > 3 || act > 4) throw FormatError("bad step record");
        s.kind = static_cast<LayerKind>(kind);
        s.activation = static_cast<Activation>(act);
        if (r.get<std::uint8_t>()) s.requant = detail::read_qparams(r);
        if (s.kind == LayerKind::dense || s.kind == LayerKind::conv2d) {
            FoldedLayer l;
            l.kind = s.kind;
            l.in_shape = detail::read_shape(r);
            l.out_shape = detail::read_shape(r);
            l.kernel = r.get<std::uint32_t>();
            l.stride = r.get<std::uint32_t>();
            l.padding = r.get<std::uint32_t>();
            l.weight_shape = detail::read_shape(r);
            l.weight_codes = r.get_vector<std::int32_t>();
            const QuantParams wq = detail::read_qparams(r);
            l.weight_config = wq.config;
            l.weight_scale = wq.scale;
            l.input = detail::read_qparams(r);
            l.combined_scale = r.get<double>();
            l.folded_bias = r.get_vector<double>();
            l.bias = r.get_vector<float>();
            if (l.weight_shape.empty() || shape_numel(l.weight_shape) != l.weight_codes.size() ||
                l.bias.size() != l.outputs() || l.folded_bias.size() != shape_numel(l.out_shape)) {
                throw FormatError("folded layer " + std::to_string(i) + ": inconsistent sizes");
            }
            if (l.kind == LayerKind::conv2d && (l.in_shape.size() != 3 || l.out_shape.size() != 3 || l.weight_shape.size() != 4)) {
                throw FormatError("folded layer " + std::to_string(i) + ": bad conv shapes");
            }
            s.layer = std::move(l);
        }
        f.steps.push_back(std::move(s));
    }
    return f;
}

inline void save_folded(const std::string& path, const FoldedNetwork& f) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    write_folded(os, f);
}

inline FoldedNetwork load_folded(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open folded model '" + path + "'");
    return read_folded(is);
}

}  // namespace asymq
