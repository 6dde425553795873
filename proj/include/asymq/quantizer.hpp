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
 * @file quantizer.hpp
 * @brief Learnable affine fake quantization.
 *
 * Forward:
 *   codes  = round_half_even(clamp((x - offset) / scale, n, p))
 *   values = codes * scale + offset
 *
 * Backward (straight-through on the rounding), with u = (x - offset) / scale:
 *   d values / d scale  = round(u) - u  inside (n, p), else n or p
 *   d values / d offset = 0             inside (n, p), else 1
 *   d values / d x      = 1             inside (n, p), else 0
 *
 * u == n and u == p count as clamped.
 */

#pragma once

#include <asymq/tensor.hpp>

#include <cfenv>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace asymq {

enum class OffsetMode { learned, fixed_zero, fixed_xmin };

inline std::string_view offset_mode_name(OffsetMode m) {
    switch (m) {
        case OffsetMode::learned: return "learned";
        case OffsetMode::fixed_zero: return "fixed_zero";
        case OffsetMode::fixed_xmin: return "fixed_xmin";
    }
    return "?";
}

inline OffsetMode parse_offset_mode(std::string_view s) {
    if (s == "learned") return OffsetMode::learned;
    if (s == "fixed_zero" || s == "zero") return OffsetMode::fixed_zero;
    if (s == "fixed_xmin" || s == "xmin") return OffsetMode::fixed_xmin;
    throw std::invalid_argument("unknown offset mode '" + std::string(s) + "'");
}

struct CodeBounds {
    int n;
    int p;
    friend bool operator==(const CodeBounds&, const CodeBounds&) = default;
};

inline CodeBounds quant_bounds(int bits, bool is_signed) {
    if (bits < 2 || bits > 30) throw std::invalid_argument("quant_bounds: bit-width " + std::to_string(bits) + " outside [2, 30]");
    if (is_signed) return {-(1 << (bits - 1)), (1 << (bits - 1)) - 1};
    return {0, (1 << bits) - 1};
}

struct QuantConfig {
    int bits = 8;
    bool is_signed = false;
    bool offset_enabled = false;
    OffsetMode offset_mode = OffsetMode::learned;

    static QuantConfig make(int bits, bool is_signed, bool offset_enabled,
                            OffsetMode mode = OffsetMode::learned) {
        quant_bounds(bits, is_signed);
        return QuantConfig{bits, is_signed, offset_enabled, mode};
    }

    CodeBounds bounds() const { return quant_bounds(bits, is_signed); }
    int n() const { return bounds().n; }
    int p() const { return bounds().p; }

    bool learns_offset() const { return offset_enabled && offset_mode == OffsetMode::learned; }

    friend bool operator==(const QuantConfig&, const QuantConfig&) = default;
};

/// The four activation parametrizations: 1 unsigned/no offset, 2 signed/no offset,
/// 3 signed/offset, 4 unsigned/offset.
inline QuantConfig table_config(int id, int bits) {
    switch (id) {
        case 1: return QuantConfig::make(bits, false, false);
        case 2: return QuantConfig::make(bits, true, false);
        case 3: return QuantConfig::make(bits, true, true);
        case 4: return QuantConfig::make(bits, false, true);
        default: throw std::invalid_argument("unknown quantizer configuration " + std::to_string(id) + " (expected 1-4)");
    }
}

/// Weights are always signed and offset-free.
inline QuantConfig weight_config(int bits) { return QuantConfig::make(bits, true, false); }

inline constexpr float kMinScale = 1e-8f;

struct QuantizerState {
    float scale = 1.0f;
    float offset = 0.0f;
    bool scale_trainable = true;
    bool offset_trainable = true;
    float grad_scale = 1.0f;
};

/// LSQ gradient scale 1/sqrt(N * p) for N elements feeding the quantizer.
inline float lsq_grad_scale(std::size_t elements, int p) {
    return 1.0f / std::sqrt(static_cast<float>(std::max<std::size_t>(elements, 1)) * static_cast<float>(std::max(p, 1)));
}

enum class Branch { below, interior, above };

inline Branch classify(float u, int n, int p) {
    if (u <= static_cast<float>(n)) return Branch::below;
    if (u >= static_cast<float>(p)) return Branch::above;
    return Branch::interior;
}

inline float round_half_even(float v) {
    // nearbyint honours the current mode; training code never changes it from FE_TONEAREST.
    return std::nearbyint(v);
}

struct LocalGradients {
    float d_scale;
    float d_offset;
    float d_input;
};

inline LocalGradients local_gradients(float u, int n, int p) {
    switch (classify(u, n, p)) {
        case Branch::below: return {static_cast<float>(n), 1.0f, 0.0f};
        case Branch::above: return {static_cast<float>(p), 1.0f, 0.0f};
        case Branch::interior: break;
    }
    return {round_half_even(u) - u, 0.0f, 1.0f};
}

namespace detail {
inline float effective_offset(const QuantizerState& state, const QuantConfig& cfg) {
    return cfg.offset_enabled ? state.offset : 0.0f;
}
inline void check_scale(float s) {
    if (!(s > 0.0f) || !std::isfinite(s)) {
        throw std::invalid_argument("fake_quantize: scale must be positive and finite, got " + std::to_string(s));
    }
}
// u = (x - offset) / scale; without an offset the subtraction is skipped entirely.
inline float normalized(float x, float s, float beta, bool with_offset) { return with_offset ? (x - beta) / s : x / s; }
inline float dequantize(float code, float s, float beta, bool with_offset) {
    return with_offset ? code * s + beta : code * s;
}
}  // namespace detail

inline float quantize_code(float x, const QuantizerState& state, const QuantConfig& cfg) {
    const auto [n, p] = cfg.bounds();
    const float u = detail::normalized(x, state.scale, state.offset, cfg.offset_enabled);
    return round_half_even(std::clamp(u, static_cast<float>(n), static_cast<float>(p)));
}

struct FakeQuantResult {
    std::vector<float> values;  ///< dequantized values on the grid
    std::vector<float> codes;   ///< integer codes in [n, p], stored as float
};

inline FakeQuantResult fake_quantize_forward(std::span<const float> x, const QuantizerState& state,
                                             const QuantConfig& cfg) {
    detail::check_scale(state.scale);
    const auto [n, p] = cfg.bounds();
    const float s = state.scale;
    const float beta = detail::effective_offset(state, cfg);
    const bool with_offset = cfg.offset_enabled;
    FakeQuantResult r;
    r.values.resize(x.size());
    r.codes.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float u = detail::normalized(x[i], s, beta, with_offset);
        const float code = round_half_even(std::clamp(u, static_cast<float>(n), static_cast<float>(p)));
        r.codes[i] = code;
        r.values[i] = detail::dequantize(code, s, beta, with_offset);
    }
    return r;
}

inline FakeQuantResult fake_quantize_forward(const Tensor& x, const QuantizerState& state, const QuantConfig& cfg) {
    return fake_quantize_forward(x.data(), state, cfg);
}

struct FakeQuantGradients {
    std::vector<float> input;
    double scale = 0.0;   ///< grad_scale * sum(upstream * d values / d scale)
    double offset = 0.0;  ///< grad_scale * sum(upstream * d values / d offset); 0 unless the offset is learned
};

inline FakeQuantGradients fake_quantize_backward(std::span<const float> x, const QuantizerState& state,
                                                 const QuantConfig& cfg, std::span<const float> upstream) {
    if (upstream.size() != x.size()) {
        throw std::invalid_argument("fake_quantize_backward: upstream has " + std::to_string(upstream.size()) +
                                    " elements, input has " + std::to_string(x.size()));
    }
    detail::check_scale(state.scale);
    const auto [n, p] = cfg.bounds();
    const float s = state.scale;
    const float beta = detail::effective_offset(state, cfg);
    FakeQuantGradients g;
    g.input.resize(x.size());
    double ds = 0.0, db = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float u = detail::normalized(x[i], s, beta, cfg.offset_enabled);
        const LocalGradients lg = local_gradients(u, n, p);
        // Select rather than multiply: clamped elements get +0 whatever the upstream sign.
        g.input[i] = lg.d_input != 0.0f ? upstream[i] : 0.0f;
        ds += static_cast<double>(upstream[i]) * lg.d_scale;
        db += static_cast<double>(upstream[i]) * lg.d_offset;
    }
    g.scale = static_cast<double>(state.grad_scale) * ds;
    g.offset = cfg.learns_offset() ? static_cast<double>(state.grad_scale) * db : 0.0;
    return g;
}

inline FakeQuantGradients fake_quantize_backward(const Tensor& x, const QuantizerState& state, const QuantConfig& cfg,
                                                 const Tensor& upstream) {
    if (upstream.shape() != x.shape()) {
        throw std::invalid_argument("fake_quantize_backward: upstream shape " + shape_str(upstream.shape()) +
                                    " differs from input " + shape_str(x.shape()));
    }
    return fake_quantize_backward(x.data(), state, cfg, upstream.data());
}

/// Tape-aware fake quantization. `scale` and `offset` are single-element parameter
/// tensors; `offset` may be undefined when the config carries no offset. The offset
/// receives a gradient only when the config learns it and the tensor requires one.
inline Tensor fake_quantize(const Tensor& x, const Tensor& scale, const Tensor& offset, const QuantConfig& cfg,
                            float grad_scale) {
    QuantizerState state;
    state.scale = scale.item();
    state.offset = (cfg.offset_enabled && offset.defined()) ? offset.item() : 0.0f;
    state.grad_scale = grad_scale;
    FakeQuantResult fq = fake_quantize_forward(x.data(), state, cfg);
    Tensor out(x.shape(), std::move(fq.values));

    std::vector<Tensor> inputs{x, scale};
    if (offset.defined()) inputs.push_back(offset);
    detail::maybe_record("fake_quantize", std::move(inputs), out, [x = Tensor(x), scale = Tensor(scale), offset = Tensor(offset), out, cfg, state]() mutable {
        FakeQuantGradients g = fake_quantize_backward(x.data(), state, cfg, std::as_const(out).grad());
        if (x.requires_grad()) {
            auto gx = x.grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g.input[i];
        }
        if (scale.requires_grad()) scale.grad()[0] += static_cast<float>(g.scale);
        if (offset.defined() && offset.requires_grad() && cfg.learns_offset()) {
            offset.grad()[0] += static_cast<float>(g.offset);
        }
    });
    return out;
}

}  // namespace asymq
