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
 * @file initializers.hpp
 * @brief Scale/offset initialization schemes for quantizers.
 *
 *  - min-max:  s = (x_max - x_min) / (p - n), offset = x_min - n * s
 *  - LSQ:      s = 2 * mean(|v|) / sqrt(p)
 *  - Gaussian weight rule: s = max(|mu - 3 sigma|, |mu + 3 sigma|) / 2^(b-1)
 *  - MSE:      (s, offset) minimizing ||fake_quantize(x) - x||^2 over calibration data
 */

#pragma once

#include <asymq/quantizer.hpp>
#include <asymq/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace asymq {

enum class InitScheme { minmax, lsq, lsqplus };

inline std::string_view init_scheme_name(InitScheme s) {
    switch (s) {
        case InitScheme::minmax: return "minmax";
        case InitScheme::lsq: return "lsq";
        case InitScheme::lsqplus: return "lsqplus";
    }
    return "?";
}

inline InitScheme parse_init_scheme(std::string_view s) {
    if (s == "minmax" || s == "min-max") return InitScheme::minmax;
    if (s == "lsq") return InitScheme::lsq;
    if (s == "lsqplus" || s == "lsq+") return InitScheme::lsqplus;
    throw std::invalid_argument("unknown init scheme '" + std::string(s) + "'");
}

struct ScaleOffset {
    float scale = 1.0f;
    float offset = 0.0f;
};

/// Maps x_min to code n and x_max to code p. Degenerate ranges floor the scale
/// and put the offset at x_min.
inline ScaleOffset init_minmax(float x_min, float x_max, int n, int p) {
    if (p <= n) throw std::invalid_argument("init_minmax: need n < p");
    if (!(x_max > x_min)) return {kMinScale, x_min};
    const float s = (x_max - x_min) / static_cast<float>(p - n);
    if (!(s >= kMinScale)) return {kMinScale, x_min};
    return {s, x_min - static_cast<float>(n) * s};
}

inline float init_lsq(std::span<const float> values, int p) {
    if (values.empty()) throw std::invalid_argument("init_lsq: empty input");
    if (p <= 0) throw std::invalid_argument("init_lsq: p must be positive");
    double acc = 0.0;
    for (float v : values) acc += std::abs(static_cast<double>(v));
    const double s = 2.0 * (acc / static_cast<double>(values.size())) / std::sqrt(static_cast<double>(p));
    return std::max(static_cast<float>(s), kMinScale);
}

struct MeanStd {
    double mean = 0.0;
    double stddev = 0.0;
};

/// Sample mean and Bessel-corrected standard deviation.
inline MeanStd sample_mean_std(std::span<const float> values) {
    if (values.size() < 2) throw std::invalid_argument("sample_mean_std: need at least 2 values");
    double mean = 0.0;
    for (float v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double ss = 0.0;
    for (float v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

inline float init_lsqplus_weight_from_stats(double mean, double stddev, int bits) {
    const double bound = std::max(std::abs(mean - 3.0 * stddev), std::abs(mean + 3.0 * stddev));
    return std::max(static_cast<float>(bound / std::ldexp(1.0, bits - 1)), kMinScale);
}

inline float init_lsqplus_weight(std::span<const float> weights, int bits) {
    if (weights.size() < 2) throw std::invalid_argument("init_lsqplus_weight: need at least 2 weights");
    const MeanStd ms = sample_mean_std(weights);
    return init_lsqplus_weight_from_stats(ms.mean, ms.stddev, bits);
}

/// Mean squared reconstruction error of fake quantization over `values`.
inline double quantization_mse(std::span<const float> values, const ScaleOffset& so, const QuantConfig& cfg) {
    if (values.empty()) return 0.0;
    const auto [n, p] = cfg.bounds();
    const bool with_offset = cfg.offset_enabled;
    double acc = 0.0;
    for (float x : values) {
        const float u = with_offset ? (x - so.offset) / so.scale : x / so.scale;
        const float code = round_half_even(std::clamp(u, static_cast<float>(n), static_cast<float>(p)));
        const float xq = with_offset ? code * so.scale + so.offset : code * so.scale;
        const double d = static_cast<double>(xq) - static_cast<double>(x);
        acc += d * d;
    }
    return acc / static_cast<double>(values.size());
}

struct MseInitOptions {
    int total_steps = 1000;        ///< gradient steps, split evenly across refined starts
    int refine_starts = 4;         ///< best candidates refined by gradient descent
    float relative_lr = 0.01f;     ///< step size relative to the candidate's scale
    int scale_grid = 57;           ///< log-spaced scales s_minmax * 2^(j/8), j in [-48, 8]
    int offset_grid = 61;          ///< offsets x_min + f * range, f in [-1, 0.5]
    std::size_t search_samples = 16384;
    std::size_t refine_samples = 65536;
};

struct MseInitResult {
    ScaleOffset params;
    double mse = 0.0;
    double minmax_mse = 0.0;
    ScaleOffset minmax;
};

namespace detail {

inline std::vector<float> strided_subsample(std::span<const float> values, std::size_t limit) {
    if (values.size() <= limit) return std::vector<float>(values.begin(), values.end());
    std::vector<float> out;
    out.reserve(limit);
    const double stride = static_cast<double>(values.size()) / static_cast<double>(limit);
    for (std::size_t i = 0; i < limit; ++i) out.push_back(values[static_cast<std::size_t>(i * stride)]);
    return out;
}

// Gradient descent on the reconstruction MSE with the straight-through rules.
// Returns the best iterate seen (including the start).
inline std::pair<ScaleOffset, double> refine_mse(std::span<const float> x, ScaleOffset start, const QuantConfig& cfg,
                                                 bool learn_offset, int steps, float relative_lr) {
    QuantConfig grad_cfg = cfg;
    grad_cfg.offset_mode = OffsetMode::learned;
    QuantizerState st;
    st.scale = start.scale;
    st.offset = start.offset;
    st.grad_scale = 1.0f;
    ScaleOffset best = start;
    double best_mse = quantization_mse(x, start, cfg);
    const double base_lr = static_cast<double>(relative_lr) * start.scale;
    std::vector<float> upstream(x.size());
    const double inv_n = 2.0 / static_cast<double>(std::max<std::size_t>(x.size(), 1));
    for (int step = 0; step < steps; ++step) {
        FakeQuantResult fq = fake_quantize_forward(x, st, grad_cfg);
        for (std::size_t i = 0; i < x.size(); ++i)
            upstream[i] = static_cast<float>(inv_n * (static_cast<double>(fq.values[i]) - x[i]));
        FakeQuantGradients g = fake_quantize_backward(x, st, grad_cfg, upstream);
        const double lr = base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * step / steps));
        st.scale = std::max(static_cast<float>(st.scale - lr * g.scale), kMinScale);
        if (learn_offset) st.offset = static_cast<float>(st.offset - lr * g.offset);
        const ScaleOffset cur{st.scale, st.offset};
        const double m = quantization_mse(x, cur, cfg);
        if (m < best_mse) {
            best_mse = m;
            best = cur;
        }
    }
    return {best, best_mse};
}

}  // namespace detail

/// MSE-minimizing (s, offset) over calibration values.
///
/// A data-relative candidate search (log-spaced scales around the min-max scale
/// times offsets spread over the observed range, min-max included) picks the
/// starting points; the best few are refined by gradient descent with the
/// straight-through rules. When `frozen_offset` is set or the config has no
/// offset, only the scale is searched and optimized.
inline MseInitResult init_lsqplus_activation(std::span<const float> values, const QuantConfig& cfg,
                                             std::optional<float> frozen_offset = std::nullopt,
                                             const MseInitOptions& opt = {}) {
    if (values.empty()) throw std::invalid_argument("init_lsqplus_activation: empty calibration set");
    const auto [n, p] = cfg.bounds();
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const float lo = *lo_it, hi = *hi_it;
    const float range = hi - lo;
    const bool learn_offset = cfg.offset_enabled && !frozen_offset;

    MseInitResult result;
    result.minmax = init_minmax(lo, hi, n, p);
    if (!cfg.offset_enabled) result.minmax.offset = 0.0f;
    if (frozen_offset) result.minmax.offset = *frozen_offset;
    result.minmax_mse = quantization_mse(values, result.minmax, cfg);
    result.params = result.minmax;
    result.mse = result.minmax_mse;
    if (!(range > 0.0f) || result.minmax_mse == 0.0) return result;

    const std::vector<float> search = detail::strided_subsample(values, opt.search_samples);
    struct Candidate {
        double mse;
        ScaleOffset so;
    };
    std::vector<Candidate> candidates;
    candidates.push_back({quantization_mse(search, result.minmax, cfg), result.minmax});
    const float s0 = result.minmax.scale;
    for (int j = 0; j < opt.scale_grid; ++j) {
        const float s = s0 * static_cast<float>(std::exp2((j - (opt.scale_grid - 9)) / 8.0));
        if (!(s >= kMinScale)) continue;
        if (!learn_offset) {
            const ScaleOffset so{s, result.minmax.offset};
            candidates.push_back({quantization_mse(search, so, cfg), so});
            continue;
        }
        for (int k = 0; k < opt.offset_grid; ++k) {
            const float f = -1.0f + 1.5f * static_cast<float>(k) / static_cast<float>(std::max(opt.offset_grid - 1, 1));
            const ScaleOffset so{s, lo + f * range - static_cast<float>(n) * s};
            candidates.push_back({quantization_mse(search, so, cfg), so});
        }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.mse < b.mse; });

    const std::vector<float> refine = detail::strided_subsample(values, opt.refine_samples);
    const int starts = std::min<int>(opt.refine_starts, static_cast<int>(candidates.size()));
    const int steps = starts > 0 ? opt.total_steps / starts : 0;
    for (int i = 0; i < starts; ++i) {
        auto [so, m_refine] = detail::refine_mse(refine, candidates[static_cast<std::size_t>(i)].so, cfg, learn_offset,
                                                 steps, opt.relative_lr);
        (void)m_refine;
        const double m = quantization_mse(values, so, cfg);
        if (m < result.mse) {
            result.mse = m;
            result.params = so;
        }
    }
    return result;
}

inline MseInitResult init_lsqplus_activation(std::span<const Tensor> batches, const QuantConfig& cfg,
                                             std::optional<float> frozen_offset = std::nullopt,
                                             const MseInitOptions& opt = {}) {
    if (batches.empty()) throw std::invalid_argument("init_lsqplus_activation: empty calibration set");
    std::vector<float> all;
    for (const Tensor& b : batches) all.insert(all.end(), b.data().begin(), b.data().end());
    return init_lsqplus_activation(std::span<const float>(all), cfg, frozen_offset, opt);
}

/// Running minimum and maximum.
struct RangeTracker {
    float min = std::numeric_limits<float>::infinity();
    float max = -std::numeric_limits<float>::infinity();
    std::size_t count = 0;

    void observe(std::span<const float> values) {
        for (float v : values) {
            min = std::min(min, v);
            max = std::max(max, v);
        }
        count += values.size();
    }
    bool empty() const { return count == 0; }
};

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct InitEntry {
    std::string layer;
    float scale = 0.0f;
    float offset = 0.0f;
    double mse = 0.0;
};

struct InitReport {
    InitScheme scheme = InitScheme::lsqplus;
    std::vector<InitEntry> entries;
    std::size_t batches_used = 0;
};

inline void write_init_report_csv(std::ostream& os, const InitReport& report) {
    os << "layer,scheme,s_init,beta_init,mse\n";
    os.precision(17);
    for (const auto& e : report.entries) {
        os << e.layer << ',' << init_scheme_name(report.scheme) << ',' << e.scale << ',' << e.offset << ',' << e.mse
           << '\n';
    }
}

inline InitReport read_init_report_csv(std::istream& is) {
    InitReport report;
    std::string line;
    if (!std::getline(is, line) || line.rfind("layer,scheme", 0) != 0) {
        throw std::runtime_error("init report: missing header");
    }
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string layer, scheme, s, b, m;
        std::getline(ss, layer, ',');
        std::getline(ss, scheme, ',');
        std::getline(ss, s, ',');
        std::getline(ss, b, ',');
        std::getline(ss, m, ',');
        report.scheme = parse_init_scheme(scheme);
        report.entries.push_back({layer, std::stof(s), std::stof(b), std::stod(m)});
    }
    return report;
}

}  // namespace asymq
