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
 * @file datasets.hpp
 * @brief Desk-scale datasets: bundled 8x8 digits and a synthetic two-arm spiral.
 */

#pragma once

#include <asymq/digits_data.hpp>
#include <asymq/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace asymq {

struct Dataset {
    Shape sample_shape;
    std::vector<float> features;  ///< size() * numel(sample_shape), row-major
    std::vector<int> labels;
    std::size_t classes = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t sample_size() const { return shape_numel(sample_shape); }

    Tensor batch(std::span<const std::size_t> indices) const {
        Shape shape{indices.size()};
        shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
        Tensor out(shape);
        const std::size_t k = sample_size();
        auto dst = out.data();
        for (std::size_t i = 0; i < indices.size(); ++i) {
            std::copy_n(features.begin() + static_cast<std::ptrdiff_t>(indices[i] * k), k, dst.begin() + static_cast<std::ptrdiff_t>(i * k));
        }
        return out;
    }

    std::vector<int> batch_labels(std::span<const std::size_t> indices) const {
        std::vector<int> out;
        out.reserve(indices.size());
        for (auto i : indices) out.push_back(labels[i]);
        return out;
    }

    Dataset subset(std::span<const std::size_t> indices) const {
        Dataset d{sample_shape, {}, {}, classes};
        const std::size_t k = sample_size();
        d.features.reserve(indices.size() * k);
        for (auto i : indices) {
            d.features.insert(d.features.end(), features.begin() + static_cast<std::ptrdiff_t>(i * k),
                              features.begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
            d.labels.push_back(labels[i]);
        }
        return d;
    }
};

struct DataSplit {
    Dataset train;
    Dataset validation;
};

/// Deterministic Fisher-Yates permutation of [0, n).
inline std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::mt19937_64 rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

inline DataSplit split_dataset(const Dataset& all, double train_fraction, std::uint64_t seed) {
    auto idx = permutation(all.size(), seed);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(all.size())));
    std::span<const std::size_t> s(idx);
    return {all.subset(s.first(n_train)), all.subset(s.subspan(n_train))};
}

/// 1797 digits as [1, 8, 8] images scaled to [0, 1].
inline Dataset digits_dataset() {
    using namespace asymq::data;
    Dataset d{Shape{1, 8, 8}, {}, {}, 10};
    d.features.reserve(kDigitsSamples * kDigitsPixels);
    d.labels.reserve(kDigitsSamples);
    for (std::size_t i = 0; i < kDigitsSamples; ++i) {
        const std::size_t row = i * (kDigitsPixels + 1);
        for (std::size_t j = 0; j < kDigitsPixels; ++j) d.features.push_back(static_cast<float>(kDigitsTable[row + j]) / 16.0f);
        d.labels.push_back(kDigitsTable[row + kDigitsPixels]);
    }
    return d;
}

/// Two interleaved spiral arms in the plane, with Gaussian jitter.
inline Dataset spiral_dataset(std::size_t per_class = 500, float noise = 0.08f, std::uint64_t seed = 0) {
    Dataset d{Shape{2}, {}, {}, 2};
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> jitter(0.0f, noise);
    for (int cls = 0; cls < 2; ++cls) {
        for (std::size_t i = 0; i < per_class; ++i) {
            const float t = static_cast<float>(i) / static_cast<float>(per_class);
            const float radius = 0.1f + 0.9f * t;
            const float angle = 3.0f * std::numbers::pi_v<float> * t + static_cast<float>(cls) * std::numbers::pi_v<float>;
            d.features.push_back(radius * std::cos(angle) + jitter(rng));
            d.features.push_back(radius * std::sin(angle) + jitter(rng));
            d.labels.push_back(cls);
        }
    }
    return d;
}

/// "digits" or "spiral", split 80/20 with a fixed permutation.
inline DataSplit load_dataset(std::string_view id) {
    if (id == "digits") return split_dataset(digits_dataset(), 0.8, 0);
    if (id == "spiral") return split_dataset(spiral_dataset(), 0.8, 0);
    throw std::invalid_argument("unknown dataset '" + std::string(id) + "' (expected digits or spiral)");
}

}  // namespace asymq
