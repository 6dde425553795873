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

#include <asymq/quantizer.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "quantizer_oracle.hpp"

using namespace asymq;

TEST(QuantBounds, TableRows) {
    EXPECT_EQ(quant_bounds(4, false), (CodeBounds{0, 15}));
    EXPECT_EQ(quant_bounds(4, true), (CodeBounds{-8, 7}));
    EXPECT_EQ(quant_bounds(2, true), (CodeBounds{-2, 1}));
    EXPECT_EQ(quant_bounds(2, false), (CodeBounds{0, 3}));
    EXPECT_THROW(quant_bounds(1, false), std::invalid_argument);
}

TEST(QuantConfig, FourConfigurations) {
    EXPECT_FALSE(table_config(1, 4).offset_enabled);
    EXPECT_FALSE(table_config(1, 4).is_signed);
    EXPECT_TRUE(table_config(2, 4).is_signed);
    EXPECT_FALSE(table_config(2, 4).offset_enabled);
    EXPECT_TRUE(table_config(3, 4).is_signed);
    EXPECT_TRUE(table_config(3, 4).learns_offset());
    EXPECT_FALSE(table_config(4, 4).is_signed);
    EXPECT_TRUE(table_config(4, 4).learns_offset());
    EXPECT_THROW(table_config(5, 4), std::invalid_argument);
    EXPECT_EQ(weight_config(4).bounds(), (CodeBounds{-8, 7}));
    EXPECT_FALSE(weight_config(4).offset_enabled);
}

TEST(FakeQuantForward, SwishOffsetExample) {
    QuantizerState st{0.1f, -0.278f};
    auto cfg = table_config(4, 4);
    std::vector<float> x{-0.2f};
    auto r = fake_quantize_forward(x, st, cfg);
    EXPECT_EQ(r.codes[0], 1.0f);
    EXPECT_NEAR(r.values[0], -0.178f, 1e-6);
}

TEST(FakeQuantForward, UpperSaturation) {
    QuantizerState st{1.0f, 0.0f};
    auto r = fake_quantize_forward(std::vector<float>{100.0f}, st, table_config(4, 4));
    EXPECT_EQ(r.codes[0], 15.0f);
    EXPECT_EQ(r.values[0], 15.0f);
}

TEST(FakeQuantForward, GridPointsAreFixedPoints) {
    QuantizerState st{0.37f, -0.61f};
    auto cfg = table_config(3, 4);
    std::vector<float> grid;
    for (int k = cfg.n(); k <= cfg.p(); ++k) grid.push_back(static_cast<float>(k) * st.scale + st.offset);
    auto r = fake_quantize_forward(grid, st, cfg);
    for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_EQ(r.values[i], grid[i]);
}

TEST(FakeQuantForward, RoundsHalfToEven) {
    QuantizerState st{1.0f, 0.0f};
    auto r = fake_quantize_forward(std::vector<float>{0.5f, 1.5f, 2.5f, -0.5f, -1.5f}, st, table_config(2, 4));
    EXPECT_EQ(r.codes[0], 0.0f);
    EXPECT_EQ(r.codes[1], 2.0f);
    EXPECT_EQ(r.codes[2], 2.0f);
    EXPECT_EQ(r.codes[3], 0.0f);
    EXPECT_EQ(r.codes[4], -2.0f);
}

TEST(FakeQuantForward, RejectsNonPositiveScale) {
    QuantizerState st{0.0f, 0.0f};
    EXPECT_THROW(fake_quantize_forward(std::vector<float>{1.0f}, st, table_config(1, 4)), std::invalid_argument);
    st.scale = -1.0f;
    EXPECT_THROW(fake_quantize_forward(std::vector<float>{1.0f}, st, table_config(1, 4)), std::invalid_argument);
}

TEST(FakeQuantBackward, InteriorHandExample) {
    QuantizerState st{1.0f, 0.0f};
    auto g = fake_quantize_backward(std::vector<float>{2.7f}, st, table_config(4, 4), std::vector<float>{1.0f});
    EXPECT_NEAR(g.scale, 0.3, 1e-6);
    EXPECT_EQ(g.offset, 0.0);
    EXPECT_EQ(g.input[0], 1.0f);
}

TEST(FakeQuantBackward, ClampedHighHandExample) {
    QuantizerState st{1.0f, 0.0f};
    auto g = fake_quantize_backward(std::vector<float>{20.0f}, st, table_config(4, 4), std::vector<float>{1.0f});
    EXPECT_EQ(g.scale, 15.0);
    EXPECT_EQ(g.offset, 1.0);
    EXPECT_EQ(g.input[0], 0.0f);
}

TEST(FakeQuantBackward, ShapeMismatch) {
    QuantizerState st{1.0f, 0.0f};
    EXPECT_THROW(fake_quantize_backward(std::vector<float>{1.0f, 2.0f}, st, table_config(4, 4), std::vector<float>{1.0f}),
                 std::invalid_argument);
}

TEST(FakeQuantBackward, GradScaleMultipliesParameterGradients) {
    QuantizerState st{1.0f, 0.0f};
    st.grad_scale = 0.25f;
    auto g = fake_quantize_backward(std::vector<float>{20.0f, -3.0f}, st, table_config(4, 4),
                                    std::vector<float>{1.0f, 2.0f});
    EXPECT_DOUBLE_EQ(g.scale, 0.25 * (15.0 + 2.0 * 0.0));
    EXPECT_DOUBLE_EQ(g.offset, 0.25 * 3.0);
}

TEST(FakeQuantBackward, FixedOffsetGetsNoGradient) {
    QuantizerState st{1.0f, 0.0f};
    auto cfg = table_config(4, 4);
    cfg.offset_mode = OffsetMode::fixed_xmin;
    auto g = fake_quantize_backward(std::vector<float>{20.0f}, st, cfg, std::vector<float>{1.0f});
    EXPECT_EQ(g.offset, 0.0);
}

TEST(BoundaryTiebreak, EdgesAreClamped) {
    EXPECT_EQ(classify(15.0f, 0, 15), Branch::above);
    EXPECT_EQ(local_gradients(15.0f, 0, 15).d_scale, 15.0f);
    EXPECT_EQ(classify(0.0f, 0, 15), Branch::below);
    EXPECT_EQ(local_gradients(0.0f, 0, 15).d_offset, 1.0f);
    EXPECT_EQ(local_gradients(-8.0f, -8, 7).d_input, 0.0f);
    EXPECT_EQ(classify(1e-6f, 0, 15), Branch::interior);
}

TEST(FakeQuantProperties, IdempotentRangeMonotone) {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<float> xs(-6.0f, 6.0f), ss(0.01f, 1.0f), bs(-1.0f, 1.0f);
    for (int trial = 0; trial < 200; ++trial) {
        const int bits = 2 + trial % 4;
        const auto cfg = table_config(1 + trial % 4, bits);
        QuantizerState st{ss(rng), cfg.offset_enabled ? bs(rng) : 0.0f};
        std::vector<float> x(64);
        for (auto& v : x) v = xs(rng);
        std::sort(x.begin(), x.end());
        auto once = fake_quantize_forward(x, st, cfg);
        auto twice = fake_quantize_forward(once.values, st, cfg);
        ASSERT_EQ(std::memcmp(once.values.data(), twice.values.data(), x.size() * sizeof(float)), 0);
        const auto [n, p] = cfg.bounds();
        const float lo = static_cast<float>(n) * st.scale + st.offset;
        const float hi = static_cast<float>(p) * st.scale + st.offset;
        for (std::size_t i = 0; i < x.size(); ++i) {
            EXPECT_GE(once.values[i], lo - 1e-6f);
            EXPECT_LE(once.values[i], hi + 1e-6f);
            EXPECT_EQ(once.codes[i], std::round(once.codes[i]));
            EXPECT_GE(once.codes[i], n);
            EXPECT_LE(once.codes[i], p);
            if (i) {
                EXPECT_LE(once.values[i - 1], once.values[i]);
            }
        }
    }
}

TEST(FakeQuantProperties, BackwardMatchesBranchOracle) {
    std::mt19937_64 rng(22);
    std::uniform_real_distribution<float> xs(-8.0f, 8.0f), ss(0.05f, 2.0f), bs(-2.0f, 2.0f), ups(-1.0f, 1.0f);
    for (int trial = 0; trial < 100; ++trial) {
        const auto cfg = table_config(1 + trial % 4, 2 + trial % 5);
        QuantizerState st{ss(rng), bs(rng)};
        st.grad_scale = 0.5f;
        std::vector<float> x(50), up(50);
        for (auto& v : x) v = xs(rng);
        for (auto& v : up) v = ups(rng);
        auto g = fake_quantize_backward(x, st, cfg, up);
        auto o = asymq::testing::oracle_backward(x, st.scale, cfg.offset_enabled ? st.offset : 0.0f, cfg.n(), cfg.p(),
                                                 up, st.grad_scale, cfg.offset_enabled);
        for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(g.input[i], o.dx[i], 1e-6);
        EXPECT_NEAR(g.scale, o.ds, 1e-6 * (1 + std::abs(o.ds)));
        EXPECT_NEAR(g.offset, cfg.learns_offset() ? o.dbeta : 0.0, 1e-6 * (1 + std::abs(o.dbeta)));
    }
}

TEST(FakeQuantProperties, OffsetGradientDiesBelowMinimum) {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<float> xs(-0.278f, 3.0f), ups(-1.0f, 1.0f);
    for (int trial = 0; trial < 500; ++trial) {
        auto cfg = table_config(4, 2 + trial % 4);
        std::vector<float> x(32), up(32);
        for (auto& v : x) v = xs(rng);
        for (auto& v : up) v = ups(rng);
        const float xmin = *std::min_element(x.begin(), x.end());
        const float xmax = *std::max_element(x.begin(), x.end());
        QuantizerState st;
        st.offset = xmin - 0.01f - 0.1f * static_cast<float>(trial % 7);
        st.scale = (xmax - st.offset) / (static_cast<float>(cfg.p()) - 0.5f);
        auto g = fake_quantize_backward(x, st, cfg, up);
        EXPECT_EQ(g.offset, 0.0);
    }
}

TEST(FakeQuantTape, GradientsFlowToParameters) {
    Tensor x(Shape{3}, std::vector<float>{2.7f, 20.0f, -1.0f}, true);
    Tensor s = Tensor::scalar(1.0f, true);
    Tensor b = Tensor::scalar(0.0f, true);
    GradTape tape;
    TapeScope scope(tape);
    Tensor y = fake_quantize(x, s, b, table_config(4, 4), 1.0f);
    Tensor loss = sum(y);
    backward(loss);
    EXPECT_NEAR(s.grad()[0], 0.3f + 15.0f + 0.0f, 1e-5);
    EXPECT_EQ(b.grad()[0], 2.0f);
    EXPECT_EQ(x.grad()[0], 1.0f);
    EXPECT_EQ(x.grad()[1], 0.0f);
    EXPECT_EQ(x.grad()[2], 0.0f);
}
