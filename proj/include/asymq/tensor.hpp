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
 * @file tensor.hpp
 * @brief Dense float tensor with tape-based reverse-mode differentiation.
 *
 * A Tensor is a handle onto shared storage (shape, row-major data and an
 * optional gradient buffer). Copying a Tensor aliases the storage; use
 * clone() for a deep copy. Operations record themselves onto the tape
 * installed by a TapeScope on the current thread whenever one of their
 * inputs requires a gradient.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace asymq {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, float fill = 0.0f, bool requires_grad = false)
        : impl_(std::make_shared<Storage>()) {
        impl_->data.assign(shape_numel(shape), fill);
        impl_->shape = std::move(shape);
        impl_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<float> data, bool requires_grad = false)
        : impl_(std::make_shared<Storage>()) {
        if (shape_numel(shape) != data.size()) {
            throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match " +
                                        std::to_string(data.size()) + " values");
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor scalar(float value, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<float>{value}, requires_grad);
    }

    bool defined() const noexcept { return impl_ != nullptr; }

    const Shape& shape() const { return storage().shape; }
    std::size_t rank() const { return storage().shape.size(); }
    std::size_t dim(std::size_t i) const { return storage().shape.at(i); }
    std::size_t size() const { return storage().data.size(); }

    std::span<float> data() { return storage().data; }
    std::span<const float> data() const { return storage().data; }
    float& operator[](std::size_t i) { return storage().data[i]; }
    float operator[](std::size_t i) const { return storage().data[i]; }

    float item() const {
        if (size() != 1) throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(size()) + " elements");
        return storage().data[0];
    }

    bool requires_grad() const noexcept { return impl_ && impl_->requires_grad; }
    Tensor& set_requires_grad(bool flag) {
        storage().requires_grad = flag;
        return *this;
    }

    bool has_grad() const noexcept { return impl_ && !impl_->grad.empty(); }

    /// Gradient buffer, allocated as zeros on first access.
    std::span<float> grad() {
        auto& s = storage();
        if (s.grad.empty()) s.grad.assign(s.data.size(), 0.0f);
        return s.grad;
    }

    /// Empty span when no gradient has been accumulated.
    std::span<const float> grad() const { return storage().grad; }

    void zero_grad() {
        auto& s = storage();
        std::fill(s.grad.begin(), s.grad.end(), 0.0f);
    }

    void drop_grad() { storage().grad.clear(); }

    Tensor clone() const {
        Tensor t(shape(), std::vector<float>(data().begin(), data().end()), requires_grad());
        return t;
    }

    Tensor detach() const { return Tensor(shape(), std::vector<float>(data().begin(), data().end()), false); }

    bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

private:
    struct Storage {
        Shape shape;
        std::vector<float> data;
        std::vector<float> grad;
        bool requires_grad = false;
    };

    Storage& storage() {
        if (!impl_) throw std::logic_error("Tensor: use of undefined tensor");
        return *impl_;
    }
    const Storage& storage() const {
        if (!impl_) throw std::logic_error("Tensor: use of undefined tensor");
        return *impl_;
    }

    std::shared_ptr<Storage> impl_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class GradTape {
public:
    using Rule = std::function<void()>;

    void record(std::string op, std::vector<Tensor> inputs, Tensor output, Rule rule) {
        entries_.push_back(Entry{std::move(op), std::move(inputs), std::move(output), std::move(rule)});
    }

    std::size_t size() const noexcept { return entries_.size(); }
    void clear() {
        entries_.clear();
        replayed_ = 0;
    }

    std::string_view op_name(std::size_t i) const { return entries_.at(i).op; }

    /// Number of entries visited by the most recent backward pass.
    std::size_t replayed() const noexcept { return replayed_; }

    /// Seeds d(loss)/d(loss) = 1 and replays every recorded rule in reverse order.
    void backward(Tensor& loss) {
        if (!loss.defined() || loss.size() != 1) {
            throw std::invalid_argument("backward: loss must be a scalar tensor");
        }
        loss.grad()[0] += 1.0f;
        replayed_ = 0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (it->output.has_grad()) it->rule();
            ++replayed_;
        }
    }

private:
    struct Entry {
        std::string op;
        std::vector<Tensor> inputs;
        Tensor output;
        Rule rule;
    };
    std::vector<Entry> entries_;
    std::size_t replayed_ = 0;
};

namespace detail {
inline GradTape*& active_tape() {
    thread_local GradTape* tape = nullptr;
    return tape;
}
}  // namespace detail

/// Installs a tape for the current thread for the lifetime of the scope.
class TapeScope {
public:
    explicit TapeScope(GradTape& tape) : previous_(detail::active_tape()) { detail::active_tape() = &tape; }
    ~TapeScope() { detail::active_tape() = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    GradTape* previous_;
};

/// Disables recording on the current thread for the lifetime of the scope.
class NoGradScope {
public:
    NoGradScope() : previous_(detail::active_tape()) { detail::active_tape() = nullptr; }
    ~NoGradScope() { detail::active_tape() = previous_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    GradTape* previous_;
};

inline GradTape* current_tape() noexcept { return detail::active_tape(); }

inline void backward(Tensor& loss) {
    GradTape* tape = current_tape();
    if (!tape) throw std::logic_error("backward: no active GradTape on this thread");
    tape->backward(loss);
}

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

/// Records `rule` when a tape is active and some input requires a gradient.
/// Marks `out` as requiring a gradient in that case.
inline void maybe_record(std::string op, std::vector<Tensor> inputs, Tensor& out, GradTape::Rule rule) {
    GradTape* tape = current_tape();
    bool needed = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (!tape || !needed) return;
    out.set_requires_grad(true);
    tape->record(std::move(op), std::move(inputs), out, std::move(rule));
}

// Strides of `operand` laid out in the index space of `out` (0 on broadcast axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& operand, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    std::size_t stride = 1;
    const std::size_t offset = out.size() - operand.size();
    for (std::size_t i = operand.size(); i-- > 0;) {
        if (operand[i] != 1) strides[offset + i] = stride;
        stride *= operand[i];
    }
    return strides;
}

// Calls fn(out_index, a_index, b_index) over the broadcast index space.
template <typename Fn>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, Fn&& fn) {
    const std::size_t total = shape_numel(out);
    if (a == out && b == out) {
        for (std::size_t i = 0; i < total; ++i) fn(i, i, i);
        return;
    }
    auto sa = broadcast_strides(a, out);
    auto sb = broadcast_strides(b, out);
    std::vector<std::size_t> idx(out.size(), 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < total; ++i) {
        fn(i, ia, ib);
        for (std::size_t d = out.size(); d-- > 0;) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out[d]) break;
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

}  // namespace detail

/// Trailing-dimension broadcast of two shapes; throws on incompatible extents.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    Shape out(std::max(a.size(), b.size()), 1);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1) {
            throw std::invalid_argument("broadcast: incompatible shapes " + shape_str(a) + " and " + shape_str(b));
        }
        out[out.size() - 1 - i] = std::max(da, db);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise binary operations
// ---------------------------------------------------------------------------

namespace detail {

enum class BinaryOp { add, sub, mul, div };

inline Tensor binary(const Tensor& a, const Tensor& b, BinaryOp op) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape());
    Tensor out(out_shape);
    auto pa = a.data();
    auto pb = b.data();
    auto po = out.data();
    for_each_broadcast(out_shape, a.shape(), b.shape(), [&](std::size_t o, std::size_t i, std::size_t j) {
        switch (op) {
            case BinaryOp::add: po[o] = pa[i] + pb[j]; break;
            case BinaryOp::sub: po[o] = pa[i] - pb[j]; break;
            case BinaryOp::mul: po[o] = pa[i] * pb[j]; break;
            case BinaryOp::div: po[o] = pa[i] / pb[j]; break;
        }
    });

    static constexpr const char* names[] = {"add", "sub", "mul", "div"};
    maybe_record(names[static_cast<int>(op)], {a, b}, out, [a = Tensor(a), b = Tensor(b), out, op]() mutable {
        auto go = std::as_const(out).grad();
        auto pa = a.data();
        auto pb = b.data();
        const bool need_a = a.requires_grad();
        const bool need_b = b.requires_grad();
        std::span<float> ga = need_a ? a.grad() : std::span<float>{};
        std::span<float> gb = need_b ? b.grad() : std::span<float>{};
        for_each_broadcast(out.shape(), a.shape(), b.shape(), [&](std::size_t o, std::size_t i, std::size_t j) {
            const float g = go[o];
            switch (op) {
                case BinaryOp::add:
                    if (need_a) ga[i] += g;
                    if (need_b) gb[j] += g;
                    break;
                case BinaryOp::sub:
                    if (need_a) ga[i] += g;
                    if (need_b) gb[j] -= g;
                    break;
                case BinaryOp::mul:
                    if (need_a) ga[i] += g * pb[j];
                    if (need_b) gb[j] += g * pa[i];
                    break;
                case BinaryOp::div:
                    if (need_a) ga[i] += g / pb[j];
                    if (need_b) gb[j] -= g * pa[i] / (pb[j] * pb[j]);
                    break;
            }
        });
    });
    return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryOp::add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryOp::sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryOp::mul); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryOp::div); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline Tensor scale(const Tensor& x, float factor) {
    Tensor out(x.shape());
    auto px = x.data();
    auto po = out.data();
    for (std::size_t i = 0; i < px.size(); ++i) po[i] = px[i] * factor;
    detail::maybe_record("scale", {x}, out, [x = Tensor(x), out, factor]() mutable {
        auto go = std::as_const(out).grad();
        auto gx = x.grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * factor;
    });
    return out;
}

/// Same storage order, new shape.
inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    Tensor out(std::move(shape), std::vector<float>(x.data().begin(), x.data().end()));
    detail::maybe_record("reshape", {x}, out, [x = Tensor(x), out]() mutable {
        auto go = std::as_const(out).grad();
        auto gx = x.grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
    });
    return out;
}

/// Collapses every axis after the first.
inline Tensor flatten(const Tensor& x) {
    if (x.rank() < 1) throw std::invalid_argument("flatten: rank-0 tensor");
    return reshape(x, Shape{x.dim(0), x.size() / std::max<std::size_t>(x.dim(0), 1)});
}

// ---------------------------------------------------------------------------
// Matrix product
// ---------------------------------------------------------------------------

namespace detail {
// c[m×n] += a[m×k] · b[k×n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const float* a, const float* b, float* c) {
    for (std::size_t i = 0; i < m; ++i) {
        float* crow = c + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const float av = a[i * k + l];
            if (av == 0.0f) continue;
            const float* brow = b + l * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}
// c[m×n] += a[m×k] · b[n×k]ᵀ
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const float* a, const float* b, float* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const float* brow = b + j * k;
            float acc = 0.0f;
            for (std::size_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
            c[i * n + j] += acc;
        }
    }
}
// c[m×n] += a[k×m]ᵀ · b[k×n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const float* a, const float* b, float* c) {
    for (std::size_t l = 0; l < k; ++l) {
        const float* arow = a + l * m;
        const float* brow = b + l * n;
        for (std::size_t i = 0; i < m; ++i) {
            const float av = arow[i];
            if (av == 0.0f) continue;
            float* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out(Shape{m, n});
    detail::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data().data());
    detail::maybe_record("matmul", {a, b}, out, [a = Tensor(a), b = Tensor(b), out, m, k, n]() mutable {
        const float* go = std::as_const(out).grad().data();
        if (a.requires_grad()) detail::gemm_nt(m, n, k, go, b.data().data(), a.grad().data());
        if (b.requires_grad()) detail::gemm_tn(k, m, n, a.data().data(), go, b.grad().data());
    });
    return out;
}

/// a[m×k] · b[n×k]ᵀ; the dense-layer product with weights stored [out, in].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
        throw std::invalid_argument("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out(Shape{m, n});
    detail::gemm_nt(m, k, n, a.data().data(), b.data().data(), out.data().data());
    detail::maybe_record("matmul_nt", {a, b}, out, [a = Tensor(a), b = Tensor(b), out, m, k, n]() mutable {
        const float* go = std::as_const(out).grad().data();
        if (a.requires_grad()) detail::gemm_nn(m, n, k, go, b.data().data(), a.grad().data());
        if (b.requires_grad()) detail::gemm_tn(n, m, k, go, a.data().data(), b.grad().data());
    });
    return out;
}

// ---------------------------------------------------------------------------
// Convolution (NCHW, cross-correlation)
// ---------------------------------------------------------------------------

struct Conv2dGeometry {
    std::size_t batch, in_channels, in_h, in_w;
    std::size_t out_channels, kernel_h, kernel_w;
    std::size_t stride, padding;
    std::size_t out_h, out_w;

    std::size_t patch() const { return in_channels * kernel_h * kernel_w; }
    std::size_t out_plane() const { return out_h * out_w; }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
    const long long span = static_cast<long long>(in) + 2 * static_cast<long long>(padding) - static_cast<long long>(kernel);
    if (stride == 0 || span < 0) return 0;
    return static_cast<std::size_t>(span / static_cast<long long>(stride)) + 1;
}

inline Conv2dGeometry conv2d_geometry(const Shape& x, const Shape& w, std::size_t stride, std::size_t padding) {
    if (x.size() != 4 || w.size() != 4) throw std::invalid_argument("conv2d: expected NCHW input and OCkk kernel");
    if (x[1] != w[1]) {
        throw std::invalid_argument("conv2d: channel mismatch " + shape_str(x) + " vs kernel " + shape_str(w));
    }
    Conv2dGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], stride, padding, 0, 0};
    g.out_h = conv_out_extent(g.in_h, g.kernel_h, stride, padding);
    g.out_w = conv_out_extent(g.in_w, g.kernel_w, stride, padding);
    if (g.out_h == 0 || g.out_w == 0) {
        throw std::invalid_argument("conv2d: kernel " + shape_str(w) + " does not fit input " + shape_str(x) +
                                    " with padding " + std::to_string(padding));
    }
    return g;
}

namespace detail {

// cols[patch × out_plane] for one image.
inline void im2col(const Conv2dGeometry& g, const float* img, float* cols) {
    const auto plane = g.out_plane();
    for (std::size_t c = 0; c < g.in_channels; ++c)
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                float* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * plane;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.padding);
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long long ix =
                            static_cast<long long>(ox * g.stride + kx) - static_cast<long long>(g.padding);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long long>(g.in_h) &&
                                            ix < static_cast<long long>(g.in_w);
                        row[oy * g.out_w + ox] = inside ? img[(c * g.in_h + iy) * g.in_w + ix] : 0.0f;
                    }
                }
            }
}

inline void col2im(const Conv2dGeometry& g, const float* cols, float* img) {
    const auto plane = g.out_plane();
    for (std::size_t c = 0; c < g.in_channels; ++c)
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const float* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * plane;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.padding);
                    if (iy < 0 || iy >= static_cast<long long>(g.in_h)) continue;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long long ix =
                            static_cast<long long>(ox * g.stride + kx) - static_cast<long long>(g.padding);
                        if (ix < 0 || ix >= static_cast<long long>(g.in_w)) continue;
                        img[(c * g.in_h + iy) * g.in_w + ix] += row[oy * g.out_w + ox];
                    }
                }
            }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1, std::size_t padding = 0) {
    const Conv2dGeometry g = conv2d_geometry(x.shape(), w.shape(), stride, padding);
    Tensor out(Shape{g.batch, g.out_channels, g.out_h, g.out_w});
    const std::size_t in_img = g.in_channels * g.in_h * g.in_w;
    const std::size_t out_img = g.out_channels * g.out_plane();
    std::vector<float> cols(g.patch() * g.out_plane());
    for (std::size_t n = 0; n < g.batch; ++n) {
        detail::im2col(g, x.data().data() + n * in_img, cols.data());
        detail::gemm_nn(g.out_channels, g.patch(), g.out_plane(), w.data().data(), cols.data(),
                        out.data().data() + n * out_img);
    }
    detail::maybe_record("conv2d", {x, w}, out, [x = Tensor(x), w = Tensor(w), out, g, in_img, out_img]() mutable {
        const float* go = std::as_const(out).grad().data();
        std::vector<float> cols(g.patch() * g.out_plane());
        float* gw = w.requires_grad() ? w.grad().data() : nullptr;
        float* gx = x.requires_grad() ? x.grad().data() : nullptr;
        for (std::size_t n = 0; n < g.batch; ++n) {
            const float* gon = go + n * out_img;
            if (gw) {
                detail::im2col(g, x.data().data() + n * in_img, cols.data());
                detail::gemm_nt(g.out_channels, g.out_plane(), g.patch(), gon, cols.data(), gw);
            }
            if (gx) {
                std::fill(cols.begin(), cols.end(), 0.0f);
                detail::gemm_tn(g.patch(), g.out_channels, g.out_plane(), w.data().data(), gon, cols.data());
                detail::col2im(g, cols.data(), gx + n * in_img);
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and loss
// ---------------------------------------------------------------------------

/// Sums over `axes` (kept as size-1 extents are removed). Empty `axes` reduces everything to shape {1}.
inline Tensor reduce_sum(const Tensor& x, std::vector<std::size_t> axes = {}) {
    const Shape& in = x.shape();
    std::vector<bool> reduced(in.size(), axes.empty());
    for (auto a : axes) {
        if (a >= in.size()) throw std::invalid_argument("reduce_sum: axis " + std::to_string(a) + " out of range");
        reduced[a] = true;
    }
    Shape kept(in.size());
    Shape out_shape;
    for (std::size_t i = 0; i < in.size(); ++i) {
        kept[i] = reduced[i] ? 1 : in[i];
        if (!reduced[i]) out_shape.push_back(in[i]);
    }
    if (out_shape.empty()) out_shape.push_back(1);

    Tensor out(out_shape);
    auto px = x.data();
    auto po = out.data();
    detail::for_each_broadcast(in, in, kept, [&](std::size_t, std::size_t i, std::size_t j) { po[j] += px[i]; });
    detail::maybe_record("reduce_sum", {x}, out, [x = Tensor(x), out, kept]() mutable {
        auto go = std::as_const(out).grad();
        auto gx = x.grad();
        detail::for_each_broadcast(x.shape(), x.shape(), kept,
                                   [&](std::size_t, std::size_t i, std::size_t j) { gx[i] += go[j]; });
    });
    return out;
}

inline Tensor reduce_mean(const Tensor& x, std::vector<std::size_t> axes = {}) {
    std::size_t count = 1;
    if (axes.empty()) {
        count = x.size();
    } else {
        for (auto a : axes) count *= x.shape().at(a);
    }
    return scale(reduce_sum(x, std::move(axes)), 1.0f / static_cast<float>(std::max<std::size_t>(count, 1)));
}

inline Tensor sum(const Tensor& x) { return reduce_sum(x); }
inline Tensor mean(const Tensor& x) { return reduce_mean(x); }

/// Mean softmax cross-entropy over a batch of logits [B, C].
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2) throw std::invalid_argument("softmax_cross_entropy: logits must be [batch, classes]");
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    if (labels.size() != batch) throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
    std::vector<float> probs(batch * classes);
    double loss = 0.0;
    auto pl = logits.data();
    for (std::size_t b = 0; b < batch; ++b) {
        const int label = labels[b];
        if (label < 0 || static_cast<std::size_t>(label) >= classes) {
            throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(label) + " out of range");
        }
        const float* row = pl.data() + b * classes;
        const float mx = *std::max_element(row, row + classes);
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) z += std::exp(static_cast<double>(row[c] - mx));
        for (std::size_t c = 0; c < classes; ++c)
            probs[b * classes + c] = static_cast<float>(std::exp(static_cast<double>(row[c] - mx)) / z);
        loss += std::log(z) - static_cast<double>(row[label] - mx);
    }
    Tensor out = Tensor::scalar(static_cast<float>(loss / static_cast<double>(batch)));
    std::vector<int> owned(labels.begin(), labels.end());
    detail::maybe_record("softmax_cross_entropy", {logits}, out,
                         [logits = Tensor(logits), out, probs = std::move(probs), owned = std::move(owned), batch, classes]() mutable {
                             const float g = std::as_const(out).grad()[0] / static_cast<float>(batch);
                             auto gl = logits.grad();
                             for (std::size_t b = 0; b < batch; ++b)
                                 for (std::size_t c = 0; c < classes; ++c) {
                                     const float onehot = static_cast<int>(c) == owned[b] ? 1.0f : 0.0f;
                                     gl[b * classes + c] += g * (probs[b * classes + c] - onehot);
                                 }
                         });
    return out;
}

// ---------------------------------------------------------------------------
// Pointwise activations
// ---------------------------------------------------------------------------

enum class Activation { identity, relu, swish, hswish, leaky_relu };

inline std::string_view activation_name(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::relu: return "relu";
        case Activation::swish: return "swish";
        case Activation::hswish: return "hswish";
        case Activation::leaky_relu: return "leaky_relu";
    }
    return "?";
}

inline Activation parse_activation(std::string_view name) {
    for (auto a : {Activation::identity, Activation::relu, Activation::swish, Activation::hswish,
                   Activation::leaky_relu}) {
        if (activation_name(a) == name) return a;
    }
    throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

inline constexpr float kLeakySlope = 0.01f;

/// Scalar activation and its derivative; templated so the integer path can evaluate in double.
template <typename T>
T activation_value(Activation kind, T x) {
    switch (kind) {
        case Activation::identity: return x;
        case Activation::relu: return x > T(0) ? x : T(0);
        case Activation::swish: return x / (T(1) + std::exp(-x));
        case Activation::hswish: return x * std::clamp(x + T(3), T(0), T(6)) / T(6);
        case Activation::leaky_relu: return x > T(0) ? x : T(kLeakySlope) * x;
    }
    return x;
}

template <typename T>
T activation_derivative(Activation kind, T x) {
    switch (kind) {
        case Activation::identity: return T(1);
        case Activation::relu: return x > T(0) ? T(1) : T(0);
        case Activation::swish: {
            const T sig = T(1) / (T(1) + std::exp(-x));
            return sig + x * sig * (T(1) - sig);
        }
        case Activation::hswish:
            if (x <= T(-3)) return T(0);
            if (x >= T(3)) return T(1);
            return (T(2) * x + T(3)) / T(6);
        case Activation::leaky_relu: return x > T(0) ? T(1) : T(kLeakySlope);
    }
    return T(1);
}

inline Tensor activate(const Tensor& x, Activation kind) {
    Tensor out(x.shape());
    auto px = x.data();
    auto po = out.data();
    for (std::size_t i = 0; i < px.size(); ++i) po[i] = activation_value(kind, px[i]);
    detail::maybe_record(std::string(activation_name(kind)), {x}, out, [x = Tensor(x), out, kind]() mutable {
        auto go = std::as_const(out).grad();
        auto gx = x.grad();
        auto px = x.data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * activation_derivative(kind, px[i]);
    });
    return out;
}

inline Tensor relu(const Tensor& x) { return activate(x, Activation::relu); }
inline Tensor swish(const Tensor& x) { return activate(x, Activation::swish); }
inline Tensor hswish(const Tensor& x) { return activate(x, Activation::hswish); }
inline Tensor leaky_relu(const Tensor& x) { return activate(x, Activation::leaky_relu); }

}  // namespace asymq
