#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "rng.hpp"

namespace t2i {

// Dense row-major float32 tensor. Copies are cheap handles onto one shared
// record (data, lazily-allocated grad, requires_grad flag), so a backward
// closure and the caller always observe the same gradient buffer.
class Tensor {
    struct Impl {
        std::vector<int> shape;
        std::vector<float> data;
        std::vector<float> grad;  // empty until first use
        bool requires_grad = false;
    };

public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : impl_(std::make_shared<Impl>()) {
        impl_->shape = std::move(shape);
        impl_->data.assign(static_cast<size_t>(numel_of(impl_->shape)), 0.0f);
    }

    Tensor(std::vector<int> shape, std::vector<float> values) : impl_(std::make_shared<Impl>()) {
        impl_->shape = std::move(shape);
        if (values.size() != static_cast<size_t>(numel_of(impl_->shape)))
            throw std::invalid_argument("tensor: data length does not match shape");
        impl_->data = std::move(values);
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, float v) {
        Tensor t(std::move(shape));
        for (auto& x : t.impl_->data) x = v;
        return t;
    }

    static Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f) {
        Tensor t(std::move(shape));
        for (auto& x : t.impl_->data) x = stddev * rng.normal();
        return t;
    }

    bool defined() const { return static_cast<bool>(impl_); }
    const std::vector<int>& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape.at(static_cast<size_t>(i)); }

    int64_t numel() const { return impl_ ? static_cast<int64_t>(impl_->data.size()) : 0; }

    float* data() { return impl_->data.data(); }
    const float* data() const { return impl_->data.data(); }
    std::vector<float>& values() { return impl_->data; }
    const std::vector<float>& values() const { return impl_->data; }

    float& operator[](int64_t i) { return impl_->data[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return impl_->data[static_cast<size_t>(i)]; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        impl_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }

    // Lazily materializes the zero-filled grad buffer on the shared record.
    std::vector<float>& grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
        return impl_->grad;
    }
    const std::vector<float>& grad() const { return impl_->grad; }

    void zero_grad() {
        if (impl_)
            for (auto& g : impl_->grad) g = 0.0f;
    }

    void accumulate_grad(const float* g, int64_t n) {
        auto& dst = grad();
        for (int64_t i = 0; i < n; ++i) dst[static_cast<size_t>(i)] += g[i];
    }

    // Deep copy of values (grad and flag not copied).
    Tensor clone() const { return Tensor(impl_->shape, impl_->data); }

    // True when two handles reference the same shared record.
    bool same_record(const Tensor& o) const { return impl_ == o.impl_; }

    bool same_shape(const Tensor& o) const { return impl_->shape == o.impl_->shape; }

    bool all_finite() const {
        for (float v : impl_->data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static int64_t numel_of(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw std::invalid_argument("tensor: shape dims must be positive");
            n *= d;
        }
        return n;
    }

private:
    std::shared_ptr<Impl> impl_;
};

// Records backward closures during a forward pass; backward() replays them in
// reverse. One tape per training step / per thread; tapes are not shared.
class Tape {
public:
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

    void backward() {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }

private:
    std::vector<std::function<void()>> nodes_;
};

// Result of a scalar-valued reduction: a {1}-shaped graph node plus the same
// value accumulated in double precision (central differences need the extra
// bits; the graph stays float32).
struct Scalar {
    Tensor node;
    double value = 0.0;

    float f() const { return static_cast<float>(value); }
};

inline bool grad_needed(const Tape* tape, const Tensor& a) {
    return tape != nullptr && a.requires_grad();
}
inline bool grad_needed(const Tape* tape, const Tensor& a, const Tensor& b) {
    return tape != nullptr && (a.requires_grad() || b.requires_grad());
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace t2i
