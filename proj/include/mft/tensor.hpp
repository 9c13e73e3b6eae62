#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mft/errors.hpp"
#include "mft/rng.hpp"

namespace mft {

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("tensor extent must be positive, got shape " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

// Dense row-major tensor. Storage is shared between handles; data is treated
// as immutable once an op has produced it (the tape captures storages by
// pointer and replays against them).
template <typename T>
struct StorageT {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad; // empty until first accumulation
    bool requires_grad = false;
};

template <typename T>
class TensorT {
public:
    TensorT() = default;

    static TensorT zeros(std::vector<int> shape) {
        TensorT t;
        std::size_t n = shape_numel(shape);
        t.st_ = std::make_shared<StorageT<T>>();
        t.st_->shape = std::move(shape);
        t.st_->data.assign(n, T(0));
        return t;
    }

    static TensorT full(std::vector<int> shape, T value) {
        TensorT t = zeros(std::move(shape));
        for (T& v : t.st_->data) v = value;
        return t;
    }

    static TensorT from_data(std::vector<int> shape, std::vector<T> data) {
        std::size_t n = shape_numel(shape);
        if (n != data.size())
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
        TensorT t;
        t.st_ = std::make_shared<StorageT<T>>();
        t.st_->shape = std::move(shape);
        t.st_->data = std::move(data);
        return t;
    }

    static TensorT uniform(std::vector<int> shape, Rng& rng, double lo, double hi) {
        TensorT t = zeros(std::move(shape));
        for (T& v : t.st_->data) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    static TensorT normal(std::vector<int> shape, Rng& rng, double mean, double stddev) {
        TensorT t = zeros(std::move(shape));
        for (T& v : t.st_->data) v = static_cast<T>(rng.normal(mean, stddev));
        return t;
    }

    bool defined() const { return st_ != nullptr; }
    const std::vector<int>& shape() const { return st_->shape; }
    int rank() const { return static_cast<int>(st_->shape.size()); }
    int dim(int i) const { return st_->shape[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return st_->data.size(); }

    std::span<T> data() { return st_->data; }
    std::span<const T> data() const { return st_->data; }
    T item() const {
        if (size() != 1) throw ShapeError("item() on non-scalar tensor of shape " + shape_str(shape()));
        return st_->data[0];
    }

    bool requires_grad() const { return st_ && st_->requires_grad; }
    void set_requires_grad(bool v) { st_->requires_grad = v; }

    bool has_grad() const { return st_ && !st_->grad.empty(); }
    std::span<const T> grad() const { return st_->grad; }
    void zero_grad() { st_->grad.clear(); }

    // Allocates (zeroed) on first use; backward rules accumulate here.
    std::vector<T>& grad_buffer() {
        if (st_->grad.empty()) st_->grad.assign(st_->data.size(), T(0));
        return st_->grad;
    }

    TensorT clone() const {
        TensorT t;
        t.st_ = std::make_shared<StorageT<T>>();
        t.st_->shape = st_->shape;
        t.st_->data = st_->data;
        t.st_->requires_grad = st_->requires_grad;
        return t;
    }

    std::shared_ptr<StorageT<T>> storage() const { return st_; }

private:
    std::shared_ptr<StorageT<T>> st_;
};

// Records the backward rule of every differentiable op executed while the
// tape is active on this thread. Replaying in reverse order accumulates
// gradients into every requires_grad storage reachable from the loss.
template <typename T>
class TapeT {
public:
    TapeT() {
        if (current_) throw ConfigError("nested tapes are not supported; one tape per training thread");
        current_ = this;
    }
    ~TapeT() { current_ = nullptr; }
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    static TapeT* current() { return current_; }

    void record(std::function<void()> backward) { ops_.push_back(std::move(backward)); }
    std::size_t size() const { return ops_.size(); }

    void backward(TensorT<T>& loss) {
        if (loss.size() != 1) throw ShapeError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
        loss.grad_buffer()[0] = T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

private:
    static thread_local TapeT* current_;
    std::vector<std::function<void()>> ops_;
};

template <typename T>
thread_local TapeT<T>* TapeT<T>::current_ = nullptr;

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

} // namespace mft
