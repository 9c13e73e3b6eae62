#pragma once

#include <vector>

#include "mft/rng.hpp"
#include "mft/tensor.hpp"

namespace mft {

// Elementwise / structural ops. All ops allocate a fresh output tensor and,
// when a tape is active and any input requires grad, record a backward rule
// that accumulates into the inputs' grad buffers. Inner reduction order is
// fixed regardless of thread count, so results are bit-stable under OpenMP.

template <typename T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> scale(const TensorT<T>& a, T c);
template <typename T> TensorT<T> relu(const TensorT<T>& a);
template <typename T> TensorT<T> gelu(const TensorT<T>& a);
template <typename T> TensorT<T> reshape(const TensorT<T>& a, std::vector<int> new_shape);
template <typename T> TensorT<T> permute(const TensorT<T>& a, const std::vector<int>& axes);
template <typename T> TensorT<T> broadcast_to(const TensorT<T>& a, const std::vector<int>& target);
template <typename T> TensorT<T> concat(const std::vector<TensorT<T>>& parts, int axis);
template <typename T> TensorT<T> slice(const TensorT<T>& a, int axis, int start, int len);
template <typename T> TensorT<T> sum(const TensorT<T>& a);

// a: [..., m, k]; b: [k, p] (shared) or [..., k, p] with matching batch dims.
template <typename T> TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);

template <typename T> TensorT<T> softmax(const TensorT<T>& a, int axis);

// Normalizes the last axis with biased variance.
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta, T eps);

// Channel axis is axis 1; normalizes over every other axis (works for the
// 4-D and 5-D inputs alike). running_mean/running_var are mutated in place
// when training && update_running.
template <typename T>
TensorT<T> batch_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      TensorT<T>& running_mean, TensorT<T>& running_var, T momentum, T eps,
                      bool training, bool update_running);

// Grouped 2-D cross-correlation, stride 1, zero padding. x: [N,Cin,H,W],
// w: [Cout,Cin/g,kh,kw], bias: [Cout] or undefined.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias, int groups, int pad);

// 3-D cross-correlation, stride 1, zero padding (ph,pw,pd). x: [N,Cin,H,W,D],
// w: [Cout,Cin,kh,kw,kd], bias: [Cout] or undefined.
template <typename T>
TensorT<T> conv3d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias, int ph, int pw, int pd);

// Inverted dropout: survivors are scaled by 1/(1-rate) so inactive mode is
// exactly the identity (the input handle is returned unchanged).
template <typename T> TensorT<T> dropout(const TensorT<T>& x, T rate, bool active, Rng& rng);

// Mean over the batch of -log softmax(logits)[label]; max-subtracted.
template <typename T> TensorT<T> cross_entropy_mean(const TensorT<T>& logits, const std::vector<int>& labels);

// y = x . w + bias, bias broadcast over leading axes.
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias) {
    TensorT<T> y = matmul(x, w);
    std::vector<int> bshape(static_cast<std::size_t>(y.rank()), 1);
    bshape.back() = bias.dim(0);
    TensorT<T> wide = broadcast_to(reshape(bias, bshape), y.shape());
    return add(y, wide);
}

} // namespace mft
