#pragma once

#include <utility>
#include <vector>

#include "safnet/autograd.hpp"

// Differentiable tensor operations. Every op accepts Vars, computes its value
// eagerly and records a backward closure when any input requires a gradient.
namespace safnet::ops {

using ag::Var;

struct ConvOptions {
  int stride = 1;
  int pad = 0;
  int dilation = 1;
  int groups = 1;
};

// x: N x Cin x H x W, weight: Cout x Cin/groups x K x K, bias: 1 x Cout x 1 x 1
// or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              ConvOptions opt);

// Transposed convolution (adjoint of conv2d with the same geometry).
// weight: Cin x Cout x K x K. Output extent (H-1)*stride - 2*pad + K.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight,
                        const Var<T>& bias, int stride, int pad);

// Per-channel PReLU; slope is 1 x C x 1 x 1.
template <typename T>
Var<T> prelu(const Var<T>& x, const Var<T>& slope);

template <typename T>
Var<T> relu(const Var<T>& x);

template <typename T>
Var<T> sigmoid(const Var<T>& x);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& a, T factor);

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts);

template <typename T>
Var<T> slice(const Var<T>& x, int begin, int count);

// Interleaves channel groups: C = g*k channels viewed as g x k, transposed.
template <typename T>
Var<T> channel_shuffle(const Var<T>& x, int groups);

// Bilinear x2 upsampling with half-pixel centres and edge clamping.
template <typename T>
Var<T> upsample2x(const Var<T>& x);

// 2x2 box average; equals bilinear x0.5 resampling with half-pixel centres.
template <typename T>
Var<T> avg_pool2x(const Var<T>& x);

template <typename T>
Var<T> crop(const Var<T>& x, int top, int left, int height, int width);

// Scalar mean of |a - b| over all elements.
template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b);

// Scalar sum_i w_i * s_i of scalar Vars.
template <typename T>
Var<T> weighted_sum(const std::vector<std::pair<Var<T>, double>>& terms);

// Plain-tensor kernels reused by non-differentiable callers.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x);

template <typename T>
Tensor<T> avg_pool2x(const Tensor<T>& x);

}  // namespace safnet::ops
