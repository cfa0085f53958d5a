#pragma once

#include <vector>

#include "snet/tensor.hpp"

namespace snet {
namespace ops {

// Elementwise arithmetic (same-shape operands).
Tensor add(Tensor a, Tensor b);
Tensor sub(Tensor a, Tensor b);
Tensor mul(Tensor a, Tensor b);
Tensor div(Tensor a, Tensor b);
Tensor add_scalar(Tensor a, double c);
Tensor mul_scalar(Tensor a, double c);

// Broadcast add of `p` over axis 0 of `x`: p.shape == x.shape[1:].
Tensor add_broadcast0(Tensor x, Tensor p);

Tensor exp(Tensor x);
Tensor log(Tensor x);
Tensor sigmoid(Tensor x);
// tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
Tensor gelu(Tensor x);

// 2D matrix product (M,K)x(K,N); batched variant over leading axis.
Tensor matmul(Tensor a, Tensor b);
Tensor bmm(Tensor a, Tensor b);
// Swaps the last two axes of a 2D or 3D tensor (materialized).
Tensor transpose_last2(Tensor x);

// x: (..., C) treated as (R, C); w: (C, D); optional bias (D).
Tensor linear(Tensor x, Tensor w, Tensor bias = Tensor());

// Direct cross-correlation. input (B,Cin,H,W), kernel (Cout,Cin/groups,kh,kw),
// optional bias (Cout). Depth-wise convolution is groups == Cin == Cout.
Tensor conv2d(Tensor input, Tensor kernel, Tensor bias, std::int64_t stride,
              std::int64_t padding, std::int64_t groups = 1);

Tensor softmax(Tensor x, int axis);

// Per-channel batch normalization over (B,*,H,W)-like layouts: axis 1 is the
// channel axis, statistics are taken over all other axes. Train mode uses
// batch statistics and updates running stats in place; eval mode reads the
// running stats. Variance is biased (divide by N) in both places.
Tensor batch_norm(Tensor x, Tensor scale, Tensor shift, Tensor running_mean,
                  Tensor running_var, double momentum, double eps, Mode mode);

// Layout moves. flatten_tokens: (B,C,H,W) -> (B, H*W, C); unflatten_tokens is
// its exact inverse (pure copies, bitwise invertible).
Tensor flatten_tokens(Tensor x);
Tensor unflatten_tokens(Tensor tokens, std::int64_t height, std::int64_t width);
Tensor reshape(Tensor x, Shape new_shape);
Tensor upsample_nearest(Tensor x, std::int64_t factor);

Tensor concat(const std::vector<Tensor>& parts, int axis);
std::vector<Tensor> split(Tensor x, const std::vector<std::int64_t>& sizes, int axis);
inline Tensor concat_channels(const std::vector<Tensor>& parts) { return concat(parts, 1); }
inline std::vector<Tensor> split_channels(Tensor x, const std::vector<std::int64_t>& sizes) {
    return split(x, sizes, 1);
}

// Reductions.
Tensor sum_all(Tensor x);
Tensor mean_all(Tensor x);
// (B,C,...) -> (C): sums over every axis except axis 1.
Tensor channel_sums(Tensor x);

// Mean of the numerically stable elementwise binary cross entropy between
// logits and targets in [0,1]. Targets are treated as constants.
Tensor bce_with_logits(Tensor logits, Tensor targets);

}  // namespace ops
}  // namespace snet
