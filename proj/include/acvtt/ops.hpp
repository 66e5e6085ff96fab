#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "acvtt/tensor.hpp"

// Differentiable primitives. Every op takes the Graph it records into; when the
// graph is not recording, or no operand requires a gradient, nothing is taped.
//
// Reductions accumulate sequentially in row-major order so results are
// reproducible bit for bit.
namespace acvtt::ops {

enum class ConvKernel {
    direct,   // per-output-pixel summation
    blocked,  // row-vectorised accumulation; bit-identical to direct
};

/// 2D cross-correlation with zero padding.
/// input [B,Cin,H,W], weight [Cout,Cin,k,k], bias [Cout] -> [B,Cout,H+2p-k+1,W+2p-k+1].
Tensor conv2d(Graph& g, const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t padding,
              ConvKernel kernel = ConvKernel::blocked);

/// Pointwise (1x1) channel projection on channels-last rows:
/// x [P,Cin], weight [Cout,Cin], bias [Cout] -> [P,Cout].
Tensor linear(Graph& g, const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b);
Tensor transpose(Graph& g, const Tensor& a);

/// exp(x - max) / sum, along `axis`. Throws NumericError on non-finite input.
Tensor softmax(Graph& g, const Tensor& x, std::size_t axis);

/// Zero-mean, unit-variance normalisation along `axis` (biased variance, no affine).
Tensor layer_norm(Graph& g, const Tensor& x, std::size_t axis, double eps = 1e-5);

/// Align-corners bilinear resampling of the last two axes.
Tensor bilinear_resize(Graph& g, const Tensor& x, std::size_t out_h, std::size_t out_w);

/// 2x2 mean pooling with stride 2 over the last two axes; both must be even.
Tensor avg_pool2(Graph& g, const Tensor& x);

Tensor relu(Graph& g, const Tensor& x);
Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor sub(Graph& g, const Tensor& a, const Tensor& b);
Tensor mul(Graph& g, const Tensor& a, const Tensor& b);
Tensor scale(Graph& g, const Tensor& x, double factor);

Tensor concat(Graph& g, std::span<const Tensor> parts, std::size_t axis);
/// Stacks equal-shaped tensors along a new leading axis.
Tensor stack(Graph& g, std::span<const Tensor> parts);
/// Removes `axis` by taking entry `index` along it.
Tensor select(Graph& g, const Tensor& x, std::size_t axis, std::size_t index);

/// Sum over `axis`, removing it (a rank-1 input yields shape [1]).
Tensor sum_axis(Graph& g, const Tensor& x, std::size_t axis);
/// Sum of all entries, shape [1].
Tensor sum(Graph& g, const Tensor& x);
Tensor mean(Graph& g, const Tensor& x);
/// mean |a - b|, shape [1].
Tensor l1_loss(Graph& g, const Tensor& a, const Tensor& b);

Tensor reshape(Graph& g, const Tensor& x, Shape shape);
Tensor permute(Graph& g, const Tensor& x, std::span<const std::size_t> order);

/// Mirror padding (edge sample not repeated) of the last two axes.
Tensor pad_reflect(Graph& g, const Tensor& x, std::size_t top, std::size_t bottom, std::size_t left,
                   std::size_t right);
/// Window [y0, y0+h) x [x0, x0+w) of the last two axes.
Tensor crop2d(Graph& g, const Tensor& x, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w);

/// out[q, c] = sum_l weights[l, q] * items[l][q, c], accumulated in l order.
/// Each item is viewed as [Q, C] with Q = weights.dim(1); the output takes the
/// shape of items[0].
Tensor weighted_sum(Graph& g, std::span<const Tensor> items, const Tensor& weights);

struct AttentionResult {
    Tensor output;    // [P, C]: softmax(scale * q k^T) v
    Tensor relation;  // [P]: sum_k softmax(s)[k] * s[k], s = scale * q k^T
};

/// Fused scaled dot-product attention that streams over key blocks of size
/// `key_block` with an online softmax, never materialising the P x M score
/// matrix. Backward recomputes scores block by block.
/// q [P,C], k [M,C], v [M,Cv].
AttentionResult blocked_attention(Graph& g, const Tensor& q, const Tensor& k, const Tensor& v, double scale,
                                  std::size_t key_block);

}  // namespace acvtt::ops
