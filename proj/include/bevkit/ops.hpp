#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "bevkit/tensor.hpp"

namespace bevkit {

enum class Activation { Sigmoid, Relu, Silu };

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp_op(const Tensor& x);
Tensor activation(const Tensor& x, Activation kind);

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---------------------------------------------------------------------------
// Linear maps
// ---------------------------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);              // [N,K]x[K,M]
Tensor add_bias_rows(const Tensor& x, const Tensor& bias);     // [N,C]+[C]
Tensor add_bias_channels(const Tensor& x, const Tensor& bias); // [C,H,W]+[C]

// ---------------------------------------------------------------------------
// Shape / gather
// ---------------------------------------------------------------------------
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute3(const Tensor& x, std::array<int, 3> axes);
Tensor concat0(const Tensor& a, const Tensor& b);
/// out[i] = rows[perm[i]]; perm must be a permutation of [0,N).
Tensor permute_rows(const Tensor& rows, const std::vector<std::int64_t>& perm);
/// Replicates a [C] vector into [n,C]; backward sums over rows.
Tensor broadcast_row(const Tensor& v, std::int64_t n);

// ---------------------------------------------------------------------------
// Structured kernels
// ---------------------------------------------------------------------------

/// Cross-correlation with zero padding. input [Cin,H,W], kernel
/// [Cout,Cin,kH,kW] with odd kH,kW. Output extents (H+2p-kH)/stride+1;
/// in checked mode the division must be exact.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::int64_t stride,
              std::int64_t padding);

/// Mean over non-overlapping 2x2 windows. input [C,H,W] with even H,W;
/// output [C,H/2,W/2].
Tensor avg_pool2(const Tensor& input);

/// Normalizes over the last axis, then applies the affine scale/shift.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps);

/// Row-wise softmax on [N,D].
Tensor softmax_rows(const Tensor& x);

/// Mean over elements of -a_t*(1-p_t)^gamma*log(p_t) with
/// p_t = p if target==1 else 1-p, a_t = alpha for positives and 1-alpha
/// for negatives; p clamped to [1e-6, 1-1e-6]. `target` is a constant
/// {0,1} tensor of the same shape.
Tensor focal_loss(const Tensor& prob, const Tensor& target, double alpha,
                  double gamma);

/// rows [N,C] scattered into a zero grid [C,Y,X] at per-row (x,y) cells.
/// Duplicate cells accumulate; out-of-grid fails in checked mode.
Tensor scatter_rows_to_grid(const Tensor& rows,
                            const std::vector<std::array<std::int64_t, 2>>& xy,
                            std::int64_t ybins, std::int64_t xbins);

/// out[i,:] = grid[:, xy[i][1], xy[i][0]]; backward scatters into the grid.
Tensor gather_grid_rows(const Tensor& grid,
                        const std::vector<std::array<std::int64_t, 2>>& xy);

/// Per-segment elementwise max over rows [N,C] -> [M,C]. Every segment id
/// in [0,M) must own at least one row; ties keep the earliest row.
Tensor segment_max(const Tensor& rows, const std::vector<std::int64_t>& seg_of_row,
                   std::int64_t num_segments);

/// Depthwise causal 1D convolution along the sequence axis.
/// x [L,C], taps [K,C]; out[t,c] = sum_j taps[j,c]*x[t-K+1+j,c], zeros left.
Tensor causal_depthwise_conv1d(const Tensor& x, const Tensor& taps);

/// Input-dependent state-space recurrence (diagonal A, zero initial state):
///   hbar[t,c,s] = exp(delta[t,c]*a[c,s]) * h[t-1,c,s] + delta[t,c]*b[t,s]*x[t,c]
///   y[t,c]      = sum_s c_seq[t,s]*h[t,c,s] + d_skip[c]*x[t,c]
/// Checked mode requires delta > 0 and a < 0 (decay in (0,1)).
Tensor ssm_scan(const Tensor& x, const Tensor& delta, const Tensor& b_seq,
                const Tensor& c_seq, const Tensor& a_decay, const Tensor& d_skip);

/// Modulated deformable convolution sampling bilinearly from `feat` only.
///   out(p0)[co] = sum_k m[g,k](p0) * sum_ci w[co,ci,k] * feat[ci](p0+p_k+dp[g,k](p0))
/// feat [Cin,H,W], weight [Cout,Cin/groups,kh*kw], offsets [groups*M*2,H,W]
/// (channel (g*M+k)*2+{0:dx,1:dy}), modulation [groups*M,H,W]. Out-of-bounds
/// bilinear reads are zero. Output [Cout,H,W].
Tensor deform_conv2d(const Tensor& feat, const Tensor& weight,
                     const Tensor& offsets, const Tensor& modulation,
                     std::int64_t groups, std::int64_t kh, std::int64_t kw);

/// Splat: out[c, cell_of[d,h,w]] += feat[c,h,w] * depth[d,h,w] for every
/// (d,h,w) with cell_of >= 0. feat [C,H,W], depth [D,H,W], out [C,Y*X]
/// reshaped to [C,Y,X].
Tensor lift_splat_op(const Tensor& feat, const Tensor& depth,
                     const std::vector<std::int32_t>& cell_of,
                     std::int64_t ybins, std::int64_t xbins);

}  // namespace bevkit
