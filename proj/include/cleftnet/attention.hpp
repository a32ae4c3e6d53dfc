#pragma once

#include "cleftnet/autodiff.hpp"
#include "cleftnet/tensor.hpp"

namespace cleftnet {

/// How the input is mapped onto the query grid for the residual path.
enum class ResidualKind {
  MaxPool,    // query grid is the input halved (per axis factor 1 or 2)
  Trilinear,  // query grid is the input doubled (per axis factor 1 or 2)
  Identity,   // query grid equals the input grid
};

/// Parameters of one feature augmentor. The learnable query is shared by every
/// input and fixes the spatial extents of the output.
template <typename T>
struct FAParams {
  Tensor<T> query;          // (d_q, h_q, w_q, c_k)
  Tensor<T> key_kernel;     // (1, 1, 1, c, c_k)
  Tensor<T> value_kernel;   // (1, 1, 1, c, c_v)
  Tensor<T> output_kernel;  // (1, 1, 1, c_v, c)
  ResidualKind residual = ResidualKind::Identity;
};

/// Per-axis resampling factor between an input grid and a query grid.
/// Throws ShapeError when the grids are inconsistent with `kind`.
Triple residual_factor(ResidualKind kind, const Triple& input_grid, const Triple& query_grid);

/// Column-stochastic attention map softmax_columns(K^T Q) for keys (d,h,w,c_k)
/// and query (d_q,h_q,w_q,c_k); shape (d*h*w) x (d_q*h_q*w_q).
template <typename T>
Tensor<T> attention_map(const Tensor<T>& keys, const Tensor<T>& query);

template <typename T>
Tensor<T> fa_forward(const Tensor<T>& input, const FAParams<T>& params);

/// Spatial-wise gate: each voxel vector scaled by softmax over voxels of <m_i, q_s>.
template <typename T>
Tensor<T> gated_attention_swa(const Tensor<T>& input, const Tensor<T>& q_s);

/// Channel-wise gate: each channel scaled by softmax over channels of M q_c.
template <typename T>
Tensor<T> gated_attention_cwa(const Tensor<T>& input, const Tensor<T>& q_c);

/// Input-dependent query attention at the input resolution, with an identity
/// residual: conv_O(V softmax(K^T Q)) + input.
template <typename T>
Tensor<T> self_attention(const Tensor<T>& input, const Tensor<T>& query_kernel, const Tensor<T>& key_kernel,
                         const Tensor<T>& value_kernel, const Tensor<T>& output_kernel);

namespace ad {

/// Z = V softmax(K^T Q) per batch item, returned channels-last. `queries` is
/// either (d_q,h_q,w_q,c_k), shared by every batch item, or batched like `keys`.
template <typename T>
Var attend(Tape<T>& t, Var keys, Var values, Var queries);

template <typename T>
Var resample(Tape<T>& t, Var input, ResidualKind kind, Triple factor);

struct FAVars {
  Var query, key_kernel, value_kernel, output_kernel;
};

template <typename T>
Var feature_augmentor(Tape<T>& t, Var input, const FAVars& p, ResidualKind kind);

struct SelfAttentionVars {
  Var query_kernel, key_kernel, value_kernel, output_kernel;
};

/// Query computed by a 1x1x1 projection of the resampled input, so the block can
/// stand in for a resizing feature augmentor. With Identity it is plain self-attention.
template <typename T>
Var self_attention(Tape<T>& t, Var input, const SelfAttentionVars& p, ResidualKind kind, Triple factor);

template <typename T>
Var gated_swa(Tape<T>& t, Var input, Var q_s);
template <typename T>
Var gated_cwa(Tape<T>& t, Var input, Var q_c);

}  // namespace ad

}  // namespace cleftnet
