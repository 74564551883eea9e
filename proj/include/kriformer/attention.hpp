#pragma once

#include "kriformer/rng.hpp"
#include "kriformer/tensor.hpp"

namespace kriformer {

/// One multi-head attention block: per-head query/key/value projections of
/// shape D x (D/N_h), a D x D output map, and the layer-norm affine applied
/// after the residual connection.
struct AttentionBlockParams {
  std::vector<Tensor> wq;  // one D x (D/N_h) map per head
  std::vector<Tensor> wk;
  std::vector<Tensor> wv;
  Tensor wo;               // D x D
  Tensor ln_gamma, ln_beta;

  std::size_t heads() const { return wq.size(); }
};

/// Position-wise feed-forward parameters: two dense D x D layers with a ReLU
/// between them, then residual + layer norm.
struct FfnParams {
  Tensor w1, b1;
  Tensor w2, b2;
  Tensor ln_gamma, ln_beta;
};

/// Inverted dropout: keep probability 1-p, kept entries scaled by 1/(1-p).
/// A null rng disables dropout (evaluation mode).
struct DropoutCtx {
  double p = 0.0;
  Rng* rng = nullptr;

  bool enabled() const { return rng != nullptr && p > 0.0; }
};

Tensor apply_dropout(const Tensor& x, const DropoutCtx& ctx);

// softmax(Q K^T / sqrt(d') + mask) V over the last two axes; leading axes are
// batch. Every output row is a convex combination of V rows.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor& additive_mask = {});

// Multi-head temporal self-attention: each node attends over its own T steps.
// Input and output are T x N x D; residual + layer norm included.
Tensor mta(const Tensor& h, const AttentionBlockParams& params,
           const DropoutCtx& dropout = {});

// Multi-head spatial self-attention per time step with an additive N x N
// mask inside the softmax.
Tensor msa(const Tensor& h, const Tensor& spatial_mask,
           const AttentionBlockParams& params, const DropoutCtx& dropout = {});

// Cross attention over nodes: queries from the decoder state, keys/values
// from the encoder output. No spatial mask.
Tensor msia(const Tensor& h_dec, const Tensor& h_enc,
            const AttentionBlockParams& params, const DropoutCtx& dropout = {});

// LayerNorm(H + ReLU(H W1 + b1) W2 + b2) applied per (t, i) position;
// dropout hits the hidden activation.
Tensor ffn(const Tensor& h, const FfnParams& params,
           const DropoutCtx& dropout = {});

}  // namespace kriformer
