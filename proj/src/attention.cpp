#include "kriformer/attention.hpp"

#include <cmath>

#include "kriformer/errors.hpp"

namespace kriformer {

namespace {

void check_block(const Tensor& h, const AttentionBlockParams& params,
                 const char* op) {
  if (h.rank() < 3)
    throw ShapeError(std::string(op) + ": input must be [..,] T x N x D, got " +
                     shape_str(h.shape()));
  const std::size_t d = h.shape().back();
  const std::size_t n_heads = params.heads();
  if (n_heads == 0 || params.wk.size() != n_heads || params.wv.size() != n_heads)
    throw ParamError(std::string(op) + ": inconsistent head parameters");
  if (d % n_heads != 0)
    throw ParamError(std::string(op) + ": head count " +
                     std::to_string(n_heads) + " does not divide width " +
                     std::to_string(d));
  const Shape head_shape{d, d / n_heads};
  for (std::size_t i = 0; i < n_heads; ++i)
    if (params.wq[i].shape() != head_shape || params.wk[i].shape() != head_shape ||
        params.wv[i].shape() != head_shape)
      throw ShapeError(std::string(op) + ": per-head projections must be " +
                       shape_str(head_shape));
  if (params.wo.shape() != Shape{d, d})
    throw ShapeError(std::string(op) + ": output map must be D x D");
}

// Shared multi-head core over [B, S, D] inputs: queries from q_src, keys and
// values from kv_src. The per-head maps are concatenated so the projections
// run as single D x D matmuls; columns of the fused product are bitwise equal
// to the per-head products, and split_heads recovers the head layout.
Tensor multi_head(const Tensor& q_src, const Tensor& kv_src,
                  const AttentionBlockParams& params, const Tensor& mask) {
  const std::size_t n_heads = params.heads();
  Tensor q = split_heads(matmul(q_src, concat_lastdim(params.wq)), n_heads);
  Tensor k = split_heads(matmul(kv_src, concat_lastdim(params.wk)), n_heads);
  Tensor v = split_heads(matmul(kv_src, concat_lastdim(params.wv)), n_heads);
  Tensor heads = scaled_dot_attention(q, k, v, mask);
  return matmul(concat_heads(heads), params.wo);
}

}  // namespace

Tensor apply_dropout(const Tensor& x, const DropoutCtx& ctx) {
  if (!ctx.enabled()) return x;
  if (!(ctx.p >= 0.0 && ctx.p < 1.0))
    throw ParamError("dropout probability must lie in [0, 1)");
  const double keep = 1.0 - ctx.p;
  std::vector<double> mask(x.numel());
  for (double& m : mask)
    m = uniform_unit(*ctx.rng) < ctx.p ? 0.0 : 1.0 / keep;
  return mul(x, Tensor::from_data(x.shape(), std::move(mask)));
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor& additive_mask) {
  if (q.rank() < 2 || k.rank() < 2 || v.rank() < 2)
    throw ShapeError("scaled_dot_attention: rank >= 2 inputs required");
  const std::size_t d = q.shape().back();
  if (d == 0) throw ShapeError("scaled_dot_attention: zero feature width");
  if (k.shape().back() != d)
    throw ShapeError("scaled_dot_attention: query/key widths differ");
  if (v.shape()[v.rank() - 2] != k.shape()[k.rank() - 2])
    throw ShapeError("scaled_dot_attention: key/value lengths differ");
  Tensor scores = scale(matmul(q, transpose_last2(k)),
                        1.0 / std::sqrt(static_cast<double>(d)));
  Tensor weights = additive_mask.defined()
                       ? softmax_lastdim(scores, additive_mask)
                       : softmax_lastdim(scores);
  return matmul(weights, v);
}

Tensor mta(const Tensor& h, const AttentionBlockParams& params,
           const DropoutCtx& dropout) {
  check_block(h, params, "mta");
  // Batch over nodes so each node's T steps form one attention sequence:
  // swap the time and node axes (the two before the feature axis).
  std::vector<std::size_t> axes(h.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  std::swap(axes[h.rank() - 3], axes[h.rank() - 2]);
  Tensor by_node = permute(h, axes);
  Tensor attended = multi_head(by_node, by_node, params, {});
  Tensor out = permute(attended, axes);
  out = apply_dropout(out, dropout);
  return layer_norm(add(h, out), params.ln_gamma, params.ln_beta);
}

Tensor msa(const Tensor& h, const Tensor& spatial_mask,
           const AttentionBlockParams& params, const DropoutCtx& dropout) {
  check_block(h, params, "msa");
  const std::size_t n = h.shape()[h.rank() - 2];
  if (spatial_mask.shape() != Shape{n, n})
    throw ShapeError("msa: spatial mask must be N x N, got " +
                     shape_str(spatial_mask.shape()));
  Tensor attended = multi_head(h, h, params, spatial_mask);
  attended = apply_dropout(attended, dropout);
  return layer_norm(add(h, attended), params.ln_gamma, params.ln_beta);
}

Tensor msia(const Tensor& h_dec, const Tensor& h_enc,
            const AttentionBlockParams& params, const DropoutCtx& dropout) {
  check_block(h_dec, params, "msia");
  if (h_enc.shape() != h_dec.shape())
    throw ShapeError("msia: encoder/decoder shapes differ, " +
                     shape_str(h_enc.shape()) + " vs " +
                     shape_str(h_dec.shape()));
  Tensor attended = multi_head(h_dec, h_enc, params, {});
  attended = apply_dropout(attended, dropout);
  return layer_norm(add(h_dec, attended), params.ln_gamma, params.ln_beta);
}

Tensor ffn(const Tensor& h, const FfnParams& params, const DropoutCtx& dropout) {
  if (h.rank() < 1) throw ShapeError("ffn: rank >= 1 input required");
  Tensor hidden = relu(add(matmul(h, params.w1), params.b1));
  hidden = apply_dropout(hidden, dropout);
  Tensor out = add(matmul(hidden, params.w2), params.b2);
  return layer_norm(add(h, out), params.ln_gamma, params.ln_beta);
}

}  // namespace kriformer
