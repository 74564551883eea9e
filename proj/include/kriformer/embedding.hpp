#pragma once

#include <string>

#include "kriformer/tensor.hpp"

namespace kriformer {

enum class MergeMode { add, concat, multiply };

MergeMode merge_mode_from_string(const std::string& name);
std::string merge_mode_name(MergeMode mode);

/// Spatiotemporal embedding configuration plus its learnable projections.
/// se_* maps raw eigenmap features (k wide) to model width; ste_* maps the
/// coupled embedding back to model width (input width 2D under concat).
struct STEConfig {
  std::size_t model_dim = 0;  // D
  std::size_t eigen_dim = 0;  // k
  MergeMode merge_mode = MergeMode::add;
  Tensor se_weight;   // k x D
  Tensor se_bias;     // D
  Tensor ste_weight;  // D x D, or 2D x D under concat
  Tensor ste_bias;    // D
};

// Sinusoidal position table: row t holds sin(t / 10000^{2d/D}) at even
// columns and cos of the same argument at odd columns. Node-independent.
// D must be even.
Tensor temporal_embedding(std::size_t timesteps, std::size_t model_dim);

// SE = SE_raw * W + b (differentiable in W, b).
Tensor project_spatial(const Tensor& se_raw, const STEConfig& config);

// Broadcasts TE over nodes and SE over time, couples per merge_mode, and
// applies the ste projection. Output is T x N x D.
Tensor merge_ste(const Tensor& te, const Tensor& se, const STEConfig& config);

}  // namespace kriformer
