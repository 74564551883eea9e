#pragma once

#include <cstdint>
#include <vector>

#include "kriformer/dataset.hpp"
#include "kriformer/model.hpp"
#include "kriformer/rng.hpp"
#include "kriformer/tensor.hpp"

namespace kriformer {

/// Disjoint node partition for one training iteration: unmasked observed,
/// masked observed (the supervision targets), and truly unobserved nodes.
struct MaskSpec {
  std::vector<std::size_t> unmasked_observed;
  std::vector<std::size_t> masked_observed;
  std::vector<std::size_t> unobserved;
};

// Uniform random subset of the observed nodes of size
// floor(ratio * |observed|), at least one node whenever ratio > 0.
MaskSpec sample_mask(const std::vector<std::size_t>& observed,
                     const std::vector<std::size_t>& unobserved, double ratio,
                     Rng& rng);

// Zeroes the full time series of every masked-observed and unobserved node.
Tensor apply_mask(const Tensor& x, const MaskSpec& spec);

struct NormStats {
  NormStats() = default;
  NormStats(double mean, double std);
  double mean = 0.0;
  double std = 1.0;
};

// Statistics over observed, non-missing entries of time steps [t_begin, t_end).
NormStats compute_norm_stats(const SpeedTensor& speeds, std::size_t t_begin,
                             std::size_t t_end,
                             const std::vector<std::size_t>& observed);

// (x - mean) / std elementwise; missing-flagged entries pass through.
SpeedTensor standardize(const SpeedTensor& x, const NormStats& stats);
SpeedTensor destandardize(const SpeedTensor& x, const NormStats& stats);

// Squared-error loss over observed-node entries (both masked-observed and
// unmasked-observed) that are not missing; unobserved nodes never count.
// Mean-reduced by default; sum_reduction restores the plain summed form.
Tensor reconstruction_loss(const Tensor& pred, const Tensor& truth,
                           const MaskSpec& spec,
                           const std::vector<std::uint8_t>& missing,
                           bool sum_reduction = false);

struct OptimizerState {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m;  // first moments, one per parameter
  std::vector<std::vector<double>> v;  // second moments
};

// Bias-corrected Adam update in place; parameters without gradients are
// treated as zero-gradient.
void adam_step(std::vector<Tensor>& params, OptimizerState& state);

struct FitConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  std::size_t window = 24;
  std::size_t stride = 0;  // 0 means non-overlapping (stride = window)
  double mask_ratio = 0.3;
  double lr = 0.001;
  bool literal_sum_loss = false;
  double train_fraction = 0.7;  // leading share of the timeline used to train
  std::vector<std::size_t> unobserved;  // permanently sensor-less nodes
};

struct FitResult {
  std::vector<double> loss_history;  // one entry per iteration
};

// Random-masking training loop: per iteration draw a window batch, mask a
// fresh node subset per window, minimize the reconstruction loss with Adam.
// Captures normalization statistics on the model. Deterministic under rng.
FitResult fit(KriformerModel& model, const DatasetBundle& data,
              const FitConfig& cfg, Rng& rng);

// standardize -> forward (dropout off) -> destandardize. x_obs is raw scale
// with zeroed unobserved slices; missing may be empty when nothing is absent.
Tensor krige(const KriformerModel& model, const Tensor& x_obs,
             const std::vector<std::size_t>& unobserved,
             const std::vector<std::uint8_t>& missing = {});

// Max relative error between analytic and central-finite-difference gradients
// of the reconstruction loss through a fixed tiny model (N=6, T=8, D=8,
// 2 heads, one encoder and one decoder layer, dropout off).
double tiny_model_grad_check();

}  // namespace kriformer
