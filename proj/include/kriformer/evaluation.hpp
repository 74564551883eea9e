#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "kriformer/dataset.hpp"
#include "kriformer/model.hpp"
#include "kriformer/training.hpp"

namespace kriformer {

struct EvalReport {
  std::string scenario;
  double mask_ratio = 0.0;
  std::uint64_t seed = 0;
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;  // percent
  std::size_t nodes_evaluated = 0;
  std::size_t entries_evaluated = 0;
  double wall_seconds = 0.0;
};

// Pooled error metrics over entries where include != 0. MAPE additionally
// skips entries with |truth| < 1e-6 and is reported in percent.
double mae(const std::vector<double>& truth, const std::vector<double>& pred,
           const std::vector<std::uint8_t>& include);
double rmse(const std::vector<double>& truth, const std::vector<double>& pred,
            const std::vector<std::uint8_t>& include);
double mape(const std::vector<double>& truth, const std::vector<double>& pred,
            const std::vector<std::uint8_t>& include);

// Fills each unobserved node with the per-step mean of its k nearest observed
// neighbors by (symmetrized) road distance, skipping missing values. Fewer
// than k observed nodes means all of them are used. Returns a full T x N x C
// tensor; observed slices carry the input values.
Tensor knn_baseline(const SpeedTensor& x_obs, const SensorGraph& graph,
                    const std::vector<std::size_t>& unobserved, std::size_t k);

// Cross-sectional mean of the observed nodes per time step; an empty step
// carries the previous step's mean forward (error when the first is empty).
Tensor mean_baseline(const SpeedTensor& x_obs,
                     const std::vector<std::size_t>& unobserved);

// A predictor fills values for the listed pseudo-unobserved nodes of one
// window whose slices arrive zeroed.
using Predictor =
    std::function<Tensor(const SpeedTensor& window,
                         const std::vector<std::size_t>& pseudo_unobserved)>;

Predictor model_predictor(const KriformerModel& model);
Predictor knn_predictor(const SensorGraph& graph, std::size_t k);
Predictor mean_predictor();

struct SmOptions {
  std::size_t window = 24;
  double train_fraction = 0.7;  // evaluation owns the trailing remainder
};

// Holds out the trailing timeline share, hides a seed-fixed node subset of
// the given ratio in every test window, and pools Eq-style metrics over the
// hidden (non-missing) entries.
EvalReport evaluate_sm(const std::string& scenario, const Predictor& predictor,
                       const DatasetBundle& data, double ratio,
                       std::uint64_t seed, const SmOptions& opts = {});

// Per-ratio model training (caller-provided factory) evaluated under the
// standard 30% scenario; reports carry the training ratio.
using RatioModelFactory = std::function<KriformerModel(double ratio)>;
std::vector<EvalReport> mask_ratio_sweep(const RatioModelFactory& factory,
                                         const DatasetBundle& data,
                                         const std::vector<double>& ratios,
                                         std::uint64_t seed,
                                         const SmOptions& opts = {});

// Trains each variant with the caller-provided trainer and evaluates it
// under the 30% scenario.
using VariantTrainer = std::function<KriformerModel(const std::string& variant)>;
std::vector<EvalReport> ablation_suite(const VariantTrainer& trainer,
                                       const DatasetBundle& data,
                                       const std::vector<std::string>& variants,
                                       std::uint64_t seed,
                                       const SmOptions& opts = {});

// Stable serialization. Timing is excluded unless requested so repeated runs
// with one seed emit identical bytes.
std::string report_csv_header();
std::string report_csv_row(const EvalReport& report);
std::string report_json(const EvalReport& report, bool include_timing = false);

}  // namespace kriformer
