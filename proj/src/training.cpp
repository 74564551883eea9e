#include "kriformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kriformer/errors.hpp"

namespace kriformer {

namespace {

void check_disjoint_sorted(std::vector<std::size_t>& v) {
  std::sort(v.begin(), v.end());
}

// Standardized T x N x 1 window; missing entries become zero so the model
// never sees raw sentinels.
Tensor window_tensor(const SpeedTensor& speeds, std::size_t t0,
                     std::size_t t_len, const NormStats& stats) {
  const std::size_t n = speeds.nodes;
  const std::size_t c = speeds.channels;
  std::vector<double> v(t_len * n * c, 0.0);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t ch = 0; ch < c; ++ch)
        if (!speeds.is_missing(t0 + t, j, ch))
          v[(t * n + j) * c + ch] =
              (speeds.at(t0 + t, j, ch) - stats.mean) / stats.std;
  return Tensor::from_data({t_len, n, c}, std::move(v));
}

std::vector<std::uint8_t> window_missing(const SpeedTensor& speeds,
                                         std::size_t t0, std::size_t t_len) {
  const std::size_t slab = speeds.nodes * speeds.channels;
  return std::vector<std::uint8_t>(speeds.missing.begin() + t0 * slab,
                                   speeds.missing.begin() + (t0 + t_len) * slab);
}

}  // namespace

MaskSpec sample_mask(const std::vector<std::size_t>& observed,
                     const std::vector<std::size_t>& unobserved, double ratio,
                     Rng& rng) {
  if (!(ratio >= 0.0 && ratio < 1.0))
    throw ParamError("sample_mask: ratio must lie in [0, 1)");
  std::size_t count =
      static_cast<std::size_t>(ratio * static_cast<double>(observed.size()));
  if (ratio > 0.0 && count == 0) count = 1;
  if (count > observed.size())
    throw ParamError("sample_mask: mask count exceeds the observed set");
  if (ratio > 0.0 && observed.empty())
    throw ParamError("sample_mask: cannot mask an empty observed set");

  // Partial Fisher-Yates: the first `count` slots become the masked set.
  std::vector<std::size_t> pool = observed;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + uniform_below(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  MaskSpec spec;
  spec.masked_observed.assign(pool.begin(), pool.begin() + count);
  spec.unmasked_observed.assign(pool.begin() + count, pool.end());
  spec.unobserved = unobserved;
  check_disjoint_sorted(spec.masked_observed);
  check_disjoint_sorted(spec.unmasked_observed);
  check_disjoint_sorted(spec.unobserved);
  return spec;
}

Tensor apply_mask(const Tensor& x, const MaskSpec& spec) {
  if (x.rank() != 3) throw ShapeError("apply_mask: input must be T x N x C");
  const std::size_t t_len = x.shape()[0];
  const std::size_t n = x.shape()[1];
  const std::size_t c = x.shape()[2];
  std::vector<double> v = x.values();
  auto zero_node = [&](std::size_t node) {
    if (node >= n) throw ShapeError("apply_mask: node index out of range");
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t ch = 0; ch < c; ++ch) v[(t * n + node) * c + ch] = 0.0;
  };
  for (std::size_t node : spec.masked_observed) zero_node(node);
  for (std::size_t node : spec.unobserved) zero_node(node);
  return Tensor::from_data(x.shape(), std::move(v));
}

NormStats::NormStats(double mean_, double std_) : mean(mean_), std(std_) {
  if (!(std > 0.0) || !std::isfinite(std) || !std::isfinite(mean))
    throw NumericError("NormStats: std must be positive and finite");
}

NormStats compute_norm_stats(const SpeedTensor& speeds, std::size_t t_begin,
                             std::size_t t_end,
                             const std::vector<std::size_t>& observed) {
  if (t_end > speeds.timesteps || t_begin >= t_end)
    throw ParamError("compute_norm_stats: bad time range");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t t = t_begin; t < t_end; ++t)
    for (std::size_t j : observed)
      for (std::size_t ch = 0; ch < speeds.channels; ++ch)
        if (!speeds.is_missing(t, j, ch)) {
          sum += speeds.at(t, j, ch);
          ++count;
        }
  if (count == 0)
    throw NumericError("compute_norm_stats: no usable entries");
  const double mean = sum / static_cast<double>(count);
  double var = 0.0;
  for (std::size_t t = t_begin; t < t_end; ++t)
    for (std::size_t j : observed)
      for (std::size_t ch = 0; ch < speeds.channels; ++ch)
        if (!speeds.is_missing(t, j, ch)) {
          const double d = speeds.at(t, j, ch) - mean;
          var += d * d;
        }
  var /= static_cast<double>(count);
  return NormStats(mean, std::sqrt(var));
}

SpeedTensor standardize(const SpeedTensor& x, const NormStats& stats) {
  SpeedTensor out = x;
  for (std::size_t i = 0; i < out.values.size(); ++i)
    if (!out.missing[i]) out.values[i] = (out.values[i] - stats.mean) / stats.std;
  return out;
}

SpeedTensor destandardize(const SpeedTensor& x, const NormStats& stats) {
  SpeedTensor out = x;
  for (std::size_t i = 0; i < out.values.size(); ++i)
    if (!out.missing[i]) out.values[i] = out.values[i] * stats.std + stats.mean;
  return out;
}

Tensor reconstruction_loss(const Tensor& pred, const Tensor& truth,
                           const MaskSpec& spec,
                           const std::vector<std::uint8_t>& missing,
                           bool sum_reduction) {
  if (pred.shape() != truth.shape())
    throw ShapeError("reconstruction_loss: shape mismatch " +
                     shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
  if (pred.rank() != 3)
    throw ShapeError("reconstruction_loss: inputs must be T x N x C");
  if (!missing.empty() && missing.size() != truth.numel())
    throw ShapeError("reconstruction_loss: missing mask size mismatch");

  const std::size_t t_len = pred.shape()[0];
  const std::size_t n = pred.shape()[1];
  const std::size_t c = pred.shape()[2];
  std::vector<double> weight(pred.numel(), 0.0);
  std::vector<bool> counted(n, false);
  for (std::size_t node : spec.unmasked_observed) counted[node] = true;
  for (std::size_t node : spec.masked_observed) counted[node] = true;
  std::size_t count = 0;
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t j = 0; j < n; ++j) {
      if (!counted[j]) continue;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t idx = (t * n + j) * c + ch;
        if (!missing.empty() && missing[idx]) continue;
        weight[idx] = 1.0;
        ++count;
      }
    }
  if (count == 0)
    throw NumericError("reconstruction_loss: no countable entries");

  Tensor diff = sub(pred, truth);
  Tensor weighted = mul(mul(diff, diff), Tensor::from_data(pred.shape(), std::move(weight)));
  Tensor total = sum_all(weighted);
  if (sum_reduction) return total;
  return scale(total, 1.0 / static_cast<double>(count));
}

void adam_step(std::vector<Tensor>& params, OptimizerState& state) {
  if (!(state.lr > 0.0)) throw ParamError("adam_step: lr must be positive");
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].numel(), 0.0);
      state.v[i].assign(params[i].numel(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw ParamError("adam_step: optimizer state does not match parameters");

  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& value = params[i].mutable_values();
    if (state.m[i].size() != value.size())
      throw ParamError("adam_step: moment buffer shape mismatch");
    const std::vector<double>& grad = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      if (std::isnan(g))
        throw TrainingError("adam_step: NaN gradient in parameter " +
                            std::to_string(i) + " element " + std::to_string(j));
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      value[j] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

FitResult fit(KriformerModel& model, const DatasetBundle& data,
              const FitConfig& cfg, Rng& rng) {
  if (cfg.batch_size < 1) throw ParamError("fit: batch_size must be >= 1");
  if (cfg.window < 1) throw ParamError("fit: window must be >= 1");
  if (cfg.epochs < 1) throw ParamError("fit: epochs must be >= 1");
  if (!(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0))
    throw ParamError("fit: train_fraction must lie in (0, 1]");
  const SpeedTensor& speeds = data.speeds;
  if (speeds.nodes != model.nodes())
    throw ShapeError("fit: dataset has " + std::to_string(speeds.nodes) +
                     " nodes, model expects " + std::to_string(model.nodes()));

  std::vector<bool> is_unobserved(speeds.nodes, false);
  for (std::size_t node : cfg.unobserved) {
    if (node >= speeds.nodes) throw ParamError("fit: unobserved index out of range");
    is_unobserved[node] = true;
  }
  std::vector<std::size_t> observed;
  for (std::size_t j = 0; j < speeds.nodes; ++j)
    if (!is_unobserved[j]) observed.push_back(j);
  if (observed.empty()) throw ParamError("fit: every node is unobserved");

  const std::size_t train_len = std::max<std::size_t>(
      cfg.window,
      static_cast<std::size_t>(cfg.train_fraction *
                               static_cast<double>(speeds.timesteps)));
  if (train_len > speeds.timesteps || cfg.window > train_len)
    throw DataError("fit: training span shorter than one window");

  const std::size_t stride = cfg.stride == 0 ? cfg.window : cfg.stride;
  std::vector<std::size_t> starts;
  for (std::size_t t0 = 0; t0 + cfg.window <= train_len; t0 += stride)
    starts.push_back(t0);

  const NormStats stats = compute_norm_stats(speeds, 0, train_len, observed);
  model.norm_mean = stats.mean;
  model.norm_std = stats.std;

  std::vector<Tensor> params = model.parameters();
  OptimizerState opt;
  opt.lr = cfg.lr;

  FitResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(starts.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i-- > 1;)
      std::swap(order[i], order[uniform_below(rng, i + 1)]);

    for (std::size_t pos = 0; pos < order.size(); pos += cfg.batch_size) {
      const std::size_t batch_end = std::min(pos + cfg.batch_size, order.size());
      const std::size_t batch = batch_end - pos;
      const std::size_t slab = cfg.window * speeds.nodes * speeds.channels;

      // Assemble the whole batch as one B x T x N x C pass: one tape walk
      // per iteration instead of one per window.
      std::vector<double> truth_v(batch * slab);
      std::vector<double> input_v(batch * slab);
      std::vector<double> weight_v(batch * slab, 0.0);
      std::size_t counted = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t t0 = starts[order[pos + b]];
        const MaskSpec spec =
            sample_mask(observed, cfg.unobserved, cfg.mask_ratio, rng);
        Tensor truth = window_tensor(speeds, t0, cfg.window, stats);
        Tensor input = apply_mask(truth, spec);
        std::copy(truth.values().begin(), truth.values().end(),
                  truth_v.begin() + b * slab);
        std::copy(input.values().begin(), input.values().end(),
                  input_v.begin() + b * slab);
        const auto missing = window_missing(speeds, t0, cfg.window);
        std::vector<bool> in_loss(speeds.nodes, false);
        for (std::size_t node : spec.unmasked_observed) in_loss[node] = true;
        for (std::size_t node : spec.masked_observed) in_loss[node] = true;
        for (std::size_t t = 0; t < cfg.window; ++t)
          for (std::size_t j = 0; j < speeds.nodes; ++j) {
            if (!in_loss[j]) continue;
            for (std::size_t ch = 0; ch < speeds.channels; ++ch) {
              const std::size_t idx = (t * speeds.nodes + j) * speeds.channels + ch;
              if (missing[idx]) continue;
              weight_v[b * slab + idx] = 1.0;
              ++counted;
            }
          }
      }
      if (counted == 0)
        throw NumericError("fit: no countable entries in the batch");
      const Shape batch_shape{batch, cfg.window, speeds.nodes, speeds.channels};

      GradTape tape;
      Tensor pred = forward(
          model, Tensor::from_data(batch_shape, std::move(input_v)), true, &rng);
      Tensor diff = sub(pred, Tensor::from_data(batch_shape, std::move(truth_v)));
      Tensor weighted = mul(mul(diff, diff),
                            Tensor::from_data(batch_shape, std::move(weight_v)));
      Tensor batch_loss = sum_all(weighted);
      if (!cfg.literal_sum_loss)
        batch_loss = scale(batch_loss, 1.0 / static_cast<double>(counted));

      const double loss_value = batch_loss.item();
      result.loss_history.push_back(loss_value);
      if (!std::isfinite(loss_value))
        throw TrainingError("fit: loss diverged at iteration " +
                                std::to_string(result.loss_history.size()),
                            result.loss_history);

      for (Tensor& p : params) p.zero_grad();
      tape.backward(batch_loss);
      adam_step(params, opt);
    }
  }
  return result;
}

double tiny_model_grad_check() {
  const std::size_t n = 6, t_len = 8;
  std::vector<double> dist(n * n, std::numeric_limits<double>::infinity());
  Rng rng(1234);
  for (std::size_t i = 0; i < n; ++i) {
    dist[i * n + i] = 0.0;
    const std::size_t j = (i + 1) % n;
    const double d = uniform_range(rng, 0.6, 1.4);
    dist[i * n + j] = d;
    dist[j * n + i] = d;
  }
  dist[0 * n + 3] = dist[3 * n + 0] = 1.1;
  SensorGraph graph;
  for (std::size_t i = 0; i < n; ++i) graph.node_ids.push_back("g" + std::to_string(i));
  graph.distances = Tensor::from_data({n, n}, std::move(dist));
  graph.sigma = 1.0;
  graph.epsilon = 0.05;

  ModelHyper hyper;
  hyper.model_dim = 8;
  hyper.heads = 2;
  hyper.encoder_layers = 1;
  hyper.decoder_layers = 1;
  hyper.dropout = 0.0;
  KriformerModel model = init_model(hyper, make_spatial_context(graph), 97);

  std::vector<double> window(t_len * n);
  for (double& v : window) v = uniform_range(rng, -1.2, 1.2);
  Tensor truth = Tensor::from_data({t_len, n, 1}, std::move(window));
  std::vector<std::size_t> observed(n);
  std::iota(observed.begin(), observed.end(), 0);
  const MaskSpec spec = sample_mask(observed, {}, 0.3, rng);
  Tensor input = apply_mask(truth, spec);

  auto f = [&]() {
    Tensor pred = forward(model, input, false);
    return reconstruction_loss(pred, truth, spec, {});
  };
  return grad_check(f, model.parameters());
}

Tensor krige(const KriformerModel& model, const Tensor& x_obs,
             const std::vector<std::size_t>& unobserved,
             const std::vector<std::uint8_t>& missing) {
  if (x_obs.rank() != 3) throw ShapeError("krige: input must be T x N x C");
  if (!missing.empty() && missing.size() != x_obs.numel())
    throw ShapeError("krige: missing mask size mismatch");
  const std::size_t t_len = x_obs.shape()[0];
  const std::size_t n = x_obs.shape()[1];
  const std::size_t c = x_obs.shape()[2];

  std::vector<bool> hidden(n, false);
  for (std::size_t node : unobserved) {
    if (node >= n) throw ParamError("krige: unobserved index out of range");
    hidden[node] = true;
  }
  // Contract: callers hand over zeroed slices for unobserved nodes, so the
  // ground truth can never leak in through this path.
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t j = 0; j < n; ++j)
      if (hidden[j])
        for (std::size_t ch = 0; ch < c; ++ch)
          if (x_obs.at({t, j, ch}) != 0.0)
            throw ParamError("krige: unobserved slices must be zeroed");

  std::vector<double> v(x_obs.numel(), 0.0);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t idx = (t * n + j) * c + ch;
        if (hidden[j] || (!missing.empty() && missing[idx])) continue;
        v[idx] = (x_obs.values()[idx] - model.norm_mean) / model.norm_std;
      }
  Tensor pred = forward(model, Tensor::from_data(x_obs.shape(), std::move(v)), false);
  std::vector<double> out(pred.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = pred.values()[i] * model.norm_std + model.norm_mean;
  return Tensor::from_data(pred.shape(), std::move(out));
}

}  // namespace kriformer
