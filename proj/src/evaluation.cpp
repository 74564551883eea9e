#include "kriformer/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "kriformer/errors.hpp"
#include "kriformer/textio.hpp"

namespace kriformer {

namespace {

void check_metric_inputs(const std::vector<double>& truth,
                         const std::vector<double>& pred,
                         const std::vector<std::uint8_t>& include) {
  if (truth.size() != pred.size() || truth.size() != include.size())
    throw ShapeError("metrics: truth/pred/include sizes differ");
  for (std::uint8_t v : include)
    if (v) return;
  throw ParamError("metrics: empty include set");
}

SpeedTensor window_of(const SpeedTensor& speeds, std::size_t t0,
                      std::size_t t_len) {
  SpeedTensor w;
  w.timesteps = t_len;
  w.nodes = speeds.nodes;
  w.channels = speeds.channels;
  const std::size_t slab = speeds.nodes * speeds.channels;
  w.values.assign(speeds.values.begin() + t0 * slab,
                  speeds.values.begin() + (t0 + t_len) * slab);
  w.missing.assign(speeds.missing.begin() + t0 * slab,
                   speeds.missing.begin() + (t0 + t_len) * slab);
  return w;
}

}  // namespace

double mae(const std::vector<double>& truth, const std::vector<double>& pred,
           const std::vector<std::uint8_t>& include) {
  check_metric_inputs(truth, pred, include);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (include[i]) {
      sum += std::fabs(truth[i] - pred[i]);
      ++count;
    }
  return sum / static_cast<double>(count);
}

double rmse(const std::vector<double>& truth, const std::vector<double>& pred,
            const std::vector<std::uint8_t>& include) {
  check_metric_inputs(truth, pred, include);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (include[i]) {
      const double d = truth[i] - pred[i];
      sum += d * d;
      ++count;
    }
  return std::sqrt(sum / static_cast<double>(count));
}

double mape(const std::vector<double>& truth, const std::vector<double>& pred,
            const std::vector<std::uint8_t>& include) {
  check_metric_inputs(truth, pred, include);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!include[i] || std::fabs(truth[i]) < 1e-6) continue;
    sum += std::fabs((truth[i] - pred[i]) / truth[i]);
    ++count;
  }
  if (count == 0)
    throw NumericError("mape: every included entry has |truth| < 1e-6");
  return 100.0 * sum / static_cast<double>(count);
}

Tensor knn_baseline(const SpeedTensor& x_obs, const SensorGraph& graph,
                    const std::vector<std::size_t>& unobserved, std::size_t k) {
  if (k < 1) throw ParamError("knn_baseline: k must be >= 1");
  const std::size_t n = x_obs.nodes;
  if (graph.size() != n)
    throw ShapeError("knn_baseline: graph and observations disagree on N");
  std::vector<bool> hidden(n, false);
  for (std::size_t node : unobserved) {
    if (node >= n) throw ParamError("knn_baseline: node index out of range");
    hidden[node] = true;
  }
  std::vector<std::size_t> observed;
  for (std::size_t j = 0; j < n; ++j)
    if (!hidden[j]) observed.push_back(j);
  if (observed.empty()) throw ParamError("knn_baseline: no observed nodes");

  std::vector<double> out = x_obs.values;
  const auto& dist = graph.distances.values();
  for (std::size_t target : unobserved) {
    // Nearest observed nodes by symmetrized road distance; ties break on the
    // lower node index so relabeling-invariant inputs stay deterministic.
    std::vector<std::size_t> order = observed;
    auto dist_to = [&](std::size_t j) {
      return std::min(dist[target * n + j], dist[j * n + target]);
    };
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) {
                       const double da = dist_to(a);
                       const double db = dist_to(b);
                       if (da != db) return da < db;
                       return a < b;
                     });
    const std::size_t take = std::min(k, order.size());
    order.resize(take);

    double carry = 0.0;
    bool have_carry = false;
    for (std::size_t t = 0; t < x_obs.timesteps; ++t) {
      double sum = 0.0;
      std::size_t count = 0;
      for (std::size_t j : order)
        if (!x_obs.is_missing(t, j)) {
          sum += x_obs.at(t, j);
          ++count;
        }
      if (count == 0) {
        // All k neighbors missing: widen to every observed node.
        for (std::size_t j : observed)
          if (!x_obs.is_missing(t, j)) {
            sum += x_obs.at(t, j);
            ++count;
          }
      }
      double value;
      if (count > 0) {
        value = sum / static_cast<double>(count);
      } else if (have_carry) {
        value = carry;
      } else {
        throw DataError("knn_baseline: no observed values at the first step");
      }
      carry = value;
      have_carry = true;
      for (std::size_t c = 0; c < x_obs.channels; ++c)
        out[x_obs.index(t, target, c)] = value;
    }
  }
  return Tensor::from_data({x_obs.timesteps, n, x_obs.channels}, std::move(out));
}

Tensor mean_baseline(const SpeedTensor& x_obs,
                     const std::vector<std::size_t>& unobserved) {
  const std::size_t n = x_obs.nodes;
  std::vector<bool> hidden(n, false);
  for (std::size_t node : unobserved) {
    if (node >= n) throw ParamError("mean_baseline: node index out of range");
    hidden[node] = true;
  }
  std::vector<double> out = x_obs.values;
  double carry = 0.0;
  bool have_carry = false;
  for (std::size_t t = 0; t < x_obs.timesteps; ++t) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (!hidden[j] && !x_obs.is_missing(t, j)) {
        sum += x_obs.at(t, j);
        ++count;
      }
    double value;
    if (count > 0) {
      value = sum / static_cast<double>(count);
    } else if (have_carry) {
      value = carry;
    } else {
      throw DataError("mean_baseline: no observed values at the first step");
    }
    carry = value;
    have_carry = true;
    for (std::size_t j = 0; j < n; ++j)
      if (hidden[j])
        for (std::size_t c = 0; c < x_obs.channels; ++c)
          out[x_obs.index(t, j, c)] = value;
  }
  return Tensor::from_data({x_obs.timesteps, n, x_obs.channels}, std::move(out));
}

Predictor model_predictor(const KriformerModel& model) {
  return [&model](const SpeedTensor& window,
                  const std::vector<std::size_t>& pseudo) {
    Tensor x = Tensor::from_data({window.timesteps, window.nodes, window.channels},
                                 window.values);
    return krige(model, x, pseudo, window.missing);
  };
}

Predictor knn_predictor(const SensorGraph& graph, std::size_t k) {
  return [&graph, k](const SpeedTensor& window,
                     const std::vector<std::size_t>& pseudo) {
    return knn_baseline(window, graph, pseudo, k);
  };
}

Predictor mean_predictor() {
  return [](const SpeedTensor& window, const std::vector<std::size_t>& pseudo) {
    return mean_baseline(window, pseudo);
  };
}

EvalReport evaluate_sm(const std::string& scenario, const Predictor& predictor,
                       const DatasetBundle& data, double ratio,
                       std::uint64_t seed, const SmOptions& opts) {
  if (!(ratio > 0.0 && ratio < 1.0))
    throw ParamError("evaluate_sm: ratio must lie in (0, 1)");
  const SpeedTensor& speeds = data.speeds;
  const std::size_t n = speeds.nodes;
  const std::size_t count = static_cast<std::size_t>(ratio * static_cast<double>(n));
  if (count == 0)
    throw ParamError("evaluate_sm: ratio leaves zero pseudo-unobserved nodes");

  // One fixed pseudo-unobserved subset per (scenario, seed): these stand in
  // for permanently sensor-less sites.
  Rng rng(seed);
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + uniform_below(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  std::vector<std::size_t> pseudo(pool.begin(), pool.begin() + count);
  std::sort(pseudo.begin(), pseudo.end());
  std::vector<bool> hidden(n, false);
  for (std::size_t node : pseudo) hidden[node] = true;

  const std::size_t train_len = static_cast<std::size_t>(
      opts.train_fraction * static_cast<double>(speeds.timesteps));
  if (train_len + opts.window > speeds.timesteps)
    throw DataError("evaluate_sm: test span shorter than one window");

  const auto started = std::chrono::steady_clock::now();
  std::vector<double> truth_pool, pred_pool;
  std::vector<std::uint8_t> include_pool;
  for (std::size_t t0 = train_len; t0 + opts.window <= speeds.timesteps;
       t0 += opts.window) {
    SpeedTensor window = window_of(speeds, t0, opts.window);
    SpeedTensor masked = window;
    for (std::size_t t = 0; t < opts.window; ++t)
      for (std::size_t j : pseudo)
        for (std::size_t c = 0; c < window.channels; ++c)
          masked.values[masked.index(t, j, c)] = 0.0;
    // The predictor must never see ground truth for hidden nodes.
    for (std::size_t t = 0; t < opts.window; ++t)
      for (std::size_t j : pseudo)
        for (std::size_t c = 0; c < window.channels; ++c)
          if (masked.at(t, j, c) != 0.0)
            throw NumericError("evaluate_sm: input not zeroed before forward");

    Tensor pred = predictor(masked, pseudo);
    if (pred.shape() !=
        Shape{window.timesteps, window.nodes, window.channels})
      throw ShapeError("evaluate_sm: predictor returned a wrong shape");
    for (std::size_t t = 0; t < opts.window; ++t)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t c = 0; c < window.channels; ++c) {
          if (!hidden[j]) continue;
          truth_pool.push_back(window.at(t, j, c));
          pred_pool.push_back(pred.at({t, j, c}));
          include_pool.push_back(window.is_missing(t, j, c) ? 0 : 1);
        }
  }

  EvalReport report;
  report.scenario = scenario;
  report.mask_ratio = ratio;
  report.seed = seed;
  report.mae = mae(truth_pool, pred_pool, include_pool);
  report.rmse = rmse(truth_pool, pred_pool, include_pool);
  report.mape = mape(truth_pool, pred_pool, include_pool);
  report.nodes_evaluated = pseudo.size();
  report.entries_evaluated = static_cast<std::size_t>(
      std::count(include_pool.begin(), include_pool.end(), 1));
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started)
          .count();
  return report;
}

std::vector<EvalReport> mask_ratio_sweep(const RatioModelFactory& factory,
                                         const DatasetBundle& data,
                                         const std::vector<double>& ratios,
                                         std::uint64_t seed,
                                         const SmOptions& opts) {
  for (double r : ratios)
    if (!(r > 0.0 && r < 1.0))
      throw ParamError("mask_ratio_sweep: ratios must lie in (0, 1)");
  std::vector<EvalReport> reports;
  for (double r : ratios) {
    KriformerModel model = factory(r);
    EvalReport report = evaluate_sm("sweep", model_predictor(model), data, 0.3,
                                    seed, opts);
    report.mask_ratio = r;  // the swept training ratio
    reports.push_back(std::move(report));
  }
  return reports;
}

std::vector<EvalReport> ablation_suite(const VariantTrainer& trainer,
                                       const DatasetBundle& data,
                                       const std::vector<std::string>& variants,
                                       std::uint64_t seed,
                                       const SmOptions& opts) {
  std::vector<EvalReport> reports;
  for (const std::string& variant : variants) {
    (void)ablation_from_name(variant);  // validate before the expensive train
    KriformerModel model = trainer(variant);
    EvalReport report = evaluate_sm(variant, model_predictor(model), data, 0.3,
                                    seed, opts);
    reports.push_back(std::move(report));
  }
  return reports;
}

std::string report_csv_header() {
  return "scenario,mask_ratio,seed,mae,rmse,mape,nodes_evaluated,entries_evaluated";
}

std::string report_csv_row(const EvalReport& r) {
  return r.scenario + ',' + fmt_double(r.mask_ratio) + ',' +
         std::to_string(r.seed) + ',' + fmt_double(r.mae) + ',' +
         fmt_double(r.rmse) + ',' + fmt_double(r.mape) + ',' +
         std::to_string(r.nodes_evaluated) + ',' +
         std::to_string(r.entries_evaluated);
}

std::string report_json(const EvalReport& r, bool include_timing) {
  nlohmann::json j;
  j["scenario"] = r.scenario;
  j["mask_ratio"] = r.mask_ratio;
  j["seed"] = r.seed;
  j["mae"] = r.mae;
  j["rmse"] = r.rmse;
  j["mape"] = r.mape;
  j["nodes_evaluated"] = r.nodes_evaluated;
  j["entries_evaluated"] = r.entries_evaluated;
  if (include_timing) j["wall_seconds"] = r.wall_seconds;
  return j.dump(2);
}

}  // namespace kriformer
