// Command-line front end: training, kriging, evaluation, sweeps, ablations,
// eigenmap export, and the gradient self-check.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric/training
// error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "kriformer/config.hpp"
#include "kriformer/errors.hpp"
#include "kriformer/evaluation.hpp"
#include "kriformer/model.hpp"
#include "kriformer/textio.hpp"
#include "kriformer/training.hpp"

namespace {

using namespace kriformer;

// Keeps the parameter-init stream and the training stream decorrelated while
// both stay functions of the one user-facing seed.
constexpr std::uint64_t kTrainStreamSalt = 0x517cc1b727220a95ull;

std::string loss_history_csv(const std::vector<double>& history) {
  std::string out = "iteration,loss\n";
  for (std::size_t i = 0; i < history.size(); ++i)
    out += std::to_string(i + 1) + ',' + fmt_double(history[i]) + '\n';
  return out;
}

KriformerModel train_once(const RunConfig& cfg, const DatasetBundle& bundle,
                          const std::string& variant, double mask_ratio,
                          std::vector<double>* history_out) {
  SpatialContext ctx = make_spatial_context(bundle.graph, cfg.model.eigen_dim,
                                            cfg.graph.literal_eq6);
  KriformerModel model = init_model(cfg.model, ctx, cfg.seed);
  model.ablation = ablation_from_name(variant);
  model.provenance_json = bundle.provenance_json;

  FitConfig fit_cfg = cfg.training;
  fit_cfg.mask_ratio = mask_ratio;
  fit_cfg.unobserved = resolve_node_ids(bundle, cfg.unobserved_ids);
  Rng rng(cfg.seed ^ kTrainStreamSalt);
  FitResult result = fit(model, bundle, fit_cfg, rng);
  if (history_out) *history_out = std::move(result.loss_history);
  return model;
}

struct TrainArgs {
  std::string config_path;
  bool synthetic = false;
  bool literal_eq6 = false;
  bool literal_sum_loss = false;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& args) {
  RunConfig cfg = load_config(args.config_path);
  if (args.seed) cfg.seed = *args.seed;
  if (args.literal_eq6) cfg.graph.literal_eq6 = true;
  if (args.literal_sum_loss) cfg.training.literal_sum_loss = true;

  DatasetBundle bundle = load_bundle(cfg, args.synthetic);
  std::vector<double> history;
  KriformerModel model;
  try {
    model = train_once(cfg, bundle, cfg.ablation, cfg.training.mask_ratio,
                       &history);
  } catch (const TrainingError& e) {
    atomic_write_file(cfg.output.loss_csv, loss_history_csv(e.loss_history));
    throw;
  }
  save_checkpoint(model, cfg.output.checkpoint);
  atomic_write_file(cfg.output.loss_csv, loss_history_csv(history));
  std::fprintf(stderr, "trained %zu iterations, final loss %s\n",
               history.size(),
               history.empty() ? "n/a" : fmt_double(history.back()).c_str());
  std::fprintf(stderr, "checkpoint: %s\nloss history: %s\n",
               cfg.output.checkpoint.c_str(), cfg.output.loss_csv.c_str());
  return 0;
}

struct KrigeArgs {
  std::string checkpoint, speeds, distances, unobserved_csv;
  std::string out = "predictions.csv";
  std::optional<double> missing_sentinel;
};

int run_krige(const KrigeArgs& args) {
  KriformerModel model = load_checkpoint(args.checkpoint);

  DatasetBundle bundle;
  std::vector<std::string> node_ids;
  bundle.speeds = load_speeds_csv(args.speeds, args.missing_sentinel,
                                  &bundle.timestamps, &node_ids);
  bundle.graph = load_distances_csv(args.distances, node_ids);
  if (graph_fingerprint(bundle.graph) != model.graph_fingerprint)
    throw DataError(
        "krige: the distances file does not match the graph this checkpoint "
        "was trained on");

  std::vector<std::string> ids;
  for (const std::string& id : split_csv_line(args.unobserved_csv))
    if (!id.empty()) ids.push_back(id);
  if (ids.empty()) throw ParamError("krige: --unobserved needs node ids");
  const std::vector<std::size_t> unobserved = resolve_node_ids(bundle, ids);

  std::size_t window = 24;
  if (!model.provenance_json.empty()) {
    const auto p = nlohmann::json::parse(model.provenance_json);
    window = p.value("window", window);
  }

  const SpeedTensor& speeds = bundle.speeds;
  const std::size_t n = speeds.nodes;
  std::string out = "timestamp,node,value\n";
  for (std::size_t t0 = 0; t0 < speeds.timesteps; t0 += window) {
    const std::size_t t_len = std::min(window, speeds.timesteps - t0);
    std::vector<double> values(t_len * n, 0.0);
    std::vector<std::uint8_t> missing(t_len * n, 0);
    std::vector<bool> hidden(n, false);
    for (std::size_t node : unobserved) hidden[node] = true;
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t idx = t * n + j;
        missing[idx] = speeds.missing[(t0 + t) * n + j];
        if (!hidden[j]) values[idx] = speeds.at(t0 + t, j);
      }
    Tensor pred = krige(model, Tensor::from_data({t_len, n, 1}, std::move(values)),
                        unobserved, missing);
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t node : unobserved)
        out += bundle.timestamps[t0 + t] + ',' + bundle.graph.node_ids[node] +
               ',' + fmt_double(pred.at({t, node, 0})) + '\n';
  }
  atomic_write_file(args.out, out);
  std::fprintf(stderr, "predictions: %s\n", args.out.c_str());
  return 0;
}

struct EvaluateArgs {
  std::string checkpoint, scenario, speeds, distances, config_path;
  std::string baseline;  // empty, "knn", or "mean"
  std::size_t knn_k = 3;
  std::uint64_t seed = 42;
  std::size_t window = 0;  // 0 resolves from provenance, then 24
  std::string out;
  bool timing = false;
  std::optional<double> missing_sentinel;
};

int run_evaluate(const EvaluateArgs& args) {
  double ratio = 0.0;
  if (args.scenario == "sm3") ratio = 0.3;
  else if (args.scenario == "sm5") ratio = 0.5;
  else if (args.scenario == "sm7") ratio = 0.7;
  else
    throw ParamError("evaluate: scenario must be sm3, sm5, or sm7");

  std::optional<KriformerModel> model;
  if (!args.checkpoint.empty()) model = load_checkpoint(args.checkpoint);
  if (args.baseline.empty() && !model)
    throw ParamError("evaluate: need --checkpoint or --baseline");

  DatasetBundle bundle;
  if (!args.speeds.empty() && !args.distances.empty()) {
    std::vector<std::string> node_ids;
    bundle.speeds = load_speeds_csv(args.speeds, args.missing_sentinel,
                                    &bundle.timestamps, &node_ids);
    bundle.graph = load_distances_csv(args.distances, node_ids);
  } else if (!args.config_path.empty()) {
    bundle = load_bundle(load_config(args.config_path), false);
  } else if (model) {
    bundle = bundle_from_provenance(model->provenance_json);
  } else {
    throw ParamError("evaluate: no dataset given (use --speeds/--distances or --config)");
  }

  SmOptions opts;
  opts.window = args.window;
  if (opts.window == 0 && model && !model->provenance_json.empty())
    opts.window = nlohmann::json::parse(model->provenance_json).value("window", 0);
  if (opts.window == 0) opts.window = 24;
  if (model && !model->provenance_json.empty())
    opts.train_fraction = nlohmann::json::parse(model->provenance_json)
                              .value("train_fraction", opts.train_fraction);

  Predictor predictor;
  std::string label = args.scenario;
  if (!args.baseline.empty()) {
    if (args.baseline == "knn")
      predictor = knn_predictor(bundle.graph, args.knn_k);
    else if (args.baseline == "mean")
      predictor = mean_predictor();
    else
      throw ParamError("evaluate: baseline must be 'knn' or 'mean'");
    label += "-" + args.baseline;
  } else {
    if (model->graph_fingerprint != graph_fingerprint(bundle.graph))
      throw DataError("evaluate: dataset graph differs from the checkpoint's");
    predictor = model_predictor(*model);
  }

  EvalReport report = evaluate_sm(label, predictor, bundle, ratio, args.seed, opts);
  const std::string prefix =
      args.out.empty() ? "report-" + label + "-" + std::to_string(args.seed)
                       : args.out;
  atomic_write_file(prefix + ".json", report_json(report, args.timing) + "\n");
  atomic_write_file(prefix + ".csv",
                    report_csv_header() + "\n" + report_csv_row(report) + "\n");
  std::printf("%s\n", report_csv_row(report).c_str());
  std::fprintf(stderr, "wall seconds: %s\nreports: %s.json %s.csv\n",
               fmt_double(report.wall_seconds).c_str(), prefix.c_str(),
               prefix.c_str());
  return 0;
}

struct SweepArgs {
  std::string config_path, ratios_csv;
  std::string out = "sweep.csv";
  bool synthetic = false;
  std::optional<std::uint64_t> seed;
};

int run_sweep(const SweepArgs& args) {
  RunConfig cfg = load_config(args.config_path);
  if (args.seed) cfg.seed = *args.seed;
  std::vector<double> ratios;
  for (const std::string& cell : split_csv_line(args.ratios_csv))
    if (!cell.empty()) ratios.push_back(std::stod(cell));
  if (ratios.empty()) throw ParamError("sweep-mask: --ratios needs values");

  DatasetBundle bundle = load_bundle(cfg, args.synthetic);
  SmOptions opts;
  opts.window = cfg.training.window;
  opts.train_fraction = cfg.training.train_fraction;
  auto factory = [&](double ratio) {
    std::fprintf(stderr, "training with mask ratio %s\n", fmt_double(ratio).c_str());
    return train_once(cfg, bundle, cfg.ablation, ratio, nullptr);
  };
  const auto reports = mask_ratio_sweep(factory, bundle, ratios, cfg.seed, opts);

  std::string csv = "ratio,mae,rmse,mape\n";
  for (const EvalReport& r : reports)
    csv += fmt_double(r.mask_ratio) + ',' + fmt_double(r.mae) + ',' +
           fmt_double(r.rmse) + ',' + fmt_double(r.mape) + '\n';
  atomic_write_file(args.out, csv);
  std::printf("%s", csv.c_str());
  return 0;
}

struct AblateArgs {
  std::string config_path;
  std::string variants = "all";
  std::string out = "ablation.csv";
  bool synthetic = false;
  std::optional<std::uint64_t> seed;
};

int run_ablate(const AblateArgs& args) {
  RunConfig cfg = load_config(args.config_path);
  if (args.seed) cfg.seed = *args.seed;
  std::vector<std::string> variants;
  if (args.variants == "all") {
    variants = ablation_variant_names();
    variants.push_back("none");
  } else {
    for (const std::string& name : split_csv_line(args.variants))
      if (!name.empty()) variants.push_back(name);
  }
  if (variants.empty()) throw ParamError("ablate: no variants requested");

  DatasetBundle bundle = load_bundle(cfg, args.synthetic);
  SmOptions opts;
  opts.window = cfg.training.window;
  opts.train_fraction = cfg.training.train_fraction;
  auto trainer = [&](const std::string& variant) {
    std::fprintf(stderr, "training variant %s\n", variant.c_str());
    return train_once(cfg, bundle, variant, cfg.training.mask_ratio, nullptr);
  };
  const auto reports = ablation_suite(trainer, bundle, variants, cfg.seed, opts);

  std::string csv = "variant,mae,rmse,mape\n";
  for (const EvalReport& r : reports)
    csv += r.scenario + ',' + fmt_double(r.mae) + ',' + fmt_double(r.rmse) +
           ',' + fmt_double(r.mape) + '\n';
  atomic_write_file(args.out, csv);
  std::printf("%s", csv.c_str());
  return 0;
}

struct EmbedArgs {
  std::string distances;
  std::size_t k = 0;
  std::string out = "eigenmap.csv";
  double epsilon = 0.1;
  double sigma = 0.0;
  bool literal_eq6 = false;
};

int run_embed(const EmbedArgs& args) {
  SensorGraph graph = load_distances_csv(args.distances);
  graph.epsilon = args.epsilon;
  graph.sigma = args.sigma;
  const std::size_t n = graph.size();
  const std::size_t k = args.k > 0 ? args.k : std::min<std::size_t>(16, n - 1);
  SpatialContext ctx = make_spatial_context(graph, k, args.literal_eq6);

  std::string csv = "node";
  for (std::size_t j = 1; j <= k; ++j) csv += ",v" + std::to_string(j);
  csv += '\n';
  for (std::size_t i = 0; i < n; ++i) {
    csv += graph.node_ids[i];
    for (std::size_t j = 0; j < k; ++j)
      csv += ',' + fmt_double(ctx.se_raw.at({i, j}));
    csv += '\n';
  }
  atomic_write_file(args.out, csv);
  std::printf("%s", csv.c_str());
  return 0;
}

int run_gradcheck() {
  const double err = tiny_model_grad_check();
  std::printf("max relative error: %s\n", fmt_double(err).c_str());
  if (!(err < 1e-5)) throw NumericError("gradcheck: error exceeds 1e-5");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kriformer: graph-transformer spatiotemporal kriging"};
  app.require_subcommand(1);

  TrainArgs train_args;
  CLI::App* train = app.add_subcommand("train", "train a model from a config");
  train->add_option("--config", train_args.config_path, "config JSON")->required();
  train->add_flag("--synthetic", train_args.synthetic,
                  "use the config's synthetic generator instead of CSV data");
  train->add_flag("--literal-eq6", train_args.literal_eq6,
                  "verbatim adjacency keep-condition d^2/sigma^2 > epsilon");
  train->add_flag("--literal-sum-loss", train_args.literal_sum_loss,
                  "summed (unnormalized) reconstruction loss");
  std::uint64_t train_seed = 0;
  CLI::Option* tso = train->add_option("--seed", train_seed, "override config seed");

  KrigeArgs krige_args;
  CLI::App* krige_cmd = app.add_subcommand("krige", "interpolate unobserved nodes");
  krige_cmd->add_option("--checkpoint", krige_args.checkpoint)->required();
  krige_cmd->add_option("--speeds", krige_args.speeds)->required();
  krige_cmd->add_option("--distances", krige_args.distances)->required();
  krige_cmd->add_option("--unobserved", krige_args.unobserved_csv,
                        "comma-separated node ids")->required();
  krige_cmd->add_option("--out", krige_args.out);
  double krige_sentinel = 0.0;
  CLI::Option* kso = krige_cmd->add_option("--missing-sentinel", krige_sentinel);

  EvaluateArgs eval_args;
  CLI::App* evaluate = app.add_subcommand("evaluate", "run an SM scenario");
  evaluate->add_option("--checkpoint", eval_args.checkpoint);
  evaluate->add_option("--scenario", eval_args.scenario, "sm3|sm5|sm7")->required();
  evaluate->add_option("--seed", eval_args.seed);
  evaluate->add_option("--speeds", eval_args.speeds);
  evaluate->add_option("--distances", eval_args.distances);
  evaluate->add_option("--config", eval_args.config_path,
                       "config JSON naming the dataset");
  evaluate->add_option("--baseline", eval_args.baseline, "knn|mean");
  evaluate->add_option("--knn-k", eval_args.knn_k);
  evaluate->add_option("--window", eval_args.window);
  evaluate->add_option("--out", eval_args.out, "report file prefix");
  evaluate->add_flag("--timing", eval_args.timing,
                     "include wall_seconds in the JSON report");
  double eval_sentinel = 0.0;
  CLI::Option* eso = evaluate->add_option("--missing-sentinel", eval_sentinel);

  SweepArgs sweep_args;
  CLI::App* sweep = app.add_subcommand("sweep-mask", "mask-ratio sensitivity");
  sweep->add_option("--config", sweep_args.config_path)->required();
  sweep->add_option("--ratios", sweep_args.ratios_csv, "comma-separated")->required();
  sweep->add_option("--out", sweep_args.out);
  sweep->add_flag("--synthetic", sweep_args.synthetic);
  std::uint64_t sweep_seed = 0;
  CLI::Option* sso = sweep->add_option("--seed", sweep_seed);

  AblateArgs ablate_args;
  CLI::App* ablate = app.add_subcommand("ablate", "train and compare variants");
  ablate->add_option("--config", ablate_args.config_path)->required();
  ablate->add_option("--variants", ablate_args.variants, "all or comma list");
  ablate->add_option("--out", ablate_args.out);
  ablate->add_flag("--synthetic", ablate_args.synthetic);
  std::uint64_t ablate_seed = 0;
  CLI::Option* aso = ablate->add_option("--seed", ablate_seed);

  EmbedArgs embed_args;
  CLI::App* embed = app.add_subcommand("embed", "export eigenmap features");
  embed->add_option("--distances", embed_args.distances)->required();
  embed->add_option("--k", embed_args.k, "embedding width (default min(16, N-1))");
  embed->add_option("--out", embed_args.out);
  embed->add_option("--epsilon", embed_args.epsilon);
  embed->add_option("--sigma", embed_args.sigma);
  embed->add_flag("--literal-eq6", embed_args.literal_eq6);

  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "verify analytic gradients on the tiny model");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) {
      if (*tso) train_args.seed = train_seed;
      return run_train(train_args);
    }
    if (krige_cmd->parsed()) {
      if (*kso) krige_args.missing_sentinel = krige_sentinel;
      return run_krige(krige_args);
    }
    if (evaluate->parsed()) {
      if (*eso) eval_args.missing_sentinel = eval_sentinel;
      return run_evaluate(eval_args);
    }
    if (sweep->parsed()) {
      if (*sso) sweep_args.seed = sweep_seed;
      return run_sweep(sweep_args);
    }
    if (ablate->parsed()) {
      if (*aso) ablate_args.seed = ablate_seed;
      return run_ablate(ablate_args);
    }
    if (embed->parsed()) return run_embed(embed_args);
    if (gradcheck->parsed()) return run_gradcheck();
  } catch (const ParamError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 1;
}
