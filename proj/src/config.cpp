#include "kriformer/config.hpp"

#include <algorithm>

#include "json.hpp"
#include "kriformer/errors.hpp"
#include "kriformer/textio.hpp"

namespace kriformer {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, const std::vector<std::string>& known,
                    const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ParamError("config: unknown key '" + where + it.key() + "'");
}

template <typename T>
void read_into(const json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ParamError(std::string("config: bad value for '") + key + "'");
  }
}

SyntheticParams parse_synthetic(const json& obj) {
  reject_unknown(obj,
                 {"nodes", "timesteps", "radius", "alpha", "amplitude",
                  "period", "noise_std", "base_speed"},
                 "data.synthetic.");
  SyntheticParams p;
  read_into(obj, "nodes", p.nodes);
  read_into(obj, "timesteps", p.timesteps);
  read_into(obj, "radius", p.radius);
  read_into(obj, "alpha", p.alpha);
  read_into(obj, "amplitude", p.amplitude);
  read_into(obj, "period", p.period);
  read_into(obj, "noise_std", p.noise_std);
  read_into(obj, "base_speed", p.base_speed);
  return p;
}

json synthetic_json(const SyntheticParams& p) {
  return json{{"nodes", p.nodes},         {"timesteps", p.timesteps},
              {"radius", p.radius},       {"alpha", p.alpha},
              {"amplitude", p.amplitude}, {"period", p.period},
              {"noise_std", p.noise_std}, {"base_speed", p.base_speed}};
}

void validate(const RunConfig& cfg) {
  const ModelHyper& m = cfg.model;
  if (m.model_dim == 0 || m.model_dim % 2 != 0)
    throw ParamError("config: model_dim must be positive and even");
  if (m.heads == 0 || m.model_dim % m.heads != 0)
    throw ParamError("config: heads must divide model_dim");
  if (m.encoder_layers < 1 || m.decoder_layers < 1)
    throw ParamError("config: encoder_layers and decoder_layers must be >= 1");
  if (!(m.dropout >= 0.0 && m.dropout < 1.0))
    throw ParamError("config: dropout must lie in [0, 1)");
  if (m.channels == 0) throw ParamError("config: channels must be positive");
  (void)ablation_from_name(cfg.ablation);
  if (!(cfg.graph.epsilon >= 0.0 && cfg.graph.epsilon < 1.0))
    throw ParamError("config: graph.epsilon must lie in [0, 1)");
  if (cfg.graph.sigma < 0.0)
    throw ParamError("config: graph.sigma must be non-negative");
  const FitConfig& t = cfg.training;
  if (t.epochs < 1) throw ParamError("config: training.epochs must be >= 1");
  if (t.batch_size < 1) throw ParamError("config: training.batch_size must be >= 1");
  if (t.window < 1) throw ParamError("config: training.window must be >= 1");
  if (!(t.mask_ratio >= 0.0 && t.mask_ratio < 1.0))
    throw ParamError("config: training.mask_ratio must lie in [0, 1)");
  if (!(t.lr > 0.0)) throw ParamError("config: training.lr must be positive");
  if (!(t.train_fraction > 0.0 && t.train_fraction <= 1.0))
    throw ParamError("config: training.train_fraction must lie in (0, 1]");
}

}  // namespace

RunConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw DataError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!root.is_object()) throw DataError("config: top level must be an object");
  reject_unknown(root, {"seed", "model", "graph", "training", "data", "output"},
                 "");

  RunConfig cfg;
  read_into(root, "seed", cfg.seed);

  if (root.contains("model")) {
    const json& m = root["model"];
    reject_unknown(m,
                   {"channels", "model_dim", "heads", "encoder_layers",
                    "decoder_layers", "dropout", "k_eigen", "merge_mode",
                    "ablation"},
                   "model.");
    read_into(m, "channels", cfg.model.channels);
    read_into(m, "model_dim", cfg.model.model_dim);
    read_into(m, "heads", cfg.model.heads);
    read_into(m, "encoder_layers", cfg.model.encoder_layers);
    read_into(m, "decoder_layers", cfg.model.decoder_layers);
    read_into(m, "dropout", cfg.model.dropout);
    read_into(m, "k_eigen", cfg.model.eigen_dim);
    if (m.contains("merge_mode"))
      cfg.model.merge_mode =
          merge_mode_from_string(m.at("merge_mode").get<std::string>());
    read_into(m, "ablation", cfg.ablation);
  }

  if (root.contains("graph")) {
    const json& g = root["graph"];
    reject_unknown(g, {"epsilon", "sigma", "literal_eq6"}, "graph.");
    read_into(g, "epsilon", cfg.graph.epsilon);
    read_into(g, "sigma", cfg.graph.sigma);
    read_into(g, "literal_eq6", cfg.graph.literal_eq6);
  }

  if (root.contains("training")) {
    const json& t = root["training"];
    reject_unknown(t,
                   {"epochs", "batch_size", "window", "stride", "mask_ratio",
                    "lr", "literal_sum_loss", "train_fraction", "unobserved"},
                   "training.");
    read_into(t, "epochs", cfg.training.epochs);
    read_into(t, "batch_size", cfg.training.batch_size);
    read_into(t, "window", cfg.training.window);
    read_into(t, "stride", cfg.training.stride);
    read_into(t, "mask_ratio", cfg.training.mask_ratio);
    read_into(t, "lr", cfg.training.lr);
    read_into(t, "literal_sum_loss", cfg.training.literal_sum_loss);
    read_into(t, "train_fraction", cfg.training.train_fraction);
    read_into(t, "unobserved", cfg.unobserved_ids);
  }

  if (root.contains("data")) {
    const json& d = root["data"];
    reject_unknown(d, {"speeds", "distances", "missing_sentinel", "synthetic"},
                   "data.");
    read_into(d, "speeds", cfg.data.speeds_path);
    read_into(d, "distances", cfg.data.distances_path);
    if (d.contains("missing_sentinel") && !d["missing_sentinel"].is_null())
      cfg.data.missing_sentinel = d.at("missing_sentinel").get<double>();
    if (d.contains("synthetic"))
      cfg.data.synthetic = parse_synthetic(d["synthetic"]);
  }

  if (root.contains("output")) {
    const json& o = root["output"];
    reject_unknown(o, {"checkpoint", "loss_csv"}, "output.");
    read_into(o, "checkpoint", cfg.output.checkpoint);
    read_into(o, "loss_csv", cfg.output.loss_csv);
  }

  validate(cfg);
  return cfg;
}

RunConfig load_config(const std::string& path) {
  return parse_config(read_file(path));
}

std::string provenance_for(const RunConfig& cfg, bool synthetic) {
  json p;
  if (synthetic) {
    p["kind"] = "synthetic";
    p["seed"] = cfg.seed;
    p["params"] = synthetic_json(cfg.data.synthetic.value_or(SyntheticParams{}));
  } else {
    p["kind"] = "csv";
    p["speeds"] = cfg.data.speeds_path;
    p["distances"] = cfg.data.distances_path;
    if (cfg.data.missing_sentinel)
      p["missing_sentinel"] = *cfg.data.missing_sentinel;
  }
  p["window"] = cfg.training.window;
  p["train_fraction"] = cfg.training.train_fraction;
  p["graph"] = {{"epsilon", cfg.graph.epsilon},
                {"sigma", cfg.graph.sigma},
                {"literal_eq6", cfg.graph.literal_eq6}};
  return p.dump();
}

DatasetBundle bundle_from_provenance(const std::string& provenance_json) {
  if (provenance_json.empty())
    throw DataError("no dataset provenance recorded; pass the data explicitly");
  json p;
  try {
    p = json::parse(provenance_json);
  } catch (const json::exception&) {
    throw DataError("malformed dataset provenance");
  }
  const std::string kind = p.value("kind", "");
  if (kind == "synthetic") {
    SyntheticParams params = parse_synthetic(p.at("params"));
    DatasetBundle bundle = generate_synthetic(params, p.at("seed").get<std::uint64_t>());
    if (p.contains("graph")) {
      bundle.graph.epsilon = p["graph"].value("epsilon", bundle.graph.epsilon);
      bundle.graph.sigma = p["graph"].value("sigma", bundle.graph.sigma);
    }
    bundle.provenance_json = provenance_json;
    return bundle;
  }
  if (kind == "csv") {
    DatasetBundle bundle;
    std::optional<double> sentinel;
    if (p.contains("missing_sentinel"))
      sentinel = p["missing_sentinel"].get<double>();
    std::vector<std::string> node_ids;
    bundle.speeds = load_speeds_csv(p.at("speeds").get<std::string>(), sentinel,
                                    &bundle.timestamps, &node_ids);
    bundle.graph = load_distances_csv(p.at("distances").get<std::string>(), node_ids);
    if (p.contains("graph")) {
      bundle.graph.epsilon = p["graph"].value("epsilon", 0.1);
      bundle.graph.sigma = p["graph"].value("sigma", 0.0);
    }
    bundle.provenance_json = provenance_json;
    return bundle;
  }
  throw DataError("dataset provenance has unknown kind '" + kind + "'");
}

DatasetBundle load_bundle(const RunConfig& cfg, bool force_synthetic) {
  const bool use_synthetic =
      force_synthetic || (cfg.data.speeds_path.empty() && cfg.data.synthetic);
  if (use_synthetic) {
    DatasetBundle bundle = generate_synthetic(
        cfg.data.synthetic.value_or(SyntheticParams{}), cfg.seed);
    bundle.graph.epsilon = cfg.graph.epsilon;
    bundle.graph.sigma = cfg.graph.sigma;
    bundle.provenance_json = provenance_for(cfg, true);
    return bundle;
  }
  if (cfg.data.speeds_path.empty() || cfg.data.distances_path.empty())
    throw ParamError(
        "config: either data.speeds + data.distances or data.synthetic is "
        "required (or pass --synthetic)");
  DatasetBundle bundle;
  std::vector<std::string> node_ids;
  bundle.speeds = load_speeds_csv(cfg.data.speeds_path,
                                  cfg.data.missing_sentinel,
                                  &bundle.timestamps, &node_ids);
  bundle.graph = load_distances_csv(cfg.data.distances_path, node_ids);
  bundle.graph.epsilon = cfg.graph.epsilon;
  bundle.graph.sigma = cfg.graph.sigma;
  bundle.provenance_json = provenance_for(cfg, false);
  return bundle;
}

std::vector<std::size_t> resolve_node_ids(const DatasetBundle& bundle,
                                          const std::vector<std::string>& ids) {
  std::vector<std::size_t> out;
  for (const std::string& id : ids) {
    const auto it = std::find(bundle.graph.node_ids.begin(),
                              bundle.graph.node_ids.end(), id);
    if (it == bundle.graph.node_ids.end())
      throw DataError("unknown node id '" + id + "'");
    out.push_back(static_cast<std::size_t>(it - bundle.graph.node_ids.begin()));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace kriformer
