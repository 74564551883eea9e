#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kriformer/dataset.hpp"
#include "kriformer/model.hpp"
#include "kriformer/training.hpp"

namespace kriformer {

struct GraphConfig {
  double epsilon = 0.1;
  double sigma = 0.0;  // 0 derives the distance standard deviation
  bool literal_eq6 = false;
};

struct DataConfig {
  std::string speeds_path;
  std::string distances_path;
  std::optional<double> missing_sentinel;
  std::optional<SyntheticParams> synthetic;
};

struct OutputConfig {
  std::string checkpoint = "kriformer.ckpt";
  std::string loss_csv = "loss.csv";
};

/// Everything a run needs, parsed from one JSON file. Unknown keys are
/// rejected so typos fail before any compute starts.
struct RunConfig {
  std::uint64_t seed = 42;
  ModelHyper model;
  std::string ablation = "none";
  GraphConfig graph;
  FitConfig training;
  std::vector<std::string> unobserved_ids;
  DataConfig data;
  OutputConfig output;
};

RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);

// Serialized form of the fields evaluate/krige need to rebuild the dataset.
std::string provenance_for(const RunConfig& cfg, bool synthetic);

// Builds the dataset a provenance description points at.
DatasetBundle bundle_from_provenance(const std::string& provenance_json);

// Loads the dataset a config describes (CSV pair or synthetic generator).
DatasetBundle load_bundle(const RunConfig& cfg, bool force_synthetic);

// Maps configured node ids onto indices of the bundle's node order.
std::vector<std::size_t> resolve_node_ids(const DatasetBundle& bundle,
                                          const std::vector<std::string>& ids);

}  // namespace kriformer
