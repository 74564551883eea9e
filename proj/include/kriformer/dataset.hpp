#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kriformer/graph.hpp"
#include "kriformer/rng.hpp"
#include "kriformer/tensor.hpp"

namespace kriformer {

/// Dense T x N x C observation block with a parallel missing-value mask.
struct SpeedTensor {
  std::size_t timesteps = 0;
  std::size_t nodes = 0;
  std::size_t channels = 1;
  std::vector<double> values;        // row-major T x N x C
  std::vector<std::uint8_t> missing; // same layout, 1 = absent in the source

  std::size_t index(std::size_t t, std::size_t n, std::size_t c = 0) const {
    return (t * nodes + n) * channels + c;
  }
  double at(std::size_t t, std::size_t n, std::size_t c = 0) const {
    return values[index(t, n, c)];
  }
  bool is_missing(std::size_t t, std::size_t n, std::size_t c = 0) const {
    return missing[index(t, n, c)] != 0;
  }
};

struct SyntheticParams {
  std::size_t nodes = 20;
  std::size_t timesteps = 2000;
  double radius = 0.35;      // geometric-graph connection radius
  double alpha = 0.3;        // diffusion rate toward the neighbor mean
  double amplitude = 5.0;    // sinusoidal forcing amplitude
  double period = 288.0;     // forcing period in steps
  double noise_std = 1.0;
  double base_speed = 60.0;
};

struct DatasetBundle {
  SpeedTensor speeds;
  SensorGraph graph;
  std::vector<std::string> timestamps;  // one label per time step
  std::string provenance_json;          // how to reproduce/reload this bundle
};

// Speeds CSV: header "timestamp,<id>,<id>,..."; each row one time step.
// Empty cells, "nan", and sentinel-valued cells are flagged missing.
SpeedTensor load_speeds_csv(const std::string& path,
                            std::optional<double> missing_sentinel,
                            std::vector<std::string>* timestamps_out,
                            std::vector<std::string>* node_ids_out);

void save_speeds_csv(const std::string& path, const SpeedTensor& speeds,
                     const std::vector<std::string>& timestamps,
                     const std::vector<std::string>& node_ids);

// Distances CSV: header "from,to,distance"; directed entries. When node_ids
// is empty the id set is taken from the file in order of first appearance;
// otherwise every id must come from the given list.
SensorGraph load_distances_csv(const std::string& path,
                               const std::vector<std::string>& node_ids = {});

void save_distances_csv(const std::string& path, const SensorGraph& graph);

// Random geometric sensor network on the unit square with diffusion +
// phase-shifted sinusoidal forcing dynamics. Deterministic under seed;
// regenerates with a wider radius (up to 10 attempts) if the graph comes out
// disconnected.
DatasetBundle generate_synthetic(const SyntheticParams& params,
                                 std::uint64_t seed);

}  // namespace kriformer
