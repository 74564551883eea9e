#include "kriformer/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include "kriformer/errors.hpp"
#include "kriformer/textio.hpp"

namespace kriformer {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double parse_cell(const std::string& cell, const std::string& path,
                  std::size_t line_no) {
  const char* begin = cell.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0')
    throw DataError(path + ":" + std::to_string(line_no) +
                    ": non-numeric cell '" + cell + "'");
  return v;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::string content = read_file(path);
  std::vector<std::string> lines;
  std::string line;
  std::istringstream in(content);
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  // Drop trailing blank lines.
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

bool is_blank(const std::string& cell) {
  return cell.find_first_not_of(" \t") == std::string::npos;
}

}  // namespace

SpeedTensor load_speeds_csv(const std::string& path,
                            std::optional<double> missing_sentinel,
                            std::vector<std::string>* timestamps_out,
                            std::vector<std::string>* node_ids_out) {
  const auto lines = read_lines(path);
  if (lines.size() < 2)
    throw DataError(path + ": expected a header row and at least one data row");

  const auto header = split_csv_line(lines[0]);
  if (header.size() < 2)
    throw DataError(path + ":1: header needs a timestamp column and node ids");
  std::vector<std::string> node_ids(header.begin() + 1, header.end());
  {
    std::set<std::string> seen;
    for (const std::string& id : node_ids) {
      if (is_blank(id))
        throw DataError(path + ":1: blank node id in header");
      if (!seen.insert(id).second)
        throw DataError(path + ":1: duplicate node id '" + id + "'");
    }
  }

  const std::size_t n = node_ids.size();
  SpeedTensor out;
  out.nodes = n;
  out.channels = 1;
  std::vector<std::string> timestamps;
  for (std::size_t row = 1; row < lines.size(); ++row) {
    const auto cells = split_csv_line(lines[row]);
    if (cells.size() != n + 1)
      throw DataError(path + ":" + std::to_string(row + 1) + ": expected " +
                      std::to_string(n + 1) + " cells, found " +
                      std::to_string(cells.size()));
    timestamps.push_back(cells[0]);
    for (std::size_t j = 0; j < n; ++j) {
      const std::string& cell = cells[j + 1];
      if (is_blank(cell) || cell == "nan") {
        out.values.push_back(0.0);
        out.missing.push_back(1);
        continue;
      }
      const double v = parse_cell(cell, path, row + 1);
      if (missing_sentinel && v == *missing_sentinel) {
        out.values.push_back(0.0);
        out.missing.push_back(1);
      } else {
        out.values.push_back(v);
        out.missing.push_back(0);
      }
    }
  }
  out.timesteps = timestamps.size();
  if (timestamps_out) *timestamps_out = std::move(timestamps);
  if (node_ids_out) *node_ids_out = std::move(node_ids);
  return out;
}

void save_speeds_csv(const std::string& path, const SpeedTensor& speeds,
                     const std::vector<std::string>& timestamps,
                     const std::vector<std::string>& node_ids) {
  if (node_ids.size() != speeds.nodes)
    throw ShapeError("save_speeds_csv: node id count mismatch");
  if (timestamps.size() != speeds.timesteps)
    throw ShapeError("save_speeds_csv: timestamp count mismatch");
  std::string out = "timestamp";
  for (const std::string& id : node_ids) {
    out += ',';
    out += id;
  }
  out += '\n';
  for (std::size_t t = 0; t < speeds.timesteps; ++t) {
    out += timestamps[t];
    for (std::size_t j = 0; j < speeds.nodes; ++j) {
      out += ',';
      if (!speeds.is_missing(t, j)) out += fmt_double(speeds.at(t, j));
    }
    out += '\n';
  }
  atomic_write_file(path, out);
}

SensorGraph load_distances_csv(const std::string& path,
                               const std::vector<std::string>& node_ids) {
  const auto lines = read_lines(path);
  if (lines.empty()) throw DataError(path + ": empty distances file");
  const auto header = split_csv_line(lines[0]);
  if (header.size() != 3 || header[0] != "from" || header[1] != "to" ||
      header[2] != "distance")
    throw DataError(path + ":1: header must be 'from,to,distance'");

  std::vector<std::string> ids = node_ids;
  std::vector<std::pair<std::pair<std::string, std::string>, double>> rows;
  auto known = [&ids](const std::string& id) {
    return std::find(ids.begin(), ids.end(), id) != ids.end();
  };
  for (std::size_t row = 1; row < lines.size(); ++row) {
    if (lines[row].empty()) continue;
    const auto cells = split_csv_line(lines[row]);
    if (cells.size() != 3)
      throw DataError(path + ":" + std::to_string(row + 1) +
                      ": expected 3 cells");
    const double dist = parse_cell(cells[2], path, row + 1);
    if (dist < 0.0)
      throw DataError(path + ":" + std::to_string(row + 1) +
                      ": negative distance");
    if (node_ids.empty()) {
      if (!known(cells[0])) ids.push_back(cells[0]);
      if (!known(cells[1])) ids.push_back(cells[1]);
    } else {
      for (int c = 0; c < 2; ++c)
        if (!known(cells[c]))
          throw DataError(path + ":" + std::to_string(row + 1) +
                          ": unknown node id '" + cells[c] +
                          "' (not in the speeds header)");
    }
    rows.push_back({{cells[0], cells[1]}, dist});
  }
  if (ids.size() < 2)
    throw DataError(path + ": at least two nodes are required");

  const std::size_t n = ids.size();
  std::vector<double> d(n * n, kInf);
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 0.0;
  auto index_of = [&ids](const std::string& id) {
    return static_cast<std::size_t>(
        std::find(ids.begin(), ids.end(), id) - ids.begin());
  };
  for (const auto& [pair, dist] : rows) {
    const std::size_t i = index_of(pair.first);
    const std::size_t j = index_of(pair.second);
    if (i == j) {
      if (dist != 0.0)
        std::fprintf(stderr,
                     "warning: self-distance for '%s' ignored (kept at 0)\n",
                     pair.first.c_str());
      continue;
    }
    d[i * n + j] = dist;
  }

  SensorGraph g;
  g.node_ids = std::move(ids);
  g.distances = Tensor::from_data({n, n}, std::move(d));
  return g;
}

void save_distances_csv(const std::string& path, const SensorGraph& graph) {
  const std::size_t n = graph.size();
  std::string out = "from,to,distance\n";
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double d = graph.distances.at({i, j});
      if (!std::isfinite(d)) continue;
      out += graph.node_ids[i] + ',' + graph.node_ids[j] + ',' + fmt_double(d) + '\n';
    }
  atomic_write_file(path, out);
}

DatasetBundle generate_synthetic(const SyntheticParams& params,
                                 std::uint64_t seed) {
  if (params.nodes < 4)
    throw ParamError("generate_synthetic: at least 4 nodes required");
  if (params.timesteps < 2)
    throw ParamError("generate_synthetic: at least 2 time steps required");
  if (params.radius <= 0.0 || params.period <= 0.0)
    throw ParamError("generate_synthetic: radius and period must be positive");

  const std::size_t n = params.nodes;
  Rng rng(seed);

  // The radius defines the diffusion coupling; the recorded distance matrix
  // covers every pair (sensor metadata knows where all stations are).
  std::vector<double> xs(n), ys(n), dist(n * n, 0.0);
  std::vector<std::vector<std::size_t>> neighbors(n);
  double radius = params.radius;
  bool connected = false;
  for (int attempt = 0; attempt < 10 && !connected; ++attempt) {
    for (std::size_t i = 0; i < n; ++i) {
      xs[i] = uniform_unit(rng);
      ys[i] = uniform_unit(rng);
    }
    for (auto& lst : neighbors) lst.clear();
    std::vector<double> pattern(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      dist[i * n + i] = 0.0;
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = xs[i] - xs[j];
        const double dy = ys[i] - ys[j];
        const double d = std::sqrt(dx * dx + dy * dy);
        dist[i * n + j] = d;
        dist[j * n + i] = d;
        if (d <= radius) {
          neighbors[i].push_back(j);
          neighbors[j].push_back(i);
          pattern[i * n + j] = 1.0;
          pattern[j * n + i] = 1.0;
        }
      }
    }
    connected =
        connected_components(Tensor::from_data({n, n}, std::move(pattern))) == 1;
    if (!connected) radius *= 1.3;
  }
  if (!connected)
    throw DataError(
        "generate_synthetic: could not produce a connected coupling graph in "
        "10 attempts");

  std::vector<double> phase(n);
  for (std::size_t i = 0; i < n; ++i)
    phase[i] = uniform_range(rng, 0.0, 6.283185307179586476925287);

  const std::size_t total = params.timesteps;
  std::vector<double> series(total * n);
  auto clip = [](double v) { return std::min(100.0, std::max(0.0, v)); };
  for (std::size_t i = 0; i < n; ++i)
    series[i] = clip(params.base_speed + params.noise_std * normal_sample(rng));
  for (std::size_t t = 0; t + 1 < total; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      double nbr_mean = 0.0;
      for (std::size_t j : neighbors[i]) nbr_mean += series[t * n + j];
      nbr_mean /= static_cast<double>(neighbors[i].size());
      const double cur = series[t * n + i];
      const double forcing =
          params.amplitude *
          std::sin(6.283185307179586476925287 * static_cast<double>(t) /
                       params.period +
                   phase[i]);
      const double next = cur + params.alpha * (nbr_mean - cur) + forcing +
                          params.noise_std * normal_sample(rng);
      series[(t + 1) * n + i] = clip(next);
    }
  }

  DatasetBundle bundle;
  bundle.speeds.timesteps = total;
  bundle.speeds.nodes = n;
  bundle.speeds.channels = 1;
  bundle.speeds.values = std::move(series);
  bundle.speeds.missing.assign(total * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    bundle.graph.node_ids.push_back("n" + std::to_string(i));
  bundle.graph.distances = Tensor::from_data({n, n}, std::move(dist));
  bundle.graph.sigma = 0.0;  // derive from the distances
  bundle.graph.epsilon = 0.1;
  for (std::size_t t = 0; t < total; ++t)
    bundle.timestamps.push_back(std::to_string(t));

  nlohmann::json prov;
  prov["kind"] = "synthetic";
  prov["seed"] = seed;
  prov["params"] = {{"nodes", params.nodes},
                    {"timesteps", params.timesteps},
                    {"radius", params.radius},
                    {"alpha", params.alpha},
                    {"amplitude", params.amplitude},
                    {"period", params.period},
                    {"noise_std", params.noise_std},
                    {"base_speed", params.base_speed}};
  bundle.provenance_json = prov.dump();
  return bundle;
}

}  // namespace kriformer
