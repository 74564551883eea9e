#include "kriformer/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "kriformer/errors.hpp"

namespace kriformer {

namespace {

std::size_t square_side(const Tensor& m, const char* op) {
  if (m.rank() != 2 || m.shape()[0] != m.shape()[1])
    throw ShapeError(std::string(op) + ": square matrix required, got " +
                     shape_str(m.shape()));
  return m.shape()[0];
}

}  // namespace

double derive_sigma(const SensorGraph& graph) {
  const std::size_t n = graph.size();
  const auto& d = graph.distances.values();
  std::vector<double> finite;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double v = d[i * n + j];
      if (i != j && std::isfinite(v) && v > 0.0) finite.push_back(v);
    }
  if (finite.size() < 2)
    throw DataError("derive_sigma: need at least two finite positive distances");
  double mean = 0.0;
  for (double v : finite) mean += v;
  mean /= static_cast<double>(finite.size());
  double var = 0.0;
  for (double v : finite) var += (v - mean) * (v - mean);
  var /= static_cast<double>(finite.size());
  const double sigma = std::sqrt(var);
  if (!(sigma > 0.0))
    throw DataError("derive_sigma: distances are all equal, sigma would be 0");
  return sigma;
}

Tensor build_adjacency(const SensorGraph& graph, bool literal_condition) {
  const std::size_t n = square_side(graph.distances, "build_adjacency");
  if (graph.size() != n)
    throw ShapeError("build_adjacency: node count does not match matrix");
  if (n < 2) throw ParamError("build_adjacency: at least two nodes required");
  if (graph.sigma < 0.0 || std::isnan(graph.sigma))
    throw ParamError("build_adjacency: sigma must be positive");
  const double sigma = graph.sigma > 0.0 ? graph.sigma : derive_sigma(graph);
  if (!(graph.epsilon >= 0.0 && graph.epsilon < 1.0))
    throw ParamError("build_adjacency: epsilon must lie in [0, 1)");

  const auto& d = graph.distances.values();
  std::vector<double> w(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double dist = d[i * n + j];
      if (!std::isfinite(dist)) continue;
      const double ratio = (dist * dist) / (sigma * sigma);
      const double weight = std::exp(-ratio);
      if (literal_condition) {
        if (ratio > graph.epsilon) w[i * n + j] = weight;
      } else {
        if (weight >= graph.epsilon) w[i * n + j] = weight;
      }
    }
  return Tensor::from_data({n, n}, std::move(w));
}

Tensor symmetrize(const Tensor& a) {
  const std::size_t n = square_side(a, "symmetrize");
  const auto& v = a.values();
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = std::max(v[i * n + j], v[j * n + i]);
  return Tensor::from_data({n, n}, std::move(out));
}

Tensor normalized_laplacian(const Tensor& a_sym) {
  const std::size_t n = square_side(a_sym, "normalized_laplacian");
  const auto& a = a_sym.values();
  std::vector<double> inv_sqrt_deg(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j) deg += a[i * n + j];
    if (deg > 0.0) inv_sqrt_deg[i] = 1.0 / std::sqrt(deg);
  }
  std::vector<double> l(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double v = (i == j) ? 1.0 : 0.0;
      v -= inv_sqrt_deg[i] * a[i * n + j] * inv_sqrt_deg[j];
      l[i * n + j] = v;
      l[j * n + i] = v;
    }
  }
  return Tensor::from_data({n, n}, std::move(l));
}

SpectralData eigendecompose(const Tensor& sym) {
  const std::size_t n = square_side(sym, "eigendecompose");
  const auto& src = sym.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::fabs(src[i * n + j] - src[j * n + i]) > 1e-10)
        throw ParamError("eigendecompose: input is not symmetric");

  std::vector<double> a(src);
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

  const double tol = 1e-12;
  const int max_sweeps = 100;
  bool converged = n < 2;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) off += a[i * n + j] * a[i * n + j];
    if (std::sqrt(off) < tol) {
      converged = true;
      break;
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::fabs(apq) < 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        double t;
        if (theta >= 0.0)
          t = 1.0 / (theta + std::sqrt(theta * theta + 1.0));
        else
          t = -1.0 / (-theta + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        const double app = a[p * n + p];
        const double aqq = a[q * n + q];
        a[p * n + p] = c * c * app - 2.0 * s * c * apq + s * s * aqq;
        a[q * n + q] = s * s * app + 2.0 * s * c * apq + c * c * aqq;
        a[p * n + q] = 0.0;
        a[q * n + p] = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
          if (r == p || r == q) continue;
          const double arp = a[r * n + p];
          const double arq = a[r * n + q];
          a[r * n + p] = c * arp - s * arq;
          a[p * n + r] = a[r * n + p];
          a[r * n + q] = s * arp + c * arq;
          a[q * n + r] = a[r * n + q];
        }
        for (std::size_t r = 0; r < n; ++r) {
          const double vrp = v[r * n + p];
          const double vrq = v[r * n + q];
          v[r * n + p] = c * vrp - s * vrq;
          v[r * n + q] = s * vrp + c * vrq;
        }
      }
    }
  }
  if (!converged) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) off += a[i * n + j] * a[i * n + j];
    if (std::sqrt(off) >= tol)
      throw NumericError("eigendecompose: Jacobi sweeps did not converge");
  }

  // Sort ascending, permuting columns along with the eigenvalues.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = a[i * n + i];
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return diag[x] < diag[y]; });

  SpectralData out;
  out.eigenvalues.resize(n);
  std::vector<double> u(n * n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src_col = order[j];
    out.eigenvalues[j] = diag[src_col];
    // Sign fix: largest-magnitude entry non-negative, lowest index on ties.
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double mag = std::fabs(v[i * n + src_col]);
      if (mag > best) {
        best = mag;
        arg = i;
      }
    }
    const double flip = v[arg * n + src_col] < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i) u[i * n + j] = flip * v[i * n + src_col];
  }
  out.eigenvectors = Tensor::from_data({n, n}, std::move(u));
  return out;
}

Tensor spatial_eigenmap(const SpectralData& spectral, std::size_t k) {
  const std::size_t n = spectral.eigenvalues.size();
  if (k < 1 || k >= n)
    throw ParamError("spatial_eigenmap: k must satisfy 1 <= k < N, got k=" +
                     std::to_string(k) + " with N=" + std::to_string(n));
  const auto& u = spectral.eigenvectors.values();
  std::vector<double> se(n * k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) se[i * k + j] = u[i * n + (j + 1)];
  return Tensor::from_data({n, k}, std::move(se));
}

Tensor spatial_mask_from_adjacency(const Tensor& a_sym) {
  const std::size_t n = square_side(a_sym, "spatial_mask_from_adjacency");
  const auto& a = a_sym.values();
  std::vector<double> mask(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && a[i * n + j] == 0.0) mask[i * n + j] = kMaskedScore;
  return Tensor::from_data({n, n}, std::move(mask));
}

std::size_t connected_components(const Tensor& a_sym) {
  const std::size_t n = square_side(a_sym, "connected_components");
  const auto& a = a_sym.values();
  std::vector<bool> visited(n, false);
  std::vector<std::size_t> stack;
  std::size_t components = 0;
  for (std::size_t start = 0; start < n; ++start) {
    if (visited[start]) continue;
    ++components;
    stack.push_back(start);
    visited[start] = true;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      for (std::size_t j = 0; j < n; ++j)
        if (!visited[j] && (a[i * n + j] != 0.0 || a[j * n + i] != 0.0)) {
          visited[j] = true;
          stack.push_back(j);
        }
    }
  }
  return components;
}

std::uint64_t graph_fingerprint(const SensorGraph& graph) {
  std::uint64_t hash = 1469598103934665603ull;
  auto mix = [&hash](const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      hash ^= bytes[i];
      hash *= 1099511628211ull;
    }
  };
  for (const std::string& id : graph.node_ids) mix(id.data(), id.size());
  const auto& d = graph.distances.values();
  mix(d.data(), d.size() * sizeof(double));
  return hash;
}

}  // namespace kriformer
