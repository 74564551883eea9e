#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kriformer/tensor.hpp"

namespace kriformer {

/// Sensor network: node identifiers plus a directed road-distance matrix.
/// Absent edges are +infinity; the diagonal is zero. sigma and epsilon
/// parameterize the Gaussian-kernel adjacency weights.
struct SensorGraph {
  std::vector<std::string> node_ids;
  Tensor distances;       // N x N, +inf where no edge
  double sigma = 0.0;     // 0 requests derive_sigma()
  double epsilon = 0.1;   // sparsity threshold

  std::size_t size() const { return node_ids.size(); }
};

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending, columns
/// of the eigenvector matrix orthonormal. Each column's largest-magnitude
/// entry is made non-negative (ties resolved to the lowest index) so the
/// decomposition is unique up to degenerate eigenvalues.
struct SpectralData {
  std::vector<double> eigenvalues;
  Tensor eigenvectors;  // N x N, column j pairs with eigenvalues[j]
};

// Standard deviation of the finite, positive entries of the distance matrix.
double derive_sigma(const SensorGraph& graph);

// Gaussian kernel weights w_ij = exp(-d_ij^2 / sigma^2) with zero diagonal.
// Default keeps weights >= epsilon; literal_condition instead keeps pairs
// with d^2/sigma^2 > epsilon (the inverted form), selectable for comparison.
Tensor build_adjacency(const SensorGraph& graph, bool literal_condition = false);

// Elementwise max(A, A^T).
Tensor symmetrize(const Tensor& a);

// L = I - D^{-1/2} A D^{-1/2}; zero-degree nodes keep an identity row/col.
// The result is exactly symmetric (upper triangle mirrored).
Tensor normalized_laplacian(const Tensor& a_sym);

// Cyclic Jacobi rotations; converges when the off-diagonal Frobenius norm
// falls below 1e-12 (at most 100 sweeps). Input asymmetry beyond 1e-10 is
// rejected.
SpectralData eigendecompose(const Tensor& sym);

// N x k eigenmap features: row i holds eigenvector entries v_1(i)..v_k(i),
// skipping the trivial v_0. Requires 1 <= k < N.
Tensor spatial_eigenmap(const SpectralData& spectral, std::size_t k);

// Additive attention mask: 0 where nodes interact (w_ij > 0 or i == j),
// kMaskedScore elsewhere.
Tensor spatial_mask_from_adjacency(const Tensor& a_sym);

// Connected components of the nonzero pattern of a symmetric matrix.
std::size_t connected_components(const Tensor& a_sym);

// FNV-1a over the distance matrix bytes; identifies the graph in checkpoints.
std::uint64_t graph_fingerprint(const SensorGraph& graph);

}  // namespace kriformer
