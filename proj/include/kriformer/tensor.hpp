#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace kriformer {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Additive attention mask value standing in for -infinity; a true -inf would
// poison gradients through the softmax.
constexpr double kMaskedScore = -1e9;
constexpr double kLayerNormEps = 1e-5;

/// Dense row-major tensor of 64-bit floats with reverse-mode differentiation.
///
/// Tensor is a cheap handle onto shared storage. Values are immutable once an
/// op has produced them; only gradient buffers change after construction, plus
/// leaf parameters updated through mutable_values() by the optimizer. Ops
/// executed while a GradTape is active record their backward step on it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor identity(std::size_t n);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const;
  std::size_t numel() const;

  bool requires_grad() const;  // leaf gradient target
  bool tracked() const;        // produced on (or feeding) an active tape

  const std::vector<double>& values() const;
  // Leaf parameters only: optimizer updates and in-place perturbation for
  // finite differencing. Never call on an op output.
  std::vector<double>& mutable_values();

  double item() const;  // single-element tensors
  double at(std::initializer_list<std::size_t> idx) const;

  bool has_grad() const;
  const std::vector<double>& grad() const;  // zeros if never accumulated
  void zero_grad();

 private:
  struct Impl;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<Impl> impl_;

  friend class GradTape;
  friend struct OpAccess;
};

/// Ordered record of executed ops for one backward sweep.
///
/// Constructing a tape makes it the active tape for the current thread
/// (restoring the previous one on destruction). backward() seeds d(loss)=1
/// and replays the record in reverse, accumulating into leaf gradients.
/// Repeated backward() calls accumulate; intermediate gradients are reset
/// per sweep. One tape is single-writer; distinct threads may run forward
/// passes over distinct tapes concurrently.
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  std::size_t size() const { return entries_.size(); }
  void backward(const Tensor& loss);

  static GradTape* active();

 private:
  struct Entry {
    std::function<void()> run;
    std::shared_ptr<Tensor::Impl> output;
  };
  std::vector<Entry> entries_;
  GradTape* previous_ = nullptr;

  friend struct OpAccess;
};

// ---- differentiable ops ----------------------------------------------------
// Elementwise binaries broadcast right-aligned (dims equal or 1; missing
// leading dims broadcast). matmul broadcasts batch dims the same way.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& a);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor reshape(const Tensor& a, Shape shape);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor relu(const Tensor& a);
// Optional additive mask broadcasts to x; masked logits should carry
// kMaskedScore. The mask is structural and must not require gradients.
Tensor softmax_lastdim(const Tensor& x, const Tensor& additive_mask = {});
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);
// [.., D] -> [n_heads, .., D/n_heads], contiguous blocks of the last axis.
Tensor split_heads(const Tensor& x, std::size_t n_heads);
// Exact inverse of split_heads (bitwise).
Tensor concat_heads(const Tensor& x);
Tensor concat_lastdim(const std::vector<Tensor>& parts);
Tensor sum_all(const Tensor& a);

// ---- gradient checking -----------------------------------------------------

/// Compares analytic gradients of the scalar-valued f against central finite
/// differences for every element of every wrt tensor. Returns the maximum
/// relative error with denominator max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> wrt,
                  double step = 1e-6);

}  // namespace kriformer
