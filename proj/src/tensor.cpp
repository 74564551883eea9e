#include "kriformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kriformer/errors.hpp"

namespace kriformer {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

struct Tensor::Impl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // lazily allocated
  bool requires_grad = false;
  bool tracked = false;
};

namespace {

thread_local GradTape* g_active_tape = nullptr;

std::vector<double> g_empty;

}  // namespace

// Internal accessor used by op implementations.
struct OpAccess {
  using ImplPtr = std::shared_ptr<Tensor::Impl>;

  static const ImplPtr& impl(const Tensor& t) { return t.impl_; }

  static Tensor make(Shape shape, std::vector<double> values, bool tracked) {
    auto impl = std::make_shared<Tensor::Impl>();
    impl->shape = std::move(shape);
    impl->values = std::move(values);
    impl->tracked = tracked;
    return Tensor(std::move(impl));
  }

  static bool wants_grad(const Tensor& t) {
    return t.defined() && (t.requires_grad() || t.tracked());
  }

  // An op output joins the grad graph when a tape is recording and at least
  // one input can receive gradients.
  static bool recording(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr) return false;
    for (const Tensor* t : inputs)
      if (t != nullptr && wants_grad(*t)) return true;
    return false;
  }

  static void ensure_grad(const ImplPtr& impl) {
    if (impl->grad.empty()) impl->grad.assign(impl->values.size(), 0.0);
  }

  static void record(const Tensor& out, std::function<void()> backward) {
    g_active_tape->entries_.push_back(
        GradTape::Entry{std::move(backward), out.impl_});
  }
};

using ImplPtr = OpAccess::ImplPtr;

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->values.assign(n, value);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw ShapeError("from_data: shape " + shape_str(shape) + " wants " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->values = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return from_data({n, n}, std::move(v));
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::rank() const { return impl_->shape.size(); }
std::size_t Tensor::numel() const { return impl_->values.size(); }
bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
bool Tensor::tracked() const { return impl_ && impl_->tracked; }

const std::vector<double>& Tensor::values() const { return impl_->values; }
std::vector<double>& Tensor::mutable_values() { return impl_->values; }

double Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->values[0];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != rank())
    throw ShapeError("at(): index rank mismatch for " + shape_str(shape()));
  std::size_t off = 0;
  std::size_t axis = 0;
  for (std::size_t i : idx) {
    if (i >= impl_->shape[axis])
      throw ShapeError("at(): index out of range");
    off = off * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->values[off];
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  return impl_->grad.empty() ? g_empty : impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

// ---- GradTape ---------------------------------------------------------------

GradTape::GradTape() {
  previous_ = g_active_tape;
  g_active_tape = this;
}

GradTape::~GradTape() { g_active_tape = previous_; }

GradTape* GradTape::active() { return g_active_tape; }

void GradTape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ParamError("backward expects a scalar loss");
  if (entries_.empty()) throw ParamError("backward on an empty tape");
  // Intermediate gradients are per-sweep scratch; leaves accumulate across
  // sweeps.
  for (auto& e : entries_)
    if (!e.output->requires_grad) e.output->grad.clear();
  const ImplPtr& seed = OpAccess::impl(loss);
  OpAccess::ensure_grad(seed);
  seed->grad[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // nothing flowed through
    it->run();
  }
}

// ---- broadcasting machinery -------------------------------------------------

namespace {

struct BcastPlan {
  Shape out;
  // Per output axis, element strides into each operand; 0 marks a broadcast
  // axis.
  std::vector<std::size_t> a_strides;
  std::vector<std::size_t> b_strides;
};

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

BcastPlan make_bcast(const Shape& a, const Shape& b, const char* op) {
  BcastPlan plan;
  const std::size_t rank = std::max(a.size(), b.size());
  plan.out.resize(rank);
  plan.a_strides.assign(rank, 0);
  plan.b_strides.assign(rank, 0);
  const auto sa = row_major_strides(a);
  const auto sb = row_major_strides(b);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t out_axis = rank - 1 - i;
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                       " with " + shape_str(b));
    plan.out[out_axis] = std::max(da, db);
    if (da != 1 && i < a.size()) plan.a_strides[out_axis] = sa[a.size() - 1 - i];
    if (db != 1 && i < b.size()) plan.b_strides[out_axis] = sb[b.size() - 1 - i];
  }
  return plan;
}

// Visits every output element in row-major order with the matching operand
// offsets; broadcast axes hold their operand offset fixed.
template <class Fn>
void for_each_bcast(const BcastPlan& plan, Fn&& fn) {
  const std::size_t rank = plan.out.size();
  const std::size_t total = shape_numel(plan.out);
  if (rank == 0) {
    if (total) fn(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ai = 0;
  std::size_t bi = 0;
  for (std::size_t o = 0; o < total; ++o) {
    fn(o, ai, bi);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ai += plan.a_strides[d];
      bi += plan.b_strides[d];
      if (idx[d] < plan.out[d]) break;
      idx[d] = 0;
      ai -= plan.a_strides[d] * plan.out[d];
      bi -= plan.b_strides[d] * plan.out[d];
    }
  }
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ParamError(std::string(op) + ": undefined tensor");
}

enum class BinaryKind { add, sub, mul };

// b repeats as a contiguous block when its shape equals a trailing slice of
// a's shape (bias adds, mask adds).
bool suffix_broadcast(const Shape& a, const Shape& b) {
  if (b.size() > a.size() || b.empty()) return false;
  for (std::size_t i = 0; i < b.size(); ++i)
    if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) return false;
  return true;
}

Tensor binary_op(const Tensor& a, const Tensor& b, BinaryKind kind,
                 const char* name) {
  require_defined(a, name);
  require_defined(b, name);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out;

  const bool same_shape = a.shape() == b.shape();
  const bool suffix = !same_shape && suffix_broadcast(a.shape(), b.shape());
  BcastPlan plan;
  Shape out_shape;
  if (same_shape) {
    out_shape = a.shape();
    out.resize(av.size());
    switch (kind) {
      case BinaryKind::add:
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
        break;
      case BinaryKind::sub:
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
        break;
      case BinaryKind::mul:
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
        break;
    }
  } else if (suffix) {
    out_shape = a.shape();
    out.resize(av.size());
    const std::size_t bn = bv.size();
    switch (kind) {
      case BinaryKind::add:
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % bn];
        break;
      case BinaryKind::sub:
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i % bn];
        break;
      case BinaryKind::mul:
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i % bn];
        break;
    }
  } else {
    plan = make_bcast(a.shape(), b.shape(), name);
    out_shape = plan.out;
    out.resize(shape_numel(plan.out));
    switch (kind) {
      case BinaryKind::add:
        for_each_bcast(plan, [&](std::size_t o, std::size_t ai, std::size_t bi) {
          out[o] = av[ai] + bv[bi];
        });
        break;
      case BinaryKind::sub:
        for_each_bcast(plan, [&](std::size_t o, std::size_t ai, std::size_t bi) {
          out[o] = av[ai] - bv[bi];
        });
        break;
      case BinaryKind::mul:
        for_each_bcast(plan, [&](std::size_t o, std::size_t ai, std::size_t bi) {
          out[o] = av[ai] * bv[bi];
        });
        break;
    }
  }

  const bool rec = OpAccess::recording({&a, &b});
  Tensor result = OpAccess::make(std::move(out_shape), std::move(out), rec);
  if (rec) {
    const bool ga = OpAccess::wants_grad(a);
    const bool gb = OpAccess::wants_grad(b);
    ImplPtr ia = OpAccess::impl(a);
    ImplPtr ib = OpAccess::impl(b);
    ImplPtr io = OpAccess::impl(result);
    OpAccess::record(result, [=]() {
      const auto& go = io->grad;
      if (ga) OpAccess::ensure_grad(ia);
      if (gb) OpAccess::ensure_grad(ib);
      if (same_shape) {
        for (std::size_t i = 0; i < go.size(); ++i) {
          switch (kind) {
            case BinaryKind::add:
              if (ga) ia->grad[i] += go[i];
              if (gb) ib->grad[i] += go[i];
              break;
            case BinaryKind::sub:
              if (ga) ia->grad[i] += go[i];
              if (gb) ib->grad[i] -= go[i];
              break;
            case BinaryKind::mul:
              if (ga) ia->grad[i] += go[i] * ib->values[i];
              if (gb) ib->grad[i] += go[i] * ia->values[i];
              break;
          }
        }
      } else if (suffix) {
        const std::size_t bn = ib->values.size();
        for (std::size_t i = 0; i < go.size(); ++i) {
          switch (kind) {
            case BinaryKind::add:
              if (ga) ia->grad[i] += go[i];
              if (gb) ib->grad[i % bn] += go[i];
              break;
            case BinaryKind::sub:
              if (ga) ia->grad[i] += go[i];
              if (gb) ib->grad[i % bn] -= go[i];
              break;
            case BinaryKind::mul:
              if (ga) ia->grad[i] += go[i] * ib->values[i % bn];
              if (gb) ib->grad[i % bn] += go[i] * ia->values[i];
              break;
          }
        }
      } else {
        for_each_bcast(plan, [&](std::size_t o, std::size_t ai, std::size_t bi) {
          switch (kind) {
            case BinaryKind::add:
              if (ga) ia->grad[ai] += go[o];
              if (gb) ib->grad[bi] += go[o];
              break;
            case BinaryKind::sub:
              if (ga) ia->grad[ai] += go[o];
              if (gb) ib->grad[bi] -= go[o];
              break;
            case BinaryKind::mul:
              if (ga) ia->grad[ai] += go[o] * ib->values[bi];
              if (gb) ib->grad[bi] += go[o] * ia->values[ai];
              break;
          }
        });
      }
    });
  }
  return result;
}

// c[m x n] += a[m x k] * b[k x n]. The saxpy-style inner loop keeps a fixed
// left-to-right accumulation order per output element and vectorizes without
// any reassociation license.
void gemm_nn(const double* __restrict__ a, const double* __restrict__ b,
             double* __restrict__ c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a[k x m]^T * b[k x n]
void gemm_tn(const double* __restrict__ a, const double* __restrict__ b,
             double* __restrict__ c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void transpose_into(const double* __restrict__ src, double* __restrict__ dst,
                    std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

}  // namespace

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, BinaryKind::add, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, BinaryKind::sub, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, BinaryKind::mul, "mul");
}

Tensor scale(const Tensor& a, double factor) {
  require_defined(a, "scale");
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
  const bool rec = OpAccess::recording({&a});
  Tensor result = OpAccess::make(a.shape(), std::move(out), rec);
  if (rec) {
    ImplPtr ia = OpAccess::impl(a);
    ImplPtr io = OpAccess::impl(result);
    OpAccess::record(result, [=]() {
      OpAccess::ensure_grad(ia);
      const auto& go = io->grad;
      for (std::size_t i = 0; i < go.size(); ++i) ia->grad[i] += go[i] * factor;
    });
  }
  return result;
}

// ---- matmul -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape()[a.rank() - 1];
  const std::size_t k2 = b.shape()[b.rank() - 2];
  const std::size_t n = b.shape()[b.rank() - 1];
  if (k != k2)
    throw ShapeError("matmul: inner dimensions differ, " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));

  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  BcastPlan plan = make_bcast(batch_a, batch_b, "matmul");
  Shape out_shape = plan.out;
  out_shape.push_back(m);
  out_shape.push_back(n);

  const std::size_t slab_a = m * k;
  const std::size_t slab_b = k * n;
  const std::size_t slab_o = m * n;
  std::vector<double> out(shape_numel(plan.out) * slab_o, 0.0);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.data();
  for_each_bcast(plan, [&](std::size_t o, std::size_t ai, std::size_t bi) {
    gemm_nn(pa + ai * slab_a, pb + bi * slab_b, po + o * slab_o, m, k, n);
  });

  const bool rec = OpAccess::recording({&a, &b});
  Tensor result = OpAccess::make(std::move(out_shape), std::move(out), rec);
  if (rec) {
    const bool ga = OpAccess::wants_grad(a);
    const bool gb = OpAccess::wants_grad(b);
    ImplPtr ia = OpAccess::impl(a);
    ImplPtr ib = OpAccess::impl(b);
    ImplPtr io = OpAccess::impl(result);
    OpAccess::record(result, [=]() {
      if (ga) OpAccess::ensure_grad(ia);
      if (gb) OpAccess::ensure_grad(ib);
      const double* g = io->grad.data();
      const double* va = ia->values.data();
      const double* vb = ib->values.data();
      // dA needs dC * B^T; transposing the B slab once per distinct batch
      // index turns that into the vector-friendly saxpy kernel.
      std::vector<double> bt;
      std::size_t bt_for = static_cast<std::size_t>(-1);
      if (ga) bt.resize(slab_b);
      for_each_bcast(plan, [&](std::size_t o, std::size_t ai2, std::size_t bi2) {
        if (ga) {
          if (bi2 != bt_for) {
            transpose_into(vb + bi2 * slab_b, bt.data(), k, n);
            bt_for = bi2;
          }
          gemm_nn(g + o * slab_o, bt.data(), ia->grad.data() + ai2 * slab_a,
                  m, n, k);
        }
        if (gb)
          gemm_tn(va + ai2 * slab_a, g + o * slab_o, ib->grad.data() + bi2 * slab_b,
                  k, m, n);
      });
    });
  }
  return result;
}

// ---- data movement -------------------------------------------------------------

Tensor transpose_last2(const Tensor& a) {
  require_defined(a, "transpose_last2");
  if (a.rank() < 2)
    throw ShapeError("transpose_last2: rank >= 2 required, got " +
                     shape_str(a.shape()));
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  const std::size_t rows = a.shape()[a.rank() - 2];
  const std::size_t cols = a.shape()[a.rank() - 1];
  const std::size_t slab = rows * cols;
  const std::size_t batches = a.numel() / slab;
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t s = 0; s < batches; ++s) {
    const double* src = av.data() + s * slab;
    double* dst = out.data() + s * slab;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
  const bool rec = OpAccess::recording({&a});
  Tensor result = OpAccess::make(std::move(out_shape), std::move(out), rec);
  if (rec) {
    ImplPtr ia = OpAccess::impl(a);
    ImplPtr io = OpAccess::impl(result);
    OpAccess::record(result, [=]() {
      OpAccess::ensure_grad(ia);
      const auto& go = io->grad;
      for (std::size_t s = 0; s < batches; ++s) {
        const double* g = go.data() + s * slab;
        double* dst = ia->grad.data() + s * slab;
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j)
            dst[i * cols + j] += g[j * rows + i];
      }
    });
  }
  return result;
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  require_defined(a, "permute");
  if (axes.size() != a.rank())
    throw ShapeError("permute: axes size must equal rank");
  std::vector<bool> seen(a.rank(), false);
  for (std::size_t ax : axes) {
    if (ax >= a.rank() || seen[ax]) throw ParamError("permute: invalid axes");
    seen[ax] = true;
  }
  Shape out_shape(a.rank());
  for (std::size_t i = 0; i < a.rank(); ++i) out_shape[i] = a.shape()[axes[i]];
  const auto src_strides = row_major_strides(a.shape());
  std::vector<std::size_t> strides(a.rank());
  for (std::size_t i = 0; i < a.rank(); ++i) strides[i] = src_strides[axes[i]];

  const std::size_t total = a.numel();
  const auto& av = a.values();
  std::vector<double> out(total);
  std::vector<std::size_t> src_index(total);
  if (a.rank() == 0) {
    if (total) {
      out[0] = av[0];
      src_index[0] = 0;
    }
  } else {
    std::vector<std::size_t> idx(a.rank(), 0);
    std::size_t si = 0;
    for (std::size_t o = 0; o < total; ++o) {
      out[o] = av[si];
      src_index[o] = si;
      for (std::size_t d = a.rank(); d-- > 0;) {
        ++idx[d];
        si += strides[d];
        if (idx[d] < out_shape[d]) break;
        idx[d] = 0;
        si -= strides[d] * out_shape[d];
      }
    }
  }
  const bool rec = OpAccess::recording({&a});
  Tensor result = OpAccess::make(std::move(out_shape), std::move(out), rec);
  if (rec) {
    ImplPtr ia = OpAccess::impl(a);
    ImplPtr io = OpAccess::impl(result);
    OpAccess::record(result, [=, src = std::move(src_index)]() {
      OpAccess::ensure_grad(ia);
      const auto& go = io->grad;
      for (std::size_t o = 0; o < go.size(); ++o) ia->grad[src[o]] += go[o];
    });
  }
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  const bool rec = OpAccess::recording({&a});
  Tensor result = OpAccess::make(std::move(shape), a.values(), rec);
  if (rec) {
    ImplPtr ia = OpAccess::impl(a);
    ImplPtr io = OpAccess::impl(result);
    OpAccess::record(result, [=]() {
      OpAccess::ensure_grad(ia);
      const auto& go = io->grad;
      for (std::size_t i = 0; i < go.size(); ++i) ia->grad[i] += go[i];
    });
  }
  return result;
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  require_defined(a, "broadcast_to");
  BcastPlan plan = make_bcast(a.shape(), shape, "broadcast_to");
  if (plan.out != shape)
    throw ShapeError("broadcast_to: " + shape_str(a.shape()) +
                     " does not broadcast to " + shape_str(shape));
  const auto& av = a.values();
  std::vector<double> out(shape_numel(shape));
  for_each_bcast(plan, [&](std::size_t o, std::size_t ai, std::size_t) {
    out[o] = av[ai];
  });
  const bool rec = OpAccess::recording({&a});
  Tensor result = OpAccess::make(shape, std::move(out), rec);
  if (rec) {
    ImplPtr ia = OpAccess::impl(a);
    ImplPtr io = OpAccess::impl(result);
    OpAccess::record(result, [=]() {
      OpAccess::ensure_grad(ia);
      const auto& go = io->grad;
      for_each_bcast(plan, [&](std::size_t o, std::size_t ai, std::size_t) {
        ia->grad[ai] += go[o];
      });
    });
  }
  return result;
}

// ---- nonlinearities -------------------------------------------------------------

Tensor relu(const Tensor& a) {
  require_defined(a, "relu");
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  const bool rec = OpAccess::recording({&a});
  Tensor result = OpAccess::make(a.shape(), std::move(out), rec);
  if (rec) {
    ImplPtr ia = OpAccess::impl(a);
    ImplPtr io = OpAccess::impl(result);
    OpAccess::record(result, [=]() {
      OpAccess::ensure_grad(ia);
      const auto& go = io->grad;
      for (std::size_t i = 0; i < go.size(); ++i)
        if (ia->values[i] > 0.0) ia->grad[i] += go[i];
    });
  }
  return result;
}

Tensor softmax_lastdim(const Tensor& x, const Tensor& additive_mask) {
  require_defined(x, "softmax_lastdim");
  if (x.rank() < 1) throw ShapeError("softmax_lastdim: rank >= 1 required");
  if (additive_mask.defined() &&
      (additive_mask.requires_grad() || additive_mask.tracked()))
    throw ParamError("softmax_lastdim: mask must not require gradients");

  const auto& xv = x.values();
  for (double v : xv)
    if (std::isnan(v)) throw NumericError("softmax_lastdim: NaN in input");

  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  std::vector<double> logits;  // only materialized when a mask applies
  const double* base = xv.data();
  if (additive_mask.defined()) {
    BcastPlan plan = make_bcast(x.shape(), additive_mask.shape(), "softmax_lastdim");
    if (plan.out != x.shape())
      throw ShapeError("softmax_lastdim: mask " +
                       shape_str(additive_mask.shape()) +
                       " does not broadcast to " + shape_str(x.shape()));
    logits.resize(xv.size());
    const auto& mv = additive_mask.values();
    for_each_bcast(plan, [&](std::size_t o, std::size_t, std::size_t bi) {
      logits[o] = xv[o] + mv[bi];
    });
    base = logits.data();
  }

  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = base + r * width;
    double* orow = out.data() + r * width;
    double hi = row[0];
    for (std::size_t j = 1; j < width; ++j) hi = std::max(hi, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      orow[j] = std::exp(row[j] - hi);
      denom += orow[j];
    }
    for (std::size_t j = 0; j < width; ++j) orow[j] /= denom;
  }

  const bool rec = OpAccess::recording({&x});
  Tensor result = OpAccess::make(x.shape(), std::move(out), rec);
  if (rec) {
    ImplPtr ix = OpAccess::impl(x);
    ImplPtr io = OpAccess::impl(result);
    OpAccess::record(result, [=]() {
      OpAccess::ensure_grad(ix);
      const auto& go = io->grad;
      const auto& y = io->values;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* yr = y.data() + r * width;
        const double* gr = go.data() + r * width;
        double dot = 0.0;
        for (std::size_t j = 0; j < width; ++j) dot += gr[j] * yr[j];
        double* gx = ix->grad.data() + r * width;
        for (std::size_t j = 0; j < width; ++j) gx[j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  require_defined(x, "layer_norm");
  require_defined(gamma, "layer_norm");
  require_defined(beta, "layer_norm");
  if (x.rank() < 1) throw ShapeError("layer_norm: rank >= 1 required");
  const std::size_t width = x.shape().back();
  if (gamma.shape() != Shape{width} || beta.shape() != Shape{width})
    throw ShapeError("layer_norm: gamma/beta must have shape (" +
                     std::to_string(width) + ")");

  const std::size_t rows = x.numel() / width;
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<double> out(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  auto means = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * width;
    double mean = 0.0;
    for (std::size_t j = 0; j < width; ++j) mean += row[j];
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(width);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    (*means)[r] = mean;
    (*inv_std)[r] = inv;
    double* orow = out.data() + r * width;
    for (std::size_t j = 0; j < width; ++j)
      orow[j] = (row[j] - mean) * inv * gv[j] + bv[j];
  }

  const bool rec = OpAccess::recording({&x, &gamma, &beta});
  Tensor result = OpAccess::make(x.shape(), std::move(out), rec);
  if (rec) {
    const bool gx = OpAccess::wants_grad(x);
    const bool gg = OpAccess::wants_grad(gamma);
    const bool gb = OpAccess::wants_grad(beta);
    ImplPtr ix = OpAccess::impl(x);
    ImplPtr ig = OpAccess::impl(gamma);
    ImplPtr ib = OpAccess::impl(beta);
    ImplPtr io = OpAccess::impl(result);
    OpAccess::record(result, [=]() {
      const auto& go = io->grad;
      if (gx) OpAccess::ensure_grad(ix);
      if (gg) OpAccess::ensure_grad(ig);
      if (gb) OpAccess::ensure_grad(ib);
      const double w = static_cast<double>(width);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* row = ix->values.data() + r * width;
        const double* gr = go.data() + r * width;
        const double mean = (*means)[r];
        const double inv = (*inv_std)[r];
        if (gg || gb) {
          for (std::size_t j = 0; j < width; ++j) {
            if (gg) ig->grad[j] += gr[j] * (row[j] - mean) * inv;
            if (gb) ib->grad[j] += gr[j];
          }
        }
        if (gx) {
          double sum_g = 0.0;
          double sum_gx = 0.0;
          for (std::size_t j = 0; j < width; ++j) {
            const double g = gr[j] * ig->values[j];
            const double xhat = (row[j] - mean) * inv;
            sum_g += g;
            sum_gx += g * xhat;
          }
          double* dst = ix->grad.data() + r * width;
          for (std::size_t j = 0; j < width; ++j) {
            const double g = gr[j] * ig->values[j];
            const double xhat = (row[j] - mean) * inv;
            dst[j] += inv * (g - sum_g / w - xhat * sum_gx / w);
          }
        }
      }
    });
  }
  return result;
}

// ---- head split/concat -------------------------------------------------------

Tensor split_heads(const Tensor& x, std::size_t n_heads) {
  require_defined(x, "split_heads");
  if (x.rank() < 1) throw ShapeError("split_heads: rank >= 1 required");
  if (n_heads == 0) throw ParamError("split_heads: n_heads must be positive");
  const std::size_t width = x.shape().back();
  if (width % n_heads != 0)
    throw ShapeError("split_heads: last dim " + std::to_string(width) +
                     " not divisible by " + std::to_string(n_heads) + " heads");
  const std::size_t head_dim = width / n_heads;
  const std::size_t lead = x.numel() / width;
  Shape out_shape;
  out_shape.push_back(n_heads);
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(head_dim);

  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t h = 0; h < n_heads; ++h)
    for (std::size_t p = 0; p < lead; ++p) {
      const double* src = xv.data() + p * width + h * head_dim;
      double* dst = out.data() + (h * lead + p) * head_dim;
      for (std::size_t j = 0; j < head_dim; ++j) dst[j] = src[j];
    }

  const bool rec = OpAccess::recording({&x});
  Tensor result = OpAccess::make(std::move(out_shape), std::move(out), rec);
  if (rec) {
    ImplPtr ix = OpAccess::impl(x);
    ImplPtr io = OpAccess::impl(result);
    OpAccess::record(result, [=]() {
      OpAccess::ensure_grad(ix);
      const auto& go = io->grad;
      for (std::size_t h = 0; h < n_heads; ++h)
        for (std::size_t p = 0; p < lead; ++p) {
          const double* g = go.data() + (h * lead + p) * head_dim;
          double* dst = ix->grad.data() + p * width + h * head_dim;
          for (std::size_t j = 0; j < head_dim; ++j) dst[j] += g[j];
        }
    });
  }
  return result;
}

Tensor concat_heads(const Tensor& x) {
  require_defined(x, "concat_heads");
  if (x.rank() < 2)
    throw ShapeError("concat_heads: rank >= 2 required, got " +
                     shape_str(x.shape()));
  const std::size_t n_heads = x.shape().front();
  const std::size_t head_dim = x.shape().back();
  const std::size_t width = n_heads * head_dim;
  const std::size_t lead = x.numel() / (n_heads * head_dim);
  Shape out_shape(x.shape().begin() + 1, x.shape().end() - 1);
  out_shape.push_back(width);

  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t h = 0; h < n_heads; ++h)
    for (std::size_t p = 0; p < lead; ++p) {
      const double* src = xv.data() + (h * lead + p) * head_dim;
      double* dst = out.data() + p * width + h * head_dim;
      for (std::size_t j = 0; j < head_dim; ++j) dst[j] = src[j];
    }

  const bool rec = OpAccess::recording({&x});
  Tensor result = OpAccess::make(std::move(out_shape), std::move(out), rec);
  if (rec) {
    ImplPtr ix = OpAccess::impl(x);
    ImplPtr io = OpAccess::impl(result);
    OpAccess::record(result, [=]() {
      OpAccess::ensure_grad(ix);
      const auto& go = io->grad;
      for (std::size_t h = 0; h < n_heads; ++h)
        for (std::size_t p = 0; p < lead; ++p) {
          const double* g = go.data() + p * width + h * head_dim;
          double* dst = ix->grad.data() + (h * lead + p) * head_dim;
          for (std::size_t j = 0; j < head_dim; ++j) dst[j] += g[j];
        }
    });
  }
  return result;
}

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ParamError("concat_lastdim: no tensors given");
  for (const Tensor& t : parts) require_defined(t, "concat_lastdim");
  const Tensor& first = parts.front();
  if (first.rank() < 1) throw ShapeError("concat_lastdim: rank >= 1 required");
  Shape lead_shape(first.shape().begin(), first.shape().end() - 1);
  std::size_t width = 0;
  std::vector<std::size_t> widths(parts.size());
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Shape& s = parts[i].shape();
    if (s.empty() || Shape(s.begin(), s.end() - 1) != lead_shape)
      throw ShapeError("concat_lastdim: leading dims differ");
    widths[i] = s.back();
    width += widths[i];
  }
  const std::size_t lead = shape_numel(lead_shape);
  Shape out_shape = lead_shape;
  out_shape.push_back(width);
  std::vector<double> out(lead * width);
  std::size_t col = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& pv = parts[i].values();
    for (std::size_t p = 0; p < lead; ++p) {
      const double* src = pv.data() + p * widths[i];
      double* dst = out.data() + p * width + col;
      for (std::size_t j = 0; j < widths[i]; ++j) dst[j] = src[j];
    }
    col += widths[i];
  }

  bool rec = false;
  if (GradTape::active() != nullptr)
    for (const Tensor& t : parts)
      if (OpAccess::wants_grad(t)) {
        rec = true;
        break;
      }
  Tensor result = OpAccess::make(std::move(out_shape), std::move(out), rec);
  if (rec) {
    std::vector<ImplPtr> impls;
    std::vector<bool> wants;
    impls.reserve(parts.size());
    for (const Tensor& t : parts) {
      impls.push_back(OpAccess::impl(t));
      wants.push_back(OpAccess::wants_grad(t));
    }
    ImplPtr io = OpAccess::impl(result);
    OpAccess::record(result, [=]() {
      const auto& go = io->grad;
      std::size_t c = 0;
      for (std::size_t i = 0; i < impls.size(); ++i) {
        if (wants[i]) {
          OpAccess::ensure_grad(impls[i]);
          for (std::size_t p = 0; p < lead; ++p) {
            const double* g = go.data() + p * width + c;
            double* dst = impls[i]->grad.data() + p * widths[i];
            for (std::size_t j = 0; j < widths[i]; ++j) dst[j] += g[j];
          }
        }
        c += widths[i];
      }
    });
  }
  return result;
}

Tensor sum_all(const Tensor& a) {
  require_defined(a, "sum_all");
  const auto& av = a.values();
  double total = 0.0;
  for (double v : av) total += v;  // fixed left-to-right order
  const bool rec = OpAccess::recording({&a});
  Tensor result = OpAccess::make({}, {total}, rec);
  if (rec) {
    ImplPtr ia = OpAccess::impl(a);
    ImplPtr io = OpAccess::impl(result);
    OpAccess::record(result, [=]() {
      OpAccess::ensure_grad(ia);
      const double g = io->grad[0];
      for (double& v : ia->grad) v += g;
    });
  }
  return result;
}

// ---- gradient checking ---------------------------------------------------------

double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> wrt,
                  double step) {
  std::vector<std::vector<double>> analytic;
  {
    GradTape tape;
    Tensor loss = f();
    if (loss.numel() != 1) throw ParamError("grad_check: f must return a scalar");
    for (Tensor& t : wrt) t.zero_grad();
    if (loss.tracked()) tape.backward(loss);  // constant f leaves zero grads
    for (Tensor& t : wrt) {
      if (t.has_grad())
        analytic.push_back(t.grad());
      else
        analytic.emplace_back(t.numel(), 0.0);
    }
  }

  double worst = 0.0;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    auto& v = wrt[ti].mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + step;
      const double hi = f().item();
      v[i] = orig - step;
      const double lo = f().item();
      v[i] = orig;
      const double numeric = (hi - lo) / (2.0 * step);
      const double a = analytic[ti][i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace kriformer
