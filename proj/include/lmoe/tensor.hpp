#pragma once

// Dense n-dimensional tensors with reverse-mode automatic differentiation.
//
// Tensors are cheap handles onto reference-counted nodes. Every operation
// records the nodes it consumed plus a backward rule; backward() walks the
// recorded graph once, in reverse creation order, accumulating gradients
// additively into every tensor that requires them. Tensors with
// requires_grad=false are never written by backward.
//
// The scalar type is a template parameter: float is the training precision,
// double is the grad-check precision.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "lmoe/errors.hpp"
#include "lmoe/random.hpp"

namespace lmoe {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// A batch of token ids, row-major [batch x seq].
struct TokenIds {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;
};

namespace detail {
inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

template <class S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  const char* op = "leaf";
  std::uint64_t id = detail::next_node_id();  // creation order
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(TensorNode<S>&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

template <class S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<S>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape) { return full(std::move(shape), S(0)); }

  static Tensor full(Shape shape, S v) {
    auto node = std::make_shared<TensorNode<S>>();
    node->value.assign(numel(shape), v);
    node->shape = std::move(shape);
    return Tensor(std::move(node));
  }

  static Tensor from_data(Shape shape, std::vector<S> data) {
    if (numel(shape) != data.size()) {
      throw shape_error("tensor: shape " + shape_str(shape) + " wants " +
                        std::to_string(numel(shape)) + " values, got " +
                        std::to_string(data.size()));
    }
    auto node = std::make_shared<TensorNode<S>>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    return Tensor(std::move(node));
  }

  static Tensor scalar(S v) { return full(Shape{}, v); }

  static Tensor randn(Shape shape, Rng& rng, double stddev) {
    auto t = zeros(std::move(shape));
    for (S& x : t.mut_value()) x = static_cast<S>(rng.gaussian(0.0, stddev));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  const std::vector<S>& value() const { return node_->value; }
  std::vector<S>& mut_value() { return node_->value; }
  S item() const {
    if (size() != 1) {
      throw contract_error("item: tensor " + shape_str(shape()) + " is not a scalar");
    }
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<S>& grad() const {
    if (!has_grad()) {
      throw contract_error("grad: no gradient has been accumulated");
    }
    return node_->grad;
  }
  std::vector<S> grad_or_zeros() const {
    return has_grad() ? node_->grad : std::vector<S>(size(), S(0));
  }
  void zero_grad() { node_->grad.clear(); }

  std::shared_ptr<TensorNode<S>> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<S>> node_;
};

namespace detail {

template <class S>
Tensor<S> make_op_result(Shape shape, std::vector<S> value, const char* op,
                         std::vector<std::shared_ptr<TensorNode<S>>> parents,
                         std::function<void(TensorNode<S>&)> backward_fn) {
  auto node = std::make_shared<TensorNode<S>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<S>(std::move(node));
}

// Splits a shape around `axis` into (outer, n, inner) extents for stride
// iteration along a single axis.
inline void axis_extents(const Shape& shape, std::size_t axis, std::size_t& outer,
                         std::size_t& n, std::size_t& inner) {
  outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  n = shape[axis];
  inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

inline std::size_t normalize_axis(const Shape& shape, int axis, const char* op) {
  const int r = static_cast<int>(shape.size());
  int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw shape_error(std::string(op) + ": axis " + std::to_string(axis) +
                      " out of range for shape " + shape_str(shape));
  }
  return static_cast<std::size_t>(a);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Nodes are visited exactly once, in
// reverse creation order (parents are always created before children, so
// creation order is a topological order of the tape).
template <class S>
void backward(const Tensor<S>& loss) {
  if (loss.size() != 1) {
    throw contract_error("backward: loss must be a scalar, got shape " +
                         shape_str(loss.shape()));
  }
  auto root = loss.node();
  if (!root->requires_grad && !root->backward_fn) {
    // A detached scalar: nothing depends on any trainable tensor.
    return;
  }

  std::vector<TensorNode<S>*> reachable;
  std::unordered_set<TensorNode<S>*> seen;
  std::vector<TensorNode<S>*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    TensorNode<S>* n = stack.back();
    stack.pop_back();
    reachable.push_back(n);
    for (const auto& p : n->parents) {
      if (seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(reachable.begin(), reachable.end(),
            [](const TensorNode<S>* a, const TensorNode<S>* b) { return a->id > b->id; });

  root->ensure_grad();
  root->grad[0] = S(1);
  for (TensorNode<S>* n : reachable) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise and broadcasting ops
// ---------------------------------------------------------------------------

// Elementwise sum. `b` may also be a suffix of `a`'s shape, in which case it
// is broadcast over the leading batch dimensions (the only broadcasting rule
// supported anywhere in this library).
template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool suffix =
      sb.size() <= sa.size() &&
      std::equal(sb.begin(), sb.end(), sa.end() - static_cast<long>(sb.size()));
  if (!suffix) {
    throw shape_error("add: shape " + shape_str(sb) + " is not a suffix of " +
                      shape_str(sa));
  }
  const std::size_t nb = b.size() ? b.size() : 1;
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.value()[i] + b.value()[i % nb];
  }
  return detail::make_op_result<S>(
      sa, std::move(out), "add", {a.node(), b.node()},
      [nb](TensorNode<S>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i % nb] += self.grad[i];
        }
      });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, scale(b, S(-1)));
}

// Elementwise product; shapes must match exactly.
template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw shape_error("mul: shapes differ: " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return detail::make_op_result<S>(
      a.shape(), std::move(out), "mul", {a.node(), b.node()},
      [](TensorNode<S>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa.grad[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pb.grad[i] += self.grad[i] * pa.value[i];
        }
      });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * c;
  return detail::make_op_result<S>(
      a.shape(), std::move(out), "scale", {a.node()},
      [c](TensorNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * c;
      });
}

// Multiplies each length-d row of `v` by the matching scalar in `w`:
// out[j, :] = v[j, :] * w[j]. `w`'s shape must equal `v`'s leading dims.
template <class S>
Tensor<S> rowwise_scale(const Tensor<S>& v, const Tensor<S>& w) {
  const Shape& sv = v.shape();
  const Shape& sw = w.shape();
  const bool prefix = sv.size() == sw.size() + 1 &&
                      std::equal(sw.begin(), sw.end(), sv.begin());
  if (!prefix) {
    throw shape_error("rowwise_scale: weights " + shape_str(sw) +
                      " do not match rows of " + shape_str(sv));
  }
  const std::size_t d = sv.back();
  std::vector<S> out(v.size());
  for (std::size_t j = 0; j < w.size(); ++j) {
    const S wj = w.value()[j];
    for (std::size_t c = 0; c < d; ++c) out[j * d + c] = v.value()[j * d + c] * wj;
  }
  return detail::make_op_result<S>(
      sv, std::move(out), "rowwise_scale", {v.node(), w.node()},
      [d](TensorNode<S>& self) {
        auto& pv = *self.parents[0];
        auto& pw = *self.parents[1];
        if (pv.requires_grad) {
          pv.ensure_grad();
          for (std::size_t j = 0; j < pw.value.size(); ++j) {
            const S wj = pw.value[j];
            for (std::size_t c = 0; c < d; ++c)
              pv.grad[j * d + c] += self.grad[j * d + c] * wj;
          }
        }
        if (pw.requires_grad) {
          pw.ensure_grad();
          for (std::size_t j = 0; j < pw.value.size(); ++j) {
            S acc = S(0);
            for (std::size_t c = 0; c < d; ++c)
              acc += self.grad[j * d + c] * pv.value[j * d + c];
            pw.grad[j] += acc;
          }
        }
      });
}

// Selects a fixed index along the last axis: out[j] = a[j, index].
template <class S>
Tensor<S> index_last(const Tensor<S>& a, std::size_t index) {
  if (a.rank() == 0) {
    throw shape_error("index_last: scalar input " + shape_str(a.shape()));
  }
  const std::size_t d = a.shape().back();
  if (index >= d) {
    throw shape_error("index_last: index " + std::to_string(index) +
                      " out of range for shape " + shape_str(a.shape()));
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  std::vector<S> out(numel(out_shape));
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = a.value()[j * d + index];
  return detail::make_op_result<S>(
      std::move(out_shape), std::move(out), "index_last", {a.node()},
      [d, index](TensorNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t j = 0; j < self.grad.size(); ++j)
          p.grad[j * d + index] += self.grad[j];
      });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw shape_error("reshape: cannot view " + shape_str(a.shape()) + " as " +
                      shape_str(shape));
  }
  return detail::make_op_result<S>(
      std::move(shape), a.value(), "reshape", {a.node()},
      [](TensorNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
      });
}

// General axis permutation. perm must be a permutation of [0, rank).
template <class S>
Tensor<S> transpose(const Tensor<S>& a, std::vector<std::size_t> perm) {
  const Shape& sa = a.shape();
  if (perm.size() != sa.size()) {
    throw shape_error("transpose: perm of size " + std::to_string(perm.size()) +
                      " for shape " + shape_str(sa));
  }
  {
    std::vector<std::size_t> check = perm;
    std::sort(check.begin(), check.end());
    for (std::size_t i = 0; i < check.size(); ++i) {
      if (check[i] != i) throw shape_error("transpose: invalid permutation");
    }
  }
  const std::size_t r = sa.size();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = sa[perm[i]];

  std::vector<std::size_t> in_strides(r, 1), out_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * sa[i];
  for (std::size_t i = r; i-- > 1;) out_strides[i - 1] = out_strides[i] * out_shape[i];

  // For each output position, the source stride along output axis i is the
  // input stride of the axis it came from.
  std::vector<std::size_t> src_strides(r);
  for (std::size_t i = 0; i < r; ++i) src_strides[i] = in_strides[perm[i]];

  const std::size_t total = a.size();
  std::vector<S> out(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < total; ++o) {
    out[o] = a.value()[src];
    for (std::size_t i = r; i-- > 0;) {
      idx[i]++;
      src += src_strides[i];
      if (idx[i] < out_shape[i]) break;
      src -= src_strides[i] * out_shape[i];
      idx[i] = 0;
    }
  }
  return detail::make_op_result<S>(
      std::move(out_shape), std::move(out), "transpose", {a.node()},
      [src_strides, shape = Shape(sa)](TensorNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const std::size_t r = self.shape.size();
        std::vector<std::size_t> idx(r, 0);
        std::size_t src = 0;
        for (std::size_t o = 0; o < self.grad.size(); ++o) {
          p.grad[src] += self.grad[o];
          for (std::size_t i = r; i-- > 0;) {
            idx[i]++;
            src += src_strides[i];
            if (idx[i] < self.shape[i]) break;
            src -= src_strides[i] * self.shape[i];
            idx[i] = 0;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
  S acc = S(0);
  for (S v : a.value()) acc += v;
  return detail::make_op_result<S>(
      Shape{}, std::vector<S>{acc}, "sum_all", {a.node()},
      [](TensorNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[0];
      });
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
  return scale(sum_all(a), S(1) / static_cast<S>(a.size()));
}

template <class S>
Tensor<S> sum_axis(const Tensor<S>& a, int axis) {
  const std::size_t ax = detail::normalize_axis(a.shape(), axis, "sum_axis");
  std::size_t outer, n, inner;
  detail::axis_extents(a.shape(), ax, outer, n, inner);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  std::vector<S> out(outer * inner, S(0));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += a.value()[(o * n + j) * inner + i];
  return detail::make_op_result<S>(
      std::move(out_shape), std::move(out), "sum_axis", {a.node()},
      [outer, n, inner](TensorNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < inner; ++i)
              p.grad[(o * n + j) * inner + i] += self.grad[o * inner + i];
      });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// Matrix product over the trailing two axes. Both operands must have the same
// rank and identical leading (batch) dimensions: [..., m, n] x [..., n, p].
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const auto fail = [&] {
    throw shape_error("matmul: incompatible shapes " + shape_str(sa) + " x " +
                      shape_str(sb));
  };
  if (sa.size() < 2 || sa.size() != sb.size()) fail();
  for (std::size_t i = 0; i + 2 < sa.size(); ++i)
    if (sa[i] != sb[i]) fail();
  const std::size_t m = sa[sa.size() - 2], n = sa[sa.size() - 1];
  const std::size_t n2 = sb[sb.size() - 2], p = sb[sb.size() - 1];
  if (n != n2) fail();
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];

  Shape out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(p);
  std::vector<S> out(batch * m * p, S(0));
  for (std::size_t g = 0; g < batch; ++g) {
    const S* A = a.value().data() + g * m * n;
    const S* B = b.value().data() + g * n * p;
    S* C = out.data() + g * m * p;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < n; ++k) {
        const S aik = A[i * n + k];
        const S* Bk = B + k * p;
        S* Ci = C + i * p;
        for (std::size_t j = 0; j < p; ++j) Ci[j] += aik * Bk[j];
      }
  }
  return detail::make_op_result<S>(
      std::move(out_shape), std::move(out), "matmul", {a.node(), b.node()},
      [batch, m, n, p](TensorNode<S>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        // dA = G B^T, dB = A^T G, per batch entry.
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (std::size_t g = 0; g < batch; ++g) {
            const S* G = self.grad.data() + g * m * p;
            const S* B = pb.value.data() + g * n * p;
            S* dA = pa.grad.data() + g * m * n;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < p; ++j) {
                const S gij = G[i * p + j];
                const S* Bj = B + j;
                S* dAi = dA + i * n;
                for (std::size_t k = 0; k < n; ++k) dAi[k] += gij * Bj[k * p];
              }
          }
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t g = 0; g < batch; ++g) {
            const S* G = self.grad.data() + g * m * p;
            const S* A = pa.value.data() + g * m * n;
            S* dB = pb.grad.data() + g * n * p;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t k = 0; k < n; ++k) {
                const S aik = A[i * n + k];
                const S* Gi = G + i * p;
                S* dBk = dB + k * p;
                for (std::size_t j = 0; j < p; ++j) dBk[j] += aik * Gi[j];
              }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// nonlinearities
// ---------------------------------------------------------------------------

// Softmax along `axis`, computed with max-subtraction for stability.
template <class S>
Tensor<S> softmax(const Tensor<S>& a, int axis) {
  const std::size_t ax = detail::normalize_axis(a.shape(), axis, "softmax");
  std::size_t outer, n, inner;
  detail::axis_extents(a.shape(), ax, outer, n, inner);
  std::vector<S> out(a.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      S mx = a.value()[base];
      for (std::size_t j = 1; j < n; ++j)
        mx = std::max(mx, a.value()[base + j * inner]);
      S denom = S(0);
      for (std::size_t j = 0; j < n; ++j) {
        const S e = std::exp(a.value()[base + j * inner] - mx);
        out[base + j * inner] = e;
        denom += e;
      }
      const S inv = S(1) / denom;
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] *= inv;
    }
  }
  return detail::make_op_result<S>(
      a.shape(), std::move(out), "softmax", {a.node()},
      [outer, n, inner](TensorNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        // dx = s * (g - sum_j g_j s_j) along the softmax axis.
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            S dot = S(0);
            for (std::size_t j = 0; j < n; ++j)
              dot += self.grad[base + j * inner] * self.value[base + j * inner];
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t k = base + j * inner;
              p.grad[k] += self.value[k] * (self.grad[k] - dot);
            }
          }
        }
      });
}

template <class S>
Tensor<S> relu(const Tensor<S>& a) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.value()[i] > S(0) ? a.value()[i] : S(0);
  return detail::make_op_result<S>(
      a.shape(), std::move(out), "relu", {a.node()},
      [](TensorNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (p.value[i] > S(0)) p.grad[i] += self.grad[i];
      });
}

// Exact (erf-based) GELU.
template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const S x = a.value()[i];
    out[i] = S(0.5) * x * (S(1) + std::erf(x / S(std::sqrt(2.0))));
  }
  return detail::make_op_result<S>(
      a.shape(), std::move(out), "gelu", {a.node()},
      [](TensorNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        constexpr double inv_sqrt_2 = 0.7071067811865475244;
        constexpr double inv_sqrt_2pi = 0.3989422804014326779;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const double x = static_cast<double>(p.value[i]);
          const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt_2));
          const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
          p.grad[i] += self.grad[i] * static_cast<S>(cdf + x * pdf);
        }
      });
}

// ---------------------------------------------------------------------------
// layer normalization
// ---------------------------------------------------------------------------

// Normalizes the last axis to zero mean / unit variance, then applies the
// learned gain and bias (both of shape [n]).
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     S eps = S(1e-5)) {
  if (x.rank() == 0) throw shape_error("layer_norm: scalar input");
  const std::size_t n = x.shape().back();
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n}) {
    throw shape_error("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                      shape_str(bias.shape()) + " do not match rows of " +
                      shape_str(x.shape()));
  }
  const std::size_t rows = x.size() / n;
  std::vector<S> out(x.size());
  std::vector<S> xhat(x.size());
  std::vector<S> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const S* row = x.value().data() + r * n;
    S mean = S(0);
    for (std::size_t i = 0; i < n; ++i) mean += row[i];
    mean /= static_cast<S>(n);
    S var = S(0);
    for (std::size_t i = 0; i < n; ++i) {
      const S d = row[i] - mean;
      var += d * d;
    }
    var /= static_cast<S>(n);
    const S is = S(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < n; ++i) {
      const S h = (row[i] - mean) * is;
      xhat[r * n + i] = h;
      out[r * n + i] = h * gain.value()[i] + bias.value()[i];
    }
  }
  return detail::make_op_result<S>(
      x.shape(), std::move(out), "layer_norm",
      {x.node(), gain.node(), bias.node()},
      [n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode<S>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const S* g = self.grad.data() + r * n;
          const S* h = xhat.data() + r * n;
          if (px.requires_grad) {
            // dx = inv_std * (dh - mean(dh) - xhat * mean(dh * xhat)),
            // with dh = g * gain.
            S mean_dh = S(0), mean_dh_h = S(0);
            for (std::size_t i = 0; i < n; ++i) {
              const S dh = g[i] * pg.value[i];
              mean_dh += dh;
              mean_dh_h += dh * h[i];
            }
            mean_dh /= static_cast<S>(n);
            mean_dh_h /= static_cast<S>(n);
            for (std::size_t i = 0; i < n; ++i) {
              const S dh = g[i] * pg.value[i];
              px.grad[r * n + i] += inv_std[r] * (dh - mean_dh - h[i] * mean_dh_h);
            }
          }
          if (pg.requires_grad)
            for (std::size_t i = 0; i < n; ++i) pg.grad[i] += g[i] * h[i];
          if (pb.requires_grad)
            for (std::size_t i = 0; i < n; ++i) pb.grad[i] += g[i];
        }
      });
}

// ---------------------------------------------------------------------------
// embedding lookup
// ---------------------------------------------------------------------------

// Gathers rows of `table` ([vocab x width]) for each id; the output has shape
// leading + [width]. Backward scatter-adds into the table.
template <class S>
Tensor<S> embedding(const Tensor<S>& table, std::span<const std::int32_t> ids,
                    Shape leading) {
  if (table.rank() != 2) {
    throw shape_error("embedding: table must be 2-d, got " + shape_str(table.shape()));
  }
  if (numel(leading) != ids.size()) {
    throw shape_error("embedding: " + std::to_string(ids.size()) + " ids for shape " +
                      shape_str(leading));
  }
  const std::size_t vocab = table.shape()[0];
  const std::size_t width = table.shape()[1];
  std::vector<S> out(ids.size() * width);
  std::vector<std::int32_t> kept(ids.begin(), ids.end());
  for (std::size_t j = 0; j < ids.size(); ++j) {
    const std::int32_t id = ids[j];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw vocab_error("embedding: token id " + std::to_string(id) +
                        " outside vocabulary of size " + std::to_string(vocab));
    }
    std::copy_n(table.value().data() + static_cast<std::size_t>(id) * width, width,
                out.data() + j * width);
  }
  Shape out_shape = std::move(leading);
  out_shape.push_back(width);
  return detail::make_op_result<S>(
      std::move(out_shape), std::move(out), "embedding", {table.node()},
      [width, kept = std::move(kept)](TensorNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t j = 0; j < kept.size(); ++j) {
          S* dst = p.grad.data() + static_cast<std::size_t>(kept[j]) * width;
          const S* src = self.grad.data() + j * width;
          for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
        }
      });
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

// Mean negative log-likelihood over the unmasked rows of [rows x vocab]
// logits. Targets are class ids; mask selects the rows that count.
template <class S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask) {
  if (logits.rank() != 2) {
    throw shape_error("cross_entropy: logits must be 2-d, got " +
                      shape_str(logits.shape()));
  }
  const std::size_t rows = logits.shape()[0];
  const std::size_t vocab = logits.shape()[1];
  if (targets.size() != rows || mask.size() != rows) {
    throw shape_error("cross_entropy: logits " + shape_str(logits.shape()) + " with " +
                      std::to_string(targets.size()) + " targets / " +
                      std::to_string(mask.size()) + " mask entries");
  }
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) counted += mask[r] ? 1 : 0;
  if (counted == 0) {
    throw data_error("cross_entropy: all positions are masked (empty batch)");
  }

  std::vector<S> probs(rows * vocab, S(0));  // filled for unmasked rows only
  S loss = S(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const std::int32_t t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw vocab_error("cross_entropy: target id " + std::to_string(t) +
                        " outside vocabulary of size " + std::to_string(vocab));
    }
    const S* row = logits.value().data() + r * vocab;
    S mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    S denom = S(0);
    for (std::size_t j = 0; j < vocab; ++j) {
      const S e = std::exp(row[j] - mx);
      probs[r * vocab + j] = e;
      denom += e;
    }
    const S inv = S(1) / denom;
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] *= inv;
    loss -= std::log(probs[r * vocab + static_cast<std::size_t>(t)]);
  }
  loss /= static_cast<S>(counted);

  std::vector<std::int32_t> kept_t(targets.begin(), targets.end());
  std::vector<std::uint8_t> kept_m(mask.begin(), mask.end());
  return detail::make_op_result<S>(
      Shape{}, std::vector<S>{loss}, "cross_entropy", {logits.node()},
      [vocab, counted, probs = std::move(probs), kept_t = std::move(kept_t),
       kept_m = std::move(kept_m)](TensorNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const S g = self.grad[0] / static_cast<S>(counted);
        const std::size_t rows = kept_t.size();
        for (std::size_t r = 0; r < rows; ++r) {
          if (!kept_m[r]) continue;
          const S* pr = probs.data() + r * vocab;
          S* dst = p.grad.data() + r * vocab;
          for (std::size_t j = 0; j < vocab; ++j) dst[j] += g * pr[j];
          dst[static_cast<std::size_t>(kept_t[r])] -= g;
        }
      });
}

}  // namespace lmoe
