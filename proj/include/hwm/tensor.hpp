#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hwm/kernels.hpp"
#include "hwm/rng.hpp"

// Reverse-mode autodiff on dense row-major tensors, single threaded.
//
// A Tensor is a handle to a tape node; ops build the graph eagerly and
// backward() walks it once in reverse topological order, accumulating into
// .grad with +=. Nothing is zeroed implicitly, so
// backward(a) then backward(b) leaves the same grads as backward(a + b)
// (tape linearity). Constants (requires_grad false, or anything built while
// a NoGradGuard is alive) carry no parents and cost nothing on the tape.
//
// Elementwise binaries broadcast with trailing-dimension alignment (equal
// extents or 1). Reductions and softmax-family ops act on the last axis.

namespace hwm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

struct GradMode {
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
  static bool enabled() { return flag(); }
};

// RAII: disables taping in scope. Used for the EMA branch, imagination
// rollouts and loss targets.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::flag()) { GradMode::flag() = false; }
  ~NoGradGuard() { GradMode::flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<T> val;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<Tensor<T>> parents;
    std::function<void(Node&)> backfn;

    std::vector<T>& grad_buf() {
      if (grad.empty()) grad.assign(val.size(), T(0));
      return grad;
    }
  };

  Tensor() : node_(std::make_shared<Node>()) {
    node_->shape = {1};
    node_->val.assign(1, T(0));
  }

  static Tensor zeros(Shape s) { return filled(std::move(s), T(0)); }

  static Tensor filled(Shape s, T v) {
    Tensor t;
    t.node_->shape = std::move(s);
    t.node_->val.assign(numel(t.node_->shape), v);
    return t;
  }

  static Tensor scalar(T v) { return filled({1}, v); }

  static Tensor from_vec(Shape s, std::vector<T> data) {
    if (numel(s) != data.size())
      throw std::invalid_argument("Tensor::from_vec: shape " + shape_str(s) + " does not hold " +
                                  std::to_string(data.size()) + " values");
    Tensor t;
    t.node_->shape = std::move(s);
    t.node_->val = std::move(data);
    return t;
  }

  // Trainable leaf.
  static Tensor leaf(Shape s, std::vector<T> data) {
    Tensor t = from_vec(std::move(s), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  static Tensor randn(Shape s, Rng& rng, double stddev) {
    const std::size_t n = numel(s);
    std::vector<T> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<T>(stddev * rng.normal());
    return from_vec(std::move(s), std::move(v));
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->val.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t ndim() const { return node_->shape.size(); }

  const std::vector<T>& value() const { return node_->val; }
  // Mutating values of graph interior nodes is undefined; meant for leaves.
  std::vector<T>& raw_value() { return node_->val; }

  const std::vector<T>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void clear_grad() {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }
  void set_requires_grad(bool b) { node_->requires_grad = b; }
  bool requires_grad() const { return node_->requires_grad; }

  T item() const {
    if (size() != 1) throw std::logic_error("item() on non-scalar tensor " + shape_str(shape()));
    return node_->val[0];
  }

  // Graph-free copy of the values.
  Tensor detach() const {
    Tensor t;
    t.node_->shape = node_->shape;
    t.node_->val = node_->val;
    return t;
  }

  void backward() {
    if (size() != 1)
      throw std::logic_error("backward() needs a scalar loss, got " + shape_str(shape()));
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    topo(node_.get(), seen, order);
    node_->grad_buf()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
      if ((*it)->backfn && !(*it)->grad.empty()) (*it)->backfn(**it);
  }

  Node* node() const { return node_.get(); }

  // Internal: builds an op result. `back` may be empty for constants.
  static Tensor make(Shape s, std::vector<T> val, std::vector<Tensor> parents,
                     std::function<void(Node&)> back) {
    Tensor t;
    t.node_->shape = std::move(s);
    t.node_->val = std::move(val);
    bool track = GradMode::enabled();
    if (track) {
      track = false;
      for (const auto& p : parents)
        if (p.requires_grad()) {
          track = true;
          break;
        }
    }
    if (track) {
      t.node_->requires_grad = true;
      t.node_->parents = std::move(parents);
      t.node_->backfn = std::move(back);
    }
    return t;
  }

 private:
  static void topo(Node* n, std::unordered_set<Node*>& seen, std::vector<Node*>& order) {
    // Iterative DFS; graphs from long rollouts overflow the stack otherwise.
    struct Frame {
      Node* node;
      std::size_t next_child;
    };
    if (!n->requires_grad || !seen.insert(n).second) return;
    std::vector<Frame> stack{{n, 0}};
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_child < f.node->parents.size()) {
        Node* c = f.node->parents[f.next_child++].node_.get();
        if (c->requires_grad && seen.insert(c).second) stack.push_back({c, 0});
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

// Trailing-aligned broadcast plan: per output dim, the source stride is 0
// where that source has extent 1 (or no dim at all).
struct BcastPlan {
  Shape out;
  std::vector<std::size_t> sa, sb;
  std::size_t n = 1;
};

inline BcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* opname) {
  BcastPlan p;
  const std::size_t nd = std::max(a.size(), b.size());
  p.out.resize(nd);
  p.sa.resize(nd);
  p.sb.resize(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument(std::string(opname) + ": shapes not broadcastable " + shape_str(a) +
                                  " vs " + shape_str(b));
    p.out[i] = std::max(da, db);
  }
  // row-major strides, zeroed on broadcast dims
  std::size_t stra = 1, strb = 1;
  for (std::size_t i = nd; i-- > 0;) {
    const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    p.sa[i] = da == 1 ? 0 : stra;
    p.sb[i] = db == 1 ? 0 : strb;
    stra *= da;
    strb *= db;
  }
  p.n = numel(p.out);
  return p;
}

// Visits every output element with its source offsets.
template <typename F>
void bcast_visit(const BcastPlan& p, F&& f) {
  const std::size_t nd = p.out.size();
  std::vector<std::size_t> idx(nd, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t lin = 0; lin < p.n; ++lin) {
    f(lin, ia, ib);
    for (std::size_t d = nd; d-- > 0;) {
      ++idx[d];
      ia += p.sa[d];
      ib += p.sb[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.sa[d] * p.out[d];
      ib -= p.sb[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// b's shape is a strict trailing suffix of a's (bias-add pattern).
inline bool suffix_shape(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  for (std::size_t i = 0; i < b.size(); ++i)
    if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) return false;
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binaries

template <typename T, typename FwdKernel, typename FwdOne, typename BackA, typename BackB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, FwdKernel fwd_kernel,
                    FwdOne fwd_one, BackA back_a, BackB back_b) {
  using detail::BcastPlan;
  const auto& ka = kern::table<T>();
  if (detail::same_shape(a.shape(), b.shape())) {
    std::vector<T> out(a.size());
    fwd_kernel(ka, a.value().data(), b.value().data(), out.data(), out.size());
    return Tensor<T>::make(
        a.shape(), std::move(out), {a, b}, [back_a, back_b](typename Tensor<T>::Node& o) {
          auto& pa = *o.parents[0].node();
          auto& pb = *o.parents[1].node();
          if (pa.requires_grad) {
            auto& ga = pa.grad_buf();
            for (std::size_t i = 0; i < o.grad.size(); ++i)
              ga[i] += back_a(pa.val[i], pb.val[i], o.grad[i], o.val[i]);
          }
          if (pb.requires_grad) {
            auto& gb = pb.grad_buf();
            for (std::size_t i = 0; i < o.grad.size(); ++i)
              gb[i] += back_b(pa.val[i], pb.val[i], o.grad[i], o.val[i]);
          }
        });
  }
  if (detail::suffix_shape(a.shape(), b.shape()) && b.size() >= 1) {
    // repeat b along a's leading dims
    const std::size_t bn = b.size();
    const std::size_t rows = a.size() / bn;
    std::vector<T> out(a.size());
    for (std::size_t r = 0; r < rows; ++r)
      fwd_kernel(ka, a.value().data() + r * bn, b.value().data(), out.data() + r * bn, bn);
    return Tensor<T>::make(
        a.shape(), std::move(out), {a, b},
        [back_a, back_b, rows, bn](typename Tensor<T>::Node& o) {
          auto& pa = *o.parents[0].node();
          auto& pb = *o.parents[1].node();
          if (pa.requires_grad) {
            auto& ga = pa.grad_buf();
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t i = 0; i < bn; ++i) {
                const std::size_t k = r * bn + i;
                ga[k] += back_a(pa.val[k], pb.val[i], o.grad[k], o.val[k]);
              }
          }
          if (pb.requires_grad) {
            auto& gb = pb.grad_buf();
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t i = 0; i < bn; ++i) {
                const std::size_t k = r * bn + i;
                gb[i] += back_b(pa.val[k], pb.val[i], o.grad[k], o.val[k]);
              }
          }
        });
  }
  BcastPlan plan = detail::broadcast_plan(a.shape(), b.shape(), name);
  std::vector<T> out(plan.n);
  detail::bcast_visit(plan, [&](std::size_t lin, std::size_t ia, std::size_t ib) {
    out[lin] = fwd_one(a.value()[ia], b.value()[ib]);
  });
  return Tensor<T>::make(
      plan.out, std::move(out), {a, b}, [plan, back_a, back_b](typename Tensor<T>::Node& o) {
        auto& pa = *o.parents[0].node();
        auto& pb = *o.parents[1].node();
        const bool wa = pa.requires_grad;
        const bool wb = pb.requires_grad;
        if (wa) pa.grad_buf();
        if (wb) pb.grad_buf();
        detail::bcast_visit(plan, [&](std::size_t lin, std::size_t ia, std::size_t ib) {
          if (wa) pa.grad[ia] += back_a(pa.val[ia], pb.val[ib], o.grad[lin], o.val[lin]);
          if (wb) pb.grad[ib] += back_b(pa.val[ia], pb.val[ib], o.grad[lin], o.val[lin]);
        });
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "add", [](const auto& k, const T* x, const T* y, T* o, std::size_t n) { k.add(x, y, o, n); },
      [](T x, T y) { return x + y; }, [](T, T, T g, T) { return g; }, [](T, T, T g, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "sub", [](const auto& k, const T* x, const T* y, T* o, std::size_t n) { k.sub(x, y, o, n); },
      [](T x, T y) { return x - y; }, [](T, T, T g, T) { return g; }, [](T, T, T g, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "mul", [](const auto& k, const T* x, const T* y, T* o, std::size_t n) { k.mul(x, y, o, n); },
      [](T x, T y) { return x * y; }, [](T, T y, T g, T) { return g * y; },
      [](T x, T, T g, T) { return g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "div", [](const auto& k, const T* x, const T* y, T* o, std::size_t n) { k.div(x, y, o, n); },
      [](T x, T y) { return x / y; }, [](T, T y, T g, T) { return g / y; },
      [](T, T y, T g, T o) { return -g * o / y; });
}

// max(a, b); ties route the gradient to a.
template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "maximum",
      [](const auto&, const T* x, const T* y, T* o, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) o[i] = x[i] >= y[i] ? x[i] : y[i];
      },
      [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y, T g, T) { return x >= y ? g : T(0); },
      [](T x, T y, T g, T) { return x >= y ? T(0) : g; });
}

// ---------------------------------------------------------------------------
// elementwise unaries

template <typename T, typename Fwd, typename Back>
Tensor<T> unary_op(const Tensor<T>& x, Fwd fwd, Back back) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x.value()[i]);
  return Tensor<T>::make(x.shape(), std::move(out), {x}, [back](typename Tensor<T>::Node& o) {
    auto& p = *o.parents[0].node();
    if (!p.requires_grad) return;
    auto& g = p.grad_buf();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += back(p.val[i], o.val[i], o.grad[i]);
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  std::vector<T> out(x.size());
  kern::table<T>().scale(c, x.value().data(), out.data(), out.size());
  return Tensor<T>::make(x.shape(), std::move(out), {x}, [c](typename Tensor<T>::Node& o) {
    auto& p = *o.parents[0].node();
    if (!p.requires_grad) return;
    kern::table<T>().axpy(c, o.grad.data(), p.grad_buf().data(), o.grad.size());
  });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) { return scale(x, T(-1)); }

template <typename T>
Tensor<T> add_const(const Tensor<T>& x, T c) {
  return unary_op(x, [c](T v) { return v + c; }, [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> max_const(const Tensor<T>& x, T c) {
  return unary_op(x, [c](T v) { return v >= c ? v : c; },
                  [c](T v, T, T g) { return v >= c ? g : T(0); });
}

template <typename T>
Tensor<T> exp_t(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return std::exp(v); }, [](T, T y, T g) { return g * y; });
}

template <typename T>
Tensor<T> log_t(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return std::log(v); }, [](T v, T, T g) { return g / v; });
}

template <typename T>
Tensor<T> sqrt_t(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return std::sqrt(v); },
                  [](T, T y, T g) { return g / (T(2) * y); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return v * v; }, [](T v, T, T g) { return T(2) * v * g; });
}

template <typename T>
Tensor<T> abs_t(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return std::abs(v); },
                  [](T v, T, T g) { return v > T(0) ? g : (v < T(0) ? -g : T(0)); });
}

template <typename T>
Tensor<T> tanh_t(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return std::tanh(v); },
                  [](T, T y, T g) { return g * (T(1) - y * y); });
}

template <typename T>
inline T sigmoid_scalar(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return sigmoid_scalar(v); },
                  [](T, T y, T g) { return g * y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return v * sigmoid_scalar(v); },
                  [](T v, T, T g) {
                    const T s = sigmoid_scalar(v);
                    return g * (s + v * s * (T(1) - s));
                  });
}

// log(1 + e^x), overflow-safe
template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary_op(x,
                  [](T v) {
                    const T m = v > T(0) ? v : T(0);
                    return m + std::log1p(std::exp(-std::abs(v)));
                  },
                  [](T v, T, T g) { return g * sigmoid_scalar(v); });
}

// ---------------------------------------------------------------------------
// matmul and reductions

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  kern::table<T>().gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n, false);
  return Tensor<T>::make({m, n}, std::move(out), {a, b}, [m, k, n](typename Tensor<T>::Node& o) {
    auto& pa = *o.parents[0].node();
    auto& pb = *o.parents[1].node();
    const auto& kt = kern::table<T>();
    if (pa.requires_grad)  // dA += G . B^T
      kt.gemm_nt(o.grad.data(), pb.val.data(), pa.grad_buf().data(), m, n, k, true);
    if (pb.requires_grad)  // dB += A^T . G
      kt.gemm_tn(pa.val.data(), o.grad.data(), pb.grad_buf().data(), k, m, n, true);
  });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  const T s = kern::table<T>().sum(x.value().data(), x.size());
  return Tensor<T>::make({1}, {s}, {x}, [](typename Tensor<T>::Node& o) {
    auto& p = *o.parents[0].node();
    if (!p.requires_grad) return;
    auto& g = p.grad_buf();
    const T gv = o.grad[0];
    for (auto& v : g) v += gv;
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  if (x.size() == 0) throw std::invalid_argument("mean_all: empty tensor");
  return scale(sum_all(x), T(1) / static_cast<T>(x.size()));
}

// [..., D] -> [...]; scalar input [D] reduces to [1].
template <typename T>
Tensor<T> sum_last(const Tensor<T>& x) {
  if (x.ndim() < 1) throw std::invalid_argument("sum_last: rank-0 tensor");
  const std::size_t d = x.dim(x.ndim() - 1);
  const std::size_t rows = x.size() / d;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<T> out(rows);
  const auto& kt = kern::table<T>();
  for (std::size_t r = 0; r < rows; ++r) out[r] = kt.sum(x.value().data() + r * d, d);
  return Tensor<T>::make(out_shape, std::move(out), {x}, [rows, d](typename Tensor<T>::Node& o) {
    auto& p = *o.parents[0].node();
    if (!p.requires_grad) return;
    auto& g = p.grad_buf();
    for (std::size_t r = 0; r < rows; ++r) {
      const T gv = o.grad[r];
      T* row = g.data() + r * d;
      for (std::size_t i = 0; i < d; ++i) row[i] += gv;
    }
  });
}

template <typename T>
Tensor<T> mean_last(const Tensor<T>& x) {
  const std::size_t d = x.dim(x.ndim() - 1);
  return scale(sum_last(x), T(1) / static_cast<T>(d));
}

// ---------------------------------------------------------------------------
// softmax family (fused; the max-shift is a constant w.r.t. the gradient)

template <typename T>
Tensor<T> log_softmax_last(const Tensor<T>& x) {
  const std::size_t d = x.dim(x.ndim() - 1);
  if (d < 1) throw std::invalid_argument("log_softmax_last: empty last axis");
  const std::size_t rows = x.size() / d;
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().data() + r * d;
    T m = xr[0];
    for (std::size_t i = 1; i < d; ++i) m = std::max(m, xr[i]);
    T s = T(0);
    for (std::size_t i = 0; i < d; ++i) s += std::exp(xr[i] - m);
    const T lse = m + std::log(s);
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = xr[i] - lse;
  }
  return Tensor<T>::make(x.shape(), std::move(out), {x}, [rows, d](typename Tensor<T>::Node& o) {
    auto& p = *o.parents[0].node();
    if (!p.requires_grad) return;
    auto& g = p.grad_buf();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = o.grad.data() + r * d;
      const T* yr = o.val.data() + r * d;
      T gs = T(0);
      for (std::size_t i = 0; i < d; ++i) gs += gr[i];
      T* dst = g.data() + r * d;
      for (std::size_t i = 0; i < d; ++i) dst[i] += gr[i] - std::exp(yr[i]) * gs;
    }
  });
}

template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  const std::size_t d = x.dim(x.ndim() - 1);
  if (d < 1) throw std::invalid_argument("softmax_last: empty last axis");
  const std::size_t rows = x.size() / d;
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().data() + r * d;
    T m = xr[0];
    for (std::size_t i = 1; i < d; ++i) m = std::max(m, xr[i]);
    T s = T(0);
    for (std::size_t i = 0; i < d; ++i) {
      const T e = std::exp(xr[i] - m);
      out[r * d + i] = e;
      s += e;
    }
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] /= s;
  }
  return Tensor<T>::make(x.shape(), std::move(out), {x}, [rows, d](typename Tensor<T>::Node& o) {
    auto& p = *o.parents[0].node();
    if (!p.requires_grad) return;
    auto& g = p.grad_buf();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = o.grad.data() + r * d;
      const T* pr = o.val.data() + r * d;
      T gs = T(0);
      for (std::size_t i = 0; i < d; ++i) gs += gr[i] * pr[i];
      T* dst = g.data() + r * d;
      for (std::size_t i = 0; i < d; ++i) dst[i] += pr[i] * (gr[i] - gs);
    }
  });
}

// ---------------------------------------------------------------------------
// fused normalisation ops

// y = gain * (x - mean) / sqrt(var + eps) + bias over the last axis, followed
// by nothing: activation is the caller's business. Population variance.
// A last axis of extent 1 is rejected: its variance is identically zero and
// the output would be pure bias, which is always a config bug.
template <typename T>
Tensor<T> layer_norm_affine(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t d = x.dim(x.ndim() - 1);
  if (d < 2)
    throw std::invalid_argument("layer_norm_affine: last axis extent must be >= 2, got shape " +
                                shape_str(x.shape()));
  if (gain.size() != d || bias.size() != d)
    throw std::invalid_argument("layer_norm_affine: gain/bias must have extent " + std::to_string(d));
  const std::size_t rows = x.size() / d;
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().data() + r * d;
    T mu = T(0);
    for (std::size_t i = 0; i < d; ++i) mu += xr[i];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t i = 0; i < d; ++i) {
      const T c = xr[i] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T iv = T(1) / std::sqrt(var + eps);
    inv[r] = iv;
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (xr[i] - mu) * iv;
      xhat[r * d + i] = h;
      out[r * d + i] = gain.value()[i] * h + bias.value()[i];
    }
  }
  return Tensor<T>::make(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, d, xhat = std::move(xhat), inv = std::move(inv)](typename Tensor<T>::Node& o) {
        auto& px = *o.parents[0].node();
        auto& pg = *o.parents[1].node();
        auto& pb = *o.parents[2].node();
        if (pg.requires_grad) {
          auto& gg = pg.grad_buf();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) gg[i] += o.grad[r * d + i] * xhat[r * d + i];
        }
        if (pb.requires_grad) {
          auto& gb = pb.grad_buf();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) gb[i] += o.grad[r * d + i];
        }
        if (px.requires_grad) {
          auto& gx = px.grad_buf();
          for (std::size_t r = 0; r < rows; ++r) {
            const T* gr = o.grad.data() + r * d;
            const T* hr = xhat.data() + r * d;
            T mean_gh = T(0), mean_ghh = T(0);
            for (std::size_t i = 0; i < d; ++i) {
              const T gh = gr[i] * pg.val[i];
              mean_gh += gh;
              mean_ghh += gh * hr[i];
            }
            mean_gh /= static_cast<T>(d);
            mean_ghh /= static_cast<T>(d);
            T* dst = gx.data() + r * d;
            for (std::size_t i = 0; i < d; ++i) {
              const T gh = gr[i] * pg.val[i];
              dst[i] += inv[r] * (gh - mean_gh - hr[i] * mean_ghh);
            }
          }
        }
      });
}

// Unit vectors along the last axis; rows with norm < eps are divided by eps
// instead (and the projection term is dropped there, matching that branch's
// actual derivative).
template <typename T>
Tensor<T> l2_normalize_last(const Tensor<T>& x, T eps) {
  const std::size_t d = x.dim(x.ndim() - 1);
  const std::size_t rows = x.size() / d;
  std::vector<T> out(x.size());
  std::vector<T> denom(rows);
  std::vector<char> small(rows);
  const auto& kt = kern::table<T>();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().data() + r * d;
    const T nrm = std::sqrt(kt.dot(xr, xr, d));
    small[r] = nrm < eps;
    denom[r] = small[r] ? eps : nrm;
    const T iv = T(1) / denom[r];
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = xr[i] * iv;
  }
  return Tensor<T>::make(
      x.shape(), std::move(out), {x},
      [rows, d, denom = std::move(denom), small = std::move(small)](typename Tensor<T>::Node& o) {
        auto& p = *o.parents[0].node();
        if (!p.requires_grad) return;
        auto& gx = p.grad_buf();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = o.grad.data() + r * d;
          const T* yr = o.val.data() + r * d;
          T* dst = gx.data() + r * d;
          const T iv = T(1) / denom[r];
          if (small[r]) {
            for (std::size_t i = 0; i < d; ++i) dst[i] += gr[i] * iv;
          } else {
            T gy = T(0);
            for (std::size_t i = 0; i < d; ++i) gy += gr[i] * yr[i];
            for (std::size_t i = 0; i < d; ++i) dst[i] += (gr[i] - yr[i] * gy) * iv;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape s) {
  if (numel(s) != x.size())
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " + shape_str(s) +
                                " changes element count");
  std::vector<T> out = x.value();
  return Tensor<T>::make(std::move(s), std::move(out), {x}, [](typename Tensor<T>::Node& o) {
    auto& p = *o.parents[0].node();
    if (!p.requires_grad) return;
    kern::table<T>().axpy(T(1), o.grad.data(), p.grad_buf().data(), o.grad.size());
  });
}

namespace detail {
template <typename T>
void require_2d(const Tensor<T>& x, const char* op) {
  if (x.ndim() != 2)
    throw std::invalid_argument(std::string(op) + ": expects a 2-D tensor, got " + shape_str(x.shape()));
}
}  // namespace detail

// Stack 2-D blocks with identical column counts along axis 0.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t cols = parts[0].dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_rows");
    if (p.dim(1) != cols)
      throw std::invalid_argument("concat_rows: column mismatch " + shape_str(p.shape()) + " vs [*," +
                                  std::to_string(cols) + "]");
    rows += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.value().begin(), p.value().end());
  std::vector<Tensor<T>> parents(parts.begin(), parts.end());
  return Tensor<T>::make({rows, cols}, std::move(out), std::move(parents),
                         [](typename Tensor<T>::Node& o) {
                           std::size_t off = 0;
                           for (auto& par : o.parents) {
                             auto& p = *par.node();
                             const std::size_t n = p.val.size();
                             if (p.requires_grad)
                               kern::table<T>().axpy(T(1), o.grad.data() + off, p.grad_buf().data(), n);
                             off += n;
                           }
                         });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t r0, std::size_t nrows) {
  detail::require_2d(x, "slice_rows");
  if (r0 + nrows > x.dim(0))
    throw std::invalid_argument("slice_rows: range past end of " + shape_str(x.shape()));
  const std::size_t cols = x.dim(1);
  std::vector<T> out(x.value().begin() + r0 * cols, x.value().begin() + (r0 + nrows) * cols);
  return Tensor<T>::make({nrows, cols}, std::move(out), {x},
                         [r0, cols](typename Tensor<T>::Node& o) {
                           auto& p = *o.parents[0].node();
                           if (!p.requires_grad) return;
                           kern::table<T>().axpy(T(1), o.grad.data(), p.grad_buf().data() + r0 * cols,
                                                 o.grad.size());
                         });
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "concat_cols");
  detail::require_2d(b, "concat_cols");
  if (a.dim(0) != b.dim(0))
    throw std::invalid_argument("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const std::size_t n = a.dim(0), da = a.dim(1), db = b.dim(1);
  std::vector<T> out(n * (da + db));
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(a.value().data() + r * da, da, out.data() + r * (da + db));
    std::copy_n(b.value().data() + r * db, db, out.data() + r * (da + db) + da);
  }
  return Tensor<T>::make({n, da + db}, std::move(out), {a, b},
                         [n, da, db](typename Tensor<T>::Node& o) {
                           auto& pa = *o.parents[0].node();
                           auto& pb = *o.parents[1].node();
                           const std::size_t w = da + db;
                           if (pa.requires_grad) {
                             auto& ga = pa.grad_buf();
                             for (std::size_t r = 0; r < n; ++r)
                               for (std::size_t i = 0; i < da; ++i) ga[r * da + i] += o.grad[r * w + i];
                           }
                           if (pb.requires_grad) {
                             auto& gb = pb.grad_buf();
                             for (std::size_t r = 0; r < n; ++r)
                               for (std::size_t i = 0; i < db; ++i)
                                 gb[r * db + i] += o.grad[r * w + da + i];
                           }
                         });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t c0, std::size_t ncols) {
  detail::require_2d(x, "slice_cols");
  if (c0 + ncols > x.dim(1))
    throw std::invalid_argument("slice_cols: range past end of " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<T> out(n * ncols);
  for (std::size_t r = 0; r < n; ++r)
    std::copy_n(x.value().data() + r * d + c0, ncols, out.data() + r * ncols);
  return Tensor<T>::make({n, ncols}, std::move(out), {x},
                         [c0, ncols, d](typename Tensor<T>::Node& o) {
                           auto& p = *o.parents[0].node();
                           if (!p.requires_grad) return;
                           auto& g = p.grad_buf();
                           const std::size_t n2 = o.val.size() / ncols;
                           for (std::size_t r = 0; r < n2; ++r)
                             for (std::size_t i = 0; i < ncols; ++i)
                               g[r * d + c0 + i] += o.grad[r * ncols + i];
                         });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<int> idx) {
  detail::require_2d(x, "gather_rows");
  const std::size_t d = x.dim(1);
  const std::size_t nrows = idx.size();  // before the capture moves idx away
  std::vector<T> out(nrows * d);
  for (std::size_t r = 0; r < nrows; ++r) {
    const int src = idx[r];
    if (src < 0 || static_cast<std::size_t>(src) >= x.dim(0))
      throw std::invalid_argument("gather_rows: index " + std::to_string(src) + " out of " +
                                  shape_str(x.shape()));
    std::copy_n(x.value().data() + static_cast<std::size_t>(src) * d, d, out.data() + r * d);
  }
  return Tensor<T>::make({nrows, d}, std::move(out), {x},
                         [idx = std::move(idx), d](typename Tensor<T>::Node& o) {
                           auto& p = *o.parents[0].node();
                           if (!p.requires_grad) return;
                           auto& g = p.grad_buf();
                           for (std::size_t r = 0; r < idx.size(); ++r)
                             kern::table<T>().axpy(T(1), o.grad.data() + r * d,
                                                   g.data() + static_cast<std::size_t>(idx[r]) * d, d);
                         });
}

// ---------------------------------------------------------------------------
// sampling and divergence ops

// One-hot sample per row of a [N, C] probability tensor. Forward draws by CDF
// inversion; backward is the straight-through estimator: the incoming
// gradient is passed to the probabilities unchanged, as if the output had
// been the probabilities themselves.
template <typename T>
Tensor<T> straight_through_onehot(const Tensor<T>& probs, Rng& rng) {
  detail::require_2d(probs, "straight_through_onehot");
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  std::vector<T> out(n * c, T(0));
  for (std::size_t r = 0; r < n; ++r) {
    const int k = rng.categorical(std::span<const T>(probs.value().data() + r * c, c));
    out[r * c + static_cast<std::size_t>(k)] = T(1);
  }
  return Tensor<T>::make(probs.shape(), std::move(out), {probs}, [](typename Tensor<T>::Node& o) {
    auto& p = *o.parents[0].node();
    if (!p.requires_grad) return;
    kern::table<T>().axpy(T(1), o.grad.data(), p.grad_buf().data(), o.grad.size());
  });
}

// Row-wise KL(q || p) for [N, C] probability tensors -> [N]. Zero-probability
// q entries contribute 0 (x log x -> 0) and get zero gradient by convention.
// Gradients flow into whichever side requires them, so stop-gradient
// placement is done by detaching an argument.
template <typename T>
Tensor<T> kl_rows(const Tensor<T>& q, const Tensor<T>& p) {
  detail::require_2d(q, "kl_rows");
  if (q.shape() != p.shape())
    throw std::invalid_argument("kl_rows: shape mismatch " + shape_str(q.shape()) + " vs " +
                                shape_str(p.shape()));
  const std::size_t n = q.dim(0), c = q.dim(1);
  std::vector<T> out(n, T(0));
  for (std::size_t r = 0; r < n; ++r) {
    T acc = T(0);
    for (std::size_t i = 0; i < c; ++i) {
      const T qi = q.value()[r * c + i];
      if (qi > T(0)) acc += qi * (std::log(qi) - std::log(p.value()[r * c + i]));
    }
    out[r] = acc;
  }
  return Tensor<T>::make({n}, std::move(out), {q, p}, [n, c](typename Tensor<T>::Node& o) {
    auto& pq = *o.parents[0].node();
    auto& pp = *o.parents[1].node();
    if (pq.requires_grad) {
      auto& gq = pq.grad_buf();
      for (std::size_t r = 0; r < n; ++r) {
        const T g = o.grad[r];
        for (std::size_t i = 0; i < c; ++i) {
          const T qi = pq.val[r * c + i];
          if (qi > T(0))
            gq[r * c + i] += g * (std::log(qi) - std::log(pp.val[r * c + i]) + T(1));
        }
      }
    }
    if (pp.requires_grad) {
      auto& gp = pp.grad_buf();
      for (std::size_t r = 0; r < n; ++r) {
        const T g = o.grad[r];
        for (std::size_t i = 0; i < c; ++i) {
          const T qi = pq.val[r * c + i];
          if (qi > T(0)) gp[r * c + i] -= g * qi / pp.val[r * c + i];
        }
      }
    }
  });
}

// Values-only helpers (no tape).

template <typename T>
std::vector<T> max_last_values(const Tensor<T>& x) {
  const std::size_t d = x.dim(x.ndim() - 1);
  const std::size_t rows = x.size() / d;
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().data() + r * d;
    T m = xr[0];
    for (std::size_t i = 1; i < d; ++i) m = std::max(m, xr[i]);
    out[r] = m;
  }
  return out;
}

template <typename T>
Tensor<T> onehot_const(const std::vector<int>& idx, std::size_t classes) {
  std::vector<T> v(idx.size() * classes, T(0));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= classes)
      throw std::invalid_argument("onehot_const: index out of range");
    v[r * classes + static_cast<std::size_t>(idx[r])] = T(1);
  }
  return Tensor<T>::from_vec({idx.size(), classes}, std::move(v));
}

}  // namespace hwm
