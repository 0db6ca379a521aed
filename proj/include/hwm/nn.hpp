#pragma once

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hwm/tensor.hpp"

// Layers, parameter bookkeeping, Adam and EMA twins. Every net is a plain
// struct exposing collect(), which appends its Parameters in a stable order;
// that order is the contract for optimizer groups, EMA pairing and
// checkpoint layouts.

namespace hwm {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;      // leaf tensor
  std::vector<T> m, v;  // Adam moments, sized on first step
  long long steps = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> t) : name(std::move(n)), value(std::move(t)) {}
};

enum class Init { xavier_normal, xavier_uniform, zeros };

template <typename T>
Tensor<T> init_weight(Shape shape, std::size_t fan_in, std::size_t fan_out, Init init, Rng& rng) {
  const std::size_t n = numel(shape);
  std::vector<T> v(n, T(0));
  if (init == Init::xavier_normal) {
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
    for (auto& x : v) x = static_cast<T>(sd * rng.normal());
  } else if (init == Init::xavier_uniform) {
    const double lim = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-lim, lim));
  }
  Tensor<T> t = Tensor<T>::from_vec(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
struct Linear {
  Parameter<T> w;  // [in, out]
  Parameter<T> b;  // [out]
  bool use_bias = true;
  std::size_t in = 0, out = 0;

  Linear() = default;
  Linear(const std::string& name, std::size_t in_, std::size_t out_, Rng& rng,
         Init init = Init::xavier_normal, bool bias = true)
      : use_bias(bias), in(in_), out(out_) {
    w = Parameter<T>(name + ".w", init_weight<T>({in_, out_}, in_, out_, init, rng));
    if (bias) {
      Tensor<T> bt = Tensor<T>::zeros({out_});
      bt.set_requires_grad(true);
      b = Parameter<T>(name + ".b", std::move(bt));
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> y = matmul(x, w.value);
    if (use_bias) y = add(y, b.value);
    return y;
  }

  void collect(std::vector<Parameter<T>*>& ps) {
    ps.push_back(&w);
    if (use_bias) ps.push_back(&b);
  }
};

template <typename T>
struct LayerNorm {
  Parameter<T> gain;  // ones
  Parameter<T> bias;  // zeros
  T eps = T(1e-5);

  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t dim, T eps_ = T(1e-5)) : eps(eps_) {
    Tensor<T> g = Tensor<T>::filled({dim}, T(1));
    g.set_requires_grad(true);
    gain = Parameter<T>(name + ".gain", std::move(g));
    Tensor<T> b = Tensor<T>::zeros({dim});
    b.set_requires_grad(true);
    bias = Parameter<T>(name + ".bias", std::move(b));
  }

  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm_affine(x, gain.value, bias.value, eps); }

  void collect(std::vector<Parameter<T>*>& ps) {
    ps.push_back(&gain);
    ps.push_back(&bias);
  }
};

// LayerNorm + SiLU activation block: norm(W x) through silu. The linear is
// bias-free; the norm's affine bias plays that role.
template <typename T>
struct DenseBlock {
  Linear<T> lin;
  LayerNorm<T> ln;

  DenseBlock() = default;
  DenseBlock(const std::string& name, std::size_t in, std::size_t out, Rng& rng, T ln_eps = T(1e-5))
      : lin(name + ".lin", in, out, rng, Init::xavier_normal, false), ln(name + ".ln", out, ln_eps) {}

  Tensor<T> forward(const Tensor<T>& x) const { return silu(ln.forward(lin.forward(x))); }

  void collect(std::vector<Parameter<T>*>& ps) {
    lin.collect(ps);
    ln.collect(ps);
  }
};

// hidden DenseBlocks followed by a plain linear head.
template <typename T>
struct Mlp {
  std::vector<DenseBlock<T>> hidden;
  Linear<T> head;

  Mlp() = default;
  Mlp(const std::string& name, std::size_t in, std::size_t width, std::size_t out, std::size_t n_hidden,
      Rng& rng, Init head_init = Init::xavier_normal, T ln_eps = T(1e-5)) {
    std::size_t cur = in;
    for (std::size_t i = 0; i < n_hidden; ++i) {
      hidden.emplace_back(name + ".h" + std::to_string(i), cur, width, rng, ln_eps);
      cur = width;
    }
    head = Linear<T>(name + ".head", cur, out, rng, head_init, true);
  }

  Tensor<T> forward(Tensor<T> x) const {
    for (const auto& h : hidden) x = h.forward(x);
    return head.forward(x);
  }

  void collect(std::vector<Parameter<T>*>& ps) {
    for (auto& h : hidden) h.collect(ps);
    head.collect(ps);
  }
};

// Norm-gated GRU. Gates come from one bias-free linear over [x, h] followed
// by LayerNorm; the update gate is biased toward keeping state (u-1 shift).
template <typename T>
struct GruCell {
  Linear<T> core;  // [in+units, 3*units]
  LayerNorm<T> ln;
  std::size_t units = 0;

  GruCell() = default;
  GruCell(const std::string& name, std::size_t in, std::size_t units_, Rng& rng, T ln_eps = T(1e-5))
      : core(name + ".core", in + units_, 3 * units_, rng, Init::xavier_normal, false),
        ln(name + ".ln", 3 * units_, ln_eps),
        units(units_) {}

  Tensor<T> forward(const Tensor<T>& h, const Tensor<T>& x) const {
    Tensor<T> a = ln.forward(core.forward(concat_cols(x, h)));
    Tensor<T> r = sigmoid(slice_cols(a, 0, units));
    Tensor<T> cand = tanh_t(mul(r, slice_cols(a, units, units)));
    Tensor<T> u = sigmoid(add_const(slice_cols(a, 2 * units, units), T(-1)));
    Tensor<T> keep = add_const(neg(u), T(1));
    return add(mul(u, cand), mul(keep, h));
  }

  void collect(std::vector<Parameter<T>*>& ps) {
    core.collect(ps);
    ln.collect(ps);
  }
};

// ---------------------------------------------------------------------------
// optimisation

template <typename T>
struct OptimGroup {
  std::string name;
  std::vector<Parameter<T>*> params;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 0.0;  // global-norm clip; <= 0 disables
  long long skipped = 0;
};

template <typename T>
double grad_global_norm(const std::vector<Parameter<T>*>& params) {
  double sq = 0.0;
  for (const auto* p : params)
    for (T g : p->value.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

// One Adam step with bias correction over the group, after global-norm
// clipping. A non-finite gradient norm skips the step (counted in
// group.skipped). Gradients are cleared either way. Returns the pre-clip
// gradient norm.
template <typename T>
double adam_step(OptimGroup<T>& group) {
  const double norm = grad_global_norm(group.params);
  if (!std::isfinite(norm)) {
    ++group.skipped;
    std::fprintf(stderr, "[optim] %s: non-finite gradient norm, step %lld skipped\n",
                 group.name.c_str(), group.skipped);
    for (auto* p : group.params) p->value.clear_grad();
    return norm;
  }
  const double factor = (group.clip > 0.0 && norm > group.clip) ? group.clip / norm : 1.0;
  for (auto* p : group.params) {
    if (!p->value.has_grad()) continue;
    const auto& g = p->value.grad();
    auto& val = p->value.raw_value();
    if (p->m.empty()) {
      p->m.assign(val.size(), T(0));
      p->v.assign(val.size(), T(0));
    }
    ++p->steps;
    const double c1 = 1.0 - std::pow(group.beta1, static_cast<double>(p->steps));
    const double c2 = 1.0 - std::pow(group.beta2, static_cast<double>(p->steps));
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double gi = static_cast<double>(g[i]) * factor;
      const double mi = group.beta1 * static_cast<double>(p->m[i]) + (1.0 - group.beta1) * gi;
      const double vi = group.beta2 * static_cast<double>(p->v[i]) + (1.0 - group.beta2) * gi * gi;
      p->m[i] = static_cast<T>(mi);
      p->v[i] = static_cast<T>(vi);
      const double mhat = mi / c1;
      const double vhat = vi / c2;
      val[i] -= static_cast<T>(group.lr * mhat / (std::sqrt(vhat) + group.eps));
    }
    p->value.clear_grad();
  }
  return norm;
}

// ---------------------------------------------------------------------------
// EMA twins

// ema <- m * online + (1 - m) * ema, values only. Lists must be aligned
// (same order, same shapes); that is the collect() contract.
template <typename T>
void ema_update(const std::vector<Parameter<T>*>& online, const std::vector<Parameter<T>*>& ema,
                double m) {
  if (online.size() != ema.size())
    throw std::invalid_argument("ema_update: parameter list size mismatch");
  for (std::size_t i = 0; i < online.size(); ++i) {
    const auto& src = online[i]->value.value();
    auto& dst = ema[i]->value.raw_value();
    if (src.size() != dst.size())
      throw std::invalid_argument("ema_update: shape mismatch at " + online[i]->name);
    for (std::size_t j = 0; j < src.size(); ++j)
      dst[j] = static_cast<T>(m * static_cast<double>(src[j]) + (1.0 - m) * static_cast<double>(dst[j]));
  }
}

template <typename T>
double ema_drift(const std::vector<Parameter<T>*>& online, const std::vector<Parameter<T>*>& ema) {
  double sq = 0.0;
  for (std::size_t i = 0; i < online.size(); ++i) {
    const auto& a = online[i]->value.value();
    const auto& b = ema[i]->value.value();
    for (std::size_t j = 0; j < a.size(); ++j) {
      const double d = static_cast<double>(a[j]) - static_cast<double>(b[j]);
      sq += d * d;
    }
  }
  return std::sqrt(sq);
}

// Copies online values into the twin and drops its grad requirement; used
// right after constructing an EMA copy so both start identical.
template <typename T>
void ema_init_from(const std::vector<Parameter<T>*>& online, const std::vector<Parameter<T>*>& ema) {
  if (online.size() != ema.size())
    throw std::invalid_argument("ema_init_from: parameter list size mismatch");
  for (std::size_t i = 0; i < online.size(); ++i) {
    ema[i]->value.raw_value() = online[i]->value.value();
    ema[i]->value.set_requires_grad(false);
  }
}

}  // namespace hwm
