#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "hwm/tensor.hpp"

// Distribution heads: categorical latents with a uniform-mixture floor,
// symlog two-hot discrete regression, and Bernoulli-with-logits.

namespace hwm {

inline double symlog(double x) { return x >= 0 ? std::log1p(x) : -std::log1p(-x); }
inline double symexp(double x) { return x >= 0 ? std::expm1(x) : -std::expm1(-x); }

// Tape-aware symexp; d/dx = exp(|x|) on both branches.
template <typename T>
Tensor<T> symexp_t(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return v >= T(0) ? std::expm1(v) : -std::expm1(-v); },
                  [](T v, T, T g) { return g * std::exp(std::abs(v)); });
}

// (1 - u) * softmax(logits) + u / C per row of [N, C]. u = 0 is the plain
// softmax; u > 0 bounds every class probability away from zero by u / C.
template <typename T>
Tensor<T> unimix_probs(const Tensor<T>& logits, T u) {
  if (logits.ndim() != 2) throw std::invalid_argument("unimix_probs: expects [N, C] logits");
  Tensor<T> p = softmax_last(logits);
  if (u <= T(0)) return p;
  const T c = static_cast<T>(logits.dim(1));
  return add_const(scale(p, T(1) - u), u / c);
}

// Row entropies of softmax(logits): [N, C] -> [N].
template <typename T>
Tensor<T> entropy_rows(const Tensor<T>& logits) {
  Tensor<T> p = softmax_last(logits);
  Tensor<T> lp = log_softmax_last(logits);
  return neg(sum_last(mul(p, lp)));
}

// Discrete regression over fixed bins placed uniformly in symlog space.
// Targets are two-hot: mass split between the two bins bracketing
// symlog(y), which makes the encoding exact under decode().
struct TwoHotBins {
  double low = -10.0;
  double high = 10.0;
  int n = 41;

  double step() const { return (high - low) / static_cast<double>(n - 1); }
  double center(int i) const { return low + step() * static_cast<double>(i); }

  void validate() const {
    if (n < 2 || high <= low) throw std::invalid_argument("TwoHotBins: need n >= 2 and high > low");
  }

  // Weights for one value; returns true when symlog(y) fell outside the bin
  // range and was clamped to the edge.
  template <typename T>
  bool encode(double y, T* row) const {
    for (int i = 0; i < n; ++i) row[i] = T(0);
    double s = symlog(y);
    bool clamped = false;
    if (s <= low) {
      clamped = s < low;
      row[0] = T(1);
      return clamped;
    }
    if (s >= high) {
      clamped = s > high;
      row[n - 1] = T(1);
      return clamped;
    }
    const double pos = (s - low) / step();
    int k = static_cast<int>(pos);
    if (k >= n - 1) k = n - 2;
    const double w_hi = pos - static_cast<double>(k);
    row[k] = static_cast<T>(1.0 - w_hi);
    row[k + 1] = static_cast<T>(w_hi);
    return false;
  }

  // Constant [N, n] target tensor; `clamped` counts out-of-range values.
  template <typename T>
  Tensor<T> encode_batch(const std::vector<double>& ys, long long& clamped) const {
    validate();
    std::vector<T> v(ys.size() * static_cast<std::size_t>(n));
    for (std::size_t r = 0; r < ys.size(); ++r)
      if (encode(ys[r], v.data() + r * static_cast<std::size_t>(n))) ++clamped;
    return Tensor<T>::from_vec({ys.size(), static_cast<std::size_t>(n)}, std::move(v));
  }

  // Mean over rows of -sum(target * log_softmax(logits)).
  template <typename T>
  Tensor<T> nll(const Tensor<T>& logits, const Tensor<T>& targets) const {
    if (logits.shape() != targets.shape())
      throw std::invalid_argument("TwoHotBins::nll: logits/targets shape mismatch");
    return mean_all(neg(sum_last(mul(targets, log_softmax_last(logits)))));
  }

  // Decoded prediction per row: symexp of the probability-weighted bin
  // centre. Values only.
  template <typename T>
  std::vector<double> decode(const Tensor<T>& logits) const {
    Tensor<T> p;
    {
      NoGradGuard ng;
      p = softmax_last(logits);
    }
    const std::size_t rows = p.dim(0);
    const auto nb = static_cast<std::size_t>(n);
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t i = 0; i < nb; ++i)
        acc += static_cast<double>(p.value()[r * nb + i]) * center(static_cast<int>(i));
      out[r] = symexp(acc);
    }
    return out;
  }
};

// Mean binary cross-entropy from logits. Stable softplus form; targets are
// constants in [0, 1].
template <typename T>
Tensor<T> bce_with_logits_mean(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape())
    throw std::invalid_argument("bce_with_logits_mean: shape mismatch");
  Tensor<T> sp_pos = softplus(logits);
  Tensor<T> sp_neg = softplus(neg(logits));
  Tensor<T> one_minus = add_const(neg(targets), T(1));
  return mean_all(add(mul(targets, sp_neg), mul(one_minus, sp_pos)));
}

}  // namespace hwm
