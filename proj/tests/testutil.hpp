#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <doctest.h>

#include "hwm/rng.hpp"
#include "hwm/tensor.hpp"

namespace testutil {

// Central-difference audit of reverse-mode gradients at 64-bit precision.
// `build` must rebuild the scalar loss from the leaf tensors on every call;
// inputs must sit away from kinks (abs at 0, max ties) or the stencil lies.
inline void check_gradients(const std::function<hwm::Tensor<double>()>& build,
                            std::vector<hwm::Tensor<double>*> leaves, double step = 1e-5,
                            double tol = 1e-4) {
  for (auto* l : leaves) l->clear_grad();
  build().backward();
  std::vector<std::vector<double>> tape;
  tape.reserve(leaves.size());
  for (auto* l : leaves)
    tape.push_back(l->has_grad() ? l->grad() : std::vector<double>(l->size(), 0.0));

  hwm::NoGradGuard ng;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto* l = leaves[li];
    for (std::size_t i = 0; i < l->size(); ++i) {
      const double orig = l->raw_value()[i];
      l->raw_value()[i] = orig + step;
      const double fp = build().item();
      l->raw_value()[i] = orig - step;
      const double fm = build().item();
      l->raw_value()[i] = orig;
      const double fd = (fp - fm) / (2.0 * step);
      const double got = tape[li][i];
      const double den = std::max({1e-6, std::abs(fd), std::abs(got)});
      INFO("leaf " << li << " coord " << i << ": fd=" << fd << " tape=" << got);
      REQUIRE(std::abs(fd - got) / den < tol);
    }
  }
  for (auto* l : leaves) l->clear_grad();
}

inline hwm::Tensor<double> rand_leaf(hwm::Shape s, hwm::Rng& rng, double lo = -1.5,
                                     double hi = 1.5) {
  std::vector<double> v(hwm::numel(s));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return hwm::Tensor<double>::leaf(std::move(s), std::move(v));
}

// Strictly positive rows that sum to one, nudged away from 0 so log/KL
// stencils stay smooth.
inline hwm::Tensor<double> rand_prob_leaf(std::size_t n, std::size_t c, hwm::Rng& rng) {
  std::vector<double> v(n * c);
  for (std::size_t r = 0; r < n; ++r) {
    double tot = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      v[r * c + i] = 0.05 + rng.uniform();
      tot += v[r * c + i];
    }
    for (std::size_t i = 0; i < c; ++i) v[r * c + i] /= tot;
  }
  return hwm::Tensor<double>::leaf({n, c}, std::move(v));
}

}  // namespace testutil
