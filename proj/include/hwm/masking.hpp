#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hwm/rng.hpp"

// Cuboid masking over observation sequences laid out [frames, rows, cols,
// channels] row-major. A sequence is partitioned into non-overlapping
// cuboids of pk frames x ph rows x pw cols (all channels); a sampled subset
// of cuboids is filled with a constant.

namespace hwm {

struct SeqDims {
  std::size_t frames = 0, h = 0, w = 0, c = 1;
  std::size_t count() const { return frames * h * w * c; }
};

struct CuboidSpec {
  std::size_t pk = 2, ph = 4, pw = 4;
};

struct CuboidGrid {
  std::size_t gk = 0, gh = 0, gw = 0;
  std::size_t cells() const { return gk * gh * gw; }
};

// Validates divisibility; every cuboid must tile the sequence exactly.
inline CuboidGrid partition_grid(const SeqDims& dims, const CuboidSpec& spec) {
  if (spec.pk == 0 || spec.ph == 0 || spec.pw == 0)
    throw std::invalid_argument("cuboid spec extents must be positive");
  if (dims.frames % spec.pk || dims.h % spec.ph || dims.w % spec.pw)
    throw std::invalid_argument(
        "cuboid spec (" + std::to_string(spec.pk) + "x" + std::to_string(spec.ph) + "x" +
        std::to_string(spec.pw) + ") does not tile sequence (" + std::to_string(dims.frames) + "x" +
        std::to_string(dims.h) + "x" + std::to_string(dims.w) + ")");
  return {dims.frames / spec.pk, dims.h / spec.ph, dims.w / spec.pw};
}

// Exactly round(ratio * cells) cells masked, chosen uniformly without
// replacement. ratio must lie in [0, 1).
inline std::vector<std::uint8_t> sample_mask(const CuboidGrid& grid, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio < 1.0))
    throw std::invalid_argument("mask ratio must be in [0, 1), got " + std::to_string(ratio));
  const std::size_t cells = grid.cells();
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(cells)));
  std::vector<std::uint8_t> mask(cells, 0);
  // partial Fisher-Yates over cell indices
  std::vector<std::size_t> idx(cells);
  for (std::size_t i = 0; i < cells; ++i) idx[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(static_cast<int>(cells - i)));
    std::swap(idx[i], idx[j]);
    mask[idx[i]] = 1;
  }
  return mask;
}

namespace detail {
template <typename T, typename F>
void visit_cell(const SeqDims& dims, const CuboidSpec& spec, std::size_t ck, std::size_t cy,
                std::size_t cx, std::span<T> obs, F&& f) {
  for (std::size_t f0 = ck * spec.pk; f0 < (ck + 1) * spec.pk; ++f0)
    for (std::size_t y = cy * spec.ph; y < (cy + 1) * spec.ph; ++y)
      for (std::size_t x = cx * spec.pw; x < (cx + 1) * spec.pw; ++x) {
        const std::size_t base = ((f0 * dims.h + y) * dims.w + x) * dims.c;
        for (std::size_t ch = 0; ch < dims.c; ++ch) f(obs[base + ch]);
      }
}
}  // namespace detail

// Fills masked cuboids with `fill` in place. Unmasked elements are untouched.
template <typename T>
void apply_mask(const SeqDims& dims, const CuboidSpec& spec, const std::vector<std::uint8_t>& mask,
                std::span<T> obs, T fill = T(0)) {
  const CuboidGrid grid = partition_grid(dims, spec);
  if (mask.size() != grid.cells())
    throw std::invalid_argument("apply_mask: mask has " + std::to_string(mask.size()) +
                                " cells, sequence partitions into " + std::to_string(grid.cells()));
  if (obs.size() != dims.count())
    throw std::invalid_argument("apply_mask: observation buffer size mismatch");
  for (std::size_t ck = 0; ck < grid.gk; ++ck)
    for (std::size_t cy = 0; cy < grid.gh; ++cy)
      for (std::size_t cx = 0; cx < grid.gw; ++cx) {
        if (!mask[(ck * grid.gh + cy) * grid.gw + cx]) continue;
        detail::visit_cell(dims, spec, ck, cy, cx, obs, [fill](T& v) { v = fill; });
      }
}

// Reorders a sequence into cell-major layout: cell index outer, elements of
// the cuboid inner (frame, row, col, channel order). reassemble_cells is its
// exact inverse; the round trip is bit-exact.
template <typename T>
std::vector<T> partition_cells(const SeqDims& dims, const CuboidSpec& spec, std::span<const T> obs) {
  const CuboidGrid grid = partition_grid(dims, spec);
  if (obs.size() != dims.count())
    throw std::invalid_argument("partition_cells: observation buffer size mismatch");
  std::vector<T> out;
  out.reserve(obs.size());
  for (std::size_t ck = 0; ck < grid.gk; ++ck)
    for (std::size_t cy = 0; cy < grid.gh; ++cy)
      for (std::size_t cx = 0; cx < grid.gw; ++cx)
        detail::visit_cell(dims, spec, ck, cy, cx, std::span<T>(const_cast<T*>(obs.data()), obs.size()),
                           [&out](T& v) { out.push_back(v); });
  return out;
}

template <typename T>
std::vector<T> reassemble_cells(const SeqDims& dims, const CuboidSpec& spec, std::span<const T> cells) {
  const CuboidGrid grid = partition_grid(dims, spec);
  if (cells.size() != dims.count())
    throw std::invalid_argument("reassemble_cells: cell buffer size mismatch");
  std::vector<T> out(cells.size());
  std::size_t cursor = 0;
  for (std::size_t ck = 0; ck < grid.gk; ++ck)
    for (std::size_t cy = 0; cy < grid.gh; ++cy)
      for (std::size_t cx = 0; cx < grid.gw; ++cx)
        detail::visit_cell(dims, spec, ck, cy, cx, std::span<T>(out.data(), out.size()),
                           [&cells, &cursor](T& v) { v = cells[cursor++]; });
  return out;
}

}  // namespace hwm
