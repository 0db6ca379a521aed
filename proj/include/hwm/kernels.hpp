#pragma once

#include <cstddef>
#include <string>

// Low-level array kernels behind the tensor ops. Two implementations per
// scalar type: a portable reference lane and an AVX2+FMA lane, selected once
// at startup from cpu caps (override: HWM_KERNELS=scalar|avx2|auto, or
// set_active()). Elementwise kernels are bit-identical across lanes;
// reductions and matmul may reassociate and are equivalence-tested against
// the reference lane under tolerance.
//
// Transcendentals are not here on purpose: they stay scalar inside the
// tensor ops so both lanes share one libm rounding behaviour.

namespace hwm::kern {

enum class Isa { scalar, avx2 };

const char* isa_name(Isa isa);

// True when the running cpu can execute the AVX2 lane (and it was built in).
bool avx2_supported();

// Best lane for this machine: avx2 when supported, else scalar.
Isa detect_best();

// Active lane. Initialised lazily from HWM_KERNELS / detect_best().
Isa active();

// Force a lane. Throws std::runtime_error if the lane cannot run here.
void set_active(Isa isa);

template <typename T>
struct KernelTable {
  // c[i] = a[i] op b[i]
  void (*add)(const T*, const T*, T*, std::size_t);
  void (*sub)(const T*, const T*, T*, std::size_t);
  void (*mul)(const T*, const T*, T*, std::size_t);
  void (*div)(const T*, const T*, T*, std::size_t);
  // y[i] += a * x[i]
  void (*axpy)(T, const T*, T*, std::size_t);
  // y[i] = a * x[i]
  void (*scale)(T, const T*, T*, std::size_t);
  // c[i] += a[i] * b[i]
  void (*mac)(const T*, const T*, T*, std::size_t);
  T (*dot)(const T*, const T*, std::size_t);
  T (*sum)(const T*, std::size_t);
  // Row-major GEMM family; `acc` accumulates into C instead of overwriting.
  //   gemm_nn: C[m,n] (+)= A[m,k] * B[k,n]
  //   gemm_nt: C[m,n] (+)= A[m,k] * B[n,k]^T
  //   gemm_tn: C[m,n] (+)= A[k,m]^T * B[k,n]
  void (*gemm_nn)(const T*, const T*, T*, std::size_t m, std::size_t k, std::size_t n, bool acc);
  void (*gemm_nt)(const T*, const T*, T*, std::size_t m, std::size_t k, std::size_t n, bool acc);
  void (*gemm_tn)(const T*, const T*, T*, std::size_t m, std::size_t k, std::size_t n, bool acc);
};

// Table for an explicit lane (tests compare lanes through this).
template <typename T>
const KernelTable<T>& table(Isa isa);

// Table for the active lane.
template <typename T>
const KernelTable<T>& table();

template <> const KernelTable<float>& table<float>(Isa);
template <> const KernelTable<double>& table<double>(Isa);
template <> const KernelTable<float>& table<float>();
template <> const KernelTable<double>& table<double>();

}  // namespace hwm::kern
