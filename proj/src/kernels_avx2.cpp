#include "hwm/kernels.hpp"

// AVX2+FMA lane. This TU is the only one built with -mavx2 -mfma; it must
// not be entered unless avx2_supported() said yes.
//
// add/sub/mul/div/scale/axpy/mac are per-lane IEEE ops in the same order as
// the reference lane, so they are bit-identical to it (axpy/mac deliberately
// use separate mul+add, not fma, to keep the two-rounding semantics of the
// reference loop). dot/sum/gemm reassociate and use fma.

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>

namespace hwm::kern {
namespace {

inline float hsum8(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 sh = _mm_movehl_ps(lo, lo);
  lo = _mm_add_ps(lo, sh);
  sh = _mm_shuffle_ps(lo, lo, 0x1);
  lo = _mm_add_ss(lo, sh);
  return _mm_cvtss_f32(lo);
}

inline double hsum4(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  lo = _mm_add_sd(lo, sh);
  return _mm_cvtsd_f64(lo);
}

// ---- float ----

void add_v(const float* a, const float* b, float* c, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(c + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) c[i] = a[i] + b[i];
}

void sub_v(const float* a, const float* b, float* c, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(c + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) c[i] = a[i] - b[i];
}

void mul_v(const float* a, const float* b, float* c, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(c + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) c[i] = a[i] * b[i];
}

void div_v(const float* a, const float* b, float* c, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(c + i, _mm256_div_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) c[i] = a[i] / b[i];
}

void axpy_v(float a, const float* x, float* y, std::size_t n) {
  const __m256 av = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 prod = _mm256_mul_ps(av, _mm256_loadu_ps(x + i));
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), prod));
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void scale_v(float a, const float* x, float* y, std::size_t n) {
  const __m256 av = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = a * x[i];
}

void mac_v(const float* a, const float* b, float* c, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 prod = _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i));
    _mm256_storeu_ps(c + i, _mm256_add_ps(_mm256_loadu_ps(c + i), prod));
  }
  for (; i < n; ++i) c[i] += a[i] * b[i];
}

float dot_v(const float* a, const float* b, std::size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8)
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
  float s = hsum8(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

float sum_v(const float* a, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(a + i));
  float s = hsum8(acc);
  for (; i < n; ++i) s += a[i];
  return s;
}

void gemm_nn_v(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n, bool acc) {
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    if (!acc)
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.f;
    for (std::size_t p = 0; p < k; ++p) {
      const __m256 aip = _mm256_set1_ps(a[i * k + p]);
      const float* brow = b + p * n;
      std::size_t j = 0;
      for (; j + 16 <= n; j += 16) {
        _mm256_storeu_ps(crow + j, _mm256_fmadd_ps(aip, _mm256_loadu_ps(brow + j), _mm256_loadu_ps(crow + j)));
        _mm256_storeu_ps(crow + j + 8,
                         _mm256_fmadd_ps(aip, _mm256_loadu_ps(brow + j + 8), _mm256_loadu_ps(crow + j + 8)));
      }
      for (; j + 8 <= n; j += 8)
        _mm256_storeu_ps(crow + j, _mm256_fmadd_ps(aip, _mm256_loadu_ps(brow + j), _mm256_loadu_ps(crow + j)));
      const float as = a[i * k + p];
      for (; j < n; ++j) crow[j] += as * brow[j];
    }
  }
}

void gemm_nt_v(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n, bool acc) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const float base = acc ? c[i * n + j] : 0.f;
      c[i * n + j] = base + dot_v(arow, b + j * k, k);
    }
  }
}

void gemm_tn_v(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n, bool acc) {
  if (!acc)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.f;
  for (std::size_t p = 0; p < k; ++p) {
    const float* arow = a + p * m;
    const float* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const __m256 api = _mm256_set1_ps(arow[i]);
      float* crow = c + i * n;
      std::size_t j = 0;
      for (; j + 8 <= n; j += 8)
        _mm256_storeu_ps(crow + j, _mm256_fmadd_ps(api, _mm256_loadu_ps(brow + j), _mm256_loadu_ps(crow + j)));
      for (; j < n; ++j) crow[j] += arow[i] * brow[j];
    }
  }
}

// ---- double ----

void add_d(const double* a, const double* b, double* c, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(c + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) c[i] = a[i] + b[i];
}

void sub_d(const double* a, const double* b, double* c, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(c + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) c[i] = a[i] - b[i];
}

void mul_d(const double* a, const double* b, double* c, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(c + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) c[i] = a[i] * b[i];
}

void div_d(const double* a, const double* b, double* c, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(c + i, _mm256_div_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) c[i] = a[i] / b[i];
}

void axpy_d(double a, const double* x, double* y, std::size_t n) {
  const __m256d av = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d prod = _mm256_mul_pd(av, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void scale_d(double a, const double* x, double* y, std::size_t n) {
  const __m256d av = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_mul_pd(av, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) y[i] = a * x[i];
}

void mac_d(const double* a, const double* b, double* c, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d prod = _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    _mm256_storeu_pd(c + i, _mm256_add_pd(_mm256_loadu_pd(c + i), prod));
  }
  for (; i < n; ++i) c[i] += a[i] * b[i];
}

double dot_d(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  double s = hsum4(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

double sum_d(const double* a, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(a + i));
  double s = hsum4(acc);
  for (; i < n; ++i) s += a[i];
  return s;
}

void gemm_nn_d(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n, bool acc) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (!acc)
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
      const __m256d aip = _mm256_set1_pd(a[i * k + p]);
      const double* brow = b + p * n;
      std::size_t j = 0;
      for (; j + 4 <= n; j += 4)
        _mm256_storeu_pd(crow + j, _mm256_fmadd_pd(aip, _mm256_loadu_pd(brow + j), _mm256_loadu_pd(crow + j)));
      const double as = a[i * k + p];
      for (; j < n; ++j) crow[j] += as * brow[j];
    }
  }
}

void gemm_nt_d(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n, bool acc) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double base = acc ? c[i * n + j] : 0.0;
      c[i * n + j] = base + dot_d(arow, b + j * k, k);
    }
  }
}

void gemm_tn_d(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n, bool acc) {
  if (!acc)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const __m256d api = _mm256_set1_pd(arow[i]);
      double* crow = c + i * n;
      std::size_t j = 0;
      for (; j + 4 <= n; j += 4)
        _mm256_storeu_pd(crow + j, _mm256_fmadd_pd(api, _mm256_loadu_pd(brow + j), _mm256_loadu_pd(crow + j)));
      for (; j < n; ++j) crow[j] += arow[i] * brow[j];
    }
  }
}

}  // namespace

bool avx2_lane_built() { return true; }

const KernelTable<float>& avx2_table_f32() {
  static const KernelTable<float> t = [] {
    KernelTable<float> k;
    k.add = add_v;
    k.sub = sub_v;
    k.mul = mul_v;
    k.div = div_v;
    k.axpy = axpy_v;
    k.scale = scale_v;
    k.mac = mac_v;
    k.dot = dot_v;
    k.sum = sum_v;
    k.gemm_nn = gemm_nn_v;
    k.gemm_nt = gemm_nt_v;
    k.gemm_tn = gemm_tn_v;
    return k;
  }();
  return t;
}

const KernelTable<double>& avx2_table_f64() {
  static const KernelTable<double> t = [] {
    KernelTable<double> k;
    k.add = add_d;
    k.sub = sub_d;
    k.mul = mul_d;
    k.div = div_d;
    k.axpy = axpy_d;
    k.scale = scale_d;
    k.mac = mac_d;
    k.dot = dot_d;
    k.sum = sum_d;
    k.gemm_nn = gemm_nn_d;
    k.gemm_nt = gemm_nt_d;
    k.gemm_tn = gemm_tn_d;
    return k;
  }();
  return t;
}

}  // namespace hwm::kern

#else  // lane not built on this target

namespace hwm::kern {

bool avx2_lane_built() { return false; }

const KernelTable<float>& avx2_table_f32();
const KernelTable<double>& avx2_table_f64();

const KernelTable<float>& avx2_table_f32() {
  static const KernelTable<float> t{};
  return t;
}

const KernelTable<double>& avx2_table_f64() {
  static const KernelTable<double> t{};
  return t;
}

}  // namespace hwm::kern

#endif
