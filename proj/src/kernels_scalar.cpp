#include "hwm/kernels.hpp"

// Reference lane. Plain loops, one accumulator, in-order summation; this is
// the semantics the AVX2 lane is tested against.

namespace hwm::kern {
namespace {

template <typename T>
void add_s(const T* a, const T* b, T* c, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) c[i] = a[i] + b[i];
}

template <typename T>
void sub_s(const T* a, const T* b, T* c, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) c[i] = a[i] - b[i];
}

template <typename T>
void mul_s(const T* a, const T* b, T* c, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) c[i] = a[i] * b[i];
}

template <typename T>
void div_s(const T* a, const T* b, T* c, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) c[i] = a[i] / b[i];
}

template <typename T>
void axpy_s(T a, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
void scale_s(T a, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a * x[i];
}

template <typename T>
void mac_s(const T* a, const T* b, T* c, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) c[i] += a[i] * b[i];
}

template <typename T>
T dot_s(const T* a, const T* b, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
T sum_s(const T* a, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += a[i];
  return acc;
}

// i-k-j order: stream B rows while broadcasting A[i,k].
template <typename T>
void gemm_nn_s(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool acc) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    if (!acc)
      for (std::size_t j = 0; j < n; ++j) crow[j] = T(0);
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

template <typename T>
void gemm_nt_s(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool acc) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      T acc_v = acc ? c[i * n + j] : T(0);
      const T* brow = b + j * k;
      T s = T(0);
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] = acc_v + s;
    }
  }
}

template <typename T>
void gemm_tn_s(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool acc) {
  if (!acc)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = T(0);
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T api = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

template <typename T>
KernelTable<T> make_table() {
  KernelTable<T> t;
  t.add = add_s<T>;
  t.sub = sub_s<T>;
  t.mul = mul_s<T>;
  t.div = div_s<T>;
  t.axpy = axpy_s<T>;
  t.scale = scale_s<T>;
  t.mac = mac_s<T>;
  t.dot = dot_s<T>;
  t.sum = sum_s<T>;
  t.gemm_nn = gemm_nn_s<T>;
  t.gemm_nt = gemm_nt_s<T>;
  t.gemm_tn = gemm_tn_s<T>;
  return t;
}

}  // namespace

const KernelTable<float>& scalar_table_f32() {
  static const KernelTable<float> t = make_table<float>();
  return t;
}

const KernelTable<double>& scalar_table_f64() {
  static const KernelTable<double> t = make_table<double>();
  return t;
}

}  // namespace hwm::kern
