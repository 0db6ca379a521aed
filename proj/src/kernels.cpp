#include "hwm/kernels.hpp"

#include <cstdlib>
#include <stdexcept>
#include <string>

namespace hwm::kern {

// defined in kernels_scalar.cpp / kernels_avx2.cpp
const KernelTable<float>& scalar_table_f32();
const KernelTable<double>& scalar_table_f64();
const KernelTable<float>& avx2_table_f32();
const KernelTable<double>& avx2_table_f64();
bool avx2_lane_built();

const char* isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

bool avx2_supported() {
#if defined(__x86_64__) || defined(__i386__)
  return avx2_lane_built() && __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa detect_best() { return avx2_supported() ? Isa::avx2 : Isa::scalar; }

namespace {

Isa initial_isa() {
  if (const char* env = std::getenv("HWM_KERNELS")) {
    const std::string v(env);
    if (v == "scalar") return Isa::scalar;
    if (v == "avx2") {
      if (!avx2_supported()) throw std::runtime_error("HWM_KERNELS=avx2 but avx2 is unavailable here");
      return Isa::avx2;
    }
    if (v != "auto" && !v.empty())
      throw std::runtime_error("HWM_KERNELS must be scalar|avx2|auto, got '" + v + "'");
  }
  return detect_best();
}

Isa& active_ref() {
  static Isa isa = initial_isa();
  return isa;
}

}  // namespace

Isa active() { return active_ref(); }

void set_active(Isa isa) {
  if (isa == Isa::avx2 && !avx2_supported())
    throw std::runtime_error("avx2 kernel lane unavailable on this machine");
  active_ref() = isa;
}

template <>
const KernelTable<float>& table<float>(Isa isa) {
  return isa == Isa::avx2 ? avx2_table_f32() : scalar_table_f32();
}

template <>
const KernelTable<double>& table<double>(Isa isa) {
  return isa == Isa::avx2 ? avx2_table_f64() : scalar_table_f64();
}

template <>
const KernelTable<float>& table<float>() {
  return table<float>(active());
}

template <>
const KernelTable<double>& table<double>() {
  return table<double>(active());
}

}  // namespace hwm::kern
