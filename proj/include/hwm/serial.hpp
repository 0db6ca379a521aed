#pragma once
// Raw binary stream helpers shared by the replay buffer and checkpoint
// files. Single-platform format: PODs are written as in-memory bytes,
// vectors and strings as a u64 length followed by the payload.

#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace hwm::serial {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  static_assert(std::is_trivially_copyable_v<T>);
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("serial: truncated stream while reading a value");
  return v;
}

inline std::uint64_t read_len(std::istream& is) {
  const auto n = read_pod<std::uint64_t>(is);
  if (n > (std::uint64_t(1) << 40)) throw std::runtime_error("serial: implausible length field");
  return n;
}

template <typename T>
void write_vec(std::ostream& os, const std::vector<T>& v) {
  static_assert(std::is_trivially_copyable_v<T>);
  write_pod<std::uint64_t>(os, v.size());
  if (!v.empty())
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
std::vector<T> read_vec(std::istream& is) {
  static_assert(std::is_trivially_copyable_v<T>);
  const auto n = read_len(is);
  std::vector<T> v(static_cast<std::size_t>(n));
  if (n) {
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
    if (!is) throw std::runtime_error("serial: truncated stream while reading an array");
  }
  return v;
}

inline void write_str(std::ostream& os, const std::string& s) {
  write_pod<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& is) {
  const auto n = read_len(is);
  std::string s(static_cast<std::size_t>(n), '\0');
  if (n) {
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw std::runtime_error("serial: truncated stream while reading a string");
  }
  return s;
}

}  // namespace hwm::serial
