#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <string_view>

namespace popmeta {

class Fnv1a {
public:
  void update(std::string_view s) {
    for (unsigned char c : s) step(c);
    step(0xff);  // separator so ("ab","c") != ("a","bc")
  }
  template <class T>
  void update_pod(const T& v) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    for (unsigned char c : buf) step(c);
  }
  std::uint64_t digest() const { return h_; }

private:
  void step(unsigned char c) {
    h_ ^= c;
    h_ *= 0x100000001b3ULL;
  }
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace popmeta
