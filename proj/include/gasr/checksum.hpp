#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string_view>
#include <type_traits>

namespace gasr {

// 64-bit FNV-1a, used for corpus/checkpoint integrity fields.
class Fnv1a {
 public:
  void update(std::span<const unsigned char> bytes) {
    for (unsigned char b : bytes) {
      state_ ^= b;
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view text) {
    update(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
  }
  template <typename T>
    requires std::is_trivially_copyable_v<T>
  void update_value(const T& value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    update(std::span<const unsigned char>(bytes, sizeof(T)));
  }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

}  // namespace gasr
