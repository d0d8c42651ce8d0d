// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing,
// software distributed under the License is distributed on an
// "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, either express or implied.  See the License for the
// specific language governing permissions and limitations
// under the License.

#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace costflow {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

// 64-bit FNV-1a. Used for domain segments and PRNG stream keys, so the
// algorithm is frozen: changing it re-partitions every stored corpus.
constexpr std::uint64_t Fnv1a64(std::string_view bytes, std::uint64_t state = kFnvOffset) {
  for (unsigned char c : bytes) {
    state ^= c;
    state *= kFnvPrime;
  }
  return state;
}

constexpr std::uint64_t Fnv1a64(std::uint64_t value, std::uint64_t state) {
  for (int i = 0; i < 8; ++i) {
    state ^= (value >> (8 * i)) & 0xffU;
    state *= kFnvPrime;
  }
  return state;
}

// SplitMix64. Small, portable, and its output sequence is fully specified,
// which std distributions are not.
class SplitMix64 {
 public:
  constexpr explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  constexpr std::uint64_t Next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  constexpr double NextUnit() { return static_cast<double>(Next() >> 11) * 0x1.0p-53; }

  // Uniform in [0, bound). bound must be > 0.
  constexpr std::uint64_t NextBelow(std::uint64_t bound) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
    std::uint64_t x = Next();
    while (x >= limit) x = Next();
    return x % bound;
  }

 private:
  std::uint64_t state_;
};

// Derives an independent stream from a numeric seed and string labels.
inline SplitMix64 StreamFor(std::uint64_t seed, std::initializer_list<std::string_view> labels) {
  std::uint64_t h = Fnv1a64(seed, kFnvOffset);
  for (auto label : labels) {
    h = Fnv1a64(label, h);
    h = Fnv1a64(std::uint64_t{0xff}, h);
  }
  return SplitMix64(h);
}

}  // namespace costflow
