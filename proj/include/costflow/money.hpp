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

#include <cmath>
#include <compare>
#include <cstdint>
#include <cstdlib>
#include <ostream>
#include <string>
#include <string_view>

#include "costflow/error.hpp"

namespace costflow {

// USD amount held as integer cents. All cost arithmetic stays in this type so
// sums are exact at cent precision.
class Money {
 public:
  constexpr Money() = default;

  static constexpr Money FromCents(std::int64_t cents) { return Money(cents); }

  // Accepts "402.54", "0.5", "-3", "$12.00". More than two fractional digits
  // are rejected rather than silently rounded.
  static Money Parse(std::string_view text) {
    std::string_view s = text;
    bool negative = false;
    if (!s.empty() && s.front() == '-') {
      negative = true;
      s.remove_prefix(1);
    }
    if (!s.empty() && s.front() == '$') s.remove_prefix(1);
    if (s.empty()) throw Error(Errc::kParseError, "empty money literal");
    std::int64_t whole = 0;
    std::int64_t frac = 0;
    int frac_digits = 0;
    bool seen_dot = false;
    bool seen_digit = false;
    for (char c : s) {
      if (c == '.') {
        if (seen_dot) throw Error(Errc::kParseError, "bad money literal '" + std::string(text) + "'");
        seen_dot = true;
        continue;
      }
      if (c < '0' || c > '9') throw Error(Errc::kParseError, "bad money literal '" + std::string(text) + "'");
      seen_digit = true;
      if (seen_dot) {
        if (++frac_digits > 2) {
          throw Error(Errc::kParseError, "more than two decimals in '" + std::string(text) + "'");
        }
        frac = frac * 10 + (c - '0');
      } else {
        whole = whole * 10 + (c - '0');
      }
    }
    if (!seen_digit) throw Error(Errc::kParseError, "bad money literal '" + std::string(text) + "'");
    if (frac_digits == 1) frac *= 10;
    std::int64_t cents = whole * 100 + frac;
    return Money(negative ? -cents : cents);
  }

  constexpr std::int64_t cents() const { return cents_; }
  double usd() const { return static_cast<double>(cents_) / 100.0; }

  std::string ToString() const {
    std::int64_t abs = cents_ < 0 ? -cents_ : cents_;
    std::string frac = std::to_string(abs % 100);
    if (frac.size() < 2) frac.insert(0, "0");
    return (cents_ < 0 ? "-" : "") + std::to_string(abs / 100) + "." + frac;
  }

  constexpr Money operator+(Money other) const { return Money(cents_ + other.cents_); }
  constexpr Money operator-(Money other) const { return Money(cents_ - other.cents_); }
  constexpr Money& operator+=(Money other) {
    cents_ += other.cents_;
    return *this;
  }
  constexpr auto operator<=>(const Money&) const = default;

 private:
  constexpr explicit Money(std::int64_t cents) : cents_(cents) {}

  std::int64_t cents_ = 0;
};

inline std::ostream& operator<<(std::ostream& os, Money m) { return os << m.ToString(); }

// Per-node-hour price in micro-USD. Keeping rates integral lets
// duration(ms) x nodes x rate be computed exactly before the single half-up
// rounding to cents.
class Rate {
 public:
  constexpr Rate() = default;

  static constexpr Rate FromMicros(std::int64_t micros) { return Rate(micros); }

  static Rate FromUsd(double usd) {
    if (!std::isfinite(usd) || usd < 0.0) {
      throw Error(Errc::kInvalidConfig, "rate must be finite and nonnegative");
    }
    return Rate(std::llround(usd * 1e6));
  }

  constexpr std::int64_t micros() const { return micros_; }
  double usd() const { return static_cast<double>(micros_) / 1e6; }

  constexpr auto operator<=>(const Rate&) const = default;

 private:
  constexpr explicit Rate(std::int64_t micros) : micros_(micros) {}

  std::int64_t micros_ = 0;
};

// Virtual-clock duration in milliseconds.
using Millis = std::int64_t;

constexpr Millis kMillisPerHour = 3'600'000;
constexpr Millis kMillisPerSecond = 1'000;

inline Millis HoursToMillis(double hours) {
  return static_cast<Millis>(std::llround(hours * static_cast<double>(kMillisPerHour)));
}

inline double MillisToHours(Millis ms) {
  return static_cast<double>(ms) / static_cast<double>(kMillisPerHour);
}

inline double MillisToSeconds(Millis ms) {
  return static_cast<double>(ms) / static_cast<double>(kMillisPerSecond);
}

// duration x nodes x rate, rounded half-up to whole cents.
inline Money ChargeFor(Millis duration, std::int64_t node_count, Rate rate) {
  // micro-USD * ms / (ms per hour) -> micro-USD; cents = micro-USD / 10^4.
  // Denominator for cents: 3.6e6 * 1e4 = 3.6e10.
  const __int128 numerator = static_cast<__int128>(duration) * node_count * rate.micros();
  const __int128 denominator = static_cast<__int128>(kMillisPerHour) * 10'000;
  const __int128 cents = (numerator * 2 + denominator) / (denominator * 2);
  return Money::FromCents(static_cast<std::int64_t>(cents));
}

}  // namespace costflow
