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

#include <gtest/gtest.h>

#include "costflow/hash.hpp"
#include "costflow/money.hpp"
#include "gen.hpp"

using namespace costflow;

TEST(Money, ParseAndFormat) {
  EXPECT_EQ(Money::Parse("402.54").cents(), 40254);
  EXPECT_EQ(Money::Parse("$12.00").cents(), 1200);
  EXPECT_EQ(Money::Parse("0.5").cents(), 50);
  EXPECT_EQ(Money::Parse("-3").cents(), -300);
  EXPECT_EQ(Money::FromCents(5).ToString(), "0.05");
  EXPECT_EQ(Money::FromCents(-1205).ToString(), "-12.05");
}

TEST(Money, RejectsBadLiterals) {
  for (const char* bad : {"", "$", "1.234", "1.2.3", "abc", "1e3", "."}) {
    EXPECT_THROW(Money::Parse(bad), Error) << bad;
  }
}

TEST(Money, FormatParseRoundtrip) {
  gen::Gen g(11);
  for (int i = 0; i < 1000; ++i) {
    const auto m = Money::FromCents(static_cast<std::int64_t>(g.U64() % 100'000'000) - 50'000'000);
    EXPECT_EQ(Money::Parse(m.ToString()), m);
  }
}

TEST(Money, RateFromUsd) {
  EXPECT_EQ(Rate::FromUsd(3.0894).micros(), 3'089'400);
  EXPECT_THROW(Rate::FromUsd(-1.0), Error);
}

TEST(Money, ChargeRoundsHalfUp) {
  // 1h x 1 node x $0.005 = half a cent -> rounds up.
  EXPECT_EQ(ChargeFor(kMillisPerHour, 1, Rate::FromMicros(5'000)).cents(), 1);
  EXPECT_EQ(ChargeFor(kMillisPerHour, 1, Rate::FromMicros(4'999)).cents(), 0);
  // 2.5h x 1.015/h -> 2.5375 -> 2.54.
  EXPECT_EQ(ChargeFor(HoursToMillis(2.5), 1, Rate::FromUsd(1.015)).cents(), 254);
  EXPECT_EQ(ChargeFor(0, 10, Rate::FromUsd(8.8)).cents(), 0);
}

TEST(Money, ChargeMatchesRationalOracle) {
  // Independent check with long double on small magnitudes.
  gen::Gen g(12);
  for (int i = 0; i < 2000; ++i) {
    const Millis ms = static_cast<Millis>(g.Int(0, 20 * 3600)) * 1000 + g.Int(0, 999);
    const int nodes = g.Int(1, 40);
    const std::int64_t micros = g.Int(0, 10'000'000);
    const long double exact = static_cast<long double>(ms) * nodes * micros / 3.6e10L;
    const Money got = ChargeFor(ms, nodes, Rate::FromMicros(micros));
    EXPECT_LE(std::abs(static_cast<long double>(got.cents()) - exact), 0.5L + 1e-9L);
  }
}

TEST(Hash, Fnv1aKnownVectors) {
  EXPECT_EQ(Fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(Fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(Fnv1a64("foobar"), 0x85944171f73967e8ULL);
}

TEST(Hash, SplitMixKnownVector) {
  // Reference output of SplitMix64 seeded with 0.
  SplitMix64 r(0);
  EXPECT_EQ(r.Next(), 0xe220a8397b1dcdafULL);
  EXPECT_EQ(r.Next(), 0x6e789e6aa1b965f4ULL);
}

TEST(Hash, NextBelowInRangeAndStreamsDiffer) {
  SplitMix64 r(99);
  for (int i = 0; i < 10000; ++i) EXPECT_LT(r.NextBelow(7), 7u);
  EXPECT_NE(StreamFor(1, {"a"}).Next(), StreamFor(1, {"b"}).Next());
  EXPECT_NE(StreamFor(1, {"ab", "c"}).Next(), StreamFor(1, {"a", "bc"}).Next());
  EXPECT_EQ(StreamFor(5, {"x"}).Next(), StreamFor(5, {"x"}).Next());
}
