/*
 * Copyright (c) 2026 The iterquant Authors. All Rights Reserved
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <algorithm>
#include <string>

#include "iterquant/selftest.hpp"

namespace iq = iterquant;

namespace {

bool suite_passed(const std::vector<iq::SelftestResult>& rs,
                  const std::string& name) {
  const auto it = std::find_if(rs.begin(), rs.end(),
                               [&](const auto& r) { return r.suite == name; });
  EXPECT_NE(it, rs.end()) << name;
  return it != rs.end() && it->passed;
}

}  // namespace

TEST(Selftest, CleanBuildPassesEverySuite) {
  for (const auto& r : iq::run_selftest()) {
    EXPECT_TRUE(r.passed) << r.suite << ": " << r.detail;
  }
}

TEST(Selftest, SignZeroFaultOnlyBreaksGolden) {
  iq::SelftestFaults f;
  f.sign_zero_negative = true;
  const auto rs = iq::run_selftest(f);
  // Flipping sign(0) leaves the 1-bit SSE unchanged, so optimality holds.
  EXPECT_TRUE(suite_passed(rs, "1-bit optimality"));
  EXPECT_FALSE(suite_passed(rs, "determinism golden"));
}

TEST(Selftest, NoClipFaultBreaksClipping) {
  iq::SelftestFaults f;
  f.skip_clipping = true;
  const auto rs = iq::run_selftest(f);
  EXPECT_FALSE(suite_passed(rs, "clipping invariant"));
  EXPECT_TRUE(suite_passed(rs, "gradient check"));
}

TEST(Selftest, GoldenHashIsStable) {
  EXPECT_EQ(iq::selftest::golden_hash({}), iq::selftest::kGoldenHash);
  iq::SelftestFaults f;
  f.sign_zero_negative = true;
  EXPECT_NE(iq::selftest::golden_hash(f), iq::selftest::kGoldenHash);
}
