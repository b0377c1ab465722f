#include <algorithm>
#include <numeric>
#include <vector>

#include "bdlab/rng.hpp"
#include "doctest.h"

using namespace bdlab;

// Constants from tests/oracle/golden_values.py.

TEST_CASE("mix64 and derive_seed match the reference") {
  CHECK(mix64(0) == 0xe220a8397b1dcdafULL);
  CHECK(derive_seed(42, 7) == 0xbd28f2372cbf2925ULL);
  CHECK(derive_seed(1, "poison") == 0x4528416cf9b43b1cULL);
  CHECK(derive_seed(1, "poison") != derive_seed(1, "train"));
  CHECK(derive_seed(1, "poison") != derive_seed(2, "poison"));
}

TEST_CASE("engine output is the standard mt19937_64 sequence") {
  Rng rng(5489);
  CHECK(rng.next() == 0xc96d191cf6f6aea6ULL);
  CHECK(rng.next() == 0x401f7ac78bc80f1cULL);
  CHECK(rng.next() == 0xb5ee8cb6abe457f8ULL);
}

TEST_CASE("uniform_index") {
  Rng rng(7);
  CHECK(rng.uniform_index(10) == 5);

  Rng r2(3);
  std::vector<int> hist(6, 0);
  for (int i = 0; i < 60000; ++i) ++hist[r2.uniform_index(6)];
  for (int h : hist) CHECK(std::abs(h - 10000) < 400);
  for (int i = 0; i < 100; ++i) CHECK(r2.uniform_index(1) == 0);
}

TEST_CASE("uniform01 stays in [0, 1)") {
  Rng rng(11);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform01();
    lo = std::min(lo, u);
    hi = std::max(hi, u);
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
  CHECK(lo < 0.01);
  CHECK(hi > 0.99);
}

TEST_CASE("shuffle is a seeded permutation") {
  std::vector<int> a(50);
  std::iota(a.begin(), a.end(), 0);
  std::vector<int> b = a;
  Rng r1(9), r2(9);
  r1.shuffle(std::span<int>(a));
  r2.shuffle(std::span<int>(b));
  CHECK(a == b);
  std::vector<int> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) CHECK(sorted[i] == i);
  std::vector<int> identity(50);
  std::iota(identity.begin(), identity.end(), 0);
  CHECK(a != identity);
}
