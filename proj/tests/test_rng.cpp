#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "msl/rng.hpp"

using msl::Rng;

TEST_CASE("rng: same seed gives the same sequence") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("rng: different seeds diverge") {
  Rng a(1), b(2);
  int same = 0;
  for (int i = 0; i < 64; ++i) same += a.next_u64() == b.next_u64() ? 1 : 0;
  CHECK(same == 0);
}

TEST_CASE("rng: split streams are independent of draw order") {
  Rng root(7);
  Rng s1 = root.split(1);
  Rng s2 = root.split(2);
  const uint64_t first_of_s2 = s2.next_u64();

  Rng root2(7);
  Rng t2 = root2.split(2);  // split without touching stream 1 first
  CHECK(t2.next_u64() == first_of_s2);
  CHECK(s1.next_u64() != first_of_s2);
}

TEST_CASE("rng: mix is deterministic and key-sensitive") {
  CHECK(Rng::mix(1, 2) == Rng::mix(1, 2));
  CHECK(Rng::mix(1, 2) != Rng::mix(1, 3));
  CHECK(Rng::mix(1, 2) != Rng::mix(2, 1));
}

TEST_CASE("rng: uniform lies in (0,1] with mean near one half") {
  Rng rng(123);
  double sum = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u > 0.0);
    REQUIRE(u <= 1.0);
    sum += u;
  }
  CHECK(std::abs(sum / n - 0.5) < 0.01);
}

TEST_CASE("rng: normal has unit scale") {
  Rng rng(99);
  const int n = 20000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.03);
  CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("rng: uniform_int covers both endpoints and stays in range") {
  Rng rng(5);
  bool lo_hit = false, hi_hit = false;
  for (int i = 0; i < 2000; ++i) {
    const int64_t v = rng.uniform_int(3, 7);
    REQUIRE(v >= 3);
    REQUIRE(v <= 7);
    lo_hit = lo_hit || v == 3;
    hi_hit = hi_hit || v == 7;
  }
  CHECK(lo_hit);
  CHECK(hi_hit);
  CHECK(rng.uniform_int(4, 4) == 4);
}

TEST_CASE("rng: bernoulli frequency tracks p") {
  Rng rng(11);
  int hits = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) hits += rng.bernoulli(0.3) ? 1 : 0;
  CHECK(std::abs(static_cast<double>(hits) / n - 0.3) < 0.015);
}

TEST_CASE("rng: permutation is a permutation") {
  Rng rng(17);
  const auto p = rng.permutation(50);
  std::set<int64_t> seen(p.begin(), p.end());
  CHECK(p.size() == 50);
  CHECK(seen.size() == 50);
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == 49);
}

TEST_CASE("rng: permutation start positions are roughly uniform") {
  const int trials = 3000;
  std::vector<int> first_count(5, 0);
  for (int t = 0; t < trials; ++t) {
    Rng rng(static_cast<uint64_t>(t) + 1000);
    ++first_count[static_cast<size_t>(rng.permutation(5)[0])];
  }
  for (int c : first_count) {
    CHECK(std::abs(static_cast<double>(c) / trials - 0.2) < 0.04);
  }
}

TEST_CASE("rng: shuffle preserves the multiset") {
  Rng rng(23);
  std::vector<int> v{1, 2, 2, 3, 4, 5, 5, 5};
  auto sorted = v;
  rng.shuffle(v);
  std::sort(sorted.begin(), sorted.end());
  auto resorted = v;
  std::sort(resorted.begin(), resorted.end());
  CHECK(resorted == sorted);
}
