#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace msl {

// A class is an 8x8 binary prototype plus a per-pixel flip rate. Instances
// are the prototype with i.i.d. flips, flattened to a 64-vector of {0,1}.
struct SyntheticClass {
  int64_t class_id = 0;
  std::array<uint8_t, 64> prototype{};
  double noise_rate = 0.0;
};

// Rejection-samples n prototypes with pairwise Hamming distance >= min_hamming.
// Throws std::runtime_error when max_tries candidates fail to fit (feasibility).
std::vector<SyntheticClass> gen_class_bank(int64_t n_classes, int64_t min_hamming,
                                           uint64_t seed, double noise_rate = 0.1,
                                           int64_t max_tries = 100000);

std::vector<double> sample_instance(const SyntheticClass& cls, uint64_t seed);

int64_t hamming(const std::array<uint8_t, 64>& a, const std::array<uint8_t, 64>& b);

// Bayes-style reference classifier: argmin Hamming distance to the
// prototypes; ties resolve to the lowest class_id.
int64_t nearest_prototype_oracle(const std::vector<double>& instance,
                                 const std::vector<SyntheticClass>& bank);

uint64_t bank_digest(const std::vector<SyntheticClass>& bank);

}  // namespace msl
