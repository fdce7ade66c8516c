#include "msl/synthetic.hpp"

#include <stdexcept>
#include <string>

#include "msl/digest.hpp"
#include "msl/rng.hpp"

namespace msl {

int64_t hamming(const std::array<uint8_t, 64>& a, const std::array<uint8_t, 64>& b) {
  int64_t d = 0;
  for (size_t i = 0; i < 64; ++i) d += a[i] != b[i];
  return d;
}

std::vector<SyntheticClass> gen_class_bank(int64_t n_classes, int64_t min_hamming,
                                           uint64_t seed, double noise_rate,
                                           int64_t max_tries) {
  if (n_classes < 1) throw std::invalid_argument("gen_class_bank: n_classes must be >= 1");
  if (min_hamming < 0 || min_hamming > 64) {
    throw std::invalid_argument("gen_class_bank: min_hamming must be in [0,64]");
  }
  if (noise_rate < 0.0 || noise_rate >= 0.5) {
    throw std::invalid_argument("gen_class_bank: noise_rate must be in [0,0.5)");
  }
  Rng rng(Rng::mix(seed, 0x62616e6b));  // "bank"
  std::vector<SyntheticClass> bank;
  bank.reserve(static_cast<size_t>(n_classes));
  int64_t tries = 0;
  while (static_cast<int64_t>(bank.size()) < n_classes) {
    if (++tries > max_tries) {
      throw std::runtime_error(
          "gen_class_bank: could not place " + std::to_string(n_classes) +
          " prototypes at min_hamming " + std::to_string(min_hamming) + " within " +
          std::to_string(max_tries) + " tries");
    }
    SyntheticClass cls;
    cls.class_id = static_cast<int64_t>(bank.size());
    cls.noise_rate = noise_rate;
    for (auto& px : cls.prototype) px = rng.bernoulli(0.5) ? 1 : 0;
    bool ok = true;
    for (const auto& other : bank) {
      if (hamming(cls.prototype, other.prototype) < min_hamming) {
        ok = false;
        break;
      }
    }
    if (ok) bank.push_back(cls);
  }
  return bank;
}

std::vector<double> sample_instance(const SyntheticClass& cls, uint64_t seed) {
  Rng rng(Rng::mix(seed, static_cast<uint64_t>(cls.class_id)));
  std::vector<double> v(64);
  for (size_t i = 0; i < 64; ++i) {
    const bool flip = rng.bernoulli(cls.noise_rate);
    v[i] = (cls.prototype[i] != 0) != flip ? 1.0 : 0.0;
  }
  return v;
}

int64_t nearest_prototype_oracle(const std::vector<double>& instance,
                                 const std::vector<SyntheticClass>& bank) {
  if (bank.empty()) throw std::invalid_argument("nearest_prototype_oracle: empty bank");
  if (instance.size() != 64) {
    throw std::invalid_argument("nearest_prototype_oracle: instance must have 64 entries");
  }
  std::array<uint8_t, 64> bits{};
  for (size_t i = 0; i < 64; ++i) bits[i] = instance[i] >= 0.5 ? 1 : 0;
  int64_t best_id = bank[0].class_id;
  int64_t best_d = hamming(bits, bank[0].prototype);
  for (size_t i = 1; i < bank.size(); ++i) {
    const int64_t d = hamming(bits, bank[i].prototype);
    if (d < best_d || (d == best_d && bank[i].class_id < best_id)) {
      best_d = d;
      best_id = bank[i].class_id;
    }
  }
  return best_id;
}

uint64_t bank_digest(const std::vector<SyntheticClass>& bank) {
  std::string bytes;
  bytes.reserve(bank.size() * 80);
  for (const auto& cls : bank) {
    bytes += std::to_string(cls.class_id);
    bytes += ':';
    for (uint8_t px : cls.prototype) bytes += px ? '1' : '0';
    bytes += '@';
    bytes += std::to_string(cls.noise_rate);
    bytes += ';';
  }
  return fnv1a64(bytes);
}

}  // namespace msl
