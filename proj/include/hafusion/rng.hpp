#pragma once

#include <cstdint>
#include <random>

namespace hafusion {

// Single seeded generator shared by everything that draws randomness in a run.
// Consumers must draw in a fixed order so runs with the same seed are
// bit-identical on a given platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(gen_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    return d(gen_);
  }

  long poisson(double mean) {
    std::poisson_distribution<long> d(mean);
    return d(gen_);
  }

  bool bernoulli(double p) {
    std::bernoulli_distribution d(p);
    return d(gen_);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
    return d(gen_);
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace hafusion
