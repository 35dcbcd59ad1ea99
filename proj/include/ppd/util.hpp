#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ppd {

// 64-bit splitmix-seeded xoshiro-style PRNG wrapper. We avoid the standard
// <random> distributions so that streams are bit-identical across standard
// library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double next_double();
  // Uniform in [lo, hi).
  double uniform(double lo, double hi);
  // Exponential with the given rate (mean 1/rate).
  double exponential(double rate);
  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n);

 private:
  std::uint64_t s_[4];
};

std::string read_file(const std::filesystem::path& p);
void write_file(const std::filesystem::path& p, const std::string& content);

// UTC timestamp string. Honors SOURCE_DATE_EPOCH for reproducible artifacts.
std::string iso_timestamp_now();

}  // namespace ppd
