#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <string>

namespace drasrl {

using Rng = std::mt19937_64;

/// Derives an independent engine for a (seed, stream) pair. Used to pre-split
/// streams per episode / per noise level so results do not depend on call order.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

/// Inverse-CDF draw from an unnormalized-tolerant probability row.
inline std::size_t sample_categorical(Rng& rng, std::span<const double> probs) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  // round-off: fall back to the last entry with positive mass
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return i;
  }
  return probs.size() - 1;
}

inline std::string serialize_rng(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

inline Rng deserialize_rng(const std::string& text) {
  Rng rng;
  std::istringstream in(text);
  in >> rng;
  return rng;
}

}  // namespace drasrl
