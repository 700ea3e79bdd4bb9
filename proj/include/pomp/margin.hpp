#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "pomp/error.hpp"

namespace pomp {

/// Logit offset added to every sampled negative so that K sampled classes
/// stand in for N: m = -ln((K-1)/(N-1)). Zero iff K == N.
inline double adaptive_margin(std::size_t sampled, std::size_t total) {
  if (sampled < 2) throw ContractError("adaptive_margin: K must be >= 2 (no negatives)");
  if (sampled > total) {
    throw ContractError("adaptive_margin: K must satisfy K <= N (K=" + std::to_string(sampled) +
                        ", N=" + std::to_string(total) + ")");
  }
  if (sampled == total) return 0.0;
  return -std::log(static_cast<double>(sampled - 1) / static_cast<double>(total - 1));
}

}  // namespace pomp
