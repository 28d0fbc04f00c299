#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedsim {

using Engine = std::mt19937_64;

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Named stream families. Every random draw in a run comes from an engine
/// derived from (experiment seed, family, counters), so results do not depend
/// on evaluation order or thread scheduling.
enum class Stream : std::uint64_t {
  kDataset = 1,
  kGradientSample = 2,  // FedDANE S_t
  kUpdateSample = 3,    // devices that return model updates
  kSolver = 4,          // per (round, device, occurrence) local solver
  kTrial = 5,           // sufficient-decrease trials
  kMisc = 6,
};

inline std::uint64_t derive_seed(std::uint64_t seed, Stream family,
                                 std::initializer_list<std::uint64_t> counters) {
  std::uint64_t h = mix64(seed ^ mix64(static_cast<std::uint64_t>(family)));
  for (std::uint64_t c : counters) h = mix64(h ^ (c + 0x632be59bd9b4e019ULL));
  return h;
}

inline Engine make_engine(std::uint64_t seed, Stream family,
                          std::initializer_list<std::uint64_t> counters = {}) {
  return Engine(derive_seed(seed, family, counters));
}

}  // namespace fedsim
