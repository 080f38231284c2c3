#pragma once

#include <cstddef>
#include <cstdint>

namespace fine {

// Counter-based generator: output i is a SplitMix64 finalizer applied to
// key + i * golden. split() derives an independent child key, so subsystems
// can draw from their own streams without consuming the parent's counter.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    Rng split(std::uint64_t tag) const;

    std::uint64_t next_u64();
    // Uniform in [0, 1).
    double uniform();
    // Standard normal (Box-Muller).
    double normal();
    // Uniform integer in [0, n).
    std::size_t below(std::size_t n);

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }

private:
    Rng(std::uint64_t key, bool) : key_(key) {}

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace fine
