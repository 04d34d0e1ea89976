#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace mmh {

/// Seeded random stream with a serializable state. Draws are defined here
/// (not by <random> distributions) so that saved states replay exactly.
class Rng {
   public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    /// Standard normal via Box-Muller; one engine pair per draw, nothing cached.
    double normal();
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    std::string state() const;
    void set_state(const std::string& state);

    /// Independent seed for a named sub-stream (splitmix64 mixing).
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

   private:
    std::mt19937_64 engine_;
};

}  // namespace mmh
