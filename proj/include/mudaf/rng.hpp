#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>

namespace mudaf {

// Mixes a 64-bit value; used to derive independent child seeds.
std::uint64_t splitmix64(std::uint64_t x) noexcept;
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index = 0) noexcept;

// mt19937_64 with distribution code written out by hand so that draws are
// identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    // Uniform in [0, 1).
    double uniform();
    // Uniform integer in [0, n); n > 0.
    std::size_t below(std::size_t n);
    double normal();

    std::string state() const;
    void restore(const std::string& state);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace mudaf
