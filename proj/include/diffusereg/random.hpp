#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "diffusereg/grid.hpp"

namespace dreg {

/// Seeded random stream. The full state (engine and the normal sampler's cached
/// value) round-trips through state()/restore() so interrupted runs can resume.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    /// Uniform integer in [lo, hi].
    int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
    std::mt19937_64& engine() { return engine_; }

    std::string state() const;
    void restore(const std::string& state);

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Field with i.i.d. standard normal entries.
DeformationField random_normal_field(Shape3 s, Rng& rng, bool normalized = true);

}  // namespace dreg
