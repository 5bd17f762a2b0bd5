#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <functional>
#include <vector>

#include "diffusereg/ad.hpp"
#include "diffusereg/grid.hpp"
#include "diffusereg/random.hpp"

namespace testing {

inline std::vector<double> randn(std::size_t n, std::uint64_t seed, double scale = 1.0) {
    dreg::Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal() * scale;
    return v;
}

inline std::vector<double> randu(std::size_t n, std::uint64_t seed) {
    dreg::Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform();
    return v;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Relative error with an absolute floor so near-zero derivatives do not explode.
inline double rel_err(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares analytic gradients of a scalar function of one tensor against central
/// differences at `probes` coordinates. Returns the worst relative error.
inline double gradient_check(const std::function<dreg::ad::Tensor(const dreg::ad::Tensor&)>& f,
                             std::vector<double> x0, int rows, int cols, int probes, std::uint64_t seed,
                             double h = 1e-5) {
    auto x = dreg::ad::variable(rows, cols, x0);
    auto loss = f(x);
    dreg::ad::backward(loss);
    const std::vector<double> analytic = x.grad();
    dreg::Rng rng(seed);
    double worst = 0.0;
    for (int p = 0; p < probes; ++p) {
        const int i = rng.uniform_int(0, static_cast<int>(x0.size()) - 1);
        auto xp = x0, xm = x0;
        xp[i] += h;
        xm[i] -= h;
        const double fp = f(dreg::ad::constant(rows, cols, xp)).item();
        const double fm = f(dreg::ad::constant(rows, cols, xm)).item();
        const double numeric = (fp - fm) / (2.0 * h);
        worst = std::max(worst, rel_err(analytic[i], numeric, 1e-6));
    }
    return worst;
}

/// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("dreg_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    std::filesystem::path path_;
};

}  // namespace testing
