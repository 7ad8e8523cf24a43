#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "pacfl/boosting.hpp"
#include "pacfl/rng.hpp"

namespace pacfl {

struct PrivacyBudget {
    double epsilon = 10.0;

    explicit PrivacyBudget(double eps) : epsilon(eps) {
        if (!(eps > 0.0)) throw std::invalid_argument("privacy: epsilon must be > 0");
    }
};

struct NoiseScale {
    double sigma = 0.0;
};

/// sigma = delta / epsilon.
inline NoiseScale noise_scale(const Sensitivity& delta, const PrivacyBudget& eps) {
    return NoiseScale{delta.delta / eps.epsilon};
}

/// Laplace(0, sigma) draw from a uniform on (-1/2, 1/2):
/// N = -sigma * sign(U) * ln(1 - 2|U|). Pure so the formula is testable at
/// chosen U values.
inline double laplace_from_uniform(double u, double sigma) {
    if (u == 0.0) return 0.0;
    const double sign = u > 0.0 ? 1.0 : -1.0;
    return -sigma * sign * std::log(1.0 - 2.0 * std::fabs(u));
}

inline double sample_laplace(double sigma, Rng& rng) {
    return laplace_from_uniform(rng.uniform_symmetric_half(), sigma);
}

/// Adds independent Laplace noise per coordinate. Returns the raw noisy
/// vector; re-normalization onto the simplex is the caller's step.
inline std::vector<double> perturb(const ImportanceDistribution& importance, double sigma,
                                   Rng& rng) {
    std::vector<double> noisy(importance.values.size());
    for (std::size_t i = 0; i < noisy.size(); ++i)
        noisy[i] = importance.values[i] + sample_laplace(sigma, rng);
    return noisy;
}

}  // namespace pacfl
