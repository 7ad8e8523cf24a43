#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pacfl/boosting.hpp"
#include "pacfl/privacy.hpp"
#include "support/oracles.hpp"

using namespace pacfl;

TEST_CASE("noise scale is delta over epsilon") {
    // Central America sensitivity at low privacy
    CHECK(noise_scale(Sensitivity{"", 0.0185}, PrivacyBudget(10.0)).sigma ==
          Catch::Approx(0.00185));
    // Southeast Asia at high privacy
    CHECK(noise_scale(Sensitivity{"", 0.0651}, PrivacyBudget(0.1)).sigma ==
          Catch::Approx(0.651));
    CHECK(noise_scale(Sensitivity{"", 0.0}, PrivacyBudget(1.0)).sigma == 0.0);
    CHECK_THROWS_AS(PrivacyBudget(0.0), std::invalid_argument);
    CHECK_THROWS_AS(PrivacyBudget(-1.0), std::invalid_argument);
}

TEST_CASE("laplace inverse formula at chosen uniforms") {
    CHECK(laplace_from_uniform(0.0, 1.0) == 0.0);
    CHECK(laplace_from_uniform(0.25, 1.0) == Catch::Approx(-std::log(0.5)).epsilon(1e-12));
    CHECK(laplace_from_uniform(-0.25, 1.0) == Catch::Approx(std::log(0.5)).epsilon(1e-12));
    CHECK(laplace_from_uniform(0.25, 2.0) == Catch::Approx(-2.0 * std::log(0.5)));
}

TEST_CASE("sign-flip of the uniform stream negates draws exactly") {
    Rng rng(99);
    for (int i = 0; i < 1000; ++i) {
        const double u = rng.uniform_symmetric_half();
        CHECK(laplace_from_uniform(-u, 0.7) == -laplace_from_uniform(u, 0.7));
    }
}

TEST_CASE("draws match the laplace distribution") {
    constexpr double sigma = 0.5;
    constexpr std::size_t n = 100000;
    Rng rng(2024);
    std::vector<double> draws(n);
    for (auto& d : draws) d = sample_laplace(sigma, rng);

    const double ks = test_support::ks_statistic(
        draws, [&](double x) { return test_support::laplace_cdf(x, sigma); });
    CHECK(ks < 0.01);

    double mean = 0.0;
    for (double d : draws) mean += d;
    mean /= double(n);
    double var = 0.0;
    for (double d : draws) var += (d - mean) * (d - mean);
    var /= double(n);
    // Var = 2 sigma^2 = 0.5, within 5%
    CHECK(var == Catch::Approx(0.5).margin(0.025));

    std::sort(draws.begin(), draws.end());
    const double median = 0.5 * (draws[n / 2 - 1] + draws[n / 2]);
    CHECK(std::fabs(median) < 0.01);
}

TEST_CASE("perturb with zero scale is the identity") {
    ImportanceDistribution imp;
    imp.values = {0.2, 0.3, 0.5};
    Rng rng(7);
    CHECK(perturb(imp, 0.0, rng) == imp.values);
}

TEST_CASE("perturb is reproducible under a fixed seed") {
    ImportanceDistribution imp;
    imp.values = {0.1, 0.6, 0.3};
    Rng a(42), b(42);
    CHECK(perturb(imp, 0.2, a) == perturb(imp, 0.2, b));
}

TEST_CASE("perturb then normalize lands on the simplex for any sigma") {
    Rng rng(5);
    for (double sigma : {0.0, 0.01, 0.5, 3.0, 100.0}) {
        for (int rep = 0; rep < 50; ++rep) {
            ImportanceDistribution imp;
            imp.values = test_support::random_simplex(8, rng);
            const auto noisy = normalize(perturb(imp, sigma, rng), "c", true);
            double sum = 0.0;
            for (double v : noisy.values) {
                CHECK(v >= 0.0);
                sum += v;
            }
            CHECK(sum == Catch::Approx(1.0).margin(1e-9));
            CHECK(noisy.noisy);
        }
    }
}
