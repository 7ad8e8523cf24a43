#pragma once

#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "pacfl/dataset.hpp"
#include "pacfl/matrix.hpp"
#include "pacfl/rng.hpp"

namespace pacfl {

/// One demand regime: a linear model supported on a dedicated feature block.
struct RegimeSpec {
    std::vector<std::size_t> dominant_features;
    std::vector<double> coefficients;  // aligned with dominant_features
};

struct SyntheticSpec {
    std::size_t n_regimes = 2;
    std::size_t clients_per_regime = 4;
    std::size_t samples_per_client = 150;
    std::size_t n_features = 12;
    std::vector<RegimeSpec> regimes;  // auto-built when empty
    double noise_level = 0.1;
    double test_fraction = 0.2;
    std::uint64_t seed = 0;
};

struct SyntheticData {
    std::vector<ClientDataset> clients;
    std::vector<std::size_t> regime_labels;  // ground truth, per client
    std::vector<RegimeSpec> regimes;         // resolved specs
};

namespace detail {

inline std::vector<RegimeSpec> default_regimes(const SyntheticSpec& spec) {
    const std::size_t block = spec.n_features / spec.n_regimes;
    if (block == 0) throw std::invalid_argument("synthetic: more regimes than features");
    std::vector<RegimeSpec> regimes(spec.n_regimes);
    for (std::size_t r = 0; r < spec.n_regimes; ++r) {
        for (std::size_t j = 0; j < block; ++j) {
            regimes[r].dominant_features.push_back(r * block + j);
            // descending weights inside the block keep per-feature importance uneven
            regimes[r].coefficients.push_back(3.0 - 1.5 * double(j) / double(block));
        }
    }
    return regimes;
}

}  // namespace detail

/// Generates heterogeneous clients: within a regime, y = X * beta + noise
/// with X standard normal; regimes use disjoint feature blocks so a
/// ground-truth clustering exists. Deterministic given the spec seed.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    if (spec.n_regimes < 1) throw std::invalid_argument("synthetic: n_regimes must be >= 1");
    if (spec.clients_per_regime < 1 || spec.samples_per_client < 2 || spec.n_features < 1)
        throw std::invalid_argument("synthetic: invalid size parameters");
    if (!(spec.test_fraction > 0.0 && spec.test_fraction < 1.0))
        throw std::invalid_argument("synthetic: test_fraction must be in (0, 1)");

    SyntheticData data;
    data.regimes = spec.regimes.empty() ? detail::default_regimes(spec) : spec.regimes;
    if (data.regimes.size() != spec.n_regimes)
        throw std::invalid_argument("synthetic: regime count mismatch");

    std::set<std::size_t> claimed;
    for (const auto& r : data.regimes) {
        if (r.dominant_features.size() != r.coefficients.size())
            throw std::invalid_argument("synthetic: regime feature/coefficient mismatch");
        for (std::size_t f : r.dominant_features) {
            if (f >= spec.n_features)
                throw std::invalid_argument("synthetic: regime feature out of range");
            if (!claimed.insert(f).second)
                throw std::invalid_argument("synthetic: regimes share dominant features");
        }
    }

    std::vector<std::string> names;
    for (std::size_t j = 0; j < spec.n_features; ++j) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "f%02zu", j);
        names.emplace_back(buf);
    }

    std::size_t client_index = 0;
    for (std::size_t r = 0; r < spec.n_regimes; ++r) {
        std::vector<double> beta(spec.n_features, 0.0);
        for (std::size_t j = 0; j < data.regimes[r].dominant_features.size(); ++j)
            beta[data.regimes[r].dominant_features[j]] = data.regimes[r].coefficients[j];

        for (std::size_t c = 0; c < spec.clients_per_regime; ++c, ++client_index) {
            ClientDataset client;
            client.client_id = "r" + std::to_string(r) + "_c" + std::to_string(c);
            client.seed = derive_seed(spec.seed, "client", client_index);
            client.feature_names = names;

            Rng rng(derive_seed(client.seed, "data"));
            const std::size_t n = spec.samples_per_client;
            client.X = Matrix(n, spec.n_features);
            client.y.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < spec.n_features; ++j) {
                    const double v = rng.normal();
                    client.X(i, j) = v;
                    dot += beta[j] * v;
                }
                client.y[i] = dot + (spec.noise_level > 0.0
                                         ? spec.noise_level * rng.normal()
                                         : 0.0);
            }

            const auto n_test = static_cast<std::size_t>(
                std::ceil(spec.test_fraction * static_cast<double>(n)));
            std::vector<std::size_t> order(n);
            for (std::size_t i = 0; i < n; ++i) order[i] = i;
            Rng split_rng(derive_seed(client.seed, "split"));
            split_rng.shuffle(order);
            client.split.train.assign(order.begin(), order.end() - n_test);
            client.split.test.assign(order.end() - n_test, order.end());
            std::sort(client.split.train.begin(), client.split.train.end());
            std::sort(client.split.test.begin(), client.split.test.end());

            client.validate();
            data.clients.push_back(std::move(client));
            data.regime_labels.push_back(r);
        }
    }
    return data;
}

}  // namespace pacfl
