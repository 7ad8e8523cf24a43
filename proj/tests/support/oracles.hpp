#pragma once

// Test-only oracles, kept independent of the library implementations they
// check.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "pacfl/rng.hpp"

namespace test_support {

/// Minimum-cost transport between two histograms on bins with |i - j|
/// ground cost, solved exactly by successive shortest paths (Bellman-Ford
/// on the residual network). Independent oracle for the CDF-form EMD.
inline double emd_min_cost_transport(const std::vector<double>& p,
                                     const std::vector<double>& q) {
    const std::size_t n = p.size();
    // node ids: 0 = source, 1..n suppliers, n+1..2n consumers, 2n+1 = sink
    const std::size_t S = 0, T = 2 * n + 1, V = 2 * n + 2;
    struct Arc {
        std::size_t to;
        double cap;
        double cost;
        std::size_t rev;  // index of the reverse arc in adj[to]
    };
    std::vector<std::vector<Arc>> adj(V);
    auto add_arc = [&](std::size_t u, std::size_t v, double cap, double cost) {
        adj[u].push_back({v, cap, cost, adj[v].size()});
        adj[v].push_back({u, 0.0, -cost, adj[u].size() - 1});
    };
    constexpr double inf = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        add_arc(S, 1 + i, p[i], 0.0);
        add_arc(n + 1 + i, T, q[i], 0.0);
        for (std::size_t j = 0; j < n; ++j)
            add_arc(1 + i, n + 1 + j, inf, std::fabs(double(i) - double(j)));
    }

    double total_cost = 0.0;
    constexpr double eps = 1e-15;
    while (true) {
        // Bellman-Ford shortest path S -> T in the residual graph
        std::vector<double> dist(V, inf);
        std::vector<std::pair<std::size_t, std::size_t>> parent(V, {V, V});
        dist[S] = 0.0;
        for (std::size_t it = 0; it + 1 < V; ++it) {
            bool changed = false;
            for (std::size_t u = 0; u < V; ++u) {
                if (dist[u] == inf) continue;
                for (std::size_t a = 0; a < adj[u].size(); ++a) {
                    const Arc& arc = adj[u][a];
                    if (arc.cap <= eps) continue;
                    if (dist[u] + arc.cost < dist[arc.to] - 1e-18) {
                        dist[arc.to] = dist[u] + arc.cost;
                        parent[arc.to] = {u, a};
                        changed = true;
                    }
                }
            }
            if (!changed) break;
        }
        if (dist[T] == inf) break;

        double push = inf;
        for (std::size_t v = T; v != S; v = parent[v].first)
            push = std::min(push, adj[parent[v].first][parent[v].second].cap);
        if (push <= eps) break;
        for (std::size_t v = T; v != S; v = parent[v].first) {
            Arc& arc = adj[parent[v].first][parent[v].second];
            arc.cap -= push;
            adj[arc.to][arc.rev].cap += push;
        }
        total_cost += push * dist[T];
    }
    return total_cost;
}

/// Random point on the probability simplex (normalized exponentials).
inline std::vector<double> random_simplex(std::size_t bins, pacfl::Rng& rng) {
    std::vector<double> v(bins);
    double sum = 0.0;
    for (double& x : v) {
        x = -std::log(rng.uniform_open01());
        sum += x;
    }
    for (double& x : v) x /= sum;
    return v;
}

/// Laplace CDF with scale sigma, location 0.
inline double laplace_cdf(double x, double sigma) {
    if (x < 0.0) return 0.5 * std::exp(x / sigma);
    return 1.0 - 0.5 * std::exp(-x / sigma);
}

/// Two-sided Kolmogorov-Smirnov statistic of samples against a CDF.
template <typename Cdf>
inline double ks_statistic(std::vector<double> samples, Cdf cdf) {
    std::sort(samples.begin(), samples.end());
    const double n = static_cast<double>(samples.size());
    double d = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const double f = cdf(samples[i]);
        d = std::max(d, std::fabs(f - double(i + 1) / n));
        d = std::max(d, std::fabs(f - double(i) / n));
    }
    return d;
}

}  // namespace test_support
