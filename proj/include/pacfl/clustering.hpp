#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "pacfl/boosting.hpp"

namespace pacfl {

/// Symmetric client-to-client distance matrix with zero diagonal.
struct DistanceMatrix {
    std::size_t n = 0;
    std::vector<double> d;  // row-major n*n

    DistanceMatrix() = default;
    explicit DistanceMatrix(std::size_t n_) : n(n_), d(n_ * n_, 0.0) {}

    double& at(std::size_t i, std::size_t j) { return d[i * n + j]; }
    double at(std::size_t i, std::size_t j) const { return d[i * n + j]; }

    void validate() const {
        for (std::size_t i = 0; i < n; ++i) {
            if (at(i, i) != 0.0) throw std::invalid_argument("distance: nonzero diagonal");
            for (std::size_t j = 0; j < n; ++j) {
                if (!std::isfinite(at(i, j)))
                    throw std::invalid_argument("distance: non-finite entry");
                if (at(i, j) != at(j, i))
                    throw std::invalid_argument("distance: asymmetric matrix");
            }
        }
    }
};

/// 1-D earth mover's distance between two histograms on the shared feature
/// axis (unit spacing): the summed absolute difference of their CDFs, which
/// equals the minimum-cost transport.
inline double emd(const ImportanceDistribution& p, const ImportanceDistribution& q) {
    if (p.values.size() != q.values.size())
        throw std::invalid_argument("emd: length mismatch");
    double cdf_gap = 0.0;
    double total = 0.0;
    for (std::size_t k = 0; k < p.values.size(); ++k) {
        cdf_gap += p.values[k] - q.values[k];
        total += std::fabs(cdf_gap);
    }
    return total;
}

inline DistanceMatrix pairwise_distances(const std::vector<ImportanceDistribution>& dists) {
    if (dists.size() < 2) throw std::invalid_argument("pairwise: need at least 2 clients");
    DistanceMatrix dm(dists.size());
    for (std::size_t i = 0; i < dists.size(); ++i)
        for (std::size_t j = i + 1; j < dists.size(); ++j) {
            const double v = emd(dists[i], dists[j]);
            dm.at(i, j) = v;
            dm.at(j, i) = v;
        }
    return dm;
}

/// Cosine distance (1 - cosine similarity); alternative metric behind the
/// same DistanceMatrix contract.
inline double cosine_distance(const ImportanceDistribution& p, const ImportanceDistribution& q) {
    if (p.values.size() != q.values.size())
        throw std::invalid_argument("cosine: length mismatch");
    double dot = 0.0, np = 0.0, nq = 0.0;
    for (std::size_t k = 0; k < p.values.size(); ++k) {
        dot += p.values[k] * q.values[k];
        np += p.values[k] * p.values[k];
        nq += q.values[k] * q.values[k];
    }
    if (np == 0.0 || nq == 0.0) return 1.0;
    return 1.0 - dot / std::sqrt(np * nq);
}

inline DistanceMatrix pairwise_cosine_distances(
    const std::vector<ImportanceDistribution>& dists) {
    if (dists.size() < 2) throw std::invalid_argument("pairwise: need at least 2 clients");
    DistanceMatrix dm(dists.size());
    for (std::size_t i = 0; i < dists.size(); ++i)
        for (std::size_t j = i + 1; j < dists.size(); ++j) {
            const double v = cosine_distance(dists[i], dists[j]);
            dm.at(i, j) = v;
            dm.at(j, i) = v;
        }
    return dm;
}

struct Merge {
    int cluster_a = 0;  // ids: leaves 0..n-1, merges n..2n-2
    int cluster_b = 0;
    double linkage = 0.0;
};

struct Dendrogram {
    std::vector<Merge> merges;  // always n-1 entries
    std::vector<std::size_t> leaf_order;
};

/// Average linkage between two member sets, recomputed from the original
/// point-pair distances.
inline double average_linkage(const DistanceMatrix& dm, const std::vector<std::size_t>& a,
                              const std::vector<std::size_t>& b) {
    double sum = 0.0;
    for (std::size_t x : a)
        for (std::size_t y : b) sum += dm.at(x, y);
    return sum / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

namespace detail {

struct ActiveCluster {
    int id = 0;
    std::size_t min_member = 0;
    std::vector<std::size_t> members;
};

// Full agglomeration schedule. `use_lance_williams` switches the linkage
// update between exact recomputation and the Lance-Williams recurrence;
// the two must produce identical schedules (checked in tests).
inline std::pair<Dendrogram, std::vector<std::vector<std::vector<std::size_t>>>>
merge_schedule(const DistanceMatrix& dm, bool use_lance_williams) {
    const std::size_t n = dm.n;
    std::vector<ActiveCluster> active(n);
    for (std::size_t i = 0; i < n; ++i) active[i] = {static_cast<int>(i), i, {i}};

    // current pairwise linkage, indexed by position in `active`
    std::vector<std::vector<double>> link(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) link[i][j] = dm.at(i, j);

    Dendrogram dendro;
    std::vector<std::vector<std::vector<std::size_t>>> partitions;  // by cluster count
    partitions.resize(n + 1);
    auto snapshot = [&]() {
        std::vector<std::vector<std::size_t>> parts;
        for (const auto& c : active) parts.push_back(c.members);
        partitions[active.size()] = std::move(parts);
    };
    snapshot();

    int next_id = static_cast<int>(n);
    while (active.size() > 1) {
        std::size_t bi = 0, bj = 1;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < active.size(); ++i) {
            for (std::size_t j = i + 1; j < active.size(); ++j) {
                const double v = link[i][j];
                const auto lo = std::min(active[i].min_member, active[j].min_member);
                const auto hi = std::max(active[i].min_member, active[j].min_member);
                const auto blo = std::min(active[bi].min_member, active[bj].min_member);
                const auto bhi = std::max(active[bi].min_member, active[bj].min_member);
                if (v < best || (v == best && (lo < blo || (lo == blo && hi < bhi)))) {
                    best = v;
                    bi = i;
                    bj = j;
                }
            }
        }

        dendro.merges.push_back({active[bi].id, active[bj].id, best});

        ActiveCluster merged;
        merged.id = next_id++;
        merged.min_member = std::min(active[bi].min_member, active[bj].min_member);
        merged.members = active[bi].members;
        merged.members.insert(merged.members.end(), active[bj].members.begin(),
                              active[bj].members.end());
        std::sort(merged.members.begin(), merged.members.end());

        const double size_i = static_cast<double>(active[bi].members.size());
        const double size_j = static_cast<double>(active[bj].members.size());

        std::vector<double> new_link;
        for (std::size_t k = 0; k < active.size(); ++k) {
            if (k == bi || k == bj) continue;
            double v;
            if (use_lance_williams) {
                v = (size_i * link[bi][k] + size_j * link[bj][k]) / (size_i + size_j);
            } else {
                v = average_linkage(dm, merged.members, active[k].members);
            }
            new_link.push_back(v);
        }

        // rebuild the active set with the merged cluster appended last
        std::vector<ActiveCluster> next_active;
        std::vector<std::size_t> keep;
        for (std::size_t k = 0; k < active.size(); ++k)
            if (k != bi && k != bj) {
                keep.push_back(k);
                next_active.push_back(std::move(active[k]));
            }
        next_active.push_back(std::move(merged));

        std::vector<std::vector<double>> next_matrix(
            next_active.size(), std::vector<double>(next_active.size(), 0.0));
        for (std::size_t a = 0; a < keep.size(); ++a)
            for (std::size_t b = 0; b < keep.size(); ++b)
                next_matrix[a][b] = link[keep[a]][keep[b]];
        for (std::size_t a = 0; a < keep.size(); ++a) {
            next_matrix[a][keep.size()] = new_link[a];
            next_matrix[keep.size()][a] = new_link[a];
        }

        active = std::move(next_active);
        link = std::move(next_matrix);
        snapshot();
    }

    // leaf order by walking the merge tree, smaller cluster id first
    {
        std::vector<std::vector<std::size_t>> leaves(2 * n - 1);
        for (std::size_t i = 0; i < n; ++i) leaves[i] = {i};
        for (std::size_t m = 0; m < dendro.merges.size(); ++m) {
            auto& out = leaves[n + m];
            const auto a = static_cast<std::size_t>(dendro.merges[m].cluster_a);
            const auto b = static_cast<std::size_t>(dendro.merges[m].cluster_b);
            const auto lo = std::min(a, b), hi = std::max(a, b);
            out = leaves[lo];
            out.insert(out.end(), leaves[hi].begin(), leaves[hi].end());
        }
        dendro.leaf_order = leaves.back();
    }
    return {dendro, partitions};
}

}  // namespace detail

struct AgglomerationResult {
    std::vector<std::vector<std::size_t>> clusters;  // ordered by smallest member
    Dendrogram dendrogram;
};

/// Merges the closest pair (average linkage, exact recomputation from the
/// original distances) until k clusters remain. Linkage ties break on the
/// smallest (min-member, min-member) pair.
inline AgglomerationResult agglomerate(const DistanceMatrix& dm, std::size_t k) {
    if (k < 1 || k > dm.n) throw std::invalid_argument("agglomerate: k out of range");
    auto [dendro, partitions] = detail::merge_schedule(dm, /*use_lance_williams=*/false);
    AgglomerationResult result;
    result.dendrogram = std::move(dendro);
    result.clusters = partitions[k];
    std::sort(result.clusters.begin(), result.clusters.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
    return result;
}

/// Same contract as agglomerate, using the Lance-Williams average-linkage
/// recurrence for the distance updates.
inline AgglomerationResult agglomerate_lance_williams(const DistanceMatrix& dm, std::size_t k) {
    if (k < 1 || k > dm.n) throw std::invalid_argument("agglomerate: k out of range");
    auto [dendro, partitions] = detail::merge_schedule(dm, /*use_lance_williams=*/true);
    AgglomerationResult result;
    result.dendrogram = std::move(dendro);
    result.clusters = partitions[k];
    std::sort(result.clusters.begin(), result.clusters.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
    return result;
}

enum class DbiVariant {
    AsWritten,  // S_i sums ordered member pairs, divided by |C_i| once
    Standard,   // S_i is the mean pairwise distance (self-pairs excluded)
};

/// Davies-Bouldin score of a partition. Returns +inf when two clusters sit
/// at zero between-distance.
inline double davies_bouldin(const DistanceMatrix& dm,
                             const std::vector<std::vector<std::size_t>>& clusters,
                             DbiVariant variant = DbiVariant::AsWritten) {
    const std::size_t k = clusters.size();
    if (k < 2) throw std::invalid_argument("dbi: need at least 2 clusters");
    for (const auto& c : clusters)
        if (c.empty()) throw std::invalid_argument("dbi: empty cluster");

    std::vector<double> scatter(k, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        const auto& c = clusters[i];
        double sum = 0.0;
        for (std::size_t x : c)
            for (std::size_t y : c) sum += dm.at(x, y);
        const auto size = static_cast<double>(c.size());
        if (variant == DbiVariant::AsWritten)
            scatter[i] = sum / size;
        else
            scatter[i] = c.size() > 1 ? sum / (size * (size - 1.0)) : 0.0;
    }

    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        double worst = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            if (j == i) continue;
            const double between = average_linkage(dm, clusters[i], clusters[j]);
            if (between == 0.0) return std::numeric_limits<double>::infinity();
            worst = std::max(worst, (scatter[i] + scatter[j]) / between);
        }
        total += worst;
    }
    return total / static_cast<double>(k);
}

/// Client grouping: chosen cluster count, per-client bubble labels,
/// singleton flags, and the DBI value at every scanned k.
struct BubbleAssignment {
    std::size_t k_star = 0;
    std::vector<std::size_t> labels;  // client index -> bubble id
    std::vector<bool> singleton_flags;
    std::map<std::size_t, double> dbi_by_k;
    std::vector<std::string> client_ids;  // optional, filled by the pipeline
};

namespace detail {

inline void fill_labels(BubbleAssignment& out,
                        const std::vector<std::vector<std::size_t>>& clusters,
                        std::size_t n) {
    out.labels.assign(n, 0);
    out.singleton_flags.assign(n, false);
    for (std::size_t b = 0; b < clusters.size(); ++b)
        for (std::size_t member : clusters[b]) {
            out.labels[member] = b;
            out.singleton_flags[member] = clusters[b].size() == 1;
        }
}

}  // namespace detail

struct KRange {
    std::size_t lo = 2;
    std::size_t hi = 0;  // inclusive
};

/// Scans cluster counts, scores each partition with the Davies-Bouldin
/// index, and keeps the minimizer (ties break toward smaller k).
inline BubbleAssignment select_k(const DistanceMatrix& dm, KRange range,
                                 DbiVariant variant = DbiVariant::AsWritten) {
    if (dm.n < 3) throw std::invalid_argument("select_k: need at least 3 clients");
    if (range.lo < 2 || range.hi > dm.n - 1 || range.lo > range.hi)
        throw std::invalid_argument("select_k: k range must lie within [2, n-1]");

    auto [dendro, partitions] = detail::merge_schedule(dm, false);
    (void)dendro;

    BubbleAssignment out;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = range.lo; k <= range.hi; ++k) {
        const double score = davies_bouldin(dm, partitions[k], variant);
        out.dbi_by_k[k] = score;
        if (score < best) {
            best = score;
            out.k_star = k;
        }
    }

    auto clusters = partitions[out.k_star];
    std::sort(clusters.begin(), clusters.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
    detail::fill_labels(out, clusters, dm.n);
    return out;
}

/// Assignment at a caller-forced cluster count; the DBI trace still covers
/// the given scan range for reporting.
inline BubbleAssignment assign_with_k(const DistanceMatrix& dm, std::size_t forced_k,
                                      KRange trace_range,
                                      DbiVariant variant = DbiVariant::AsWritten) {
    if (forced_k < 1 || forced_k > dm.n)
        throw std::invalid_argument("assign_with_k: k out of range");
    auto [dendro, partitions] = detail::merge_schedule(dm, false);
    (void)dendro;

    BubbleAssignment out;
    out.k_star = forced_k;
    if (dm.n >= 3) {
        const std::size_t lo = std::max<std::size_t>(2, trace_range.lo);
        const std::size_t hi = std::min(dm.n - 1, trace_range.hi);
        for (std::size_t k = lo; k <= hi; ++k)
            out.dbi_by_k[k] = davies_bouldin(dm, partitions[k], variant);
    }
    auto clusters = partitions[forced_k];
    std::sort(clusters.begin(), clusters.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
    detail::fill_labels(out, clusters, dm.n);
    return out;
}

}  // namespace pacfl
