#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pacfl/matrix.hpp"
#include "pacfl/rng.hpp"
#include "pacfl/stats.hpp"

namespace pacfl {

struct GbtConfig {
    std::size_t n_trees = 50;
    std::size_t max_depth = 3;
    double shrinkage = 0.1;
    std::size_t min_samples_leaf = 5;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_trees < 1) throw std::invalid_argument("gbt: n_trees must be >= 1");
        if (max_depth < 1) throw std::invalid_argument("gbt: max_depth must be >= 1");
        if (!(shrinkage > 0.0 && shrinkage <= 1.0))
            throw std::invalid_argument("gbt: shrinkage must be in (0, 1]");
        if (min_samples_leaf < 1) throw std::invalid_argument("gbt: min_samples_leaf >= 1");
    }
};

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;  // leaf prediction (residual mean)
    double gain = 0.0;   // squared-error reduction of this split
};

struct RegressionTree {
    std::vector<TreeNode> nodes;

    bool is_stump() const { return nodes.size() == 1; }

    double predict(std::span<const double> x) const {
        int idx = 0;
        while (nodes[idx].feature >= 0) {
            const auto& n = nodes[idx];
            idx = x[static_cast<std::size_t>(n.feature)] < n.threshold ? n.left : n.right;
        }
        return nodes[idx].value;
    }
};

/// Additive squared-error ensemble: prediction = base_score +
/// shrinkage * sum of tree outputs.
struct GbtModel {
    double base_score = 0.0;
    double shrinkage = 0.1;
    std::size_t n_features = 0;
    std::vector<RegressionTree> trees;
    bool constant_fit = false;  // no split ever had positive gain

    double predict(std::span<const double> x) const {
        double acc = 0.0;
        for (const auto& t : trees) acc += t.predict(x);
        return base_score + shrinkage * acc;
    }

    std::vector<double> predict(const Matrix& X) const {
        std::vector<double> out(X.rows());
        for (std::size_t i = 0; i < X.rows(); ++i) out[i] = predict(X.row(i));
        return out;
    }
};

namespace detail {

struct SplitCandidate {
    double gain = 0.0;
    std::size_t feature = 0;
    double threshold = 0.0;
    bool found = false;
};

// Sum of squared deviations from sums; clamped at zero against rounding.
inline double sse_from_sums(double sum, double sumsq, double n) {
    return std::max(0.0, sumsq - sum * sum / n);
}

class TreeBuilder {
public:
    TreeBuilder(const Matrix& X, std::span<const double> residual, const GbtConfig& cfg)
        : X_(X), r_(residual), cfg_(cfg) {}

    RegressionTree build(const std::vector<std::size_t>& root_rows) {
        RegressionTree tree;
        grow(tree, root_rows, 0);
        return tree;
    }

private:
    int grow(RegressionTree& tree, const std::vector<std::size_t>& rows, std::size_t depth) {
        const int index = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();

        std::vector<double> member_r(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) member_r[i] = r_[rows[i]];
        const double sum = stable_sum(member_r);
        const double n = static_cast<double>(rows.size());
        tree.nodes[index].value = sum / n;

        if (depth >= cfg_.max_depth || rows.size() < 2 * cfg_.min_samples_leaf) return index;

        std::vector<double> sq(member_r.size());
        for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = member_r[i] * member_r[i];
        const double sumsq = stable_sum(std::move(sq));
        const double parent_sse = sse_from_sums(sum, sumsq, n);

        const SplitCandidate best = find_split(rows, sum, sumsq, parent_sse);
        if (!best.found) return index;

        std::vector<std::size_t> left_rows, right_rows;
        for (std::size_t row : rows) {
            if (X_(row, best.feature) < best.threshold)
                left_rows.push_back(row);
            else
                right_rows.push_back(row);
        }

        tree.nodes[index].feature = static_cast<int>(best.feature);
        tree.nodes[index].threshold = best.threshold;
        tree.nodes[index].gain = best.gain;
        const int left = grow(tree, left_rows, depth + 1);
        const int right = grow(tree, right_rows, depth + 1);
        tree.nodes[index].left = left;
        tree.nodes[index].right = right;
        return index;
    }

    SplitCandidate find_split(const std::vector<std::size_t>& rows, double total_sum,
                              double total_sumsq, double parent_sse) const {
        SplitCandidate best;
        const std::size_t n = rows.size();
        const double min_gain = 1e-12 * (1.0 + parent_sse);
        std::vector<std::pair<double, double>> pairs(n);  // (feature value, residual)

        for (std::size_t j = 0; j < X_.cols(); ++j) {
            for (std::size_t i = 0; i < n; ++i)
                pairs[i] = {X_(rows[i], j), r_[rows[i]]};
            // Canonical (value, residual) order keeps every prefix sum a pure
            // function of the sample multiset, independent of row order.
            std::sort(pairs.begin(), pairs.end());

            double lsum = 0.0, lsumsq = 0.0;
            for (std::size_t p = 0; p + 1 < n; ++p) {
                lsum += pairs[p].second;
                lsumsq += pairs[p].second * pairs[p].second;
                if (!(pairs[p].first < pairs[p + 1].first)) continue;
                const std::size_t nl = p + 1;
                const std::size_t nr = n - nl;
                if (nl < cfg_.min_samples_leaf || nr < cfg_.min_samples_leaf) continue;
                const double rsum = total_sum - lsum;
                const double rsumsq = total_sumsq - lsumsq;
                const double gain = parent_sse -
                                    sse_from_sums(lsum, lsumsq, double(nl)) -
                                    sse_from_sums(rsum, rsumsq, double(nr));
                if (gain > min_gain && gain > best.gain) {
                    double mid = 0.5 * (pairs[p].first + pairs[p + 1].first);
                    if (!(mid > pairs[p].first)) mid = pairs[p + 1].first;
                    best = {gain, j, mid, true};
                }
            }
        }
        return best;
    }

    const Matrix& X_;
    std::span<const double> r_;
    const GbtConfig& cfg_;
};

}  // namespace detail

/// Fits the boosted ensemble by exact greedy splits on squared error. Stops
/// early once a stage finds no split with positive gain (constant residual
/// structure); a constant target therefore yields zero trees.
inline GbtModel train_gbt(const Matrix& X, std::span<const double> y, const GbtConfig& cfg) {
    cfg.validate();
    if (X.rows() != y.size()) throw std::invalid_argument("gbt: X/y row mismatch");
    if (X.rows() < 2 * cfg.min_samples_leaf)
        throw std::invalid_argument("gbt: need at least 2*min_samples_leaf samples");
    if (!X.all_finite()) throw std::invalid_argument("gbt: non-finite features");

    GbtModel model;
    model.shrinkage = cfg.shrinkage;
    model.n_features = X.cols();
    model.base_score = stable_mean(y);

    std::vector<double> pred(y.size(), model.base_score);
    std::vector<double> residual(y.size());
    std::vector<std::size_t> all_rows(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) all_rows[i] = i;

    for (std::size_t m = 0; m < cfg.n_trees; ++m) {
        for (std::size_t i = 0; i < y.size(); ++i) residual[i] = y[i] - pred[i];
        detail::TreeBuilder builder(X, residual, cfg);
        RegressionTree tree = builder.build(all_rows);
        if (tree.is_stump()) break;
        for (std::size_t i = 0; i < y.size(); ++i)
            pred[i] += cfg.shrinkage * tree.predict(X.row(i));
        model.trees.push_back(std::move(tree));
    }
    model.constant_fit = model.trees.empty();
    return model;
}

/// Gain-based importance: each feature accumulates the squared-error
/// reduction of every split made on it, across all trees.
inline std::vector<double> feature_importance(const GbtModel& model) {
    std::vector<double> imp(model.n_features, 0.0);
    for (const auto& tree : model.trees)
        for (const auto& node : tree.nodes)
            if (node.feature >= 0) imp[static_cast<std::size_t>(node.feature)] += node.gain;
    return imp;
}

/// Normalized per-feature importance; the clustering signature of a client.
struct ImportanceDistribution {
    std::string client_id;
    std::vector<double> values;  // non-negative, sums to 1
    bool noisy = false;
    bool uniform_fallback = false;  // all-zero input replaced by uniform
};

/// Projects a raw importance vector onto the simplex: negatives clip to
/// zero, then the vector is divided by its sum. An all-zero vector becomes
/// the uniform distribution, flagged.
inline ImportanceDistribution normalize(std::vector<double> raw, std::string client_id = {},
                                        bool noisy = false) {
    ImportanceDistribution dist;
    dist.client_id = std::move(client_id);
    dist.noisy = noisy;
    for (double& v : raw) v = std::max(v, 0.0);
    const double sum = stable_sum(std::vector<double>(raw.begin(), raw.end()));
    if (sum <= 0.0) {
        dist.values.assign(raw.size(), raw.empty() ? 0.0 : 1.0 / double(raw.size()));
        dist.uniform_fallback = true;
        return dist;
    }
    dist.values.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) dist.values[i] = raw[i] / sum;
    return dist;
}

struct Sensitivity {
    std::string client_id;
    double delta = 0.0;
};

/// Leave-one-out sensitivity of the normalized importance: the maximum
/// absolute per-feature change caused by deleting any single record. Exact
/// when n <= subsample_limit, otherwise estimated on a seeded row subsample.
inline Sensitivity local_sensitivity(const Matrix& X, std::span<const double> y,
                                     const GbtConfig& cfg, std::size_t subsample_limit = 2000,
                                     std::string client_id = {}) {
    const std::size_t n = X.rows();
    if (n < 2) throw std::invalid_argument("sensitivity: need at least 2 samples");
    if (n - 1 < 2 * cfg.min_samples_leaf)
        throw std::invalid_argument("sensitivity: too few samples to retrain after removal");

    const ImportanceDistribution base =
        normalize(feature_importance(train_gbt(X, y, cfg)));

    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = i;
    if (n > subsample_limit) {
        Rng rng(derive_seed(cfg.seed, "sensitivity"));
        rng.shuffle(rows);
        rows.resize(subsample_limit);
        std::sort(rows.begin(), rows.end());
    }

    Sensitivity s;
    s.client_id = std::move(client_id);
    Matrix Xm(n - 1, X.cols());
    std::vector<double> ym(n - 1);
    for (std::size_t drop : rows) {
        std::size_t k = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (i == drop) continue;
            for (std::size_t j = 0; j < X.cols(); ++j) Xm(k, j) = X(i, j);
            ym[k] = y[i];
            ++k;
        }
        const ImportanceDistribution loo =
            normalize(feature_importance(train_gbt(Xm, ym, cfg)));
        for (std::size_t j = 0; j < base.values.size(); ++j)
            s.delta = std::max(s.delta, std::fabs(base.values[j] - loo.values[j]));
    }
    return s;
}

}  // namespace pacfl
