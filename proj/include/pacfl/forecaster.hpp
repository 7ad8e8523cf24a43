#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pacfl/matrix.hpp"
#include "pacfl/rng.hpp"
#include "pacfl/stats.hpp"

namespace pacfl {

struct ForecasterConfig {
    std::size_t n_layers = 3;
    std::size_t n_heads = 8;
    std::size_t model_dim = 64;
    double dropout_rate = 0.5;
    std::size_t sequence_length = 1;
    double learning_rate = 1e-3;
    std::size_t batch_size = 64;
    std::size_t epochs = 50;
    std::uint64_t seed = 0;

    std::size_t head_dim() const { return model_dim / n_heads; }
    std::size_t ffn_dim() const { return 2 * model_dim; }

    void validate() const {
        if (n_layers < 1 || n_heads < 1 || model_dim < 1)
            throw std::invalid_argument("forecaster: sizes must be positive");
        if (model_dim % n_heads != 0)
            throw std::invalid_argument("forecaster: model_dim must be divisible by n_heads");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
            throw std::invalid_argument("forecaster: dropout_rate must be in [0, 1)");
        if (sequence_length < 1)
            throw std::invalid_argument("forecaster: sequence_length must be >= 1");
        if (!(learning_rate >= 0.0))
            throw std::invalid_argument("forecaster: learning_rate must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("forecaster: batch_size must be >= 1");
    }
};

enum class TensorKind { Weight, Bias, Gain };

struct TensorSpec {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t offset = 0;
    TensorKind kind = TensorKind::Weight;

    std::size_t size() const { return rows * cols; }
    bool operator==(const TensorSpec&) const = default;
};

/// Canonical parameter order of the model; two configs with equal layouts
/// produce aggregation-compatible weight vectors.
struct WeightLayout {
    std::vector<TensorSpec> tensors;
    std::size_t total = 0;

    bool operator==(const WeightLayout&) const = default;

    const TensorSpec& find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw std::out_of_range("layout: no tensor named " + name);
    }

    static WeightLayout create(std::size_t input_dim, const ForecasterConfig& cfg) {
        cfg.validate();
        WeightLayout layout;
        auto push = [&](std::string name, std::size_t r, std::size_t c, TensorKind k) {
            layout.tensors.push_back({std::move(name), r, c, layout.total, k});
            layout.total += r * c;
        };
        const std::size_t d = cfg.model_dim;
        const std::size_t f = cfg.ffn_dim();
        push("embed.W", input_dim, d, TensorKind::Weight);
        push("embed.b", 1, d, TensorKind::Bias);
        if (cfg.sequence_length > 1) {
            push("sale_embed.W", 1, d, TensorKind::Weight);
            push("sale_embed.b", 1, d, TensorKind::Bias);
        }
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            push(p + "attn.Wq", d, d, TensorKind::Weight);
            push(p + "attn.bq", 1, d, TensorKind::Bias);
            push(p + "attn.Wk", d, d, TensorKind::Weight);
            push(p + "attn.bk", 1, d, TensorKind::Bias);
            push(p + "attn.Wv", d, d, TensorKind::Weight);
            push(p + "attn.bv", 1, d, TensorKind::Bias);
            push(p + "attn.Wo", d, d, TensorKind::Weight);
            push(p + "attn.bo", 1, d, TensorKind::Bias);
            push(p + "ln1.gamma", 1, d, TensorKind::Gain);
            push(p + "ln1.beta", 1, d, TensorKind::Bias);
            push(p + "ffn.W1", d, f, TensorKind::Weight);
            push(p + "ffn.b1", 1, f, TensorKind::Bias);
            push(p + "ffn.W2", f, d, TensorKind::Weight);
            push(p + "ffn.b2", 1, d, TensorKind::Bias);
            push(p + "ln2.gamma", 1, d, TensorKind::Gain);
            push(p + "ln2.beta", 1, d, TensorKind::Bias);
        }
        push("head.W", d, 1, TensorKind::Weight);
        push("head.b", 1, 1, TensorKind::Bias);
        return layout;
    }
};

/// Flat, ordered parameter vector; the unit FedAvg aggregates.
struct ModelWeights {
    WeightLayout layout;
    std::vector<double> values;

    std::span<double> tensor(const TensorSpec& spec) {
        return {values.data() + spec.offset, spec.size()};
    }
    std::span<const double> tensor(const TensorSpec& spec) const {
        return {values.data() + spec.offset, spec.size()};
    }

    bool all_finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

/// Named view of a flat vector, and its inverse. Round-trips exactly.
inline std::vector<std::pair<std::string, Matrix>> unflatten(const ModelWeights& w) {
    std::vector<std::pair<std::string, Matrix>> out;
    for (const auto& spec : w.layout.tensors) {
        Matrix m(spec.rows, spec.cols);
        const auto src = w.tensor(spec);
        std::copy(src.begin(), src.end(), m.data().begin());
        out.emplace_back(spec.name, std::move(m));
    }
    return out;
}

inline ModelWeights flatten(const WeightLayout& layout,
                            const std::vector<std::pair<std::string, Matrix>>& tensors) {
    ModelWeights w;
    w.layout = layout;
    w.values.assign(layout.total, 0.0);
    if (tensors.size() != layout.tensors.size())
        throw std::invalid_argument("flatten: tensor count mismatch");
    for (const auto& [name, m] : tensors) {
        const auto& spec = layout.find(name);
        if (m.rows() != spec.rows || m.cols() != spec.cols)
            throw std::invalid_argument("flatten: shape mismatch for " + name);
        std::copy(m.data().begin(), m.data().end(), w.values.begin() + spec.offset);
    }
    return w;
}

/// Attention weights recorded for one forward pass: alpha[layer][head] is a
/// T x T row-stochastic matrix for the batch's first sample.
struct AttentionTrace {
    std::vector<std::vector<Matrix>> alpha;
};

/// One batch of model inputs. Each sample is a token sequence: the last
/// token carries the sample's feature vector; with sequence_length > 1 the
/// preceding tokens each carry one past target value (oldest first).
struct SequenceBatch {
    Matrix features;    // [B, input_dim]
    Matrix past_sales;  // [B, T-1]; zero columns when T == 1
    std::vector<double> targets;

    std::size_t size() const { return features.rows(); }

    SequenceBatch subset(const std::vector<std::size_t>& idx) const {
        SequenceBatch out;
        out.features = features.select_rows(idx);
        out.past_sales = past_sales.cols() > 0 ? past_sales.select_rows(idx)
                                               : Matrix(idx.size(), 0);
        for (auto i : idx) out.targets.push_back(targets[i]);
        return out;
    }
};

/// Builds sequences from chronologically ordered rows; history that reaches
/// before the first row pads with zero (the standardized mean).
inline SequenceBatch make_sequences(const Matrix& X, std::span<const double> y,
                                    std::size_t sequence_length) {
    SequenceBatch batch;
    batch.features = X;
    batch.targets.assign(y.begin(), y.end());
    const std::size_t lookback = sequence_length - 1;
    batch.past_sales = Matrix(X.rows(), lookback);
    for (std::size_t i = 0; i < X.rows(); ++i)
        for (std::size_t t = 0; t < lookback; ++t) {
            const long long src = static_cast<long long>(i) - static_cast<long long>(lookback - t);
            batch.past_sales(i, t) = src >= 0 ? y[static_cast<std::size_t>(src)] : 0.0;
        }
    return batch;
}

/// Row-softmax of Q K^T / sqrt(d_k), times V. The free-standing form of the
/// scaled dot-product step; optionally reports the attention matrix.
inline Matrix attention(const Matrix& Q, const Matrix& K, const Matrix& V,
                        Matrix* alpha_out = nullptr) {
    if (Q.cols() != K.cols() || K.rows() != V.rows())
        throw std::invalid_argument("attention: shape mismatch");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(Q.cols()));
    Matrix scores = matmul_transB(Q, K);
    for (double& s : scores.data()) s *= inv_sqrt_d;
    // row softmax, max-shifted
    for (std::size_t i = 0; i < scores.rows(); ++i) {
        auto row = scores.row(i);
        double mx = row[0];
        for (double v : row) mx = std::max(mx, v);
        double sum = 0.0;
        for (double& v : row) {
            v = std::exp(v - mx);
            sum += v;
        }
        for (double& v : row) v /= sum;
    }
    if (alpha_out) *alpha_out = scores;
    return matmul(scores, V);
}

/// Raised when training reaches a non-finite loss; carries the last weights
/// that were still finite.
class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(ModelWeights w, std::size_t epoch)
        : std::runtime_error("training diverged: non-finite loss at epoch " +
                             std::to_string(epoch)),
          last_finite_weights(std::move(w)) {}
    ModelWeights last_finite_weights;
};

struct TrainResult {
    ModelWeights weights;
    std::vector<double> epoch_loss;
};

namespace detail {

struct LayerCache {
    Matrix input;                // [B*T, d]
    Matrix Q, K, V;              // [B*T, d]
    std::vector<Matrix> alpha;   // per (sample * head), T x T
    Matrix Zcat;                 // [B*T, d]
    Matrix attn_mask;            // dropout multipliers, empty in eval
    Matrix R1, xhat1;            // residual sum, normalized
    std::vector<double> invstd1;
    Matrix A1;
    Matrix Fpre, Fact;           // ffn hidden
    Matrix G;
    Matrix ffn_mask;
    Matrix R2, xhat2;
    std::vector<double> invstd2;
    Matrix A2;
};

struct ForwardCache {
    Matrix embedded;  // [B*T, d]
    std::vector<LayerCache> layers;
    std::vector<double> preds;
};

constexpr double kLayerNormEps = 1e-5;

inline void layer_norm_forward(const Matrix& in, std::span<const double> gamma,
                               std::span<const double> beta, Matrix& xhat, Matrix& out,
                               std::vector<double>& invstd) {
    const std::size_t d = in.cols();
    xhat = Matrix(in.rows(), d);
    out = Matrix(in.rows(), d);
    invstd.resize(in.rows());
    for (std::size_t i = 0; i < in.rows(); ++i) {
        const auto row = in.row(i);
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + kLayerNormEps);
        invstd[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            xhat(i, j) = (in(i, j) - mean) * is;
            out(i, j) = gamma[j] * xhat(i, j) + beta[j];
        }
    }
}

inline void layer_norm_backward(const Matrix& dout, const Matrix& xhat,
                                std::span<const double> gamma,
                                std::span<const double> invstd, Matrix& din,
                                std::span<double> dgamma, std::span<double> dbeta) {
    const std::size_t d = dout.cols();
    din = Matrix(dout.rows(), d);
    for (std::size_t i = 0; i < dout.rows(); ++i) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double dxh = dout(i, j) * gamma[j];
            dgamma[j] += dout(i, j) * xhat(i, j);
            dbeta[j] += dout(i, j);
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat(i, j);
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            const double dxh = dout(i, j) * gamma[j];
            din(i, j) = invstd[i] * (dxh - mean_dxhat - xhat(i, j) * mean_dxhat_xhat);
        }
    }
}

inline void add_bias_rows(Matrix& m, std::span<const double> bias) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto row = m.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
    }
}

inline Matrix dropout_mask(std::size_t rows, std::size_t cols, double rate, Rng& rng) {
    Matrix mask(rows, cols);
    const double keep_scale = 1.0 / (1.0 - rate);
    for (double& v : mask.data()) v = rng.uniform01() < rate ? 0.0 : keep_scale;
    return mask;
}

inline void apply_mask(Matrix& m, const Matrix& mask) {
    for (std::size_t i = 0; i < m.data().size(); ++i) m.data()[i] *= mask.data()[i];
}

}  // namespace detail

/// The per-client sales regressor: a small transformer encoder with a
/// linear head, operated on flat weight vectors so bubbles can average them.
class Forecaster {
public:
    Forecaster(std::size_t input_dim, ForecasterConfig cfg)
        : input_dim_(input_dim), cfg_(cfg), layout_(WeightLayout::create(input_dim, cfg)) {
        cfg_.validate();
        if (input_dim_ < 1) throw std::invalid_argument("forecaster: input_dim must be >= 1");
    }

    const WeightLayout& layout() const { return layout_; }
    const ForecasterConfig& config() const { return cfg_; }
    std::size_t input_dim() const { return input_dim_; }

    /// Deterministic init: uniform +-1/sqrt(fan_in) for weights, zeros for
    /// biases, ones for layer-norm gains. All clients sharing a seed start
    /// from identical parameters.
    ModelWeights init_weights() const {
        ModelWeights w;
        w.layout = layout_;
        w.values.assign(layout_.total, 0.0);
        Rng rng(derive_seed(cfg_.seed, "init"));
        for (const auto& spec : layout_.tensors) {
            auto t = w.tensor(spec);
            switch (spec.kind) {
                case TensorKind::Weight: {
                    const double bound = 1.0 / std::sqrt(static_cast<double>(spec.rows));
                    for (double& v : t) v = rng.uniform(-bound, bound);
                    break;
                }
                case TensorKind::Bias:
                    break;  // already zero
                case TensorKind::Gain:
                    for (double& v : t) v = 1.0;
                    break;
            }
        }
        return w;
    }

    /// Eval-mode predictions (no dropout). Optionally records the attention
    /// weights of the batch's first sample.
    std::vector<double> predict(const ModelWeights& w, const SequenceBatch& batch,
                                AttentionTrace* trace = nullptr) const {
        detail::ForwardCache cache;
        return forward(w, batch, /*train=*/false, nullptr, trace, cache);
    }

    double mse(const ModelWeights& w, const SequenceBatch& batch) const {
        const auto preds = predict(w, batch);
        double s = 0.0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            const double e = preds[i] - batch.targets[i];
            s += e * e;
        }
        return s / static_cast<double>(preds.size());
    }

    /// Exact gradient of the batch MSE with respect to the flat weight
    /// vector, dropout disabled.
    std::vector<double> gradient(const ModelWeights& w, const SequenceBatch& batch,
                                 double* loss_out = nullptr) const {
        detail::ForwardCache cache;
        forward(w, batch, /*train=*/false, nullptr, nullptr, cache);
        return backward(w, batch, cache, loss_out);
    }

    /// Mini-batch adaptive-moment descent on MSE with seeded shuffling and
    /// dropout. Throws TrainingDiverged (carrying the last finite weights)
    /// if the loss leaves the finite range.
    TrainResult train_epochs(ModelWeights weights, const SequenceBatch& train,
                             std::size_t epochs, std::uint64_t seed) const {
        check_layout(weights);
        if (train.size() == 0) throw std::invalid_argument("train: empty batch");
        Rng rng(seed);
        AdamState adam(layout_.total);
        TrainResult result;
        ModelWeights last_finite = weights;

        std::vector<std::size_t> order(train.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

        for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
            rng.shuffle(order);
            double loss_sum = 0.0;
            for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
                const std::size_t stop = std::min(order.size(), start + cfg_.batch_size);
                const std::vector<std::size_t> idx(order.begin() + start,
                                                   order.begin() + stop);
                const SequenceBatch mini = train.subset(idx);

                if (weights.all_finite()) last_finite = weights;
                detail::ForwardCache cache;
                double batch_loss = 0.0;
                std::vector<double> grad;
                try {
                    forward(weights, mini, /*train=*/true, &rng, nullptr, cache);
                    grad = backward(weights, mini, cache, &batch_loss);
                } catch (const std::runtime_error&) {
                    throw TrainingDiverged(std::move(last_finite), epoch);
                }
                if (!std::isfinite(batch_loss))
                    throw TrainingDiverged(std::move(last_finite), epoch);
                loss_sum += batch_loss * static_cast<double>(idx.size());
                adam.step(weights.values, grad, cfg_.learning_rate);
            }
            result.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
        }
        result.weights = std::move(weights);
        return result;
    }

private:
    struct AdamState {
        explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
        std::vector<double> m, v;
        std::size_t t = 0;

        void step(std::vector<double>& w, const std::vector<double>& g, double lr) {
            constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
            ++t;
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
            }
        }
    };

    void check_layout(const ModelWeights& w) const {
        if (!(w.layout == layout_) || w.values.size() != layout_.total)
            throw std::invalid_argument("forecaster: weight layout mismatch");
    }

    void check_finite(const Matrix& m, std::size_t layer, const char* what) const {
        if (!m.all_finite())
            throw std::runtime_error("forward: non-finite activation in layer " +
                                     std::to_string(layer) + " (" + what + ")");
    }

    // token row index of sample s, position t
    std::size_t tok(std::size_t s, std::size_t t) const {
        return s * cfg_.sequence_length + t;
    }

    std::vector<double> forward(const ModelWeights& w, const SequenceBatch& batch,
                                bool train, Rng* rng, AttentionTrace* trace,
                                detail::ForwardCache& cache) const {
        check_layout(w);
        if (batch.features.cols() != input_dim_)
            throw std::invalid_argument("forward: feature width mismatch");
        const std::size_t T = cfg_.sequence_length;
        if (batch.past_sales.cols() != T - 1)
            throw std::invalid_argument("forward: past-sales width mismatch");
        const std::size_t B = batch.size();
        const std::size_t d = cfg_.model_dim;
        const std::size_t H = cfg_.n_heads;
        const std::size_t hd = cfg_.head_dim();
        const bool use_dropout = train && cfg_.dropout_rate > 0.0;
        if (use_dropout && rng == nullptr)
            throw std::invalid_argument("forward: dropout requires an rng");

        // embedding
        Matrix A(B * T, d);
        {
            const auto& eW = layout_.find("embed.W");
            const auto& eb = layout_.find("embed.b");
            const auto Wx = w.tensor(eW);
            const auto bx = w.tensor(eb);
            for (std::size_t s = 0; s < B; ++s) {
                auto out = A.row(tok(s, T - 1));
                for (std::size_t j = 0; j < d; ++j) out[j] = bx[j];
                for (std::size_t i = 0; i < input_dim_; ++i) {
                    const double x = batch.features(s, i);
                    if (x == 0.0) continue;
                    const double* wrow = Wx.data() + i * d;
                    for (std::size_t j = 0; j < d; ++j) out[j] += x * wrow[j];
                }
            }
            if (T > 1) {
                const auto Ws = w.tensor(layout_.find("sale_embed.W"));
                const auto bs = w.tensor(layout_.find("sale_embed.b"));
                for (std::size_t s = 0; s < B; ++s)
                    for (std::size_t t = 0; t + 1 < T; ++t) {
                        auto out = A.row(tok(s, t));
                        const double x = batch.past_sales(s, t);
                        for (std::size_t j = 0; j < d; ++j) out[j] = bs[j] + x * Ws[j];
                    }
                // sinusoidal positions, only meaningful with real sequences
                for (std::size_t s = 0; s < B; ++s)
                    for (std::size_t t = 0; t < T; ++t) {
                        auto row = A.row(tok(s, t));
                        for (std::size_t j = 0; j < d; ++j) {
                            const double freq =
                                std::pow(10000.0, -2.0 * double(j / 2) / double(d));
                            row[j] += (j % 2 == 0) ? std::sin(double(t) * freq)
                                                   : std::cos(double(t) * freq);
                        }
                    }
            }
        }
        check_finite(A, 0, "embedding");
        cache.embedded = A;

        cache.layers.clear();
        cache.layers.resize(cfg_.n_layers);
        if (trace) {
            trace->alpha.assign(cfg_.n_layers, {});
        }

        const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            auto& lc = cache.layers[l];
            lc.input = A;
            const std::string p = "layers." + std::to_string(l) + ".";

            auto mat = [&](const std::string& name) {
                const auto& spec = layout_.find(p + name);
                Matrix m(spec.rows, spec.cols);
                const auto src = w.tensor(spec);
                std::copy(src.begin(), src.end(), m.data().begin());
                return m;
            };
            auto vec = [&](const std::string& name) { return w.tensor(layout_.find(p + name)); };

            lc.Q = matmul(A, mat("attn.Wq"));
            detail::add_bias_rows(lc.Q, vec("attn.bq"));
            lc.K = matmul(A, mat("attn.Wk"));
            detail::add_bias_rows(lc.K, vec("attn.bk"));
            lc.V = matmul(A, mat("attn.Wv"));
            detail::add_bias_rows(lc.V, vec("attn.bv"));

            lc.Zcat = Matrix(B * T, d);
            lc.alpha.assign(B * H, Matrix(T, T));
            for (std::size_t s = 0; s < B; ++s) {
                for (std::size_t h = 0; h < H; ++h) {
                    Matrix& alpha = lc.alpha[s * H + h];
                    // scores over this sample's tokens, one head slice
                    for (std::size_t ti = 0; ti < T; ++ti) {
                        double mx = -std::numeric_limits<double>::infinity();
                        for (std::size_t tj = 0; tj < T; ++tj) {
                            double sc = 0.0;
                            for (std::size_t u = 0; u < hd; ++u)
                                sc += lc.Q(tok(s, ti), h * hd + u) *
                                      lc.K(tok(s, tj), h * hd + u);
                            sc *= inv_sqrt_hd;
                            alpha(ti, tj) = sc;
                            mx = std::max(mx, sc);
                        }
                        double sum = 0.0;
                        for (std::size_t tj = 0; tj < T; ++tj) {
                            alpha(ti, tj) = std::exp(alpha(ti, tj) - mx);
                            sum += alpha(ti, tj);
                        }
                        for (std::size_t tj = 0; tj < T; ++tj) alpha(ti, tj) /= sum;
                        for (std::size_t u = 0; u < hd; ++u) {
                            double z = 0.0;
                            for (std::size_t tj = 0; tj < T; ++tj)
                                z += alpha(ti, tj) * lc.V(tok(s, tj), h * hd + u);
                            lc.Zcat(tok(s, ti), h * hd + u) = z;
                        }
                    }
                }
            }
            if (trace) {
                trace->alpha[l].assign(lc.alpha.begin(), lc.alpha.begin() + H);
            }

            Matrix O = matmul(lc.Zcat, mat("attn.Wo"));
            detail::add_bias_rows(O, vec("attn.bo"));
            if (use_dropout) {
                lc.attn_mask = detail::dropout_mask(B * T, d, cfg_.dropout_rate, *rng);
                detail::apply_mask(O, lc.attn_mask);
            }

            lc.R1 = lc.input;
            for (std::size_t i = 0; i < lc.R1.data().size(); ++i)
                lc.R1.data()[i] += O.data()[i];
            detail::layer_norm_forward(lc.R1, vec("ln1.gamma"), vec("ln1.beta"), lc.xhat1,
                                       lc.A1, lc.invstd1);

            lc.Fpre = matmul(lc.A1, mat("ffn.W1"));
            detail::add_bias_rows(lc.Fpre, vec("ffn.b1"));
            lc.Fact = lc.Fpre;
            for (double& v : lc.Fact.data()) v = std::max(v, 0.0);
            lc.G = matmul(lc.Fact, mat("ffn.W2"));
            detail::add_bias_rows(lc.G, vec("ffn.b2"));
            if (use_dropout) {
                lc.ffn_mask = detail::dropout_mask(B * T, d, cfg_.dropout_rate, *rng);
                detail::apply_mask(lc.G, lc.ffn_mask);
            }

            lc.R2 = lc.A1;
            for (std::size_t i = 0; i < lc.R2.data().size(); ++i)
                lc.R2.data()[i] += lc.G.data()[i];
            detail::layer_norm_forward(lc.R2, vec("ln2.gamma"), vec("ln2.beta"), lc.xhat2,
                                       lc.A2, lc.invstd2);
            check_finite(lc.A2, l, "encoder output");
            A = lc.A2;
        }

        // linear head on the last token
        const auto Wh = w.tensor(layout_.find("head.W"));
        const auto bh = w.tensor(layout_.find("head.b"));
        cache.preds.resize(B);
        for (std::size_t s = 0; s < B; ++s) {
            const auto row = A.row(tok(s, T - 1));
            double out = bh[0];
            for (std::size_t j = 0; j < d; ++j) out += row[j] * Wh[j];
            cache.preds[s] = out;
        }
        return cache.preds;
    }

    std::vector<double> backward(const ModelWeights& w, const SequenceBatch& batch,
                                 const detail::ForwardCache& cache,
                                 double* loss_out) const {
        const std::size_t T = cfg_.sequence_length;
        const std::size_t B = batch.size();
        const std::size_t d = cfg_.model_dim;
        const std::size_t H = cfg_.n_heads;
        const std::size_t hd = cfg_.head_dim();

        std::vector<double> grad(layout_.total, 0.0);
        ModelWeights gview;
        gview.layout = layout_;
        gview.values.swap(grad);

        double loss = 0.0;
        std::vector<double> dpred(B);
        for (std::size_t s = 0; s < B; ++s) {
            const double e = cache.preds[s] - batch.targets[s];
            loss += e * e;
            dpred[s] = 2.0 * e / static_cast<double>(B);
        }
        loss /= static_cast<double>(B);
        if (loss_out) *loss_out = loss;

        const Matrix& A_final =
            cfg_.n_layers > 0 ? cache.layers.back().A2 : cache.embedded;

        Matrix dA(B * T, d);
        {
            const auto Wh = w.tensor(layout_.find("head.W"));
            auto dWh = gview.tensor(layout_.find("head.W"));
            auto dbh = gview.tensor(layout_.find("head.b"));
            for (std::size_t s = 0; s < B; ++s) {
                const std::size_t r = tok(s, T - 1);
                dbh[0] += dpred[s];
                for (std::size_t j = 0; j < d; ++j) {
                    dWh[j] += A_final(r, j) * dpred[s];
                    dA(r, j) += dpred[s] * Wh[j];
                }
            }
        }

        const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
        for (std::size_t l = cfg_.n_layers; l-- > 0;) {
            const auto& lc = cache.layers[l];
            const std::string p = "layers." + std::to_string(l) + ".";
            auto mat = [&](const std::string& name) {
                const auto& spec = layout_.find(p + name);
                Matrix m(spec.rows, spec.cols);
                const auto src = w.tensor(spec);
                std::copy(src.begin(), src.end(), m.data().begin());
                return m;
            };
            auto gv = [&](const std::string& name) {
                return gview.tensor(layout_.find(p + name));
            };

            // ln2
            Matrix dR2;
            detail::layer_norm_backward(dA, lc.xhat2, w.tensor(layout_.find(p + "ln2.gamma")),
                                        lc.invstd2, dR2, gv("ln2.gamma"), gv("ln2.beta"));
            Matrix dG = dR2;
            if (lc.ffn_mask.rows() > 0) detail::apply_mask(dG, lc.ffn_mask);
            Matrix dA1 = dR2;  // residual branch

            // ffn
            {
                auto db2 = gv("ffn.b2");
                for (std::size_t i = 0; i < dG.rows(); ++i)
                    for (std::size_t j = 0; j < d; ++j) db2[j] += dG(i, j);
                Matrix dW2 = matmul_transA(lc.Fact, dG);
                auto gW2 = gv("ffn.W2");
                for (std::size_t i = 0; i < gW2.size(); ++i) gW2[i] += dW2.data()[i];
                Matrix dFact = matmul_transB(dG, mat("ffn.W2"));
                for (std::size_t i = 0; i < dFact.data().size(); ++i)
                    if (lc.Fpre.data()[i] <= 0.0) dFact.data()[i] = 0.0;
                auto db1 = gv("ffn.b1");
                for (std::size_t i = 0; i < dFact.rows(); ++i)
                    for (std::size_t j = 0; j < dFact.cols(); ++j) db1[j] += dFact(i, j);
                Matrix dW1 = matmul_transA(lc.A1, dFact);
                auto gW1 = gv("ffn.W1");
                for (std::size_t i = 0; i < gW1.size(); ++i) gW1[i] += dW1.data()[i];
                Matrix dA1_ffn = matmul_transB(dFact, mat("ffn.W1"));
                for (std::size_t i = 0; i < dA1.data().size(); ++i)
                    dA1.data()[i] += dA1_ffn.data()[i];
            }

            // ln1
            Matrix dR1;
            detail::layer_norm_backward(dA1, lc.xhat1, w.tensor(layout_.find(p + "ln1.gamma")),
                                        lc.invstd1, dR1, gv("ln1.gamma"), gv("ln1.beta"));
            Matrix dO = dR1;
            if (lc.attn_mask.rows() > 0) detail::apply_mask(dO, lc.attn_mask);
            Matrix dInput = dR1;  // residual branch

            // attention output projection
            {
                auto dbo = gv("attn.bo");
                for (std::size_t i = 0; i < dO.rows(); ++i)
                    for (std::size_t j = 0; j < d; ++j) dbo[j] += dO(i, j);
                Matrix dWo = matmul_transA(lc.Zcat, dO);
                auto gWo = gv("attn.Wo");
                for (std::size_t i = 0; i < gWo.size(); ++i) gWo[i] += dWo.data()[i];
            }
            Matrix dZcat = matmul_transB(dO, mat("attn.Wo"));

            // attention core
            Matrix dQ(B * T, d), dK(B * T, d), dV(B * T, d);
            for (std::size_t s = 0; s < B; ++s) {
                for (std::size_t h = 0; h < H; ++h) {
                    const Matrix& alpha = lc.alpha[s * H + h];
                    Matrix dalpha(T, T);
                    for (std::size_t ti = 0; ti < T; ++ti)
                        for (std::size_t tj = 0; tj < T; ++tj) {
                            double v = 0.0;
                            for (std::size_t u = 0; u < hd; ++u)
                                v += dZcat(tok(s, ti), h * hd + u) *
                                     lc.V(tok(s, tj), h * hd + u);
                            dalpha(ti, tj) = v;
                            for (std::size_t u = 0; u < hd; ++u)
                                dV(tok(s, tj), h * hd + u) +=
                                    alpha(ti, tj) * dZcat(tok(s, ti), h * hd + u);
                        }
                    for (std::size_t ti = 0; ti < T; ++ti) {
                        double inner = 0.0;
                        for (std::size_t tk = 0; tk < T; ++tk)
                            inner += dalpha(ti, tk) * alpha(ti, tk);
                        for (std::size_t tj = 0; tj < T; ++tj) {
                            const double dscore =
                                alpha(ti, tj) * (dalpha(ti, tj) - inner) * inv_sqrt_hd;
                            for (std::size_t u = 0; u < hd; ++u) {
                                dQ(tok(s, ti), h * hd + u) +=
                                    dscore * lc.K(tok(s, tj), h * hd + u);
                                dK(tok(s, tj), h * hd + u) +=
                                    dscore * lc.Q(tok(s, ti), h * hd + u);
                            }
                        }
                    }
                }
            }

            auto linear_back = [&](const Matrix& dY, const char* Wname, const char* bname) {
                auto db = gv(bname);
                for (std::size_t i = 0; i < dY.rows(); ++i)
                    for (std::size_t j = 0; j < d; ++j) db[j] += dY(i, j);
                Matrix dW = matmul_transA(lc.input, dY);
                auto gW = gv(Wname);
                for (std::size_t i = 0; i < gW.size(); ++i) gW[i] += dW.data()[i];
                Matrix dX = matmul_transB(dY, mat(Wname));
                for (std::size_t i = 0; i < dInput.data().size(); ++i)
                    dInput.data()[i] += dX.data()[i];
            };
            linear_back(dQ, "attn.Wq", "attn.bq");
            linear_back(dK, "attn.Wk", "attn.bk");
            linear_back(dV, "attn.Wv", "attn.bv");

            dA = std::move(dInput);
        }

        // embedding
        {
            auto dWx = gview.tensor(layout_.find("embed.W"));
            auto dbx = gview.tensor(layout_.find("embed.b"));
            for (std::size_t s = 0; s < B; ++s) {
                const std::size_t r = tok(s, T - 1);
                for (std::size_t j = 0; j < d; ++j) {
                    dbx[j] += dA(r, j);
                    for (std::size_t i = 0; i < input_dim_; ++i)
                        dWx[i * d + j] += batch.features(s, i) * dA(r, j);
                }
            }
            if (T > 1) {
                auto dWs = gview.tensor(layout_.find("sale_embed.W"));
                auto dbs = gview.tensor(layout_.find("sale_embed.b"));
                for (std::size_t s = 0; s < B; ++s)
                    for (std::size_t t = 0; t + 1 < T; ++t) {
                        const std::size_t r = tok(s, t);
                        for (std::size_t j = 0; j < d; ++j) {
                            dbs[j] += dA(r, j);
                            dWs[j] += batch.past_sales(s, t) * dA(r, j);
                        }
                    }
            }
        }
        return std::move(gview.values);
    }

    std::size_t input_dim_;
    ForecasterConfig cfg_;
    WeightLayout layout_;
};

/// Per-client z-scoring on train-split statistics; applied to features and
/// target before the embedding, inverted on predictions for reporting.
struct Standardizer {
    std::vector<double> mean, stddev;
    double y_mean = 0.0, y_std = 1.0;

    static Standardizer fit(const Matrix& X, std::span<const double> y) {
        Standardizer s;
        s.mean.resize(X.cols());
        s.stddev.resize(X.cols());
        for (std::size_t j = 0; j < X.cols(); ++j) {
            const auto col = X.column(j);
            s.mean[j] = stable_mean(col);
            const double v = variance(col);
            s.stddev[j] = v > 0.0 ? std::sqrt(v) : 1.0;
        }
        s.y_mean = stable_mean(y);
        const double vy = variance(y);
        s.y_std = vy > 0.0 ? std::sqrt(vy) : 1.0;
        return s;
    }

    Matrix transform(const Matrix& X) const {
        Matrix out(X.rows(), X.cols());
        for (std::size_t i = 0; i < X.rows(); ++i)
            for (std::size_t j = 0; j < X.cols(); ++j)
                out(i, j) = (X(i, j) - mean[j]) / stddev[j];
        return out;
    }

    std::vector<double> transform_y(std::span<const double> y) const {
        std::vector<double> out(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) out[i] = (y[i] - y_mean) / y_std;
        return out;
    }

    std::vector<double> destandardize_y(std::span<const double> y) const {
        std::vector<double> out(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i] * y_std + y_mean;
        return out;
    }
};

static_assert(std::endian::native == std::endian::little,
              "weight serialization assumes a little-endian host");

inline void save_weights(const ModelWeights& w, const std::string& bin_path,
                         const std::string& sidecar_path) {
    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("save_weights: cannot open " + bin_path);
    bin.write(reinterpret_cast<const char*>(w.values.data()),
              static_cast<std::streamsize>(w.values.size() * sizeof(double)));

    nlohmann::json side;
    side["total"] = w.layout.total;
    side["tensors"] = nlohmann::json::array();
    for (const auto& t : w.layout.tensors)
        side["tensors"].push_back({{"name", t.name},
                                   {"rows", t.rows},
                                   {"cols", t.cols},
                                   {"kind", static_cast<int>(t.kind)}});
    std::ofstream js(sidecar_path);
    if (!js) throw std::runtime_error("save_weights: cannot open " + sidecar_path);
    js << side.dump(2) << "\n";
}

inline ModelWeights load_weights(const std::string& bin_path,
                                 const std::string& sidecar_path) {
    std::ifstream js(sidecar_path);
    if (!js) throw std::runtime_error("load_weights: cannot open " + sidecar_path);
    nlohmann::json side = nlohmann::json::parse(js);

    ModelWeights w;
    for (const auto& t : side.at("tensors")) {
        TensorSpec spec;
        spec.name = t.at("name").get<std::string>();
        spec.rows = t.at("rows").get<std::size_t>();
        spec.cols = t.at("cols").get<std::size_t>();
        spec.kind = static_cast<TensorKind>(t.at("kind").get<int>());
        spec.offset = w.layout.total;
        w.layout.total += spec.size();
        w.layout.tensors.push_back(std::move(spec));
    }
    if (w.layout.total != side.at("total").get<std::size_t>())
        throw std::runtime_error("load_weights: sidecar total mismatch");

    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("load_weights: cannot open " + bin_path);
    w.values.resize(w.layout.total);
    bin.read(reinterpret_cast<char*>(w.values.data()),
             static_cast<std::streamsize>(w.values.size() * sizeof(double)));
    if (static_cast<std::size_t>(bin.gcount()) != w.values.size() * sizeof(double))
        throw std::runtime_error("load_weights: binary shorter than layout");
    return w;
}

}  // namespace pacfl
