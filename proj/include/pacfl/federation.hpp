#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pacfl/clustering.hpp"
#include "pacfl/forecaster.hpp"
#include "pacfl/rng.hpp"

namespace pacfl {

struct RoundPlan {
    std::size_t rounds = 10;
    std::size_t local_epochs = 10;
    double convergence_threshold = 1e-4;  // tau: L2 norm of the round weight delta
    bool cross_bubble_aggregation = false;

    void validate() const {
        if (rounds < 1) throw std::invalid_argument("plan: rounds must be >= 1");
        if (!(convergence_threshold >= 0.0))
            throw std::invalid_argument("plan: convergence threshold must be >= 0");
    }
};

/// A client prepared for training: standardized sequence batches plus the
/// client's own seed. Training depends on nothing else.
struct TrainingClient {
    std::string client_id;
    SequenceBatch train;
    SequenceBatch eval;
    std::uint64_t seed = 0;
};

struct RoundRecord {
    std::string scope;  // "pa_cfl", "pooled"
    std::size_t bubble = 0;
    std::size_t round = 0;  // 1-based
    double weight_delta = 0.0;
    std::map<std::string, double> client_eval_loss;  // standardized-scale MSE
    std::vector<std::string> dropped_clients;        // diverged this round
};

/// Element-wise mean of weight vectors sharing one layout. Coordinates are
/// accumulated in sorted value order, so the result is bit-identical under
/// any permutation of the argument list.
inline ModelWeights fedavg(const std::vector<ModelWeights>& ws) {
    if (ws.empty()) throw std::invalid_argument("fedavg: no weights");
    for (const auto& w : ws)
        if (!(w.layout == ws.front().layout))
            throw std::invalid_argument("fedavg: layout mismatch");

    ModelWeights out;
    out.layout = ws.front().layout;
    out.values.assign(out.layout.total, 0.0);
    std::vector<double> coords(ws.size());
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        for (std::size_t c = 0; c < ws.size(); ++c) coords[c] = ws[c].values[i];
        std::sort(coords.begin(), coords.end());
        double s = 0.0;
        for (double v : coords) s += v;
        out.values[i] = s / static_cast<double>(ws.size());
    }
    return out;
}

/// Size-weighted average over multi-client bubbles only; singleton bubbles
/// never contribute.
inline ModelWeights aggregate_global(const std::vector<ModelWeights>& bubble_weights,
                                     const std::vector<std::size_t>& bubble_sizes) {
    if (bubble_weights.size() != bubble_sizes.size())
        throw std::invalid_argument("aggregate_global: weight/size count mismatch");
    std::vector<std::size_t> multi;
    for (std::size_t i = 0; i < bubble_sizes.size(); ++i)
        if (bubble_sizes[i] > 1) multi.push_back(i);
    if (multi.empty()) throw std::invalid_argument("aggregate_global: no multi-client bubble");
    for (std::size_t i : multi)
        if (!(bubble_weights[i].layout == bubble_weights[multi.front()].layout))
            throw std::invalid_argument("aggregate_global: layout mismatch");

    double total = 0.0;
    for (std::size_t i : multi) total += static_cast<double>(bubble_sizes[i]);

    ModelWeights out;
    out.layout = bubble_weights[multi.front()].layout;
    out.values.assign(out.layout.total, 0.0);
    std::vector<double> terms(multi.size());
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        for (std::size_t m = 0; m < multi.size(); ++m)
            terms[m] = static_cast<double>(bubble_sizes[multi[m]]) *
                       bubble_weights[multi[m]].values[i];
        std::sort(terms.begin(), terms.end());
        double s = 0.0;
        for (double v : terms) s += v;
        out.values[i] = s / total;
    }
    return out;
}

inline double weight_delta_norm(const ModelWeights& a, const ModelWeights& b) {
    if (!(a.layout == b.layout)) throw std::invalid_argument("delta: layout mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        const double d = a.values[i] - b.values[i];
        s += d * d;
    }
    return std::sqrt(s);
}

struct BubbleRunResult {
    ModelWeights final_weights;
    std::map<std::string, ModelWeights> client_weights;  // final broadcast, per client
    std::vector<RoundRecord> rounds;
    bool converged = false;
};

/// FedAvg rounds within one bubble: every client trains local_epochs from
/// the broadcast weights, the server averages and re-broadcasts, stopping
/// early once the round-to-round weight delta drops under the threshold.
/// A client whose training diverges is dropped for that round only.
inline BubbleRunResult run_bubble(const Forecaster& model, const ModelWeights& init,
                                  std::vector<TrainingClient> clients, const RoundPlan& plan,
                                  const std::string& scope = "pa_cfl",
                                  std::size_t bubble_index = 0) {
    plan.validate();
    if (clients.empty()) throw std::invalid_argument("bubble: no clients");
    // canonical processing order; results must not depend on caller order
    std::sort(clients.begin(), clients.end(),
              [](const TrainingClient& a, const TrainingClient& b) {
                  return a.client_id < b.client_id;
              });

    BubbleRunResult result;
    ModelWeights broadcast = init;
    for (std::size_t r = 1; r <= plan.rounds; ++r) {
        std::vector<ModelWeights> updates;
        RoundRecord record;
        record.scope = scope;
        record.bubble = bubble_index;
        record.round = r;
        for (const auto& client : clients) {
            try {
                auto trained = model.train_epochs(broadcast, client.train, plan.local_epochs,
                                                  derive_seed(client.seed, "round", r - 1));
                updates.push_back(std::move(trained.weights));
            } catch (const TrainingDiverged&) {
                record.dropped_clients.push_back(client.client_id);
            }
        }
        if (updates.empty())
            throw std::runtime_error("bubble " + std::to_string(bubble_index) +
                                     ": every client diverged in round " + std::to_string(r));
        ModelWeights next = fedavg(updates);
        record.weight_delta = weight_delta_norm(next, broadcast);
        for (const auto& client : clients)
            record.client_eval_loss[client.client_id] = model.mse(next, client.eval);
        broadcast = std::move(next);
        const bool converged = record.weight_delta < plan.convergence_threshold;
        result.rounds.push_back(std::move(record));
        if (converged) {
            result.converged = true;
            break;
        }
    }
    for (const auto& client : clients) result.client_weights[client.client_id] = broadcast;
    result.final_weights = std::move(broadcast);
    return result;
}

struct ParticipationPlan {
    std::vector<std::size_t> bubble_ids;                  // label of each kept bubble
    std::vector<std::vector<std::size_t>> bubble_members; // client indices per kept bubble
    std::vector<std::size_t> excluded;                    // singleton clients
};

/// Eq.-9 filter: every singleton bubble is flagged as a potential attacker
/// and excluded from federation (falling back to local-only in reports).
inline ParticipationPlan exclude_singletons(const BubbleAssignment& assignment) {
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t c = 0; c < assignment.labels.size(); ++c)
        groups[assignment.labels[c]].push_back(c);

    ParticipationPlan plan;
    for (const auto& [bubble, members] : groups) {
        if (members.size() == 1) {
            plan.excluded.push_back(members.front());
        } else {
            plan.bubble_ids.push_back(bubble);
            plan.bubble_members.push_back(members);
        }
    }
    for (std::size_t c = 0; c < assignment.labels.size(); ++c) {
        const bool flagged = assignment.singleton_flags[c];
        const bool excluded =
            std::find(plan.excluded.begin(), plan.excluded.end(), c) != plan.excluded.end();
        if (flagged != excluded)
            throw std::logic_error("exclude_singletons: flag/partition disagreement");
    }
    return plan;
}

struct FederationResult {
    std::map<std::string, ModelWeights> client_weights;  // participants only
    std::vector<std::size_t> excluded;                   // client indices
    std::vector<RoundRecord> rounds;
    std::map<std::size_t, bool> bubble_converged;
    std::optional<ModelWeights> global_weights;  // set when cross-bubble aggregation is on
};

/// The training phase over all bubbles: per-bubble FedAvg with singleton
/// exclusion, optionally followed by the size-weighted cross-bubble
/// aggregate pushed back to every participant.
inline FederationResult run_pa_cfl(const Forecaster& model, const ModelWeights& init,
                                   const std::vector<TrainingClient>& clients,
                                   const BubbleAssignment& assignment, const RoundPlan& plan) {
    if (clients.size() != assignment.labels.size())
        throw std::invalid_argument("pa_cfl: client/assignment size mismatch");
    const ParticipationPlan participation = exclude_singletons(assignment);

    FederationResult result;
    result.excluded = participation.excluded;

    std::vector<ModelWeights> bubble_weights;
    std::vector<std::size_t> bubble_sizes;
    for (std::size_t b = 0; b < participation.bubble_ids.size(); ++b) {
        std::vector<TrainingClient> members;
        for (std::size_t idx : participation.bubble_members[b]) members.push_back(clients[idx]);
        auto run = run_bubble(model, init, std::move(members), plan, "pa_cfl",
                              participation.bubble_ids[b]);
        for (auto& [id, w] : run.client_weights) result.client_weights[id] = std::move(w);
        result.rounds.insert(result.rounds.end(), run.rounds.begin(), run.rounds.end());
        result.bubble_converged[participation.bubble_ids[b]] = run.converged;
        bubble_weights.push_back(std::move(run.final_weights));
        bubble_sizes.push_back(participation.bubble_members[b].size());
    }

    if (plan.cross_bubble_aggregation && !bubble_weights.empty()) {
        result.global_weights = aggregate_global(bubble_weights, bubble_sizes);
        for (auto& [id, w] : result.client_weights) w = *result.global_weights;
    }
    return result;
}

/// Pooled FedAvg baseline: all clients in one bubble.
inline BubbleRunResult run_baseline_pooled(const Forecaster& model, const ModelWeights& init,
                                           const std::vector<TrainingClient>& clients,
                                           const RoundPlan& plan) {
    return run_bubble(model, init, clients, plan, "pooled", 0);
}

struct LocalRunResult {
    std::map<std::string, ModelWeights> client_weights;
    std::map<std::string, std::vector<double>> loss_curves;
};

/// Local-only baseline: each client trains for the full epoch budget from
/// the shared initialization, with no communication.
inline LocalRunResult run_baseline_local(const Forecaster& model, const ModelWeights& init,
                                         const std::vector<TrainingClient>& clients,
                                         std::size_t epochs) {
    if (clients.empty()) throw std::invalid_argument("local: no clients");
    LocalRunResult result;
    for (const auto& client : clients) {
        auto trained =
            model.train_epochs(init, client.train, epochs, derive_seed(client.seed, "round", 0));
        result.client_weights[client.client_id] = std::move(trained.weights);
        result.loss_curves[client.client_id] = std::move(trained.epoch_loss);
    }
    return result;
}

}  // namespace pacfl
