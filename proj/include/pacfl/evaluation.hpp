#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pacfl/clustering.hpp"

namespace pacfl {

struct MetricTriple {
    double rmse = 0.0;
    double mae = 0.0;
    std::optional<double> r2;  // absent when the target is constant
};

/// RMSE, MAE, and R^2 of predictions against ground truth. R^2 is flagged
/// undefined (unset) for a constant target.
inline MetricTriple metrics(std::span<const double> y_true, std::span<const double> y_pred) {
    if (y_true.size() != y_pred.size() || y_true.empty())
        throw std::invalid_argument("metrics: length mismatch or empty");
    const auto n = static_cast<double>(y_true.size());
    double ss_res = 0.0, abs_sum = 0.0, mean = 0.0;
    for (double v : y_true) mean += v;
    mean /= n;
    double ss_tot = 0.0;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        const double e = y_true[i] - y_pred[i];
        ss_res += e * e;
        abs_sum += std::fabs(e);
        ss_tot += (y_true[i] - mean) * (y_true[i] - mean);
    }
    MetricTriple m;
    m.rmse = std::sqrt(ss_res / n);
    m.mae = abs_sum / n;
    if (ss_tot > 0.0) m.r2 = 1.0 - ss_res / ss_tot;
    return m;
}

/// Evaluation of one method on one client, plus a fingerprint of the test
/// split it was computed on (guards against cross-method split drift).
struct ClientMethodResult {
    MetricTriple metrics;
    std::uint64_t split_fingerprint = 0;
    bool excluded = false;  // singleton clients in the PA-CFL column
};

inline const std::vector<std::string>& canonical_method_order() {
    static const std::vector<std::string> order{"local", "pooled", "pa_cfl"};
    return order;
}

struct ReportAggregates {
    bool present = false;  // requires both local and pa_cfl columns
    double mean_r2_improvement = 0.0;   // absolute R^2 points, pa_cfl - local
    double rmse_reduction_pct = 0.0;    // mean of per-client (local-pa)/local * 100
    double mae_reduction_pct = 0.0;
};

struct ExperimentReport {
    std::vector<std::string> client_ids;  // sorted
    std::vector<std::string> methods;     // canonical order, present only
    std::map<std::string, std::map<std::string, ClientMethodResult>> cells;  // client -> method
    BubbleAssignment assignment;
    ReportAggregates aggregates;
    nlohmann::json config_echo;
    std::uint64_t seed = 0;
    double wall_clock_seconds = 0.0;  // not part of the deterministic surface
};

/// Assembles the per-client comparison table and the aggregate deltas of
/// pa_cfl against local learning. Throws if two methods evaluated a client
/// on different test splits.
inline ExperimentReport build_report(
    const std::map<std::string, std::map<std::string, ClientMethodResult>>& by_method,
    const BubbleAssignment& assignment) {
    ExperimentReport report;
    report.assignment = assignment;

    std::set<std::string> clients;
    for (const auto& [method, results] : by_method) {
        if (std::find(canonical_method_order().begin(), canonical_method_order().end(),
                      method) == canonical_method_order().end())
            throw std::invalid_argument("report: unknown method: " + method);
        for (const auto& [client, result] : results) clients.insert(client);
    }
    report.client_ids.assign(clients.begin(), clients.end());
    for (const auto& m : canonical_method_order())
        if (by_method.count(m)) report.methods.push_back(m);

    for (const auto& client : report.client_ids) {
        std::optional<std::uint64_t> fingerprint;
        for (const auto& method : report.methods) {
            const auto& results = by_method.at(method);
            const auto it = results.find(client);
            if (it == results.end()) continue;
            if (!it->second.excluded) {
                if (fingerprint && *fingerprint != it->second.split_fingerprint)
                    throw std::invalid_argument("report: test split mismatch for client " +
                                                client);
                fingerprint = it->second.split_fingerprint;
            }
            report.cells[client][method] = it->second;
        }
    }

    if (by_method.count("local") && by_method.count("pa_cfl")) {
        double r2_delta = 0.0, rmse_pct = 0.0, mae_pct = 0.0;
        std::size_t n = 0;
        for (const auto& client : report.client_ids) {
            const auto& row = report.cells.at(client);
            const auto li = row.find("local");
            const auto pi = row.find("pa_cfl");
            if (li == row.end() || pi == row.end() || pi->second.excluded) continue;
            const auto& local = li->second.metrics;
            const auto& pa = pi->second.metrics;
            if (local.r2 && pa.r2) r2_delta += *pa.r2 - *local.r2;
            if (local.rmse > 0.0) rmse_pct += (local.rmse - pa.rmse) / local.rmse * 100.0;
            if (local.mae > 0.0) mae_pct += (local.mae - pa.mae) / local.mae * 100.0;
            ++n;
        }
        if (n > 0) {
            report.aggregates.present = true;
            report.aggregates.mean_r2_improvement = r2_delta / static_cast<double>(n);
            report.aggregates.rmse_reduction_pct = rmse_pct / static_cast<double>(n);
            report.aggregates.mae_reduction_pct = mae_pct / static_cast<double>(n);
        }
    }
    return report;
}

namespace detail {

inline std::string format_double(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

inline std::string format_r2_percent(const std::optional<double>& r2) {
    if (!r2) return "NA";
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.2f%%", *r2 * 100.0);
    return buf;
}

inline std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

}  // namespace detail

/// One row per client x method; mirrors the comparison-table layout with
/// R^2 rendered as a percentage and "-" for excluded clients.
inline std::string report_to_csv(const ExperimentReport& report) {
    std::string out = "client_id,method,rmse,mae,r2\n";
    for (const auto& client : report.client_ids) {
        for (const auto& method : report.methods) {
            const auto& row = report.cells.at(client);
            const auto it = row.find(method);
            if (it == row.end()) continue;
            out += detail::csv_quote(client) + "," + method + ",";
            if (it->second.excluded) {
                out += "-,-,-\n";
            } else {
                const auto& m = it->second.metrics;
                out += detail::format_double(m.rmse) + "," + detail::format_double(m.mae) +
                       "," + detail::format_r2_percent(m.r2) + "\n";
            }
        }
    }
    return out;
}

inline nlohmann::json report_to_json(const ExperimentReport& report) {
    nlohmann::json j;
    j["seed"] = report.seed;
    j["wall_clock_seconds"] = report.wall_clock_seconds;
    j["config"] = report.config_echo;
    j["methods"] = report.methods;
    j["clients"] = nlohmann::json::object();
    for (const auto& client : report.client_ids) {
        nlohmann::json row = nlohmann::json::object();
        for (const auto& [method, result] : report.cells.at(client)) {
            if (result.excluded) {
                row[method] = {{"excluded", true}};
            } else {
                nlohmann::json cell = {{"rmse", result.metrics.rmse},
                                       {"mae", result.metrics.mae}};
                if (result.metrics.r2)
                    cell["r2"] = *result.metrics.r2;
                else
                    cell["r2"] = nullptr;
                row[method] = cell;
            }
        }
        j["clients"][client] = row;
    }
    if (report.aggregates.present) {
        j["aggregates"] = {{"mean_r2_improvement", report.aggregates.mean_r2_improvement},
                           {"rmse_reduction_pct", report.aggregates.rmse_reduction_pct},
                           {"mae_reduction_pct", report.aggregates.mae_reduction_pct}};
    }
    if (!report.assignment.labels.empty()) {
        nlohmann::json a;
        a["k_star"] = report.assignment.k_star;
        a["labels"] = nlohmann::json::object();
        for (std::size_t c = 0; c < report.assignment.labels.size(); ++c) {
            const std::string id = c < report.assignment.client_ids.size()
                                       ? report.assignment.client_ids[c]
                                       : std::to_string(c);
            a["labels"][id] = report.assignment.labels[c];
        }
        j["assignment"] = a;
    }
    return j;
}

}  // namespace pacfl
