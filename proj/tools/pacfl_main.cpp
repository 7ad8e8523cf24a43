// Experiment runner CLI: wires config -> pipeline -> artifacts.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pacfl/pacfl.hpp"

namespace {

double parse_epsilon_arg(const std::string& s) {
    if (s == "high") return 0.1;
    if (s == "moderate") return 1.0;
    if (s == "low") return 10.0;
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw CLI::ValidationError("--epsilon", "expected a number or high|moderate|low");
}

void print_report(const pacfl::ExperimentReport& report) {
    std::printf("%-14s", "client");
    for (const auto& m : report.methods) std::printf("  %-26s", m.c_str());
    std::printf("\n");
    for (const auto& client : report.client_ids) {
        std::printf("%-14s", client.c_str());
        for (const auto& m : report.methods) {
            const auto& row = report.cells.at(client);
            const auto it = row.find(m);
            if (it == row.end() || it->second.excluded) {
                std::printf("  %-26s", "-");
            } else {
                char cell[64];
                std::snprintf(cell, sizeof cell, "rmse %.3f r2 %s",
                              it->second.metrics.rmse,
                              pacfl::detail::format_r2_percent(it->second.metrics.r2).c_str());
                std::printf("  %-26s", cell);
            }
        }
        std::printf("\n");
    }
    if (report.aggregates.present) {
        std::printf("pa_cfl vs local: r2 %+0.4f, rmse %+0.1f%%, mae %+0.1f%% (reductions)\n",
                    report.aggregates.mean_r2_improvement,
                    report.aggregates.rmse_reduction_pct,
                    report.aggregates.mae_reduction_pct);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PA-CFL experiment runner"};
    app.require_subcommand(1);

    auto* run = app.add_subcommand("run", "run one experiment from a config file");
    std::string config_path;
    std::string epsilon_arg, methods_arg, out_dir;
    std::uint64_t seed = 0;
    std::size_t k_override = 0;
    bool export_clean = false;
    run->add_option("--config", config_path, "experiment config (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    run->add_option("--epsilon", epsilon_arg, "privacy budget (number or high|moderate|low)");
    run->add_option("--k-override", k_override, "force the number of bubbles");
    run->add_option("--seed", seed, "global seed");
    run->add_option("--out", out_dir, "output directory");
    run->add_option("--methods", methods_arg, "comma list from local,pooled,pa_cfl");
    run->add_flag("--export-clean-importance", export_clean,
                  "also write pre-noise importance vectors (debug)");

    CLI11_PARSE(app, argc, argv);

    try {
        pacfl::ExperimentConfig cfg = pacfl::load_config(config_path);
        // precedence: flags > config > defaults
        if (run->count("--epsilon")) cfg.epsilon = parse_epsilon_arg(epsilon_arg);
        if (run->count("--k-override")) cfg.k_override = k_override;
        if (run->count("--seed")) cfg.seed = seed;
        if (run->count("--out")) cfg.output_dir = out_dir;
        if (run->count("--methods")) {
            cfg.methods.clear();
            std::size_t start = 0;
            while (start <= methods_arg.size()) {
                const auto comma = methods_arg.find(',', start);
                const auto token = methods_arg.substr(
                    start, comma == std::string::npos ? std::string::npos : comma - start);
                if (!token.empty()) cfg.methods.push_back(token);
                if (comma == std::string::npos) break;
                start = comma + 1;
            }
        }
        if (export_clean) cfg.export_clean_importance = true;
        cfg.validate();

        const auto artifacts = pacfl::run_experiment(cfg);
        for (const auto& w : artifacts.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
        print_report(artifacts.report);
        std::printf("artifacts written to %s\n", cfg.output_dir.c_str());
        return 0;
    } catch (const pacfl::StageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
