#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pacfl/boosting.hpp"
#include "pacfl/clustering.hpp"
#include "pacfl/dataset.hpp"
#include "pacfl/evaluation.hpp"
#include "pacfl/federation.hpp"
#include "pacfl/forecaster.hpp"
#include "pacfl/privacy.hpp"
#include "pacfl/synthetic.hpp"
#include "pacfl/version.hpp"

namespace pacfl {

/// Pipeline failure tagged with the stage it happened in; the CLI surfaces
/// the tag in diagnostics and exit status.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& message)
        : std::runtime_error("[stage:" + stage + "] " + message), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

struct CsvSourceConfig {
    std::string path;
    std::string schema_path;
    std::string region_column;
    std::string target_column;
    std::size_t cardinality_threshold = 16;
    double pearson_threshold = 0.95;
    double anova_p_threshold = 0.06;
    std::size_t top_k_features = 25;
    double test_fraction = 0.2;
    std::size_t min_region_samples = 10;
};

enum class DistanceMetric { Emd, Cosine };

struct ExperimentConfig {
    std::optional<SyntheticSpec> synthetic;
    std::optional<CsvSourceConfig> csv;
    double epsilon = 10.0;
    std::optional<std::size_t> k_override;
    DbiVariant dbi_variant = DbiVariant::AsWritten;
    DistanceMetric distance_metric = DistanceMetric::Emd;
    GbtConfig gbt;
    std::size_t sensitivity_subsample = 2000;
    ForecasterConfig forecaster;  // forecaster.epochs is the local-learning budget
    RoundPlan rounds;
    std::vector<std::string> methods{"local", "pooled", "pa_cfl"};
    std::uint64_t seed = 0;
    std::string output_dir = "pacfl_out";
    bool export_clean_importance = false;

    void validate() const {
        if (synthetic.has_value() == csv.has_value())
            throw std::invalid_argument("config: exactly one of 'synthetic' or 'csv' required");
        if (!(epsilon > 0.0)) throw std::invalid_argument("config: epsilon must be > 0");
        if (methods.empty()) throw std::invalid_argument("config: methods must be nonempty");
        for (const auto& m : methods)
            if (m != "local" && m != "pooled" && m != "pa_cfl")
                throw std::invalid_argument("config: unknown method: " + m);
        if (csv) {
            namespace fs = std::filesystem;
            if (!fs::exists(csv->path))
                throw std::invalid_argument("config: csv.path does not exist: " + csv->path);
            if (!fs::exists(csv->schema_path))
                throw std::invalid_argument("config: csv.schema_path does not exist: " +
                                            csv->schema_path);
        }
        gbt.validate();
        forecaster.validate();
        rounds.validate();
    }

    bool runs(const std::string& method) const {
        return std::find(methods.begin(), methods.end(), method) != methods.end();
    }
};

namespace detail {

inline void check_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                       const std::string& context) {
    for (const auto& [key, value] : obj.items())
        if (!allowed.count(key))
            throw std::invalid_argument("config: unknown key '" + key + "' in " + context);
}

inline double parse_epsilon(const nlohmann::json& v) {
    if (v.is_number()) return v.get<double>();
    const std::string name = v.get<std::string>();
    // the three named privacy presets
    if (name == "high") return 0.1;
    if (name == "moderate") return 1.0;
    if (name == "low") return 10.0;
    throw std::invalid_argument("config: epsilon preset must be high|moderate|low, got '" +
                                name + "'");
}

inline SyntheticSpec parse_synthetic(const nlohmann::json& j) {
    check_keys(j,
               {"n_regimes", "clients_per_regime", "samples_per_client", "n_features",
                "noise_level", "test_fraction", "regimes"},
               "synthetic");
    SyntheticSpec spec;
    if (j.contains("n_regimes")) spec.n_regimes = j["n_regimes"].get<std::size_t>();
    if (j.contains("clients_per_regime"))
        spec.clients_per_regime = j["clients_per_regime"].get<std::size_t>();
    if (j.contains("samples_per_client"))
        spec.samples_per_client = j["samples_per_client"].get<std::size_t>();
    if (j.contains("n_features")) spec.n_features = j["n_features"].get<std::size_t>();
    if (j.contains("noise_level")) spec.noise_level = j["noise_level"].get<double>();
    if (j.contains("test_fraction")) spec.test_fraction = j["test_fraction"].get<double>();
    if (j.contains("regimes")) {
        for (const auto& r : j["regimes"]) {
            check_keys(r, {"features", "coefficients"}, "synthetic.regimes[]");
            RegimeSpec rs;
            for (const auto& f : r.at("features")) rs.dominant_features.push_back(f);
            for (const auto& c : r.at("coefficients")) rs.coefficients.push_back(c);
            spec.regimes.push_back(std::move(rs));
        }
        spec.n_regimes = spec.regimes.size();
    }
    return spec;
}

inline CsvSourceConfig parse_csv_source(const nlohmann::json& j) {
    check_keys(j,
               {"path", "schema_path", "region_column", "target_column",
                "cardinality_threshold", "pearson_threshold", "anova_p_threshold",
                "top_k_features", "test_fraction", "min_region_samples"},
               "csv");
    CsvSourceConfig c;
    c.path = j.at("path").get<std::string>();
    c.schema_path = j.at("schema_path").get<std::string>();
    c.region_column = j.at("region_column").get<std::string>();
    c.target_column = j.at("target_column").get<std::string>();
    if (j.contains("cardinality_threshold"))
        c.cardinality_threshold = j["cardinality_threshold"].get<std::size_t>();
    if (j.contains("pearson_threshold"))
        c.pearson_threshold = j["pearson_threshold"].get<double>();
    if (j.contains("anova_p_threshold"))
        c.anova_p_threshold = j["anova_p_threshold"].get<double>();
    if (j.contains("top_k_features")) c.top_k_features = j["top_k_features"].get<std::size_t>();
    if (j.contains("test_fraction")) c.test_fraction = j["test_fraction"].get<double>();
    if (j.contains("min_region_samples"))
        c.min_region_samples = j["min_region_samples"].get<std::size_t>();
    return c;
}

}  // namespace detail

inline ExperimentConfig load_config_json(const nlohmann::json& j) {
    detail::check_keys(j,
                       {"synthetic", "csv", "epsilon", "k_override", "dbi_variant",
                        "distance_metric", "gbt", "forecaster", "rounds", "methods", "seed",
                        "output_dir", "export_clean_importance"},
                       "top level");
    ExperimentConfig cfg;
    if (j.contains("synthetic")) cfg.synthetic = detail::parse_synthetic(j["synthetic"]);
    if (j.contains("csv")) cfg.csv = detail::parse_csv_source(j["csv"]);
    if (j.contains("epsilon")) cfg.epsilon = detail::parse_epsilon(j["epsilon"]);
    if (j.contains("k_override")) cfg.k_override = j["k_override"].get<std::size_t>();
    if (j.contains("dbi_variant")) {
        const auto v = j["dbi_variant"].get<std::string>();
        if (v == "as-written") cfg.dbi_variant = DbiVariant::AsWritten;
        else if (v == "standard") cfg.dbi_variant = DbiVariant::Standard;
        else throw std::invalid_argument("config: dbi_variant must be as-written|standard");
    }
    if (j.contains("distance_metric")) {
        const auto v = j["distance_metric"].get<std::string>();
        if (v == "emd") cfg.distance_metric = DistanceMetric::Emd;
        else if (v == "cosine") cfg.distance_metric = DistanceMetric::Cosine;
        else throw std::invalid_argument("config: distance_metric must be emd|cosine");
    }
    if (j.contains("gbt")) {
        const auto& g = j["gbt"];
        detail::check_keys(g,
                           {"n_trees", "max_depth", "shrinkage", "min_samples_leaf",
                            "sensitivity_subsample"},
                           "gbt");
        if (g.contains("n_trees")) cfg.gbt.n_trees = g["n_trees"].get<std::size_t>();
        if (g.contains("max_depth")) cfg.gbt.max_depth = g["max_depth"].get<std::size_t>();
        if (g.contains("shrinkage")) cfg.gbt.shrinkage = g["shrinkage"].get<double>();
        if (g.contains("min_samples_leaf"))
            cfg.gbt.min_samples_leaf = g["min_samples_leaf"].get<std::size_t>();
        if (g.contains("sensitivity_subsample"))
            cfg.sensitivity_subsample = g["sensitivity_subsample"].get<std::size_t>();
    }
    if (j.contains("forecaster")) {
        const auto& f = j["forecaster"];
        detail::check_keys(f,
                           {"n_layers", "n_heads", "model_dim", "dropout_rate",
                            "sequence_length", "learning_rate", "batch_size", "epochs"},
                           "forecaster");
        if (f.contains("n_layers")) cfg.forecaster.n_layers = f["n_layers"].get<std::size_t>();
        if (f.contains("n_heads")) cfg.forecaster.n_heads = f["n_heads"].get<std::size_t>();
        if (f.contains("model_dim"))
            cfg.forecaster.model_dim = f["model_dim"].get<std::size_t>();
        if (f.contains("dropout_rate"))
            cfg.forecaster.dropout_rate = f["dropout_rate"].get<double>();
        if (f.contains("sequence_length"))
            cfg.forecaster.sequence_length = f["sequence_length"].get<std::size_t>();
        if (f.contains("learning_rate"))
            cfg.forecaster.learning_rate = f["learning_rate"].get<double>();
        if (f.contains("batch_size"))
            cfg.forecaster.batch_size = f["batch_size"].get<std::size_t>();
        if (f.contains("epochs")) cfg.forecaster.epochs = f["epochs"].get<std::size_t>();
    }
    if (j.contains("rounds")) {
        const auto& r = j["rounds"];
        detail::check_keys(
            r, {"rounds", "local_epochs", "convergence_threshold", "cross_bubble_aggregation"},
            "rounds");
        if (r.contains("rounds")) cfg.rounds.rounds = r["rounds"].get<std::size_t>();
        if (r.contains("local_epochs"))
            cfg.rounds.local_epochs = r["local_epochs"].get<std::size_t>();
        if (r.contains("convergence_threshold"))
            cfg.rounds.convergence_threshold = r["convergence_threshold"].get<double>();
        if (r.contains("cross_bubble_aggregation"))
            cfg.rounds.cross_bubble_aggregation = r["cross_bubble_aggregation"].get<bool>();
    }
    if (j.contains("methods")) {
        cfg.methods.clear();
        for (const auto& m : j["methods"]) cfg.methods.push_back(m.get<std::string>());
    }
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("output_dir")) cfg.output_dir = j["output_dir"].get<std::string>();
    if (j.contains("export_clean_importance"))
        cfg.export_clean_importance = j["export_clean_importance"].get<bool>();

    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(in);  // parse_error reports byte position
    return load_config_json(j);
}

inline nlohmann::json config_echo_json(const ExperimentConfig& cfg) {
    nlohmann::json j;
    if (cfg.synthetic) {
        const auto& s = *cfg.synthetic;
        j["synthetic"] = {{"n_regimes", s.n_regimes},
                          {"clients_per_regime", s.clients_per_regime},
                          {"samples_per_client", s.samples_per_client},
                          {"n_features", s.n_features},
                          {"noise_level", s.noise_level},
                          {"test_fraction", s.test_fraction}};
    }
    if (cfg.csv) {
        const auto& c = *cfg.csv;
        j["csv"] = {{"path", c.path},
                    {"schema_path", c.schema_path},
                    {"region_column", c.region_column},
                    {"target_column", c.target_column},
                    {"cardinality_threshold", c.cardinality_threshold},
                    {"pearson_threshold", c.pearson_threshold},
                    {"anova_p_threshold", c.anova_p_threshold},
                    {"top_k_features", c.top_k_features},
                    {"test_fraction", c.test_fraction},
                    {"min_region_samples", c.min_region_samples}};
    }
    j["epsilon"] = cfg.epsilon;
    if (cfg.k_override) j["k_override"] = *cfg.k_override;
    j["dbi_variant"] = cfg.dbi_variant == DbiVariant::AsWritten ? "as-written" : "standard";
    j["distance_metric"] = cfg.distance_metric == DistanceMetric::Emd ? "emd" : "cosine";
    j["gbt"] = {{"n_trees", cfg.gbt.n_trees},
                {"max_depth", cfg.gbt.max_depth},
                {"shrinkage", cfg.gbt.shrinkage},
                {"min_samples_leaf", cfg.gbt.min_samples_leaf},
                {"sensitivity_subsample", cfg.sensitivity_subsample}};
    j["forecaster"] = {{"n_layers", cfg.forecaster.n_layers},
                       {"n_heads", cfg.forecaster.n_heads},
                       {"model_dim", cfg.forecaster.model_dim},
                       {"dropout_rate", cfg.forecaster.dropout_rate},
                       {"sequence_length", cfg.forecaster.sequence_length},
                       {"learning_rate", cfg.forecaster.learning_rate},
                       {"batch_size", cfg.forecaster.batch_size},
                       {"epochs", cfg.forecaster.epochs}};
    j["rounds"] = {{"rounds", cfg.rounds.rounds},
                   {"local_epochs", cfg.rounds.local_epochs},
                   {"convergence_threshold", cfg.rounds.convergence_threshold},
                   {"cross_bubble_aggregation", cfg.rounds.cross_bubble_aggregation}};
    j["methods"] = cfg.methods;
    j["seed"] = cfg.seed;
    j["output_dir"] = cfg.output_dir;
    j["export_clean_importance"] = cfg.export_clean_importance;
    return j;
}

namespace detail {

/// Serialized single-writer for all run artifacts; tracks every file for
/// the manifest.
class ArtifactWriter {
public:
    explicit ArtifactWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
    }

    void write(const std::string& relative, const std::string& content) {
        const auto path = dir_ / relative;
        std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + path.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        files_[relative] = {content.size(), fnv1a64(content)};
    }

    void note_external(const std::string& relative) {
        const auto path = dir_ / relative;
        std::ifstream in(path, std::ios::binary);
        std::string content((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
        files_[relative] = {content.size(), fnv1a64(content)};
    }

    const std::filesystem::path& dir() const { return dir_; }

    nlohmann::json manifest_files() const {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& [rel, info] : files_) {
            char hash[20];
            std::snprintf(hash, sizeof hash, "%016llx",
                          static_cast<unsigned long long>(info.second));
            arr.push_back({{"path", rel}, {"bytes", info.first}, {"fnv1a64", hash}});
        }
        return arr;
    }

private:
    std::filesystem::path dir_;
    std::map<std::string, std::pair<std::size_t, std::uint64_t>> files_;
};

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline std::map<std::string, ColumnType> load_schema(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open schema: " + path);
    const nlohmann::json j = nlohmann::json::parse(in);
    std::map<std::string, ColumnType> schema;
    for (const auto& [column, type] : j.items()) {
        const auto t = type.get<std::string>();
        if (t == "numeric") schema[column] = ColumnType::Numeric;
        else if (t == "categorical") schema[column] = ColumnType::Categorical;
        else if (t == "timestamp") schema[column] = ColumnType::Timestamp;
        else throw std::runtime_error("schema: unknown type '" + t + "' for " + column);
    }
    return schema;
}

inline std::uint64_t split_fingerprint(const ClientDataset& client) {
    std::string bytes;
    for (auto idx : client.split.test) {
        bytes.append(reinterpret_cast<const char*>(&idx), sizeof idx);
        const double v = client.y[idx];
        bytes.append(reinterpret_cast<const char*>(&v), sizeof v);
    }
    return fnv1a64(bytes);
}

inline nlohmann::json importance_to_json(const std::vector<ImportanceDistribution>& dists) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& d : dists)
        arr.push_back({{"client_id", d.client_id},
                       {"values", d.values},
                       {"noisy", d.noisy},
                       {"uniform_fallback", d.uniform_fallback}});
    return arr;
}

}  // namespace detail

/// Loads the CSV source and runs the preprocessing chain: encode, then prune
/// and ANOVA-rank on the union of the clients' train rows, then restrict
/// every client to the shared selected columns.
inline std::vector<ClientDataset> load_csv_clients(const CsvSourceConfig& src,
                                                   std::uint64_t seed,
                                                   std::vector<std::string>* warnings = nullptr) {
    const auto schema = detail::load_schema(src.schema_path);
    const RawTable table = ingest_csv(src.path, schema, src.region_column, src.target_column);
    const auto y = target_values(table, src.target_column);
    const EncodedFeatures encoded = encode_features(
        table, src.cardinality_threshold, {src.region_column, src.target_column});

    PartitionOptions opts;
    opts.test_fraction = src.test_fraction;
    opts.seed = seed;
    opts.min_samples = src.min_region_samples;
    auto clients = partition_by_region(table, encoded.X, encoded.names, y, opts, warnings);
    if (clients.empty()) throw std::runtime_error("csv: no region met the size threshold");

    // feature selection on the pooled train rows
    std::size_t train_rows = 0;
    for (const auto& c : clients) train_rows += c.split.train.size();
    Matrix pooled(train_rows, encoded.X.cols());
    std::vector<double> pooled_y(train_rows);
    std::size_t r = 0;
    for (const auto& c : clients)
        for (auto idx : c.split.train) {
            for (std::size_t j = 0; j < c.X.cols(); ++j) pooled(r, j) = c.X(idx, j);
            pooled_y[r] = c.y[idx];
            ++r;
        }

    const PruneResult pruned = prune_correlated(pooled, encoded.names, src.pearson_threshold);
    auto ranked = rank_features_anova(pruned.X, pooled_y, src.anova_p_threshold, pruned.names);
    if (ranked.empty()) throw std::runtime_error("csv: no feature passed the ANOVA threshold");
    if (ranked.size() > src.top_k_features) ranked.resize(src.top_k_features);

    // map selected (pruned-space) columns back to encoded-space indices
    std::map<std::string, std::size_t> encoded_index;
    for (std::size_t j = 0; j < encoded.names.size(); ++j)
        encoded_index[encoded.names[j]] = j;
    std::vector<std::size_t> keep;
    std::vector<std::string> kept_names;
    for (const auto& e : ranked) {
        keep.push_back(encoded_index.at(e.name));
        kept_names.push_back(e.name);
    }
    for (auto& c : clients) {
        c.X = c.X.select_columns(keep);
        c.feature_names = kept_names;
        c.validate();
    }
    return clients;
}

struct ExperimentArtifacts {
    ExperimentReport report;
    std::vector<std::string> warnings;
};

/// Runs the configured pipeline end to end and writes every artifact under
/// the output directory. Rerunning with the same config and seed reproduces
/// all files byte-identically except the timestamp fields in manifest.json
/// and report.json.
inline ExperimentArtifacts run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto start = std::chrono::steady_clock::now();
    detail::ArtifactWriter writer(cfg.output_dir);
    const nlohmann::json echo = config_echo_json(cfg);

    auto fail = [&](const std::string& stage, const std::exception& e) -> StageError {
        nlohmann::json manifest;
        manifest["version"] = kVersion;
        manifest["created_utc"] = detail::utc_timestamp();
        manifest["config"] = echo;
        manifest["seed"] = cfg.seed;
        manifest["error"] = std::string("[stage:") + stage + "] " + e.what();
        manifest["files"] = writer.manifest_files();
        writer.write("manifest.json", manifest.dump(2) + "\n");
        return StageError(stage, e.what());
    };

    ExperimentArtifacts artifacts;

    // --- data ---
    std::vector<ClientDataset> clients;
    try {
        if (cfg.synthetic) {
            SyntheticSpec spec = *cfg.synthetic;
            spec.seed = derive_seed(cfg.seed, "data");
            clients = generate_synthetic(spec).clients;
        } else {
            clients = load_csv_clients(*cfg.csv, cfg.seed, &artifacts.warnings);
        }
        if (clients.empty()) throw std::runtime_error("no clients produced");
        for (const auto& c : clients)
            if (c.X.cols() != clients.front().X.cols())
                throw std::runtime_error("clients disagree on feature count");
    } catch (const std::exception& e) {
        throw fail("data", e);
    }

    const bool needs_clustering = cfg.runs("pa_cfl");
    std::vector<ImportanceDistribution> clean_dists, noisy_dists;
    std::vector<double> sensitivities, sigmas;
    BubbleAssignment assignment;

    // --- importance + privacy ---
    if (needs_clustering) {
        try {
            const PrivacyBudget budget(cfg.epsilon);
            for (const auto& client : clients) {
                GbtConfig gbt = cfg.gbt;
                gbt.seed = derive_seed(cfg.seed, "gbt", client.client_id);
                const Matrix Xtr = client.train_X();
                const auto ytr = client.train_y();
                const GbtModel model = train_gbt(Xtr, ytr, gbt);
                ImportanceDistribution clean =
                    normalize(feature_importance(model), client.client_id, false);
                const Sensitivity delta = local_sensitivity(
                    Xtr, ytr, gbt, cfg.sensitivity_subsample, client.client_id);
                const NoiseScale sigma = noise_scale(delta, budget);
                Rng noise_rng(derive_seed(cfg.seed, "noise", client.client_id));
                ImportanceDistribution noisy = normalize(
                    perturb(clean, sigma.sigma, noise_rng), client.client_id, true);
                sensitivities.push_back(delta.delta);
                sigmas.push_back(sigma.sigma);
                clean_dists.push_back(std::move(clean));
                noisy_dists.push_back(std::move(noisy));
            }
        } catch (const std::exception& e) {
            throw fail("importance", e);
        }

        // --- clustering ---
        try {
            const std::size_t n = clients.size();
            if (n == 2) {
                // DBI is undefined here; both clients form one bubble by decree
                assignment.k_star = 1;
                assignment.labels = {0, 0};
                assignment.singleton_flags = {false, false};
            } else {
                const DistanceMatrix dm = cfg.distance_metric == DistanceMetric::Emd
                                              ? pairwise_distances(noisy_dists)
                                              : pairwise_cosine_distances(noisy_dists);
                if (cfg.k_override)
                    assignment = assign_with_k(dm, *cfg.k_override, {2, n - 1},
                                               cfg.dbi_variant);
                else
                    assignment = select_k(dm, {2, n - 1}, cfg.dbi_variant);
            }
            for (const auto& c : clients) assignment.client_ids.push_back(c.client_id);
        } catch (const std::exception& e) {
            throw fail("clustering", e);
        }
    }

    // --- training ---
    std::map<std::string, std::map<std::string, ClientMethodResult>> results;
    std::vector<RoundRecord> round_log;
    std::map<std::string, std::map<std::string, std::vector<double>>> loss_curves;
    std::map<std::string, ModelWeights> saved_weights;  // relative artifact name -> weights
    try {
        ForecasterConfig fc = cfg.forecaster;
        fc.seed = derive_seed(cfg.seed, "forecaster");
        const Forecaster model(clients.front().X.cols(), fc);
        const ModelWeights init = model.init_weights();

        std::vector<TrainingClient> training;
        std::vector<Standardizer> scalers;
        std::vector<std::uint64_t> fingerprints;
        for (const auto& client : clients) {
            const Matrix Xtr_raw = client.train_X();
            const auto ytr_raw = client.train_y();
            Standardizer scaler = Standardizer::fit(Xtr_raw, ytr_raw);
            TrainingClient t;
            t.client_id = client.client_id;
            t.seed = client.seed;
            t.train = make_sequences(scaler.transform(Xtr_raw), scaler.transform_y(ytr_raw),
                                     fc.sequence_length);
            t.eval = make_sequences(scaler.transform(client.test_X()),
                                    scaler.transform_y(client.test_y()), fc.sequence_length);
            training.push_back(std::move(t));
            scalers.push_back(std::move(scaler));
            fingerprints.push_back(detail::split_fingerprint(client));
        }

        auto evaluate = [&](const std::string& method, std::size_t client_idx,
                            const ModelWeights& w) {
            const auto& client = clients[client_idx];
            const auto preds_std = model.predict(w, training[client_idx].eval);
            const auto preds = scalers[client_idx].destandardize_y(preds_std);
            ClientMethodResult r;
            r.metrics = metrics(client.test_y(), preds);
            r.split_fingerprint = fingerprints[client_idx];
            results[method][client.client_id] = r;
        };
        auto index_of = [&](const std::string& id) {
            for (std::size_t i = 0; i < clients.size(); ++i)
                if (clients[i].client_id == id) return i;
            throw std::logic_error("unknown client id " + id);
        };

        if (cfg.runs("local")) {
            const auto local =
                run_baseline_local(model, init, training, cfg.forecaster.epochs);
            for (const auto& [id, w] : local.client_weights) {
                evaluate("local", index_of(id), w);
                saved_weights["weights/local_" + id + ".bin"] = w;
            }
            for (const auto& [id, curve] : local.loss_curves) loss_curves["local"][id] = curve;
        }
        if (cfg.runs("pooled")) {
            const auto pooled = run_baseline_pooled(model, init, training, cfg.rounds);
            for (const auto& [id, w] : pooled.client_weights) evaluate("pooled", index_of(id), w);
            round_log.insert(round_log.end(), pooled.rounds.begin(), pooled.rounds.end());
            saved_weights["weights/pooled.bin"] = pooled.final_weights;
        }
        if (cfg.runs("pa_cfl")) {
            const auto fed = run_pa_cfl(model, init, training, assignment, cfg.rounds);
            for (const auto& [id, w] : fed.client_weights) evaluate("pa_cfl", index_of(id), w);
            for (std::size_t idx : fed.excluded) {
                ClientMethodResult r;
                r.excluded = true;
                r.split_fingerprint = fingerprints[idx];
                results["pa_cfl"][clients[idx].client_id] = r;
            }
            round_log.insert(round_log.end(), fed.rounds.begin(), fed.rounds.end());
            std::set<std::size_t> seen;
            for (std::size_t c = 0; c < assignment.labels.size(); ++c) {
                const std::size_t b = assignment.labels[c];
                if (assignment.singleton_flags[c] || seen.count(b)) continue;
                seen.insert(b);
                const auto& id = clients[c].client_id;
                saved_weights["weights/pa_cfl_bubble" + std::to_string(b) + ".bin"] =
                    fed.client_weights.at(id);
            }
        }
    } catch (const std::exception& e) {
        throw fail("training", e);
    }

    // --- report + artifacts ---
    try {
        artifacts.report = build_report(results, assignment);
        artifacts.report.config_echo = echo;
        artifacts.report.seed = cfg.seed;
        artifacts.report.wall_clock_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

        writer.write("report.csv", report_to_csv(artifacts.report));
        writer.write("report.json", report_to_json(artifacts.report).dump(2) + "\n");

        if (needs_clustering) {
            nlohmann::json a;
            a["k_star"] = assignment.k_star;
            a["labels"] = nlohmann::json::object();
            for (std::size_t c = 0; c < assignment.labels.size(); ++c)
                a["labels"][assignment.client_ids[c]] = assignment.labels[c];
            a["singletons"] = nlohmann::json::array();
            for (std::size_t c = 0; c < assignment.labels.size(); ++c)
                if (assignment.singleton_flags[c])
                    a["singletons"].push_back(assignment.client_ids[c]);
            a["dbi_by_k"] = nlohmann::json::object();
            for (const auto& [k, v] : assignment.dbi_by_k)
                a["dbi_by_k"][std::to_string(k)] = v;
            a["sensitivity"] = nlohmann::json::object();
            a["noise_scale"] = nlohmann::json::object();
            for (std::size_t c = 0; c < clients.size(); ++c) {
                a["sensitivity"][clients[c].client_id] = sensitivities[c];
                a["noise_scale"][clients[c].client_id] = sigmas[c];
            }
            writer.write("assignment.json", a.dump(2) + "\n");

            std::string trace = "k,dbi\n";
            for (const auto& [k, v] : assignment.dbi_by_k)
                trace += std::to_string(k) + "," + detail::format_double(v) + "\n";
            writer.write("dbi_trace.csv", trace);

            writer.write("importance_noisy.json",
                         detail::importance_to_json(noisy_dists).dump(2) + "\n");
            // clean importance never leaves the client stage unless asked
            if (cfg.export_clean_importance)
                writer.write("importance_clean.json",
                             detail::importance_to_json(clean_dists).dump(2) + "\n");
        }

        if (!round_log.empty()) {
            std::string jsonl;
            for (const auto& r : round_log) {
                nlohmann::json rec = {{"method", r.scope},
                                      {"bubble", r.bubble},
                                      {"round", r.round},
                                      {"weight_delta", r.weight_delta},
                                      {"val_loss", r.client_eval_loss}};
                if (!r.dropped_clients.empty()) rec["dropped"] = r.dropped_clients;
                jsonl += rec.dump() + "\n";
            }
            writer.write("rounds.jsonl", jsonl);
        }

        for (const auto& [rel, w] : saved_weights) {
            const auto bin = writer.dir() / rel;
            std::filesystem::create_directories(bin.parent_path());
            save_weights(w, bin.string(), bin.string() + ".layout.json");
            writer.note_external(rel);
            writer.note_external(rel + ".layout.json");
        }
        for (const auto& [method, curves] : loss_curves)
            for (const auto& [id, curve] : curves) {
                std::string csv = "epoch,loss\n";
                for (std::size_t e = 0; e < curve.size(); ++e)
                    csv += std::to_string(e) + "," + detail::format_double(curve[e]) + "\n";
                writer.write("curves/" + method + "_" + id + ".csv", csv);
            }

        nlohmann::json manifest;
        manifest["version"] = kVersion;
        manifest["created_utc"] = detail::utc_timestamp();
        manifest["config"] = echo;
        manifest["seed"] = cfg.seed;
        if (!artifacts.warnings.empty()) manifest["warnings"] = artifacts.warnings;
        manifest["files"] = writer.manifest_files();
        writer.write("manifest.json", manifest.dump(2) + "\n");
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw fail("report", e);
    }
    return artifacts;
}

}  // namespace pacfl
