#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pacfl/csv.hpp"
#include "pacfl/matrix.hpp"
#include "pacfl/rng.hpp"
#include "pacfl/stats.hpp"

namespace pacfl {

enum class ColumnType { Numeric, Categorical, Timestamp };

/// Calendar timestamp, second resolution, parsed from ISO-8601.
struct Timestamp {
    int year = 1970;
    int month = 1;
    int day = 1;
    int hour = 0;
    int minute = 0;
    int second = 0;

    // Days since 1970-01-01 (proleptic Gregorian).
    long long days_since_epoch() const {
        long long y = year;
        const int m = month;
        y -= m <= 2;
        const long long era = (y >= 0 ? y : y - 399) / 400;
        const unsigned yoe = static_cast<unsigned>(y - era * 400);
        const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2) / 5 + day - 1;
        const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
        return era * 146097 + static_cast<long long>(doe) - 719468;
    }

    long long sort_key() const {
        return days_since_epoch() * 86400ll + hour * 3600ll + minute * 60ll + second;
    }

    // ISO-8601 weekday, Monday = 1 .. Sunday = 7.
    int iso_weekday() const {
        const long long d = days_since_epoch();
        return static_cast<int>(((d % 7) + 10) % 7) + 1;  // 1970-01-01 was a Thursday
    }

    // ISO-8601 week number: the week of this date's Thursday, counted from
    // January 1 of that Thursday's year.
    int iso_week() const {
        const long long thursday = days_since_epoch() + (4 - iso_weekday());
        const long long z = thursday + 719468;
        const long long era = (z >= 0 ? z : z - 146096) / 146097;
        const unsigned doe = static_cast<unsigned>(z - era * 146097);
        const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
        const long long y = static_cast<long long>(yoe) + era * 400;
        const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
        const unsigned mp = (5 * doy + 2) / 153;
        const int iso_year = static_cast<int>(y + (mp >= 10));
        const Timestamp jan1{iso_year, 1, 1};
        return static_cast<int>((thursday - jan1.days_since_epoch()) / 7) + 1;
    }

    static std::optional<Timestamp> parse(const std::string& s) {
        Timestamp t;
        int n = 0;
        if (std::sscanf(s.c_str(), "%d-%d-%dT%d:%d:%d%n", &t.year, &t.month, &t.day,
                        &t.hour, &t.minute, &t.second, &n) >= 5 ||
            std::sscanf(s.c_str(), "%d-%d-%d %d:%d:%d%n", &t.year, &t.month, &t.day,
                        &t.hour, &t.minute, &t.second, &n) >= 5) {
        } else if (std::sscanf(s.c_str(), "%d-%d-%d%n", &t.year, &t.month, &t.day, &n) == 3 &&
                   n == static_cast<int>(s.size())) {
            t.hour = t.minute = t.second = 0;
        } else {
            return std::nullopt;
        }
        if (t.month < 1 || t.month > 12 || t.day < 1 || t.day > 31) return std::nullopt;
        if (t.hour < 0 || t.hour > 23 || t.minute < 0 || t.minute > 59 || t.second < 0 ||
            t.second > 60)
            return std::nullopt;
        return t;
    }
};

struct Column {
    std::string name;
    ColumnType type = ColumnType::Numeric;
    std::vector<double> numbers;
    std::vector<std::string> labels;
    std::vector<Timestamp> times;
    std::vector<char> missing;  // per-row: 1 when the cell held no value
};

/// Typed columnar table as ingested from CSV. Every column has one entry per
/// surviving row; missing cells carry an explicit flag.
struct RawTable {
    std::vector<Column> columns;
    std::size_t n_rows = 0;
    std::string region_column;
    std::size_t dropped_rows = 0;

    const Column& column(const std::string& name) const {
        for (const auto& c : columns)
            if (c.name == name) return c;
        throw std::out_of_range("no such column: " + name);
    }
    bool has_column(const std::string& name) const {
        for (const auto& c : columns)
            if (c.name == name) return true;
        return false;
    }
};

namespace detail {

inline std::optional<double> parse_number(const std::string& s) {
    if (s.empty()) return std::nullopt;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

inline bool is_blank(const std::string& s) {
    return s.find_first_not_of(" \t") == std::string::npos;
}

}  // namespace detail

/// Reads a CSV with a header row into a typed RawTable. Cells that are blank
/// become missing markers. Rows whose region or target cell is missing or
/// fails to parse are dropped and counted, as are malformed rows.
inline RawTable ingest_csv(const std::string& path,
                           const std::map<std::string, ColumnType>& schema,
                           const std::string& region_column,
                           const std::string& target_column = {}) {
    const auto records = read_csv_file(path);
    if (records.empty()) throw std::runtime_error("ingest: empty csv: " + path);

    const auto& header = records.front();
    std::map<std::string, std::size_t> position;
    for (std::size_t i = 0; i < header.size(); ++i) position[header[i]] = i;

    for (const auto& [name, type] : schema)
        if (!position.count(name))
            throw std::runtime_error("ingest: schema column missing from header: " + name);
    const auto region_it = schema.find(region_column);
    if (region_it == schema.end() || region_it->second != ColumnType::Categorical)
        throw std::runtime_error("ingest: region column must be a categorical schema column: " +
                                 region_column);

    RawTable table;
    table.region_column = region_column;
    for (const auto& [name, type] : schema) table.columns.push_back(Column{name, type});

    for (std::size_t r = 1; r < records.size(); ++r) {
        const auto& rec = records[r];
        if (rec.size() != header.size()) {
            ++table.dropped_rows;
            continue;
        }
        // First pass: required columns (region, target) must parse.
        bool drop = false;
        for (const auto& c : table.columns) {
            const bool required = c.name == region_column || c.name == target_column;
            if (!required) continue;
            const std::string& cell = rec[position.at(c.name)];
            if (detail::is_blank(cell)) {
                drop = true;
            } else if (c.type == ColumnType::Numeric && !detail::parse_number(cell)) {
                drop = true;
            } else if (c.type == ColumnType::Timestamp && !Timestamp::parse(cell)) {
                drop = true;
            }
        }
        if (drop) {
            ++table.dropped_rows;
            continue;
        }
        for (auto& c : table.columns) {
            const std::string& cell = rec[position.at(c.name)];
            bool miss = detail::is_blank(cell);
            double num = 0.0;
            Timestamp ts;
            std::string label;
            if (!miss) {
                switch (c.type) {
                    case ColumnType::Numeric: {
                        auto v = detail::parse_number(cell);
                        if (v)
                            num = *v;
                        else
                            miss = true;  // unparseable non-required cell -> missing
                        break;
                    }
                    case ColumnType::Timestamp: {
                        auto v = Timestamp::parse(cell);
                        if (v)
                            ts = *v;
                        else
                            miss = true;
                        break;
                    }
                    case ColumnType::Categorical:
                        label = cell;
                        break;
                }
            }
            c.numbers.push_back(num);
            c.labels.push_back(label);
            c.times.push_back(ts);
            c.missing.push_back(miss ? 1 : 0);
        }
        ++table.n_rows;
    }
    if (table.n_rows == 0) throw std::runtime_error("ingest: no surviving rows in " + path);
    return table;
}

struct EncodedFeatures {
    Matrix X;
    std::vector<std::string> names;
};

namespace detail {

inline double median(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median of empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// Turns typed columns into a numeric feature matrix. Low-cardinality
/// categoricals expand to one-hot blocks, high-cardinality ones become
/// integer label codes, timestamps expand to year/month/week/day/hour, and
/// numerics pass through (median-imputed where missing). Missing categorical
/// cells form a "MISSING" category.
inline EncodedFeatures encode_features(const RawTable& table,
                                       std::size_t cardinality_threshold,
                                       const std::set<std::string>& exclude = {}) {
    if (table.n_rows == 0) throw std::invalid_argument("encode: empty table");
    EncodedFeatures out;
    std::vector<std::vector<double>> cols;  // column-major staging

    for (const auto& c : table.columns) {
        if (exclude.count(c.name)) continue;
        const bool all_missing =
            std::all_of(c.missing.begin(), c.missing.end(), [](char m) { return m != 0; });
        if (all_missing) throw std::runtime_error("encode: all-missing column: " + c.name);

        switch (c.type) {
            case ColumnType::Numeric: {
                std::vector<double> present;
                for (std::size_t i = 0; i < table.n_rows; ++i)
                    if (!c.missing[i]) present.push_back(c.numbers[i]);
                const double fill = detail::median(std::move(present));
                std::vector<double> v(table.n_rows);
                for (std::size_t i = 0; i < table.n_rows; ++i)
                    v[i] = c.missing[i] ? fill : c.numbers[i];
                out.names.push_back(c.name);
                cols.push_back(std::move(v));
                break;
            }
            case ColumnType::Categorical: {
                std::set<std::string> distinct;
                for (std::size_t i = 0; i < table.n_rows; ++i)
                    distinct.insert(c.missing[i] ? std::string("MISSING") : c.labels[i]);
                auto value_of = [&](std::size_t i) {
                    return c.missing[i] ? std::string("MISSING") : c.labels[i];
                };
                if (distinct.size() <= cardinality_threshold) {
                    for (const auto& v : distinct) {
                        std::vector<double> col(table.n_rows, 0.0);
                        for (std::size_t i = 0; i < table.n_rows; ++i)
                            col[i] = value_of(i) == v ? 1.0 : 0.0;
                        out.names.push_back(c.name + "=" + v);
                        cols.push_back(std::move(col));
                    }
                } else {
                    std::map<std::string, double> code;
                    double next = 0.0;
                    for (const auto& v : distinct) code[v] = next++;
                    std::vector<double> col(table.n_rows);
                    for (std::size_t i = 0; i < table.n_rows; ++i) col[i] = code[value_of(i)];
                    out.names.push_back(c.name);
                    cols.push_back(std::move(col));
                }
                break;
            }
            case ColumnType::Timestamp: {
                static const char* parts[] = {"year", "month", "week", "day", "hour"};
                std::vector<std::vector<double>> expanded(5);
                for (int p = 0; p < 5; ++p) expanded[p].resize(table.n_rows);
                std::vector<std::vector<double>> present(5);
                for (std::size_t i = 0; i < table.n_rows; ++i) {
                    if (c.missing[i]) continue;
                    const auto& t = c.times[i];
                    const double vals[5] = {double(t.year), double(t.month),
                                            double(t.iso_week()), double(t.day),
                                            double(t.hour)};
                    for (int p = 0; p < 5; ++p) present[p].push_back(vals[p]);
                }
                std::vector<double> fills(5);
                for (int p = 0; p < 5; ++p) fills[p] = detail::median(present[p]);
                for (std::size_t i = 0; i < table.n_rows; ++i) {
                    if (c.missing[i]) {
                        for (int p = 0; p < 5; ++p) expanded[p][i] = fills[p];
                    } else {
                        const auto& t = c.times[i];
                        expanded[0][i] = t.year;
                        expanded[1][i] = t.month;
                        expanded[2][i] = t.iso_week();
                        expanded[3][i] = t.day;
                        expanded[4][i] = t.hour;
                    }
                }
                for (int p = 0; p < 5; ++p) {
                    out.names.push_back(c.name + "." + parts[p]);
                    cols.push_back(std::move(expanded[p]));
                }
                break;
            }
        }
    }

    out.X = Matrix(table.n_rows, cols.size());
    for (std::size_t j = 0; j < cols.size(); ++j)
        for (std::size_t i = 0; i < table.n_rows; ++i) out.X(i, j) = cols[j][i];
    return out;
}

struct PruneResult {
    Matrix X;
    std::vector<std::string> names;
    std::vector<std::string> removed;
    std::vector<std::string> zero_variance;  // retained, Pearson undefined
};

/// Removes the later of every pair of columns with |Pearson r| >= threshold.
/// Single deterministic pass in index order.
inline PruneResult prune_correlated(const Matrix& X, const std::vector<std::string>& names,
                                    double threshold) {
    if (!X.all_finite()) throw std::invalid_argument("prune: non-finite input");
    if (names.size() != X.cols()) throw std::invalid_argument("prune: name/column mismatch");
    if (!(threshold > 0.0 && threshold <= 1.0))
        throw std::invalid_argument("prune: threshold must be in (0, 1]");

    const std::size_t p = X.cols();
    std::vector<std::vector<double>> cols(p);
    for (std::size_t j = 0; j < p; ++j) cols[j] = X.column(j);

    PruneResult result;
    std::vector<bool> dropped(p, false);
    std::vector<bool> is_constant(p, false);
    for (std::size_t j = 0; j < p; ++j) {
        if (variance(cols[j]) == 0.0) {
            is_constant[j] = true;
            result.zero_variance.push_back(names[j]);
        }
    }
    for (std::size_t j = 0; j < p; ++j) {
        if (dropped[j] || is_constant[j]) continue;
        for (std::size_t k = j + 1; k < p; ++k) {
            if (dropped[k] || is_constant[k]) continue;
            const double r = pearson(cols[j], cols[k]);
            if (std::fabs(r) >= threshold) {
                dropped[k] = true;
                result.removed.push_back(names[k]);
            }
        }
    }

    std::vector<std::size_t> keep;
    for (std::size_t j = 0; j < p; ++j)
        if (!dropped[j]) keep.push_back(j);
    result.X = X.select_columns(keep);
    for (std::size_t j : keep) result.names.push_back(names[j]);
    return result;
}

struct AnovaEntry {
    std::size_t index = 0;  // column index in the input matrix
    std::string name;
    double f = 0.0;
    double p = 1.0;
};

/// Univariate F-test of each feature against the target. Features with
/// p above the threshold (or zero variance) are excluded; the rest are
/// returned sorted by descending F.
inline std::vector<AnovaEntry> rank_features_anova(const Matrix& X,
                                                   std::span<const double> y,
                                                   double p_threshold,
                                                   const std::vector<std::string>& names = {}) {
    const std::size_t n = X.rows();
    if (n < 3) throw std::invalid_argument("anova: need at least 3 samples");
    if (y.size() != n) throw std::invalid_argument("anova: target length mismatch");

    std::vector<AnovaEntry> kept;
    for (std::size_t j = 0; j < X.cols(); ++j) {
        AnovaEntry e;
        e.index = j;
        e.name = j < names.size() ? names[j] : "f" + std::to_string(j);
        const auto col = X.column(j);
        const double r = pearson(col, y);
        if (std::isnan(r)) continue;  // zero-variance feature: F = 0, excluded
        const double r2 = std::min(r * r, 1.0);
        const double dof = static_cast<double>(n - 2);
        e.f = r2 >= 1.0 ? std::numeric_limits<double>::infinity() : r2 / (1.0 - r2) * dof;
        e.p = f_survival(e.f, 1.0, dof);
        if (e.p > p_threshold) continue;
        kept.push_back(e);
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [](const AnovaEntry& a, const AnovaEntry& b) { return a.f > b.f; });
    return kept;
}

struct SampleSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

/// One client's share of an experiment: features, target, and a frozen
/// train/test split. Feature order is identical across all clients.
struct ClientDataset {
    std::string client_id;
    Matrix X;
    std::vector<double> y;
    std::vector<std::string> feature_names;
    SampleSplit split;
    std::uint64_t seed = 0;

    void validate() const {
        if (X.rows() != y.size()) throw std::invalid_argument("client: X/y row mismatch");
        if (!X.all_finite()) throw std::invalid_argument("client: non-finite features");
        for (double v : y)
            if (!std::isfinite(v)) throw std::invalid_argument("client: non-finite target");
        std::vector<bool> seen(y.size(), false);
        for (auto idx : split.train) seen.at(idx) = true;
        for (auto idx : split.test) {
            if (seen.at(idx)) throw std::invalid_argument("client: overlapping split");
            seen[idx] = true;
        }
        if (!std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }))
            throw std::invalid_argument("client: split does not cover all samples");
    }

    Matrix train_X() const { return X.select_rows(split.train); }
    Matrix test_X() const { return X.select_rows(split.test); }
    std::vector<double> train_y() const {
        std::vector<double> v;
        for (auto i : split.train) v.push_back(y[i]);
        return v;
    }
    std::vector<double> test_y() const {
        std::vector<double> v;
        for (auto i : split.test) v.push_back(y[i]);
        return v;
    }
};

struct PartitionOptions {
    double test_fraction = 0.2;
    std::uint64_t seed = 0;
    std::size_t min_samples = 10;
};

/// Splits the encoded table into one ClientDataset per region. Uses a
/// chronological split when the table carries a timestamp column, otherwise
/// a seeded uniform split. Regions below min_samples are skipped and
/// reported through `warnings`.
inline std::vector<ClientDataset> partition_by_region(
    const RawTable& table, const Matrix& X, const std::vector<std::string>& names,
    std::span<const double> y, const PartitionOptions& opts,
    std::vector<std::string>* warnings = nullptr) {
    if (!(opts.test_fraction > 0.0 && opts.test_fraction < 1.0))
        throw std::invalid_argument("partition: test_fraction must be in (0, 1)");
    if (X.rows() != table.n_rows || y.size() != table.n_rows)
        throw std::invalid_argument("partition: row count mismatch");

    const Column& region = table.column(table.region_column);
    const Column* time_col = nullptr;
    for (const auto& c : table.columns)
        if (c.type == ColumnType::Timestamp) {
            time_col = &c;
            break;
        }

    std::map<std::string, std::vector<std::size_t>> by_region;
    for (std::size_t i = 0; i < table.n_rows; ++i) {
        if (region.missing[i]) continue;
        by_region[region.labels[i]].push_back(i);
    }

    std::vector<ClientDataset> clients;
    for (auto& [name, rows] : by_region) {
        if (rows.size() < opts.min_samples) {
            if (warnings)
                warnings->push_back("region '" + name + "' skipped: only " +
                                    std::to_string(rows.size()) + " samples");
            continue;
        }
        ClientDataset c;
        c.client_id = name;
        c.seed = derive_seed(opts.seed, "client", name);
        c.feature_names = names;

        if (time_col) {
            std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
                const long long ka = time_col->missing[a] ? std::numeric_limits<long long>::min()
                                                          : time_col->times[a].sort_key();
                const long long kb = time_col->missing[b] ? std::numeric_limits<long long>::min()
                                                          : time_col->times[b].sort_key();
                return ka < kb;
            });
        }
        c.X = X.select_rows(rows);
        for (auto i : rows) c.y.push_back(y[i]);

        const std::size_t n = rows.size();
        const auto n_test = static_cast<std::size_t>(
            std::ceil(opts.test_fraction * static_cast<double>(n)));
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        if (!time_col) {
            Rng rng(derive_seed(c.seed, "split"));
            rng.shuffle(order);
        }
        c.split.train.assign(order.begin(), order.end() - n_test);
        c.split.test.assign(order.end() - n_test, order.end());
        if (time_col) {
            // keep index order within each side for readability
        } else {
            std::sort(c.split.train.begin(), c.split.train.end());
            std::sort(c.split.test.begin(), c.split.test.end());
        }
        c.validate();
        clients.push_back(std::move(c));
    }
    return clients;
}

/// Extracts a numeric column as the experiment target.
inline std::vector<double> target_values(const RawTable& table, const std::string& name) {
    const Column& c = table.column(name);
    if (c.type != ColumnType::Numeric)
        throw std::invalid_argument("target column must be numeric: " + name);
    for (char m : c.missing)
        if (m) throw std::invalid_argument("target column has missing values: " + name);
    return c.numbers;
}

}  // namespace pacfl
