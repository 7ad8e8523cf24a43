#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pacfl {

/// Minimal RFC-4180 reader: comma-separated, double-quote quoting with ""
/// escapes, tolerates both LF and CRLF line endings. Quoted fields may
/// contain commas and newlines.
class CsvReader {
public:
    explicit CsvReader(std::istream& in) : in_(in) {}

    /// Reads one record. Returns false at end of input.
    bool next(std::vector<std::string>& fields) {
        fields.clear();
        int c = in_.get();
        if (c == EOF) return false;
        std::string field;
        bool quoted = false;
        while (true) {
            if (quoted) {
                if (c == EOF) throw std::runtime_error("csv: unterminated quoted field");
                if (c == '"') {
                    const int peek = in_.peek();
                    if (peek == '"') {
                        field.push_back('"');
                        in_.get();
                    } else {
                        quoted = false;
                    }
                } else {
                    field.push_back(static_cast<char>(c));
                }
            } else {
                if (c == EOF || c == '\n') {
                    if (!field.empty() && field.back() == '\r') field.pop_back();
                    fields.push_back(std::move(field));
                    return true;
                }
                if (c == ',') {
                    fields.push_back(std::move(field));
                    field.clear();
                } else if (c == '"' && field.empty()) {
                    quoted = true;
                } else {
                    field.push_back(static_cast<char>(c));
                }
            }
            c = in_.get();
        }
    }

private:
    std::istream& in_;
};

inline std::vector<std::vector<std::string>> read_csv_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("csv: cannot open file: " + path);
    CsvReader reader(in);
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> fields;
    while (reader.next(fields)) {
        if (fields.size() == 1 && fields[0].empty()) continue;  // blank line
        records.push_back(fields);
    }
    return records;
}

}  // namespace pacfl
