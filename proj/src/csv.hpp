#pragma once

// Minimal CSV reading/writing used by the exporters. Fields are plain
// (no quoting); blank lines and lines starting with '#' are skipped.

#include "codesign/errors.hpp"

#include <charconv>
#include <cstdio>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

namespace codesign::csv {

struct Row {
    std::size_t line;
    std::vector<std::string> fields;
};

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<Row> read(std::istream& in) {
    std::vector<Row> rows;
    std::string line;
    std::size_t no = 0;
    while (std::getline(in, line)) {
        ++no;
        const std::string t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        Row row{no, {}};
        std::size_t start = 0;
        while (true) {
            const auto comma = t.find(',', start);
            row.fields.push_back(trim(t.substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline double parse_double(const std::string& text, const std::string& source, std::size_t line) {
    double v = 0.0;
    const char* first = text.data();
    const char* last = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last) throw ParseError(source, line, "malformed number '" + text + "'");
    return v;
}

/// Round-trippable representation.
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_row(std::ostream& out, const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) out << (i ? "," : "") << fields[i];
    out << '\n';
}

inline void write_row(std::ostream& out, const std::vector<double>& values) {
    for (std::size_t i = 0; i < values.size(); ++i) out << (i ? "," : "") << format_double(values[i]);
    out << '\n';
}

}  // namespace codesign::csv
