#pragma once

#include <charconv>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "qdalign/error.hpp"

namespace qdalign {

/// Plain comma-separated table: one header row, no quoting (fields never contain commas).
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(std::string_view name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw FormatError(fmt::format("csv: missing column '{}'", name));
    }
};

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = line.find(',', start);
        out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

}  // namespace detail

inline CsvTable parse_csv(std::string_view text) {
    CsvTable t;
    std::size_t start = 0;
    bool first = true;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        auto line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        start = end + 1;
        if (line.empty()) continue;
        auto fields = detail::split_csv_line(line);
        if (first) {
            t.header = std::move(fields);
            first = false;
            continue;
        }
        if (fields.size() != t.header.size())
            throw FormatError(fmt::format("csv: row {} has {} fields, header has {}", t.rows.size() + 1, fields.size(), t.header.size()));
        t.rows.push_back(std::move(fields));
    }
    if (first) throw FormatError("csv: empty document");
    return t;
}

inline std::string format_csv(const CsvTable& t) {
    std::string out;
    auto line = [&out](const std::vector<std::string>& f) {
        for (std::size_t i = 0; i < f.size(); ++i) {
            if (i) out += ',';
            out += f[i];
        }
        out += '\n';
    };
    line(t.header);
    for (const auto& r : t.rows) line(r);
    return out;
}

inline double parse_double(std::string_view s) {
    double v = 0.0;
    const auto* b = s.data();
    const auto* e = s.data() + s.size();
    while (b < e && *b == ' ') ++b;
    if (b < e && *b == '+') ++b;
    const auto res = std::from_chars(b, e, v);
    if (res.ec != std::errc{} || res.ptr != e) throw FormatError(fmt::format("csv: not a number: '{}'", s));
    return v;
}

/// Shortest round-trip representation.
inline std::string format_double(double v) { return fmt::format("{}", v); }

}  // namespace qdalign
