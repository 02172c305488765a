#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace popgrid::csv {

/// Header-addressed table. Supports RFC 4180 quoting; all cells are kept as text.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    /// Column position by name; throws naming the missing column.
    std::size_t column(std::string_view name) const;
    bool has_column(std::string_view name) const;
};

Table parse(std::string_view text);
Table read(const std::filesystem::path& path);

std::string escape(std::string_view field);
std::string join_row(const std::vector<std::string>& fields);

/// Shortest decimal form that round-trips a double.
std::string format_double(double v);
double parse_double(std::string_view field, std::string_view context);
long long parse_int(std::string_view field, std::string_view context);

}  // namespace popgrid::csv
