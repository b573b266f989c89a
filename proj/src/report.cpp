#include "waterseg/report.hpp"

#include <algorithm>
#include <sstream>

namespace waterseg {

std::string format_table(const std::vector<std::string>& headers, const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> widths(headers.size());
    for (std::size_t c = 0; c < headers.size(); ++c) widths[c] = headers[c].size();
    for (const auto& row : rows)
        for (std::size_t c = 0; c < row.size() && c < widths.size(); ++c) widths[c] = std::max(widths[c], row[c].size());

    auto emit = [&](std::ostringstream& os, const std::vector<std::string>& cells) {
        for (std::size_t c = 0; c < widths.size(); ++c) {
            const std::string cell = c < cells.size() ? cells[c] : "";
            if (c) os << " | ";
            os << cell;
            if (c + 1 < widths.size()) os << std::string(widths[c] - cell.size(), ' ');
        }
        os << '\n';
    };
    std::ostringstream os;
    emit(os, headers);
    std::size_t rule = 0;
    for (std::size_t c = 0; c < widths.size(); ++c) rule += widths[c] + (c ? 3 : 0);
    os << std::string(rule, '-') << '\n';
    for (const auto& row : rows) emit(os, row);
    return os.str();
}

std::vector<std::string> split_table_row(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '|')) {
        const auto b = cell.find_first_not_of(" \t");
        const auto e = cell.find_last_not_of(" \t\r\n");
        cells.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
    }
    return cells;
}

} // namespace waterseg
