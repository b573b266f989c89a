#pragma once

#include <string>
#include <vector>

namespace waterseg {

// Aligned plain-text table: header row, a dashed rule, then one line per
// row, cells separated by " | ".
std::string format_table(const std::vector<std::string>& headers, const std::vector<std::vector<std::string>>& rows);

// Splits a rendered row on '|' and trims each cell.
std::vector<std::string> split_table_row(const std::string& line);

} // namespace waterseg
