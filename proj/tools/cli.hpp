#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace waterseg {

// Exit codes: 0 success, 1 runtime failure (one "error: <kind>: <message>"
// line on err), 2 usage error (usage text on err).
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace waterseg
