#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace countsteer {

// Exit codes: 0 success, 1 usage, 2 I/O or format, 3 numeric, 4 feasibility.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
// args[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace countsteer
