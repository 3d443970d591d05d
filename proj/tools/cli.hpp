#pragma once

#include <string>
#include <vector>

namespace fruitgrader::cli {

/// Runs one subcommand. 0 success, 1 usage error, 2 runtime error.
int cli_main(int argc, const char* const* argv);
int cli_main(const std::vector<std::string>& args);  // args[0] is the program name

}  // namespace fruitgrader::cli
