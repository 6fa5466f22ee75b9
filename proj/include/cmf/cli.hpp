#pragma once

#include <string>
#include <vector>

namespace cmf {

// Full command-line entry point; args exclude the program name. Returns the
// process exit code: 0 success, 2 missing artifact, 3 schema violation, 1
// any other failure. Every nonzero path also writes error.json.
int cli_main(const std::vector<std::string>& args);

}  // namespace cmf
