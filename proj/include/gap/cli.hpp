#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gap::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// Runs `gap <command> [flags]`; args excludes the program name.
// Commands: gen-data, train, sample, eval, retrieve, select-view.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int main(int argc, char** argv);

}  // namespace gap::cli
