#pragma once

// Command-line front end. Kept in a library so tests can drive it in-process.

#include <filesystem>
#include <string>
#include <string_view>

namespace taxcl::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kIo = 3 };

int run_cli(int argc, char** argv);

// Hex SHA-256 of a byte string / of a file's contents.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace taxcl::cli
