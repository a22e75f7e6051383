#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace freqtune {

inline constexpr std::string_view kToolVersion = "0.3.0";

/// Record of one command invocation. `arguments` is the fully resolved
/// command line (every default materialised), so replaying it reproduces the
/// run. No timestamps: identical runs write identical manifests.
struct RunManifest {
  std::string tool_version{kToolVersion};
  std::string command;
  std::vector<std::string> arguments;
  std::map<std::string, std::string> config;
  std::map<std::string, std::string> seeds;
  std::map<std::string, std::string> inputs;   ///< path -> sha256
  std::map<std::string, std::string> outputs;  ///< artifact name -> path
};

/// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

std::string to_json(const RunManifest& manifest);
RunManifest manifest_from_json(std::string_view text);

void write_manifest(const std::filesystem::path& path, const RunManifest& manifest);
RunManifest read_manifest(const std::filesystem::path& path);

/// Inputs whose current digest differs from the recorded one (or that are
/// missing), as "path: recorded X, now Y" lines.
std::vector<std::string> changed_inputs(const RunManifest& manifest);

}  // namespace freqtune
