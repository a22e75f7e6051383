#pragma once

// Flat key=value configuration. One `key = value` per line; `#` starts a
// comment; blank lines are ignored. Every training key has a default (see
// train_config_keys()).

#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "freqtune/trainer.hpp"

namespace freqtune {

struct ConfigKey {
  std::string_view name;
  std::string_view help;
};

/// All training keys, in documentation order.
const std::vector<ConfigKey>& train_config_keys();

using ConfigValues = std::map<std::string, std::string>;

/// Parses a config stream. Duplicate keys and lines without '=' are errors
/// naming `source` and the line number.
ConfigValues parse_config(std::istream& in, const std::string& source = "config");
ConfigValues read_config_file(const std::filesystem::path& path);

/// Applies `values` over the defaults. `backbone` is applied first so that
/// warm-up and view defaults follow it unless set explicitly; likewise the
/// data/dropout/mask/augment seeds default to seed+1..seed+4. Keys that are
/// neither training keys nor listed in `extra_keys` are rejected (listing
/// them all) unless `ignore_unknown`. The result is not validated.
TrainConfig resolve_train_config(const ConfigValues& values, std::span<const std::string> extra_keys = {},
                                 bool ignore_unknown = false);

/// "key = value" lines for every training key, sorted by key.
void write_config(std::ostream& out, const TrainConfig& config);

std::string format_real(double v);

}  // namespace freqtune
