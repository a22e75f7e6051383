#pragma once

// Flat binary checkpoint layout (all integers unsigned 64-bit little-endian,
// all values IEEE-754 binary64 little-endian):
//
//   magic       8 bytes  "FQTCKPT1"
//   header_len  u64      byte length of the header text
//   header      text     "key=value\n" lines, sorted by key
//   block_count u64
//   block_count times:
//     name_len u64, name bytes
//     rank u64, rank x u64 dims
//     product(dims) x f64, row-major
//   trailer     8 bytes  "FQTEND\0\0"
//
// Identical contents produce identical bytes.

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "freqtune/encoder.hpp"

namespace freqtune {

struct CheckpointBlock {
  std::string name;
  Shape shape;
  RealMatrix values;  ///< storage layout of `shape`
};

struct Checkpoint {
  std::map<std::string, std::string> header;
  std::vector<CheckpointBlock> blocks;

  const CheckpointBlock* find(std::string_view name) const;
  const CheckpointBlock& block(std::string_view name) const;
  const std::string& header_value(const std::string& key) const;
};

void write_checkpoint(std::ostream& out, const Checkpoint& checkpoint);
/// Reads a whole checkpoint; throws FormatError on any truncation or
/// corruption, before anything is handed back.
Checkpoint read_checkpoint(std::istream& in);

/// Writes to a sibling temporary file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// "key: expected X, found Y" for every listed key that differs or is missing.
std::vector<std::string> header_mismatches(const std::map<std::string, std::string>& expected,
                                           const std::map<std::string, std::string>& actual);

/// Copies `values` into the tensor after checking the shape.
void assign_block(RealTensor& target, const CheckpointBlock& block);
CheckpointBlock make_block(std::string name, const RealTensor& tensor);

}  // namespace freqtune
