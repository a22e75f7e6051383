#include "freqtune/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "freqtune/error.hpp"

namespace freqtune {

namespace {

constexpr std::array<char, 8> kMagic{'F', 'Q', 'T', 'C', 'K', 'P', 'T', '1'};
constexpr std::array<char, 8> kTrailer{'F', 'Q', 'T', 'E', 'N', 'D', '\0', '\0'};
constexpr std::uint64_t kMaxName = 1 << 16;
constexpr std::uint64_t kMaxRank = 8;

void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> bytes;
  for (int i = 0; i < 8; ++i) bytes[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes.data(), 8);
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  void bytes(char* dst, std::size_t n, std::string_view what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw FormatError("checkpoint truncated while reading " + std::string(what));
  }

  std::uint64_t u64(std::string_view what) {
    std::array<unsigned char, 8> b;
    bytes(reinterpret_cast<char*>(b.data()), 8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
    return v;
  }

  double f64(std::string_view what) { return std::bit_cast<double>(u64(what)); }

 private:
  std::istream& in_;
};

}  // namespace

const CheckpointBlock* Checkpoint::find(std::string_view name) const {
  for (const auto& b : blocks)
    if (b.name == name) return &b;
  return nullptr;
}

const CheckpointBlock& Checkpoint::block(std::string_view name) const {
  if (const auto* b = find(name)) return *b;
  throw FormatError("checkpoint has no block '" + std::string(name) + "'");
}

const std::string& Checkpoint::header_value(const std::string& key) const {
  auto it = header.find(key);
  if (it == header.end()) throw FormatError("checkpoint header lacks '" + key + "'");
  return it->second;
}

void write_checkpoint(std::ostream& out, const Checkpoint& checkpoint) {
  std::string header;
  for (const auto& [k, v] : checkpoint.header) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw UsageError("checkpoint header entry '" + k + "' contains a reserved character");
    header += k + "=" + v + "\n";
  }
  out.write(kMagic.data(), kMagic.size());
  put_u64(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  put_u64(out, checkpoint.blocks.size());
  for (const auto& b : checkpoint.blocks) {
    if (shape_numel(b.shape) != b.values.size())
      throw ShapeError("checkpoint block '" + b.name + "' shape does not match its values");
    put_u64(out, b.name.size());
    out.write(b.name.data(), static_cast<std::streamsize>(b.name.size()));
    put_u64(out, b.shape.size());
    for (Index d : b.shape) put_u64(out, static_cast<std::uint64_t>(d));
    for (Index i = 0; i < b.values.size(); ++i) put_f64(out, b.values.data()[i]);
  }
  out.write(kTrailer.data(), kTrailer.size());
  if (!out) throw FormatError("checkpoint write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
  Reader r(in);
  std::array<char, 8> magic;
  r.bytes(magic.data(), magic.size(), "magic");
  if (magic != kMagic) throw FormatError("not a checkpoint file (bad magic)");

  Checkpoint ck;
  const auto header_len = r.u64("header length");
  if (header_len > (1u << 24)) throw FormatError("checkpoint header length implausible");
  std::string header(header_len, '\0');
  r.bytes(header.data(), header.size(), "header");
  std::size_t start = 0;
  while (start < header.size()) {
    const auto nl = header.find('\n', start);
    if (nl == std::string::npos) throw FormatError("checkpoint header not newline-terminated");
    const std::string line = header.substr(start, nl - start);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint header line without '='");
    ck.header[line.substr(0, eq)] = line.substr(eq + 1);
    start = nl + 1;
  }

  const auto count = r.u64("block count");
  for (std::uint64_t b = 0; b < count; ++b) {
    CheckpointBlock block;
    const auto name_len = r.u64("block name length");
    if (name_len > kMaxName) throw FormatError("checkpoint block name length implausible");
    block.name.resize(name_len);
    r.bytes(block.name.data(), name_len, "block name");
    const auto rank = r.u64("block rank");
    if (rank > kMaxRank) throw FormatError("checkpoint block '" + block.name + "' rank implausible");
    for (std::uint64_t d = 0; d < rank; ++d) block.shape.push_back(static_cast<Index>(r.u64("block dims")));
    const auto [rows, cols] = detail::storage_dims(block.shape);
    if (rows < 0 || cols < 0 || (cols > 0 && rows > (Index{1} << 40) / cols))
      throw FormatError("checkpoint block '" + block.name + "' size implausible");
    block.values.resize(rows, cols);
    for (Index i = 0; i < block.values.size(); ++i) block.values.data()[i] = r.f64(block.name);
    ck.blocks.push_back(std::move(block));
  }
  std::array<char, 8> trailer;
  r.bytes(trailer.data(), trailer.size(), "trailer");
  if (trailer != kTrailer) throw FormatError("checkpoint trailer missing or corrupt");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
    write_checkpoint(out, checkpoint);
    out.flush();
    if (!out) throw FormatError("write to " + tmp.string() + " failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw FormatError("cannot move checkpoint into " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

std::vector<std::string> header_mismatches(const std::map<std::string, std::string>& expected,
                                           const std::map<std::string, std::string>& actual) {
  std::vector<std::string> out;
  for (const auto& [k, v] : expected) {
    auto it = actual.find(k);
    if (it == actual.end())
      out.push_back(k + ": expected " + v + ", missing");
    else if (it->second != v)
      out.push_back(k + ": expected " + v + ", found " + it->second);
  }
  return out;
}

void assign_block(RealTensor& target, const CheckpointBlock& block) {
  if (block.shape != target.shape())
    throw FormatError("checkpoint block '" + block.name + "' has shape " + shape_string(block.shape) +
                      ", expected " + shape_string(target.shape()));
  target.mutable_value() = block.values;
}

CheckpointBlock make_block(std::string name, const RealTensor& tensor) {
  return {std::move(name), tensor.shape(), tensor.value()};
}

}  // namespace freqtune
