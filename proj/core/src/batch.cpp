#include "flm/batch.hpp"

#include <cstring>
#include <fstream>

#include "flm/error.hpp"

namespace flm {

namespace {

constexpr char kMagic[8] = {'F', 'L', 'M', 'P', 'A', 'C', 'K', '\0'};
constexpr std::uint32_t kVersion = 1;

void put_u(std::ostream& out, std::uint64_t v, std::size_t bytes) {
  for (std::size_t i = 0; i < bytes; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u(std::istream& in, std::size_t bytes) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < bytes; ++i) {
    const int c = in.get();
    if (c == EOF) throw ValidationError("packed data: truncated file");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

void put_ids(std::ostream& out, const std::vector<std::int32_t>& ids) {
  for (auto id : ids) put_u(out, static_cast<std::uint32_t>(id), 4);
}

std::vector<std::int32_t> get_ids(std::istream& in, std::size_t n) {
  std::vector<std::int32_t> ids(n);
  for (auto& id : ids) id = static_cast<std::int32_t>(static_cast<std::uint32_t>(get_u(in, 4)));
  return ids;
}

}  // namespace

std::size_t PackedBatch::predicted_tokens() const noexcept {
  std::size_t n = 0;
  for (auto t : targets) n += t >= 0 ? 1 : 0;
  return n;
}

std::size_t PackedBatch::non_pad_tokens() const noexcept {
  if (segments.empty()) return size();
  std::size_t n = 0;
  for (auto s : segments) n += s >= 0 ? 1 : 0;
  return n;
}

void save_packed(const PackedBatch& b, const std::string& path) {
  const std::size_t n = b.size();
  if (b.tokens.size() != n || b.targets.size() != n || (!b.segments.empty() && b.segments.size() != n) ||
      (!b.positions.empty() && b.positions.size() != n)) {
    throw InvalidArgument("save_packed: inconsistent batch");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out.write(kMagic, sizeof kMagic);
  put_u(out, kVersion, 4);
  put_u(out, b.rows, 8);
  put_u(out, b.seq, 8);
  put_u(out, (b.segments.empty() ? 0 : 1) | (b.positions.empty() ? 0 : 2), 1);
  put_ids(out, b.tokens);
  put_ids(out, b.targets);
  put_ids(out, b.segments);
  put_ids(out, b.positions);
  if (!out) throw Error("write failed: " + path);
}

PackedBatch load_packed(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot read packed data " + path);
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw ValidationError(path + ": not a packed data file");
  }
  if (get_u(in, 4) != kVersion) throw ValidationError(path + ": unsupported packed data version");
  PackedBatch b;
  b.rows = get_u(in, 8);
  b.seq = get_u(in, 8);
  const auto flags = get_u(in, 1);
  if (b.seq == 0 || b.rows > (std::uint64_t{1} << 40) / b.seq) throw ValidationError(path + ": bad dimensions");
  b.tokens = get_ids(in, b.size());
  b.targets = get_ids(in, b.size());
  if (flags & 1) b.segments = get_ids(in, b.size());
  if (flags & 2) b.positions = get_ids(in, b.size());
  if (in.peek() != EOF) throw ValidationError(path + ": trailing bytes");
  return b;
}

}  // namespace flm
