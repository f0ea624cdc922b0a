#include "shike/archive.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "shike/errors.hpp"

namespace shike {
namespace {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

constexpr std::array<char, 8> kMagic{'S', 'H', 'K', 'A', 'R', 'C', '0', '1'};
constexpr std::uint64_t kMaxHeader = 1ull << 30;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw FormatError("truncated archive: " + path.string());
  return v;
}

}  // namespace

const Tensor& ArrayArchive::get(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return t;
  throw FormatError("archive has no array named '" + name + "'");
}

bool ArrayArchive::contains(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return true;
  return false;
}

void write_archive(const std::filesystem::path& path, const ArrayArchive& archive) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open for writing: " + path.string());
  os.write(kMagic.data(), kMagic.size());
  const std::string header = archive.header.dump();
  put<std::uint64_t>(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  put<std::uint64_t>(os, archive.arrays.size());
  for (const auto& [name, t] : archive.arrays) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw FormatError("write failed: " + path.string());
}

ArrayArchive read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open archive: " + path.string());
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic)
    throw FormatError("not a shike archive (bad magic): " + path.string());
  ArrayArchive out;
  const auto header_len = take<std::uint64_t>(is, path);
  if (header_len > kMaxHeader) throw FormatError("corrupt archive header length: " + path.string());
  std::string header(header_len, '\0');
  if (!is.read(header.data(), static_cast<std::streamsize>(header_len)))
    throw FormatError("truncated archive header: " + path.string());
  try {
    out.header = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt archive header in " + path.string() + ": " + e.what());
  }
  const auto count = take<std::uint64_t>(is, path);
  for (std::uint64_t a = 0; a < count; ++a) {
    const auto name_len = take<std::uint32_t>(is, path);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw FormatError("truncated archive: " + path.string());
    const auto rank = take<std::uint32_t>(is, path);
    if (rank > 8) throw FormatError("corrupt array rank in " + path.string());
    Shape shape(rank);
    for (auto& d : shape) d = take<std::uint64_t>(is, path);
    Tensor t(shape);
    if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double))))
      throw FormatError("truncated array '" + name + "' in " + path.string());
    out.arrays.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open for hashing: " + path.string());
  std::uint64_t h = 1469598103934665603ull;
  std::array<char, 1 << 16> buf{};
  while (is) {
    is.read(buf.data(), buf.size());
    const auto n = is.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<std::uint8_t>(buf[static_cast<std::size_t>(i)]);
      h *= 1099511628211ull;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace shike
