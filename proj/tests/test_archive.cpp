#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "shike/archive.hpp"
#include "shike/errors.hpp"

using namespace shike;
namespace fs = std::filesystem;

TEST_CASE("archive round trip and hash") {
  const fs::path dir = fs::temp_directory_path() / "shike_test_archive";
  fs::create_directories(dir);
  ArrayArchive a;
  a.header = {{"kind", "demo"}, {"n", 3}};
  a.arrays.emplace_back("x", Tensor({2, 2}, std::vector<double>{1, 2, 3, 4}));
  a.arrays.emplace_back("scalar", Tensor({1}, std::vector<double>{-0.5}));
  write_archive(dir / "a.bin", a);
  const auto b = read_archive(dir / "a.bin");
  CHECK(b.header == a.header);
  CHECK(b.get("x") == a.get("x"));
  CHECK(b.contains("scalar"));
  CHECK_FALSE(b.contains("y"));
  CHECK_THROWS(b.get("y"));
  write_archive(dir / "b.bin", a);
  CHECK(file_hash(dir / "a.bin") == file_hash(dir / "b.bin"));
  CHECK(file_hash(dir / "a.bin").size() == 16);

  {
    std::ofstream bad(dir / "bad.bin", std::ios::binary);
    bad << "NOTANARCHIVE";
  }
  CHECK_THROWS_AS(read_archive(dir / "bad.bin"), FormatError);
  fs::resize_file(dir / "b.bin", fs::file_size(dir / "b.bin") - 5);
  CHECK_THROWS_AS(read_archive(dir / "b.bin"), FormatError);
  CHECK_THROWS(read_archive(dir / "missing.bin"));
  fs::remove_all(dir);
}
