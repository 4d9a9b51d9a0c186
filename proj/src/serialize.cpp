#include "amortda/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "container format is little-endian; big-endian hosts unsupported");

namespace amortda {

void write_container(const std::string& path, const std::string& magic,
                     const nlohmann::json& header, const std::vector<double>& payload) {
  if (magic.size() != 8) throw Error("write_container: magic must be 8 bytes");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("write_container: cannot open " + path);
  f.write(magic.data(), 8);
  const std::string js = header.dump();
  const uint64_t len = js.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof(len));
  f.write(js.data(), (std::streamsize)js.size());
  f.write(reinterpret_cast<const char*>(payload.data()),
          (std::streamsize)(payload.size() * sizeof(double)));
  if (!f) throw Error("write_container: write failed for " + path);
}

Container read_container(const std::string& path, const std::string& expected_magic) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("read_container: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::string(magic, 8) != expected_magic)
    throw Error("read_container: bad magic in " + path);
  uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!f || len > (1ULL << 32)) throw Error("read_container: corrupt header length in " + path);
  std::string js((size_t)len, '\0');
  f.read(js.data(), (std::streamsize)len);
  if (!f) throw Error("read_container: truncated header in " + path);
  Container c;
  c.header = nlohmann::json::parse(js, nullptr, /*allow_exceptions=*/false);
  if (c.header.is_discarded()) throw Error("read_container: invalid JSON header in " + path);
  f.seekg(0, std::ios::end);
  const auto end = f.tellg();
  f.seekg(8 + (std::streamoff)sizeof(uint64_t) + (std::streamoff)len, std::ios::beg);
  const auto begin = f.tellg();
  const size_t bytes = (size_t)(end - begin);
  if (bytes % sizeof(double) != 0) throw Error("read_container: payload not 8-byte aligned");
  c.payload.resize(bytes / sizeof(double));
  f.read(reinterpret_cast<char*>(c.payload.data()), (std::streamsize)bytes);
  if (!f) throw Error("read_container: truncated payload in " + path);
  return c;
}

}  // namespace amortda
