#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "amortda/common.hpp"

namespace amortda {

// On-disk container: 8-byte magic, u64 little-endian JSON length, UTF-8 JSON
// header, then a flat little-endian array of 64-bit reals whose length is
// fully determined by the header. Round-trips are bit-exact.

struct Container {
  nlohmann::json header;
  std::vector<double> payload;
};

void write_container(const std::string& path, const std::string& magic,
                     const nlohmann::json& header, const std::vector<double>& payload);

Container read_container(const std::string& path, const std::string& expected_magic);

}  // namespace amortda
