// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "qavit/gradcheck.hpp"
#include "qavit/head.hpp"
#include "qavit/training.hpp"

namespace qavit {

/// Corrupt or truncated archive (bad magic, version or CRC).
class IntegrityError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t checkpoint_version = 1;

/// "QAVT", u32 version, u32 count, entries [u16 name length, name, u8 dtype,
/// u8 rank, u32 dims, raw little-endian scalars], trailing CRC32 of all
/// prior bytes. Entries keep the given order.
std::string serialize_tensors(const std::vector<NamedTensor>& tensors);
/// Throws IntegrityError on any framing or CRC problem.
std::vector<NamedTensor> parse_tensors(std::string_view bytes);

/// Registry parameters in registry order.
std::string serialize_registry(const ParameterRegistry& registry);
/// Copies archive values into the registry. Every parameter must appear
/// exactly once with its dtype and shape, otherwise ShapeError.
void load_registry(std::string_view bytes, ParameterRegistry& registry);

/// Optimizer moments ("opt.m.<name>", "opt.v.<name>") and step count.
std::string serialize_optimizer(const OptimizerState& opt);
OptimizerState parse_optimizer(std::string_view bytes, const ParameterRegistry& registry);

std::string read_file(const std::filesystem::path& path);
/// Writes through a temporary file and renames it into place.
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace qavit
