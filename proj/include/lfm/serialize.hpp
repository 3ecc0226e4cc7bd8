#pragma once

// Binary tensor blocks and the self-describing container used by checkpoints,
// datasets and rollout outputs.
//
// Container layout:
//   line 1: compact JSON header terminated by '\n' (includes "format",
//           "version" and "payload_digest")
//   payload: sequence of records {u64 name length, name bytes, tensor block}
// Tensor block: u64 rank, u64 extents[rank], float32 values, all little-endian.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfm/tensor.hpp"

namespace lfm {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DigestError : public FormatError {
 public:
  using FormatError::FormatError;
};

constexpr int kContainerVersion = 1;

/// 64-bit FNV-1a, hex encoded.
std::string fnv1a_hex(std::string_view bytes);
/// Digest of a JSON value's canonical (sorted-key, compact) dump.
std::string json_digest(const nlohmann::json& j);

void write_tensor(std::ostream& os, const Tensor<float>& t);
Tensor<float> read_tensor(std::istream& is);

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

void write_container(const std::filesystem::path& path, nlohmann::json header,
                     const NamedTensors& tensors);

struct Container {
  nlohmann::json header;
  NamedTensors tensors;
};

/// Reads and validates a container; `expected_format` must match header["format"].
Container read_container(const std::filesystem::path& path, const std::string& expected_format);

}  // namespace lfm
