#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sqz/errors.hpp"

namespace sqz {

class ModelGraph;

// Binary checkpoint layout, all integers little-endian:
//
//   "SQZP" | u32 version | u32 layer_count
//   per layer:
//     u32 name_len | name bytes (UTF-8)
//     u8  kind
//     u32 block_len | block bytes
//     attribute block: u32 n_inputs | i32 inputs[n_inputs]
//                      i32 channels | i32 kernel | i32 stride | i32 pad | i32 height | i32 width
//     shape table:     u32 n_tensors, then per tensor
//                      u32 name_len | name bytes | u8 trainable | u32 rank | u32 dims[rank]
//   payload: every tensor's f32 values, layers and tensors in declaration order
constexpr char kCheckpointMagic[4] = {'S', 'Q', 'Z', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointErrc {
  kIo = 1,
  kBadMagic = 2,
  kUnsupportedVersion = 3,
  kCorruptHeader = 4,
  kShapeMismatch = 5,
  kTruncatedPayload = 6,
  kTrailingData = 7,
};

class CheckpointError : public IoError {
 public:
  CheckpointError(CheckpointErrc code, const std::string& what) : IoError(what), code_(code) {}
  CheckpointErrc code() const { return code_; }

 private:
  CheckpointErrc code_;
};

std::vector<std::uint8_t> serialize(const ModelGraph& model);
ModelGraph deserialize(const std::vector<std::uint8_t>& bytes);

// Exact number of bytes serialize() would produce.
std::size_t serialized_size(const ModelGraph& model);

// Writes the binary checkpoint plus a JSON topology sidecar at `path` + ".json".
void save_checkpoint(const ModelGraph& model, const std::filesystem::path& path);
ModelGraph load_checkpoint(const std::filesystem::path& path);

std::string topology_json(const ModelGraph& model);

}  // namespace sqz
