#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "tint/aux_model.hpp"

// Checkpoint directory layout:
//   manifest.json  format tag, schema version, config block, and per tensor
//                  {name, shape, dtype, offset} with offsets into weights.bin
//   weights.bin    16-byte header ("TINTBLOB", u32 byte-order mark 0x01020304,
//                  u32 schema version, all little-endian) followed by raw
//                  little-endian f32 data in manifest order
namespace tint {

inline constexpr int kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// `config_json` is a serialized JSON object stored verbatim under "config".
void write_tensor_bundle(const std::filesystem::path& dir, const NamedTensors& tensors,
                         const std::string& config_json, const std::string& format);
struct TensorBundle {
  NamedTensors tensors;
  std::string config_json;
  std::string format;
};
TensorBundle read_tensor_bundle(const std::filesystem::path& dir);

std::string aux_config_to_json(const AuxConfig& config);
AuxConfig aux_config_from_json(const std::string& json_text);

void write_checkpoint(const std::filesystem::path& dir, const AuxModel& model);
// Throws IoError on malformed manifests or blobs, naming any missing tensor.
AuxModel read_checkpoint(const std::filesystem::path& dir);

}  // namespace tint
