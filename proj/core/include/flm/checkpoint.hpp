#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "flm/model.hpp"

namespace flm {

// Checkpoint layout (all integers little-endian):
//
//   bytes 0..7    magic "FLMCKPT\0"
//   bytes 8..11   u32 format version (1)
//   bytes 12..19  u64 header length H
//   next H bytes  UTF-8 JSON header:
//                   {"format": "flm-checkpoint", "version": 1,
//                    "config": {...ModelConfig...},
//                    "multipliers": {"input_mult": x, "output_mult": y},
//                    "tensors": [{"name", "shape", "offset", "count"}, ...],
//                    "metadata": {...caller supplied...}}
//   remainder     float64 payload, little-endian; "offset" and "count" are
//                 in elements from the start of the payload
//
// Tensors are written in Model::parameters() order, so save/load is
// bit-exact.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::string& path,
                     const nlohmann::json& metadata = nlohmann::json::object());

struct LoadedCheckpoint {
  Model model;
  nlohmann::json metadata;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace flm
