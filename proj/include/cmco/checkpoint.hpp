#pragma once

#include <filesystem>

#include "cmco/deeponet.hpp"
#include "cmco/io.hpp"

namespace cmco {

inline constexpr int kCheckpointFormatVersion = 1;

io::json to_json(const BranchConfig& cfg);
io::json to_json(const TrunkConfig& cfg);
io::json to_json(const NormStats& stats);
BranchConfig branch_config_from_json(const io::json& j);
TrunkConfig trunk_config_from_json(const io::json& j);
NormStats norm_stats_from_json(const io::json& j);

// Checkpoint directory layout:
//   manifest.json  configs, normalization stats, parameter names/shapes in
//                  serialization order, format version
//   params.bin     float32 little-endian, parameters concatenated in order
void save_checkpoint(const std::filesystem::path& dir, const DeepONetModel& model);
DeepONetModel load_checkpoint(const std::filesystem::path& dir);

// Model with every parameter rounded through float32, i.e. what a
// save/load cycle returns.
DeepONetModel round_trip_f32(DeepONetModel model);

}  // namespace cmco
