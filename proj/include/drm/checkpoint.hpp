#pragma once

#include "drm/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace drm {

inline constexpr const char* kCheckpointVersion = "drm-v1";

// Binary layout: magic "DRMCKPT\n", u32 header length, JSON header
// {"version", "model", "meta"}, u32 tensor count, then per tensor
// u32 name length, name, i64 rows, i64 cols, u8 trainable, row-major f64 data.
// Integers and doubles are stored in host (little-endian) order.
void save_checkpoint(const DrmModel& model, const std::filesystem::path& file,
                     const nlohmann::json& meta = nlohmann::json::object());

struct LoadedCheckpoint {
  DrmModel model;
  nlohmann::json meta;
};

// Throws std::runtime_error on a bad magic, version, or truncated payload.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& file);

}  // namespace drm
