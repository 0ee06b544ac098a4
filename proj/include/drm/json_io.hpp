#pragma once

#include "drm/synthgraph.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <string_view>

namespace drm {

void to_json(nlohmann::json& j, const Box& b);
void from_json(const nlohmann::json& j, Box& b);
void to_json(nlohmann::json& j, const EntityInstance& e);
void from_json(const nlohmann::json& j, EntityInstance& e);
void to_json(nlohmann::json& j, const RelationAnnotation& r);
void from_json(const nlohmann::json& j, RelationAnnotation& r);
void to_json(nlohmann::json& j, const SceneGraphSample& s);
void from_json(const nlohmann::json& j, SceneGraphSample& s);
void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

nlohmann::json read_json(const std::filesystem::path& file);
std::string read_text(const std::filesystem::path& file);
// Writes to a sibling temp file, then renames over the target.
void write_text_atomic(const std::filesystem::path& file, const std::string& text);
void write_bytes_atomic(const std::filesystem::path& file, const std::string& bytes);

// Lower-case hex SHA-256 digest.
std::string sha256_hex(std::string_view bytes);

}  // namespace drm
