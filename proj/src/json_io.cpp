#include "drm/json_io.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <iomanip>
#include <sstream>

namespace drm {

void to_json(nlohmann::json& j, const Box& b) { j = nlohmann::json::array({b.x1, b.y1, b.x2, b.y2}); }

void from_json(const nlohmann::json& j, Box& b) {
  if (!j.is_array() || j.size() != 4) throw ValidationError("box must be a 4-tuple of floats");
  b = Box{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

void to_json(nlohmann::json& j, const EntityInstance& e) {
  j = {{"category_id", e.category_id}, {"box", e.box}, {"appearance_seed", e.appearance_seed}};
}

void from_json(const nlohmann::json& j, EntityInstance& e) {
  e.category_id = j.at("category_id").get<int>();
  e.box = j.at("box").get<Box>();
  e.appearance_seed = j.at("appearance_seed").get<std::uint64_t>();
}

void to_json(nlohmann::json& j, const RelationAnnotation& r) {
  j = {{"subject_index", r.subject_index},
       {"object_index", r.object_index},
       {"predicate_id", r.predicate_id}};
}

void from_json(const nlohmann::json& j, RelationAnnotation& r) {
  r.subject_index = j.at("subject_index").get<int>();
  r.object_index = j.at("object_index").get<int>();
  r.predicate_id = j.at("predicate_id").get<int>();
}

void to_json(nlohmann::json& j, const SceneGraphSample& s) {
  j = {{"sample_id", s.sample_id}, {"entities", s.entities}, {"relations", s.relations}};
}

void from_json(const nlohmann::json& j, SceneGraphSample& s) {
  s.sample_id = j.at("sample_id").get<std::string>();
  s.entities = j.at("entities").get<std::vector<EntityInstance>>();
  s.relations = j.at("relations").get<std::vector<RelationAnnotation>>();
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  nlohmann::json compat = nlohmann::json::array();
  for (const auto& pairs : s.triplet_compatibility) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& p : pairs) list.push_back({p.subject, p.object});
    compat.push_back(list);
  }
  nlohmann::json rules = nlohmann::json::array();
  for (auto r : s.geometry_rules) rules.push_back(to_string(r));
  j = {{"num_entity_categories", s.num_entity_categories},
       {"num_predicate_categories", s.num_predicate_categories},
       {"zipf_exponent", s.zipf_exponent},
       {"triplet_zipf_exponent", s.triplet_zipf_exponent},
       {"triplet_compatibility", compat},
       {"geometry_rules", rules},
       {"samples_per_split",
        {{"train", s.train_samples}, {"val", s.val_samples}, {"test", s.test_samples}}},
       {"entities_per_sample", {s.min_entities, s.max_entities}},
       {"box_noise", s.box_noise},
       {"appearance_noise", s.appearance_noise}};
}

// Keys left out keep the default spec's values.
void from_json(const nlohmann::json& j, DatasetSpec& s) {
  const DatasetSpec d = default_dataset_spec();
  s = d;
  s.num_entity_categories = j.value("num_entity_categories", d.num_entity_categories);
  s.num_predicate_categories = j.value("num_predicate_categories", d.num_predicate_categories);
  s.zipf_exponent = j.value("zipf_exponent", d.zipf_exponent);
  s.triplet_zipf_exponent = j.value("triplet_zipf_exponent", d.triplet_zipf_exponent);
  if (j.contains("triplet_compatibility")) {
    s.triplet_compatibility.clear();
    for (const auto& list : j.at("triplet_compatibility")) {
      std::vector<CategoryPair> pairs;
      for (const auto& p : list) pairs.push_back({p.at(0).get<int>(), p.at(1).get<int>()});
      s.triplet_compatibility.push_back(std::move(pairs));
    }
  }
  if (j.contains("geometry_rules")) {
    s.geometry_rules.clear();
    for (const auto& r : j.at("geometry_rules")) {
      s.geometry_rules.push_back(geometry_rule_from_string(r.get<std::string>()));
    }
  }
  if (j.contains("samples_per_split")) {
    const auto& c = j.at("samples_per_split");
    s.train_samples = c.value("train", d.train_samples);
    s.val_samples = c.value("val", d.val_samples);
    s.test_samples = c.value("test", d.test_samples);
  }
  if (j.contains("entities_per_sample")) {
    s.min_entities = j.at("entities_per_sample").at(0).get<int>();
    s.max_entities = j.at("entities_per_sample").at(1).get<int>();
  }
  s.box_noise = j.value("box_noise", d.box_noise);
  s.appearance_noise = j.value("appearance_noise", d.appearance_noise);
}

std::string read_text(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

nlohmann::json read_json(const std::filesystem::path& file) {
  const std::string text = read_text(file);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(file.string() + ": " + e.what());
  }
}

void write_bytes_atomic(const std::filesystem::path& file, const std::string& bytes) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::filesystem::path tmp = file;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, file);
}

void write_text_atomic(const std::filesystem::path& file, const std::string& text) {
  write_bytes_atomic(file, text);
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) {
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return out.str();
}

}  // namespace drm
