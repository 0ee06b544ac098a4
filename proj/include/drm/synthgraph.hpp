#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace drm {

// Normalized (x1, y1, x2, y2) with x1 < x2 and y1 < y2.
struct Box {
  double x1 = 0, y1 = 0, x2 = 1, y2 = 1;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool operator==(const Box&) const = default;
};

struct EntityInstance {
  int category_id = 0;
  Box box;
  std::uint64_t appearance_seed = 0;
  bool operator==(const EntityInstance&) const = default;
};

struct RelationAnnotation {
  int subject_index = 0;
  int object_index = 0;
  int predicate_id = 0;
  bool operator==(const RelationAnnotation&) const = default;
};

struct SceneGraphSample {
  std::string sample_id;
  std::vector<EntityInstance> entities;
  std::vector<RelationAnnotation> relations;
  bool operator==(const SceneGraphSample&) const = default;
};

// Box-layout template a predicate's subject/object pair follows. Image y grows downward.
enum class GeometryRule { Above, Below, LeftOf, RightOf, Inside, Contains, Overlap };

const char* to_string(GeometryRule rule);
GeometryRule geometry_rule_from_string(const std::string& name);
// Decision rule on raw box coordinates; exact on noise-free layouts.
bool satisfies(GeometryRule rule, const Box& subject, const Box& object);

struct CategoryPair {
  int subject = 0;
  int object = 0;
  auto operator<=>(const CategoryPair&) const = default;
};

struct DatasetSpec {
  int num_entity_categories = 20;
  int num_predicate_categories = 10;
  double zipf_exponent = 1.5;
  // Skew of triplet types within one predicate's compatibility list.
  double triplet_zipf_exponent = 1.0;
  std::vector<std::vector<CategoryPair>> triplet_compatibility;  // per predicate
  std::vector<GeometryRule> geometry_rules;                      // per predicate
  int train_samples = 1500;
  int val_samples = 200;
  int test_samples = 300;
  int min_entities = 3;
  int max_entities = 6;
  // Std-dev of Gaussian noise added to every box coordinate.
  double box_noise = 0.01;
  // Std-dev of per-instance appearance noise around the category prototype.
  double appearance_noise = 0.5;

  bool operator==(const DatasetSpec&) const = default;
};

// Deterministic default: C_e=20, C_p=10, 1500/200/300 samples. Tail predicates
// share geometry with a head predicate and borrow its two rarest category pairs.
DatasetSpec default_dataset_spec();

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void validate(const DatasetSpec& spec);
void validate(const SceneGraphSample& sample, int num_entity_categories, int num_predicates);

struct Dataset {
  DatasetSpec spec;
  std::vector<SceneGraphSample> train;
  std::vector<SceneGraphSample> val;
  std::vector<SceneGraphSample> test;
  bool operator==(const Dataset&) const = default;
};

enum class Split { Train, Val, Test };
const char* to_string(Split split);
const std::vector<SceneGraphSample>& split_of(const Dataset& d, Split split);

Dataset generate_dataset(const DatasetSpec& spec, std::uint64_t seed);

struct TripletKey {
  int subject_category = 0;
  int predicate = 0;
  int object_category = 0;
  auto operator<=>(const TripletKey&) const = default;
};

std::string to_string(const TripletKey& key);

struct FrequencyTable {
  std::vector<long> predicate_counts;
  std::map<TripletKey, long> triplet_counts;

  long total() const;
};

FrequencyTable frequency_table(const std::vector<SceneGraphSample>& split, int num_predicates);

// One JSON document per split: train.json, val.json, test.json.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Single-split file helpers.
void save_split(const DatasetSpec& spec, const std::vector<SceneGraphSample>& samples,
                const std::filesystem::path& file);
std::pair<DatasetSpec, std::vector<SceneGraphSample>> load_split(
    const std::filesystem::path& file);

}  // namespace drm
