#pragma once

#include "drm/attention.hpp"
#include "drm/featurizer.hpp"

#include <json.hpp>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace drm {

struct ModelConfig {
  int num_entity_classes = 20;
  int num_predicates = 10;
  FeatureDims features;
  AttentionConfig attention;
  int projection_dim = 32;
  int classifier_hidden = 64;
  // Ablation switches for the predicate (P) and triplet (T) cue encoders.
  bool use_predicate_encoder = true;
  bool use_triplet_encoder = true;
  double appearance_noise = 0.5;
  std::uint64_t table_seed = 1234;
  std::uint64_t init_seed = 1;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

inline constexpr int kPredicateEncoderLayers = 2;
inline constexpr int kTripletEncoderLayers = 2;

// Parameter name prefixes. Everything but the relation classifier is frozen in stage 2.
namespace prefix {
inline const std::string kTables = "tables";
inline const std::string kEntityEncoder = "ent";
inline const std::string kPredicateEncoder = "prd";
inline const std::string kTripletEncoder = "tpt";
inline const std::string kPredicateProjection = "proj_p";
inline const std::string kTripletProjection = "proj_t";
inline const std::string kRelationClassifier = "rel_cls";
inline const std::string kEntityClassifier = "ent_cls";
}  // namespace prefix

// Names of the parameter groups frozen during classifier fine-tuning.
std::vector<std::string> frozen_prefixes();

// Predicate (M x N) and entity (N x M) cross-attention masks of the predicate
// cue encoder: pair (i, j) sees entities i and j; entity k sees pairs incident to k.
BoolMatrix predicate_to_entity_mask(const PairIndex& pairs, int num_entities);
BoolMatrix entity_to_predicate_mask(const PairIndex& pairs, int num_entities);

struct EncoderProbes {
  std::vector<HybridProbe> predicate_encoder;
};

// Nodes produced by one forward pass over a single scene.
struct EncodedScene {
  Var v;              // N x d_v entity features
  Var v_prime;        // N x d refined entities
  Var entity_logits;  // N x C_e
  Var p;              // M x d_u union features
  Var p_prime;        // M x d
  Var t_prime;        // M x d
  std::vector<int> triplet_labels;  // entity labels behind s' in the triplet encoder
};

class DrmModel {
 public:
  explicit DrmModel(ModelConfig cfg);
  // Rebuilds a model around loaded parameters (checkpoint path).
  DrmModel(ModelConfig cfg, ParameterStore params);

  const ModelConfig& config() const { return cfg_; }
  const FeatureTables& tables() const { return tables_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  // Entity encoder, entity classifier, predicate and triplet cue encoders.
  // `s_prime_labels` picks the word embeddings fed to the triplet encoder;
  // when null the entity classifier's argmax is used.
  EncodedScene encode(Tape& tape, const Matrix& entity, const Matrix& semantic,
                      const Matrix& union_feats, const PairIndex& pairs,
                      const std::vector<int>* s_prime_labels,
                      EncoderProbes* probes = nullptr) const;

  Var project_predicate(Tape& tape, Var p_prime) const;
  Var project_triplet(Tape& tape, Var t_prime) const;
  // Fused two-layer head over [p', t'] (only the enabled branches).
  Var relation_logits(Tape& tape, Var p_prime, Var t_prime) const;
  Var relation_logits(Tape& tape, Var fused) const;
  Var entity_logits(Tape& tape, Var v_prime) const;

  int relation_input_dim() const;
  // Concatenation fed to the relation classifier.
  Var relation_input(Var p_prime, Var t_prime) const;

 private:
  void init_params();

  ModelConfig cfg_;
  ParameterStore params_;
  FeatureTables tables_;
};

}  // namespace drm
