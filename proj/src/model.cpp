#include "drm/model.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

namespace drm {

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"num_entity_classes", c.num_entity_classes},
       {"num_predicates", c.num_predicates},
       {"d_visual", c.features.entity},
       {"d_semantic", c.features.semantic},
       {"d_union", c.features.union_},
       {"d_model", c.attention.d_model},
       {"heads", c.attention.heads},
       {"ffn_hidden", c.attention.ffn_hidden},
       {"projection_dim", c.projection_dim},
       {"classifier_hidden", c.classifier_hidden},
       {"use_predicate_encoder", c.use_predicate_encoder},
       {"use_triplet_encoder", c.use_triplet_encoder},
       {"appearance_noise", c.appearance_noise},
       {"table_seed", c.table_seed},
       {"init_seed", c.init_seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  const ModelConfig d;
  c.num_entity_classes = j.value("num_entity_classes", d.num_entity_classes);
  c.num_predicates = j.value("num_predicates", d.num_predicates);
  c.features.entity = j.value("d_visual", d.features.entity);
  c.features.semantic = j.value("d_semantic", d.features.semantic);
  c.features.union_ = j.value("d_union", d.features.union_);
  c.attention.d_model = j.value("d_model", d.attention.d_model);
  c.attention.heads = j.value("heads", d.attention.heads);
  c.attention.ffn_hidden = j.value("ffn_hidden", d.attention.ffn_hidden);
  c.projection_dim = j.value("projection_dim", d.projection_dim);
  c.classifier_hidden = j.value("classifier_hidden", d.classifier_hidden);
  c.use_predicate_encoder = j.value("use_predicate_encoder", d.use_predicate_encoder);
  c.use_triplet_encoder = j.value("use_triplet_encoder", d.use_triplet_encoder);
  c.appearance_noise = j.value("appearance_noise", d.appearance_noise);
  c.table_seed = j.value("table_seed", d.table_seed);
  c.init_seed = j.value("init_seed", d.init_seed);
}

std::vector<std::string> frozen_prefixes() {
  return {prefix::kTables + ".",
          prefix::kEntityEncoder + ".",
          prefix::kPredicateEncoder + ".",
          prefix::kTripletEncoder + ".",
          prefix::kPredicateProjection + ".",
          prefix::kTripletProjection + ".",
          prefix::kEntityClassifier + "."};
}

BoolMatrix predicate_to_entity_mask(const PairIndex& pairs, int num_entities) {
  BoolMatrix m = BoolMatrix::Constant(static_cast<Eigen::Index>(pairs.size()), num_entities, false);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [i, j] = pairs[k];
    if (i < 0 || j < 0 || i >= num_entities || j >= num_entities) {
      throw std::out_of_range("pair references an entity out of range");
    }
    m(static_cast<Eigen::Index>(k), i) = true;
    m(static_cast<Eigen::Index>(k), j) = true;
  }
  return m;
}

BoolMatrix entity_to_predicate_mask(const PairIndex& pairs, int num_entities) {
  return predicate_to_entity_mask(pairs, num_entities).transpose();
}

DrmModel::DrmModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  tables_ = make_feature_tables(cfg_.num_entity_classes, cfg_.features, cfg_.appearance_noise,
                                cfg_.table_seed);
  params_.add(prefix::kTables + ".semantic", tables_.semantic, false);
  params_.add(prefix::kTables + ".prototypes", tables_.prototypes, false);
  params_.add(prefix::kTables + ".union_projection", tables_.union_projection, false);
  init_params();
}

DrmModel::DrmModel(ModelConfig cfg, ParameterStore params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  tables_.dims = cfg_.features;
  tables_.appearance_noise = cfg_.appearance_noise;
  tables_.semantic = params_.get(prefix::kTables + ".semantic").value;
  tables_.prototypes = params_.get(prefix::kTables + ".prototypes").value;
  tables_.union_projection = params_.get(prefix::kTables + ".union_projection").value;
}

int DrmModel::relation_input_dim() const {
  const bool both = cfg_.use_predicate_encoder && cfg_.use_triplet_encoder;
  return cfg_.attention.d_model * (both ? 2 : 1);
}

void DrmModel::init_params() {
  std::mt19937_64 rng(cfg_.init_seed);
  const int d = cfg_.attention.d_model;
  const auto& f = cfg_.features;
  const int d_entity_ctx = d + f.entity;  // e = [v', v]

  add_entity_encoder_params(params_, prefix::kEntityEncoder, cfg_.attention, f.entity, f.semantic,
                            rng);
  add_linear_params(params_, prefix::kEntityClassifier, d, cfg_.num_entity_classes, rng);

  // Union features seed the predicate stream; they must live in the model dim.
  if (f.union_ != d) add_linear_params(params_, prefix::kPredicateEncoder + ".pred_in", f.union_, d, rng);
  if (cfg_.use_predicate_encoder) {
    add_linear_params(params_, prefix::kPredicateEncoder + ".ent_in", d_entity_ctx, d, rng);
    add_ha_stack_params(params_, prefix::kPredicateEncoder, cfg_.attention, kPredicateEncoderLayers, rng);
  }
  if (cfg_.use_triplet_encoder) {
    add_linear_params(params_, prefix::kTripletEncoder + ".trip_in", 2 * d_entity_ctx + f.union_, d,
                      rng);
    add_linear_params(params_, prefix::kTripletEncoder + ".sem_in", 2 * f.semantic, d, rng);
    add_ha_stack_params(params_, prefix::kTripletEncoder, cfg_.attention, kTripletEncoderLayers, rng);
  }
  const int pd = cfg_.projection_dim;
  add_linear_params(params_, prefix::kPredicateProjection + ".fc1", d, pd, rng);
  add_linear_params(params_, prefix::kPredicateProjection + ".fc2", pd, pd, rng);
  if (cfg_.use_triplet_encoder) {
    add_linear_params(params_, prefix::kTripletProjection + ".fc1", d, pd, rng);
    add_linear_params(params_, prefix::kTripletProjection + ".fc2", pd, pd, rng);
  }
  add_linear_params(params_, prefix::kRelationClassifier + ".fc1", relation_input_dim(),
                    cfg_.classifier_hidden, rng);
  add_linear_params(params_, prefix::kRelationClassifier + ".fc2", cfg_.classifier_hidden,
                    cfg_.num_predicates, rng);
}

EncodedScene DrmModel::encode(Tape& tape, const Matrix& entity, const Matrix& semantic,
                              const Matrix& union_feats, const PairIndex& pairs,
                              const std::vector<int>* s_prime_labels,
                              EncoderProbes* probes) const {
  if (tape.store() != &params_) throw std::logic_error("tape is not bound to this model's parameters");
  const int n = static_cast<int>(entity.rows());
  const int heads = cfg_.attention.heads;
  if (n < 1) throw std::invalid_argument("scene has no entities");
  if (static_cast<Eigen::Index>(pairs.size()) != union_feats.rows()) {
    throw std::invalid_argument("pair index and union features are misaligned");
  }
  EncodedScene out;
  out.v = tape.constant(entity);
  const Var s = tape.constant(semantic);
  out.v_prime = entity_encoder(tape, prefix::kEntityEncoder, heads, out.v, s);
  out.entity_logits = entity_logits(tape, out.v_prime);

  if (s_prime_labels != nullptr) {
    if (static_cast<int>(s_prime_labels->size()) != n) {
      throw std::invalid_argument("one s' label per entity required");
    }
    out.triplet_labels = *s_prime_labels;
  } else {
    out.triplet_labels.resize(static_cast<std::size_t>(n));
    const Matrix& logits = out.entity_logits.value();
    for (int i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      logits.row(i).maxCoeff(&best);
      out.triplet_labels[i] = static_cast<int>(best);
    }
  }

  const Var u = tape.constant(union_feats);
  out.p = u;
  const Var e = ops::concat_cols(std::vector<Var>{out.v_prime, out.v});
  const bool project_union = params_.contains(prefix::kPredicateEncoder + ".pred_in.w");
  const Var p0 = project_union ? apply_linear(tape, prefix::kPredicateEncoder + ".pred_in", u) : u;

  if (pairs.empty()) {
    // A single-entity scene has no pairs; relation outputs are empty.
    out.p_prime = tape.constant(Matrix::Zero(0, cfg_.attention.d_model));
    out.t_prime = out.p_prime;
    return out;
  }

  if (cfg_.use_predicate_encoder) {
    const BoolMatrix to_entities = predicate_to_entity_mask(pairs, n);
    const BoolMatrix to_predicates = to_entities.transpose();
    const Var e0 = apply_linear(tape, prefix::kPredicateEncoder + ".ent_in", e);
    const StreamPair enc =
        ha_stack(tape, prefix::kPredicateEncoder, heads, kPredicateEncoderLayers, {p0, e0},
                 {&to_entities, &to_predicates}, probes ? &probes->predicate_encoder : nullptr);
    out.p_prime = enc.x;
  } else {
    out.p_prime = p0;
  }

  if (cfg_.use_triplet_encoder) {
    std::vector<int> subj, obj;
    subj.reserve(pairs.size());
    obj.reserve(pairs.size());
    for (const auto& [i, j] : pairs) {
      subj.push_back(i);
      obj.push_back(j);
    }
    const Var t = ops::concat_cols(
        std::vector<Var>{ops::gather_rows(e, subj), u, ops::gather_rows(e, obj)});
    Matrix sem_pairs(static_cast<Eigen::Index>(pairs.size()), 2 * cfg_.features.semantic);
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const auto [i, j] = pairs[k];
      sem_pairs.row(static_cast<Eigen::Index>(k))
          << tables_.semantic.row(out.triplet_labels[i]),
          tables_.semantic.row(out.triplet_labels[j]);
    }
    const Var x0 = apply_linear(tape, prefix::kTripletEncoder + ".trip_in", t);
    const Var y0 = apply_linear(tape, prefix::kTripletEncoder + ".sem_in",
                                tape.constant(std::move(sem_pairs)));
    const StreamPair enc =
        ha_stack(tape, prefix::kTripletEncoder, heads, kTripletEncoderLayers, {x0, y0});
    out.t_prime = ops::add(enc.x, enc.y);
  } else {
    out.t_prime = out.p_prime;
  }
  return out;
}

namespace {

Var two_layer(Tape& tape, const std::string& name, Var x) {
  return apply_linear(tape, name + ".fc2", ops::gelu(apply_linear(tape, name + ".fc1", x)));
}

}  // namespace

Var DrmModel::project_predicate(Tape& tape, Var p_prime) const {
  return ops::l2_normalize_rows(two_layer(tape, prefix::kPredicateProjection, p_prime));
}

Var DrmModel::project_triplet(Tape& tape, Var t_prime) const {
  if (!cfg_.use_triplet_encoder) throw std::logic_error("triplet encoder disabled");
  return ops::l2_normalize_rows(two_layer(tape, prefix::kTripletProjection, t_prime));
}

Var DrmModel::relation_input(Var p_prime, Var t_prime) const {
  if (p_prime.rows() != t_prime.rows()) {
    throw std::invalid_argument("p' and t' row counts differ");
  }
  if (cfg_.use_triplet_encoder && cfg_.use_predicate_encoder) {
    return ops::concat_cols(std::vector<Var>{p_prime, t_prime});
  }
  return cfg_.use_triplet_encoder ? t_prime : p_prime;
}

Var DrmModel::relation_logits(Tape& tape, Var fused) const {
  if (fused.cols() != relation_input_dim()) {
    throw std::invalid_argument("relation classifier input dim mismatch");
  }
  return two_layer(tape, prefix::kRelationClassifier, fused);
}

Var DrmModel::relation_logits(Tape& tape, Var p_prime, Var t_prime) const {
  return relation_logits(tape, relation_input(p_prime, t_prime));
}

Var DrmModel::entity_logits(Tape& tape, Var v_prime) const {
  return apply_linear(tape, prefix::kEntityClassifier, v_prime);
}

}  // namespace drm
