#include "drm/training.hpp"

#include "drm/contrastive.hpp"
#include "drm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace drm {

void validate(const LossWeights& w) {
  if (w.entity < 0 || w.relation < 0 || w.predicate < 0 || w.triplet < 0) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
  if (!(w.tau_predicate > 0) || !(w.tau_triplet > 0)) {
    throw std::invalid_argument("temperatures must be positive");
  }
}

int triplet_label(const TripletKey& key, int num_predicates, int num_entity_classes) {
  return (key.subject_category * num_predicates + key.predicate) * num_entity_classes +
         key.object_category;
}

std::pair<FeatureBundle, FeatureBundle> two_view_augment(const FeatureBundle& features,
                                                         const AugmentConfig& cfg,
                                                         std::uint64_t seed) {
  if (cfg.noise_sigma < 0 || cfg.dropout < 0 || cfg.dropout >= 1) {
    throw std::invalid_argument("augmentation needs sigma >= 0 and dropout in [0, 1)");
  }
  std::mt19937_64 rng(seed);
  auto make_view = [&](FeatureBundle v) {
    std::normal_distribution<double> noise(0.0, 1.0);
    std::bernoulli_distribution drop(cfg.dropout);
    const double keep_scale = 1.0 / (1.0 - cfg.dropout);
    for (Matrix* m : {&v.entity, &v.union_}) {
      for (Eigen::Index i = 0; i < m->size(); ++i) {
        double x = m->data()[i];
        if (cfg.noise_sigma > 0) x += cfg.noise_sigma * noise(rng);
        if (cfg.dropout > 0) x = drop(rng) ? 0.0 : x * keep_scale;
        m->data()[i] = x;
      }
    }
    return v;
  };
  FeatureBundle a = make_view(features);
  FeatureBundle b = make_view(features);
  return {std::move(a), std::move(b)};
}

namespace {

std::vector<int> annotated_rows(const SceneGraphSample& s) {
  const int n = static_cast<int>(s.entities.size());
  std::vector<int> rows;
  rows.reserve(s.relations.size());
  for (const auto& r : s.relations) {
    rows.push_back(r.subject_index * (n - 1) +
                   (r.object_index < r.subject_index ? r.object_index : r.object_index - 1));
  }
  return rows;
}

double checked(double v, const char* term) {
  if (!std::isfinite(v)) throw NonFiniteLoss(term);
  return v;
}

}  // namespace

BatchLoss total_loss(Tape& tape, const DrmModel& model, std::span<const SceneView> views,
                     const LossWeights& w, const LossSwitches& switches) {
  validate(w);
  const ModelConfig& cfg = model.config();
  std::vector<Var> ent_losses, rel_losses, p_proj, t_proj;
  std::vector<int> p_labels, t_labels;
  long n_entities = 0, n_relations = 0;
  const bool use_lp = switches.predicate_contrastive && w.predicate > 0;
  const bool use_lt = switches.triplet_contrastive && w.triplet > 0 && cfg.use_triplet_encoder;

  for (const SceneView& view : views) {
    const SceneGraphSample& s = *view.sample;
    const FeatureBundle& f = *view.features;
    const EncodedScene enc = model.encode(tape, f.entity, f.semantic, f.union_, f.pairs, &f.labels);
    std::vector<int> ent_labels;
    for (const auto& e : s.entities) ent_labels.push_back(e.category_id);
    ent_losses.push_back(ops::cross_entropy_sum(enc.entity_logits, ent_labels));
    n_entities += static_cast<long>(ent_labels.size());
    if (s.relations.empty()) continue;

    const auto rows = annotated_rows(s);
    const Var p_rows = ops::gather_rows(enc.p_prime, rows);
    const Var t_rows = ops::gather_rows(enc.t_prime, rows);
    std::vector<int> preds;
    for (const auto& r : s.relations) {
      preds.push_back(r.predicate_id);
      t_labels.push_back(triplet_label({s.entities[r.subject_index].category_id, r.predicate_id,
                                        s.entities[r.object_index].category_id},
                                       cfg.num_predicates, cfg.num_entity_classes));
    }
    rel_losses.push_back(ops::cross_entropy_sum(model.relation_logits(tape, p_rows, t_rows), preds));
    n_relations += static_cast<long>(preds.size());
    p_labels.insert(p_labels.end(), preds.begin(), preds.end());
    if (use_lp) p_proj.push_back(model.project_predicate(tape, p_rows));
    if (use_lt) t_proj.push_back(model.project_triplet(tape, t_rows));
  }

  BatchLoss out;
  Var total = tape.constant(Matrix::Zero(1, 1));
  auto add_term = [&](Var term, double weight, double& slot, const char* name) {
    slot = checked(term.value()(0, 0), name);
    if (weight != 0.0) total = ops::add(total, ops::scale(term, weight));
  };
  if (!ent_losses.empty() && n_entities > 0) {
    add_term(ops::scale(ops::sum(ops::concat_rows(ent_losses)), 1.0 / n_entities), w.entity,
             out.terms.entity, "L_e");
  }
  if (!rel_losses.empty()) {
    add_term(ops::scale(ops::sum(ops::concat_rows(rel_losses)), 1.0 / n_relations), w.relation,
             out.terms.relation, "L_r");
  }
  if (use_lp && !p_proj.empty() && has_positive_pair(p_labels)) {
    add_term(contrastive_loss(ops::concat_rows(p_proj), p_labels, w.tau_predicate), w.predicate,
             out.terms.predicate, "L_p");
  }
  if (use_lt && !t_proj.empty() && has_positive_pair(t_labels)) {
    add_term(contrastive_loss(ops::concat_rows(t_proj), t_labels, w.tau_triplet), w.triplet,
             out.terms.triplet, "L_t");
  }
  out.terms.total = checked(total.value()(0, 0), "L");
  out.total = total;
  return out;
}

std::pair<LossBreakdown, Gradients> loss_and_gradients(const DrmModel& model,
                                                       std::span<const SceneView> views,
                                                       const LossWeights& weights,
                                                       const LossSwitches& switches) {
  Tape tape(&model.params());
  BatchLoss loss = total_loss(tape, model, views, weights, switches);
  Gradients grads(model.params());
  if (tape.requires_grad(loss.total)) {
    tape.backward(loss.total);
    tape.collect(grads);
  }
  return {loss.terms, std::move(grads)};
}

SgdMomentum::SgdMomentum(const ParameterStore& store, double lr, double momentum)
    : lr_(lr), momentum_(momentum) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& v = store.at(i).value;
    velocity_.push_back(Matrix::Zero(v.rows(), v.cols()));
  }
}

void SgdMomentum::step(ParameterStore& store, const Gradients& grads,
                       const std::function<bool(const std::string&)>& allow) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter& p = store.at(i);
    if (!p.trainable || (allow && !allow(p.name))) continue;
    velocity_[i] = momentum_ * velocity_[i] + grads.grads[i];
    p.value -= lr_ * velocity_[i];
  }
}

double clip_gradients(Gradients& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads.grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) grads.scale(max_norm / norm);
  return norm;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"learning_rate", c.learning_rate},
       {"momentum", c.momentum},
       {"batch_size", c.batch_size},
       {"grad_clip", c.grad_clip},
       {"loss_weights",
        {{"lambda_e", c.weights.entity},
         {"lambda_r", c.weights.relation},
         {"lambda_p", c.weights.predicate},
         {"lambda_t", c.weights.triplet},
         {"tau_p", c.weights.tau_predicate},
         {"tau_t", c.weights.tau_triplet}}},
       {"augment", {{"noise_sigma", c.augment.noise_sigma}, {"dropout", c.augment.dropout}}},
       {"use_augmentation", c.use_augmentation},
       {"use_constraints", c.use_constraints},
       {"seed", c.seed},
       {"feature_seed", c.feature_seed},
       {"log_validation", c.log_validation}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.momentum = j.value("momentum", d.momentum);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    c.weights.entity = w.value("lambda_e", d.weights.entity);
    c.weights.relation = w.value("lambda_r", d.weights.relation);
    c.weights.predicate = w.value("lambda_p", d.weights.predicate);
    c.weights.triplet = w.value("lambda_t", d.weights.triplet);
    c.weights.tau_predicate = w.value("tau_p", d.weights.tau_predicate);
    c.weights.tau_triplet = w.value("tau_t", d.weights.tau_triplet);
  }
  if (j.contains("augment")) {
    c.augment.noise_sigma = j.at("augment").value("noise_sigma", d.augment.noise_sigma);
    c.augment.dropout = j.at("augment").value("dropout", d.augment.dropout);
  }
  c.use_augmentation = j.value("use_augmentation", d.use_augmentation);
  c.use_constraints = j.value("use_constraints", d.use_constraints);
  c.seed = j.value("seed", d.seed);
  c.feature_seed = j.value("feature_seed", d.feature_seed);
  c.log_validation = j.value("log_validation", d.log_validation);
}

nlohmann::json to_json(const EpochLog& log) {
  return {{"epoch", log.epoch},       {"L", log.loss.total},     {"L_e", log.loss.entity},
          {"L_r", log.loss.relation}, {"L_p", log.loss.predicate}, {"L_t", log.loss.triplet},
          {"val_mR50", log.val_mr50 ? nlohmann::json(100 * *log.val_mr50) : nlohmann::json(nullptr)}};
}

std::vector<EpochLog> train_stage1(DrmModel& model, std::span<const SceneGraphSample> train,
                                   std::span<const SceneGraphSample> val, const TrainConfig& cfg,
                                   const std::function<void(const EpochLog&)>& on_epoch) {
  validate(cfg.weights);
  if (cfg.batch_size <= 0) throw std::invalid_argument("batch size must be positive");
  if (cfg.epochs < 0) throw std::invalid_argument("epoch count must be non-negative");
  const ModelConfig& mcfg = model.config();
  std::vector<FeatureBundle> features;
  features.reserve(train.size());
  for (const auto& s : train) features.push_back(featurize(s, model.tables(), cfg.feature_seed, true));

  const LossSwitches switches{cfg.use_constraints && mcfg.use_predicate_encoder,
                              cfg.use_constraints && mcfg.use_triplet_encoder};
  SgdMomentum opt(model.params(), cfg.learning_rate, cfg.momentum);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<EpochLog> logs;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const ParameterStore last_good = model.params();
    std::shuffle(order.begin(), order.end(), rng);
    LossBreakdown sum;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<FeatureBundle> augmented;
      augmented.reserve(2 * (end - start));
      std::vector<SceneView> views;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        if (cfg.use_augmentation) {
          auto [a, b] = two_view_augment(features[idx], cfg.augment, rng());
          augmented.push_back(std::move(a));
          augmented.push_back(std::move(b));
        }
      }
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        if (cfg.use_augmentation) {
          const std::size_t base = 2 * (k - start);
          views.push_back({&train[idx], &augmented[base]});
          views.push_back({&train[idx], &augmented[base + 1]});
        } else {
          views.push_back({&train[idx], &features[idx]});
        }
      }
      try {
        auto [terms, grads] = loss_and_gradients(model, views, cfg.weights, switches);
        const double norm = clip_gradients(grads, cfg.grad_clip);
        if (!std::isfinite(norm)) throw NonFiniteLoss("gradient");
        opt.step(model.params(), grads);
        sum.total += terms.total;
        sum.entity += terms.entity;
        sum.relation += terms.relation;
        sum.predicate += terms.predicate;
        sum.triplet += terms.triplet;
        ++batches;
      } catch (const NonFiniteLoss& e) {
        throw TrainingDiverged("epoch " + std::to_string(epoch) + ": " + e.what(), last_good);
      }
    }
    EpochLog log;
    log.epoch = epoch;
    if (batches > 0) {
      log.loss = {sum.total / batches, sum.entity / batches, sum.relation / batches,
                  sum.predicate / batches, sum.triplet / batches};
    }
    if (cfg.log_validation && !val.empty()) {
      const auto preds = predict(model, val, Task::PredCls, cfg.feature_seed);
      std::vector<GroundTruth> gts;
      for (const auto& s : val) gts.push_back(ground_truth(s));
      const auto r = recall_at_k(preds, gts, 50, true, Task::PredCls);
      if (!r.hits.empty()) log.val_mr50 = mean_recall_at_k(r.hits, mcfg.num_predicates);
    }
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return logs;
}

}  // namespace drm
