#pragma once

#include "drm/metrics.hpp"
#include "drm/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace drm {

struct LossWeights {
  double entity = 0.5;     // lambda_e
  double relation = 3.0;   // lambda_r
  double predicate = 0.1;  // lambda_p
  double triplet = 0.1;    // lambda_t
  double tau_predicate = 0.2;
  double tau_triplet = 0.1;
};

void validate(const LossWeights& w);

struct AugmentConfig {
  double noise_sigma = 0.05;
  double dropout = 0.1;
};

// Two stochastic views of a scene's inputs: independent Gaussian feature noise
// and inverted feature dropout on entity and union features. Semantic rows
// and labels are untouched.
std::pair<FeatureBundle, FeatureBundle> two_view_augment(const FeatureBundle& features,
                                                         const AugmentConfig& cfg,
                                                         std::uint64_t seed);

struct LossBreakdown {
  double total = 0;
  double entity = 0;
  double relation = 0;
  double predicate = 0;
  double triplet = 0;
};

// One scene view inside a training batch.
struct SceneView {
  const SceneGraphSample* sample = nullptr;
  const FeatureBundle* features = nullptr;
};

struct LossSwitches {
  bool predicate_contrastive = true;
  bool triplet_contrastive = true;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  explicit NonFiniteLoss(const std::string& term)
      : std::runtime_error("non-finite loss term: " + term), term_(term) {}
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

// Builds L = lambda_e L_e + lambda_r L_r + lambda_p L_p + lambda_t L_t on the tape.
// L_e / L_r average cross-entropy over all entities / annotated relations of
// all views; L_p / L_t are contrastive over every annotated relation of the
// batch (labels: predicate id / triplet type). Contrastive terms with no
// positive pair in the batch contribute 0. Throws NonFiniteLoss naming the term.
struct BatchLoss {
  Var total;
  LossBreakdown terms;
};

BatchLoss total_loss(Tape& tape, const DrmModel& model, std::span<const SceneView> views,
                     const LossWeights& weights, const LossSwitches& switches = {});

// Loss and parameter gradients of one batch.
std::pair<LossBreakdown, Gradients> loss_and_gradients(const DrmModel& model,
                                                       std::span<const SceneView> views,
                                                       const LossWeights& weights,
                                                       const LossSwitches& switches = {});

class SgdMomentum {
 public:
  SgdMomentum(const ParameterStore& store, double lr, double momentum);
  // Updates trainable parameters whose name passes `allow` (all when empty).
  void step(ParameterStore& store, const Gradients& grads,
            const std::function<bool(const std::string&)>& allow = {});

 private:
  double lr_;
  double momentum_;
  std::vector<Matrix> velocity_;
};

// Rescales gradients so their global L2 norm is at most max_norm (no-op when <= 0).
double clip_gradients(Gradients& grads, double max_norm);

struct TrainConfig {
  // Desk-scale defaults: a constant 1e-4 barely moves this model in a few epochs.
  int epochs = 4;
  double learning_rate = 1e-2;
  double momentum = 0.9;
  int batch_size = 16;
  double grad_clip = 5.0;
  LossWeights weights;
  AugmentConfig augment;
  bool use_augmentation = true;   // A
  bool use_constraints = true;    // C
  std::uint64_t seed = 0;
  std::uint64_t feature_seed = 0;
  bool log_validation = true;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochLog {
  int epoch = 0;
  LossBreakdown loss;
  std::optional<double> val_mr50;  // absent when validation logging is off
};

nlohmann::json to_json(const EpochLog& log);

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, ParameterStore last_good)
      : std::runtime_error(what), last_good_(std::move(last_good)) {}
  const ParameterStore& last_good() const { return last_good_; }

 private:
  ParameterStore last_good_;
};

// Stage-1 SGD over the train split; the model is updated in place. Each epoch
// reports mean loss terms and, if enabled, PredCls mR@50 on `val`.
std::vector<EpochLog> train_stage1(DrmModel& model, std::span<const SceneGraphSample> train,
                                   std::span<const SceneGraphSample> val, const TrainConfig& cfg,
                                   const std::function<void(const EpochLog&)>& on_epoch = {});

// Stable integer id for a triplet type.
int triplet_label(const TripletKey& key, int num_predicates, int num_entity_classes);

}  // namespace drm
