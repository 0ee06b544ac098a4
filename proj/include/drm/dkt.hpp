#pragma once

#include "drm/inference.hpp"
#include "drm/model.hpp"
#include "drm/synthgraph.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace drm {

inline constexpr double kCovarianceJitter = 1e-6;

struct ClassStats {
  Vector mu;
  Matrix sigma;
  int count = 0;
  bool degenerate = false;  // single sample: sigma fell back to eps * I
};

// Per-class mean and unbiased covariance of feature rows. A class seen once
// gets sigma = eps * I and is flagged degenerate.
std::map<int, ClassStats> estimate_class_stats(const Matrix& features, std::span<const int> labels,
                                               double eps = kCovarianceJitter);
std::map<TripletKey, ClassStats> estimate_class_stats(const Matrix& features,
                                                      std::span<const TripletKey> labels,
                                                      double eps = kCovarianceJitter);

struct HeadTailSplit {
  std::vector<int> head_predicates;
  std::vector<int> tail_predicates;
  std::vector<TripletKey> head_triplets;
  std::vector<TripletKey> tail_triplets;
  int triplet_threshold = 0;
};

// Predicates sorted by descending count (ties: lower id first); the first
// ceil(C_p / 2) are head. Head triplets are the types of head predicates with
// count > threshold; tail triplets are all observed types of tail predicates.
HeadTailSplit split_head_tail(const FrequencyTable& freq, int triplet_threshold);

// alpha_j = softmax_j(-||mu - mu_j||).
Vector transfer_weights(const Vector& mu, std::span<const Vector> head_means);

// (N/Q) sigma + (1 - N/Q) sum_j alpha_j sigma_j. Returns sigma untouched when N >= Q.
Matrix calibrate_covariance(const Matrix& sigma, std::span<const Matrix> head_sigmas,
                            const Vector& alpha, int n, int q);

// n draws of mu + L z with L = chol(sigma + eps I).
Matrix sample_synthetic(const Vector& mu, const Matrix& sigma, int n, std::uint64_t seed,
                        double eps = kCovarianceJitter);

enum class DktMode { None, P, T, PT };
const char* to_string(DktMode mode);
DktMode dkt_mode_from_string(const std::string& name);

struct CalibratedStats {
  Vector mu;
  Matrix sigma_prime;
  Vector alpha;  // empty when no transfer happened
  int count = 0;
  int target = 0;
  bool passthrough = false;
};

struct DktConfig {
  DktMode mode = DktMode::PT;
  int triplet_threshold = 8;
  std::optional<int> q_override;
  double epsilon = kCovarianceJitter;
  int finetune_epochs = 20;
  double learning_rate = 0.01;
  double momentum = 0.9;
  int batch_size = 64;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const DktConfig& c);
void from_json(const nlohmann::json& j, DktConfig& c);

// Everything stage 2 derives from the frozen stage-1 features.
struct DktStats {
  DktMode mode = DktMode::PT;
  HeadTailSplit split;
  int q = 0;
  std::map<int, ClassStats> predicate;
  std::map<TripletKey, ClassStats> triplet;
  std::map<int, CalibratedStats> predicate_calibrated;      // tail predicates
  std::map<TripletKey, CalibratedStats> triplet_calibrated;  // tail triplet types
};

// Q defaults to the count of the smallest head predicate. Tail triplet types
// inherit their predicate's fill ratio N/Q. A granularity left out by `mode`
// keeps its own covariance (no transfer).
DktStats compute_dkt_stats(const RelationFeatures& real, const FrequencyTable& train_freq,
                           const DktConfig& cfg);

nlohmann::json to_json(const DktStats& stats);
DktStats dkt_stats_from_json(const nlohmann::json& j);

struct BalancedSet {
  Matrix predicate;  // p' rows
  Matrix triplet;    // t' rows
  std::vector<int> labels;
  std::vector<bool> synthetic;

  std::vector<int> class_histogram(int num_predicates) const;
};

// Head predicates under-sampled to Q real records; tail predicates keep their
// real records and are topped up to Q with synthetic (p', t'). Synthetic t'
// rows are spread over the predicate's tail triplet types in proportion to
// their real counts (largest remainder).
BalancedSet build_balanced_set(const RelationFeatures& real, const DktStats& stats,
                               std::uint64_t seed);

// Trains only the relation classifier on the balanced set. Returns mean loss
// per epoch. Throws std::logic_error if any frozen tensor changed.
std::vector<double> finetune_classifier(DrmModel& model, const BalancedSet& set,
                                        const DktConfig& cfg);

}  // namespace drm
