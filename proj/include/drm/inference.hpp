#pragma once

#include "drm/metrics.hpp"
#include "drm/model.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace drm {

// Scores every (pair, predicate) candidate of each sample. PredCls uses
// ground-truth entity labels (score 1); SGCls uses the entity classifier's
// argmax and multiplies its softmax confidences into the triplet score.
std::vector<Prediction> predict(const DrmModel& model, std::span<const SceneGraphSample> samples,
                                Task task, std::uint64_t feature_seed);

// Frozen p' and t' of every annotated relation, with labels.
struct RelationFeatures {
  Matrix predicate;  // n x d  (p')
  Matrix triplet;    // n x d  (t')
  std::vector<int> predicate_labels;
  std::vector<TripletKey> triplet_keys;
};

RelationFeatures extract_relation_features(const DrmModel& model,
                                           std::span<const SceneGraphSample> samples,
                                           std::uint64_t feature_seed);

// p'' and t'' (projection heads) of every annotated relation.
struct ProjectedFeatures {
  Matrix predicate;
  Matrix triplet;
  std::vector<int> predicate_labels;
  std::vector<TripletKey> triplet_keys;
};

ProjectedFeatures extract_projected_features(const DrmModel& model,
                                             std::span<const SceneGraphSample> samples,
                                             std::uint64_t feature_seed);

// Mean pairwise cosine similarity of unit rows within the same class and
// across classes (unordered pairs, self-pairs excluded).
struct ClusterStats {
  double intra = 0.0;
  double inter = 0.0;
  long intra_pairs = 0;
  long inter_pairs = 0;
  std::vector<double> intra_values;
  std::vector<double> inter_values;
  double margin() const { return intra - inter; }
};

ClusterStats cluster_stats(const Matrix& unit_rows, std::span<const int> labels,
                           bool keep_values = false);

}  // namespace drm
