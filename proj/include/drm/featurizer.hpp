#pragma once

#include "drm/autograd.hpp"
#include "drm/synthgraph.hpp"

#include <cstdint>
#include <utility>
#include <vector>

namespace drm {

// Layout of spatial_encoding(box): x1, y1, x2, y2, cx, cy, width, height, area.
inline constexpr int kSpatialDim = 9;
// Layout of relative_spatial(subject, object):
//   dx, dy                 object center minus subject center
//   dx / w_s, dy / h_s     offsets in subject-size units
//   log(w_o / w_s), log(h_o / h_s), log(area_o / area_s)
//   IoU, intersection / area_s
inline constexpr int kRelativeDim = 9;

struct FeatureDims {
  int entity = 64;    // d_v
  int semantic = 32;  // d_s
  int union_ = 64;    // d_u

  int appearance() const { return entity - kSpatialDim; }
  int union_appearance() const { return union_ - kRelativeDim - kSpatialDim; }
};

// Fixed, seeded lookup tables standing in for the frozen detector and word
// embeddings. Never trained.
struct FeatureTables {
  FeatureDims dims;
  Matrix semantic;            // C_e x d_s, unit-norm rows
  Matrix prototypes;          // C_e x appearance dim
  Matrix union_projection;    // appearance dim x union appearance dim
  double appearance_noise = 0.5;
};

FeatureTables make_feature_tables(int num_entity_categories, const FeatureDims& dims,
                                  double appearance_noise, std::uint64_t seed);

using PairIndex = std::vector<std::pair<int, int>>;

// All ordered pairs (i, j), i != j, in row-major order.
PairIndex all_pairs(int n);

struct FeatureBundle {
  Matrix entity;    // N x d_v
  Matrix semantic;  // N x d_s, rows of the embedding table for the entity labels
  Matrix union_;    // M x d_u
  PairIndex pairs;  // M = N(N-1)
  std::vector<int> labels;  // labels used for the semantic rows

  int num_entities() const { return static_cast<int>(entity.rows()); }
  int num_pairs() const { return static_cast<int>(pairs.size()); }
};

Vector spatial_encoding(const Box& box);
Vector relative_spatial(const Box& subject, const Box& object);

// Appearance vector of one entity: category prototype plus seeded noise.
Vector appearance(const FeatureTables& tables, const EntityInstance& e, std::uint64_t seed);

// Nearest-prototype label for an appearance vector (the proposal network's guess).
int proposal_label(const FeatureTables& tables, const Vector& appearance_vector);

// use_gt_labels = true fills semantic rows from ground-truth categories
// (PredCls); false uses proposal labels (SGCls).
FeatureBundle featurize(const SceneGraphSample& sample, const FeatureTables& tables,
                        std::uint64_t seed, bool use_gt_labels = true);

}  // namespace drm
