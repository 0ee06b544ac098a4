#pragma once

#include "drm/synthgraph.hpp"

#include <json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace drm {

enum class Task { PredCls, SGCls };
const char* to_string(Task task);
Task task_from_string(const std::string& name);

// How R@K pools over images. PerImage averages each image's recall over images
// with at least one ground-truth relation; Micro pools hits and ground truth
// over the split (the default). Per-predicate recalls follow the same choice.
enum class RecallAveraging { PerImage, Micro };
const char* to_string(RecallAveraging mode);
RecallAveraging averaging_from_string(const std::string& name);

struct ScoredTriplet {
  int subject = 0;
  int object = 0;
  int predicate = 0;
  double score = 0.0;
  bool operator==(const ScoredTriplet&) const = default;
};

struct Prediction {
  std::string sample_id;
  std::vector<ScoredTriplet> triplets;
  std::vector<int> entity_labels;
  bool operator==(const Prediction&) const = default;
};

struct GroundTruth {
  std::string sample_id;
  std::vector<RelationAnnotation> relations;
  std::vector<int> entity_labels;
};

GroundTruth ground_truth(const SceneGraphSample& sample);

// Total order used for ranking: score descending, then subject, object, predicate ascending.
bool ranks_before(const ScoredTriplet& a, const ScoredTriplet& b);

// Candidates competing for the top-K: with the graph constraint only the best
// predicate of each ordered pair survives. Returned in rank order.
std::vector<ScoredTriplet> ranked_candidates(const Prediction& pred, bool graph_constraint);

struct HitRecord {
  int image = 0;
  int subject_category = 0;
  int predicate = 0;
  int object_category = 0;
  bool hit = false;
};

struct RecallResult {
  double recall = 0.0;
  std::vector<HitRecord> hits;  // one per ground-truth relation
};

// A ground-truth triplet is hit when an identical (subject, object, predicate)
// is in the top-K; SGCls additionally needs both predicted entity labels right.
// Predictions and ground truth are matched by position and must share sample ids.
RecallResult recall_at_k(std::span<const Prediction> preds, std::span<const GroundTruth> gts,
                         int k, bool graph_constraint, Task task,
                         RecallAveraging averaging = RecallAveraging::Micro);

// Per-predicate recall; NaN for predicates without ground truth.
std::vector<double> per_predicate_recall(std::span<const HitRecord> hits, int num_predicates,
                                         RecallAveraging averaging = RecallAveraging::Micro);

// Unweighted mean of per-predicate recall over predicates with ground truth.
// Throws when no predicate has ground truth.
double mean_recall_at_k(std::span<const HitRecord> hits, int num_predicates,
                        RecallAveraging averaging = RecallAveraging::Micro);

double m_at_k(double recall, double mean_recall);
double f_at_k(double recall, double mean_recall);

struct PredicateRecallRow {
  int predicate = 0;
  long train_count = 0;
  long gt_count = 0;
  double recall = 0.0;  // NaN when gt_count == 0
};

struct TripletRecallRow {
  TripletKey key;
  long gt_count = 0;
  long hit_count = 0;
  double recall = 0.0;
  bool seen_in_train = false;
};

struct PerClassReport {
  std::vector<PredicateRecallRow> predicates;  // sorted by train frequency, descending
  std::vector<TripletRecallRow> triplets;      // all ground-truth triplet types

  // Triplet rows of one predicate. Throws on an unknown predicate id.
  std::vector<TripletRecallRow> triplets_of(int predicate) const;
};

// Per-triplet cells pool hits over the split (micro).
PerClassReport per_class_report(std::span<const HitRecord> hits, int num_predicates,
                                const FrequencyTable& train_freq,
                                RecallAveraging averaging = RecallAveraging::Micro);

struct RecallSummary {
  double r50 = 0, r100 = 0, mr50 = 0, mr100 = 0;
  double m50() const { return m_at_k(r50, mr50); }
  double m100() const { return m_at_k(r100, mr100); }
  double f50() const { return f_at_k(r50, mr50); }
  double f100() const { return f_at_k(r100, mr100); }
};

struct MetricsReport {
  Task task = Task::PredCls;
  RecallAveraging averaging = RecallAveraging::Micro;
  RecallSummary constrained;
  RecallSummary unconstrained;
  PerClassReport per_class_50;
  PerClassReport per_class_100;

  // Mean R@50 (graph constraint) over the given predicates that have ground truth.
  double mean_recall_over(std::span<const int> predicates) const;
};

MetricsReport evaluate(std::span<const Prediction> preds, std::span<const GroundTruth> gts,
                       Task task, int num_predicates, const FrequencyTable& train_freq,
                       RecallAveraging averaging = RecallAveraging::Micro);

// Values are scaled by 100; rounding is left to presentation.
nlohmann::json to_json(const MetricsReport& report);

// Predictions file: JSON lines {sample_id, triplets: [[s, o, p, score], ...], entity_labels}.
void save_predictions(std::span<const Prediction> preds, const std::filesystem::path& file);
std::vector<Prediction> load_predictions(const std::filesystem::path& file);

}  // namespace drm
