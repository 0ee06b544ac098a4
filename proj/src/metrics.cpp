#include "drm/metrics.hpp"

#include "drm/json_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace drm {

const char* to_string(Task task) { return task == Task::PredCls ? "PredCls" : "SGCls"; }

Task task_from_string(const std::string& name) {
  if (name == "PredCls" || name == "predcls") return Task::PredCls;
  if (name == "SGCls" || name == "sgcls") return Task::SGCls;
  throw ValidationError("unknown task: " + name + " (expected PredCls or SGCls)");
}

const char* to_string(RecallAveraging mode) {
  return mode == RecallAveraging::PerImage ? "per_image" : "micro";
}

RecallAveraging averaging_from_string(const std::string& name) {
  if (name == "per_image") return RecallAveraging::PerImage;
  if (name == "micro") return RecallAveraging::Micro;
  throw ValidationError("unknown recall averaging: " + name);
}

GroundTruth ground_truth(const SceneGraphSample& sample) {
  GroundTruth gt;
  gt.sample_id = sample.sample_id;
  gt.relations = sample.relations;
  for (const auto& e : sample.entities) gt.entity_labels.push_back(e.category_id);
  return gt;
}

bool ranks_before(const ScoredTriplet& a, const ScoredTriplet& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.subject, a.object, a.predicate) < std::tie(b.subject, b.object, b.predicate);
}

std::vector<ScoredTriplet> ranked_candidates(const Prediction& pred, bool graph_constraint) {
  std::vector<ScoredTriplet> out;
  if (graph_constraint) {
    std::map<std::pair<int, int>, ScoredTriplet> best;
    for (const auto& t : pred.triplets) {
      auto [it, inserted] = best.try_emplace({t.subject, t.object}, t);
      if (!inserted && ranks_before(t, it->second)) it->second = t;
    }
    out.reserve(best.size());
    for (const auto& [pair, t] : best) out.push_back(t);
  } else {
    out = pred.triplets;
  }
  for (const auto& t : out) {
    if (!std::isfinite(t.score)) throw std::invalid_argument("non-finite prediction score");
  }
  std::sort(out.begin(), out.end(), ranks_before);
  return out;
}

RecallResult recall_at_k(std::span<const Prediction> preds, std::span<const GroundTruth> gts,
                         int k, bool graph_constraint, Task task, RecallAveraging averaging) {
  if (k <= 0) throw std::invalid_argument("K must be positive");
  if (preds.size() != gts.size()) {
    throw std::invalid_argument("predictions and ground truth differ in length");
  }
  RecallResult result;
  long total_hits = 0, total_gt = 0, images = 0;
  double image_recall_sum = 0.0;
  for (std::size_t img = 0; img < gts.size(); ++img) {
    const auto& gt = gts[img];
    const auto& pred = preds[img];
    if (pred.sample_id != gt.sample_id) {
      throw std::invalid_argument("prediction '" + pred.sample_id + "' does not match sample '" +
                                  gt.sample_id + "'");
    }
    if (gt.relations.empty()) continue;
    const auto ranked = ranked_candidates(pred, graph_constraint);
    std::set<std::tuple<int, int, int>> top;
    for (std::size_t r = 0; r < ranked.size() && r < static_cast<std::size_t>(k); ++r) {
      top.insert({ranked[r].subject, ranked[r].object, ranked[r].predicate});
    }
    long hits = 0;
    for (const auto& rel : gt.relations) {
      bool hit = top.count({rel.subject_index, rel.object_index, rel.predicate_id}) != 0;
      if (hit && task == Task::SGCls) {
        const auto& labels = pred.entity_labels;
        const auto si = static_cast<std::size_t>(rel.subject_index);
        const auto oi = static_cast<std::size_t>(rel.object_index);
        hit = si < labels.size() && oi < labels.size() &&
              labels[si] == gt.entity_labels[si] && labels[oi] == gt.entity_labels[oi];
      }
      hits += hit ? 1 : 0;
      result.hits.push_back({static_cast<int>(img), gt.entity_labels[rel.subject_index],
                             rel.predicate_id, gt.entity_labels[rel.object_index], hit});
    }
    total_hits += hits;
    total_gt += static_cast<long>(gt.relations.size());
    image_recall_sum += static_cast<double>(hits) / static_cast<double>(gt.relations.size());
    ++images;
  }
  if (averaging == RecallAveraging::Micro) {
    result.recall = total_gt > 0 ? static_cast<double>(total_hits) / total_gt : 0.0;
  } else {
    result.recall = images > 0 ? image_recall_sum / images : 0.0;
  }
  return result;
}

std::vector<double> per_predicate_recall(std::span<const HitRecord> hits, int num_predicates,
                                         RecallAveraging averaging) {
  const auto cp = static_cast<std::size_t>(num_predicates);
  std::vector<double> out(cp, std::numeric_limits<double>::quiet_NaN());
  // (predicate, image) -> (hits, gt)
  std::map<std::pair<int, int>, std::pair<long, long>> cells;
  for (const auto& h : hits) {
    if (h.predicate < 0 || h.predicate >= num_predicates) {
      throw std::out_of_range("unknown predicate id " + std::to_string(h.predicate));
    }
    auto& c = cells[{h.predicate, h.image}];
    c.first += h.hit ? 1 : 0;
    c.second += 1;
  }
  std::vector<double> sum(cp, 0.0);
  std::vector<long> hit_total(cp, 0), gt_total(cp, 0), image_count(cp, 0);
  for (const auto& [key, c] : cells) {
    const auto p = static_cast<std::size_t>(key.first);
    sum[p] += static_cast<double>(c.first) / static_cast<double>(c.second);
    hit_total[p] += c.first;
    gt_total[p] += c.second;
    image_count[p] += 1;
  }
  for (std::size_t p = 0; p < cp; ++p) {
    if (gt_total[p] == 0) continue;
    out[p] = averaging == RecallAveraging::Micro
                 ? static_cast<double>(hit_total[p]) / static_cast<double>(gt_total[p])
                 : sum[p] / static_cast<double>(image_count[p]);
  }
  return out;
}

double mean_recall_at_k(std::span<const HitRecord> hits, int num_predicates,
                        RecallAveraging averaging) {
  const auto recalls = per_predicate_recall(hits, num_predicates, averaging);
  double sum = 0.0;
  int present = 0;
  for (double r : recalls) {
    if (std::isnan(r)) continue;
    sum += r;
    ++present;
  }
  if (present == 0) throw std::invalid_argument("no ground-truth relations to average over");
  return sum / present;
}

double m_at_k(double recall, double mean_recall) { return 0.5 * (recall + mean_recall); }

double f_at_k(double recall, double mean_recall) {
  const double denom = recall + mean_recall;
  return denom == 0.0 ? 0.0 : 2.0 * recall * mean_recall / denom;
}

std::vector<TripletRecallRow> PerClassReport::triplets_of(int predicate) const {
  const bool known = std::any_of(predicates.begin(), predicates.end(),
                                 [&](const PredicateRecallRow& r) { return r.predicate == predicate; });
  if (!known) throw std::out_of_range("unknown predicate id " + std::to_string(predicate));
  std::vector<TripletRecallRow> out;
  for (const auto& row : triplets) {
    if (row.key.predicate == predicate) out.push_back(row);
  }
  return out;
}

PerClassReport per_class_report(std::span<const HitRecord> hits, int num_predicates,
                                const FrequencyTable& train_freq, RecallAveraging averaging) {
  PerClassReport report;
  const auto recalls = per_predicate_recall(hits, num_predicates, averaging);
  std::vector<long> gt_counts(static_cast<std::size_t>(num_predicates), 0);
  std::map<TripletKey, std::pair<long, long>> triplets;
  for (const auto& h : hits) {
    gt_counts[static_cast<std::size_t>(h.predicate)] += 1;
    auto& c = triplets[{h.subject_category, h.predicate, h.object_category}];
    c.first += h.hit ? 1 : 0;
    c.second += 1;
  }
  for (int p = 0; p < num_predicates; ++p) {
    const auto up = static_cast<std::size_t>(p);
    const long train = up < train_freq.predicate_counts.size() ? train_freq.predicate_counts[up] : 0;
    report.predicates.push_back({p, train, gt_counts[up], recalls[up]});
  }
  std::stable_sort(report.predicates.begin(), report.predicates.end(),
                   [](const PredicateRecallRow& a, const PredicateRecallRow& b) {
                     return a.train_count > b.train_count;
                   });
  for (const auto& [key, c] : triplets) {
    TripletRecallRow row;
    row.key = key;
    row.hit_count = c.first;
    row.gt_count = c.second;
    row.recall = static_cast<double>(c.first) / static_cast<double>(c.second);
    row.seen_in_train = train_freq.triplet_counts.count(key) != 0;
    report.triplets.push_back(row);
  }
  return report;
}

double MetricsReport::mean_recall_over(std::span<const int> predicates) const {
  double sum = 0.0;
  int n = 0;
  for (int p : predicates) {
    for (const auto& row : per_class_50.predicates) {
      if (row.predicate == p && !std::isnan(row.recall)) {
        sum += row.recall;
        ++n;
      }
    }
  }
  return n > 0 ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

MetricsReport evaluate(std::span<const Prediction> preds, std::span<const GroundTruth> gts,
                       Task task, int num_predicates, const FrequencyTable& train_freq,
                       RecallAveraging averaging) {
  MetricsReport rep;
  rep.task = task;
  rep.averaging = averaging;
  for (bool constrained : {true, false}) {
    RecallSummary& s = constrained ? rep.constrained : rep.unconstrained;
    const auto r50 = recall_at_k(preds, gts, 50, constrained, task, averaging);
    const auto r100 = recall_at_k(preds, gts, 100, constrained, task, averaging);
    s.r50 = r50.recall;
    s.r100 = r100.recall;
    s.mr50 = mean_recall_at_k(r50.hits, num_predicates, averaging);
    s.mr100 = mean_recall_at_k(r100.hits, num_predicates, averaging);
    if (constrained) {
      rep.per_class_50 = per_class_report(r50.hits, num_predicates, train_freq, averaging);
      rep.per_class_100 = per_class_report(r100.hits, num_predicates, train_freq, averaging);
    }
  }
  return rep;
}

namespace {

nlohmann::json summary_json(const RecallSummary& s) {
  return {{"R@50", 100 * s.r50},   {"R@100", 100 * s.r100}, {"mR@50", 100 * s.mr50},
          {"mR@100", 100 * s.mr100}, {"M@50", 100 * s.m50()}, {"M@100", 100 * s.m100()},
          {"F@50", 100 * s.f50()},   {"F@100", 100 * s.f100()}};
}

nlohmann::json nullable(double v) {
  return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(100 * v);
}

nlohmann::json per_class_json(const PerClassReport& r) {
  nlohmann::json preds = nlohmann::json::array();
  for (const auto& row : r.predicates) {
    preds.push_back({{"predicate", row.predicate},
                     {"train_count", row.train_count},
                     {"gt_count", row.gt_count},
                     {"recall", nullable(row.recall)}});
  }
  nlohmann::json trips = nlohmann::json::array();
  for (const auto& row : r.triplets) {
    trips.push_back({{"triplet", to_string(row.key)},
                     {"subject_category", row.key.subject_category},
                     {"predicate", row.key.predicate},
                     {"object_category", row.key.object_category},
                     {"gt_count", row.gt_count},
                     {"hit_count", row.hit_count},
                     {"recall", 100 * row.recall},
                     {"seen", row.seen_in_train}});
  }
  return {{"predicates", preds}, {"triplets", trips}};
}

}  // namespace

nlohmann::json to_json(const MetricsReport& report) {
  return {{"task", to_string(report.task)},
          {"averaging", to_string(report.averaging)},
          {"graph_constraint", summary_json(report.constrained)},
          {"no_graph_constraint", summary_json(report.unconstrained)},
          {"per_class@50", per_class_json(report.per_class_50)},
          {"per_class@100", per_class_json(report.per_class_100)}};
}

void save_predictions(std::span<const Prediction> preds, const std::filesystem::path& file) {
  std::ostringstream out;
  for (const auto& p : preds) {
    nlohmann::json trips = nlohmann::json::array();
    for (const auto& t : p.triplets) trips.push_back({t.subject, t.object, t.predicate, t.score});
    out << nlohmann::json{{"sample_id", p.sample_id},
                          {"triplets", trips},
                          {"entity_labels", p.entity_labels}}
               .dump()
        << "\n";
  }
  write_text_atomic(file, out.str());
}

std::vector<Prediction> load_predictions(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  std::vector<Prediction> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Prediction p;
      p.sample_id = j.at("sample_id").get<std::string>();
      for (const auto& t : j.at("triplets")) {
        p.triplets.push_back({t.at(0).get<int>(), t.at(1).get<int>(), t.at(2).get<int>(),
                              t.at(3).get<double>()});
      }
      p.entity_labels = j.at("entity_labels").get<std::vector<int>>();
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(file.string() + ": line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace drm
