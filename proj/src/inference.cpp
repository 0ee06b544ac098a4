#include "drm/inference.hpp"

#include <map>
#include <stdexcept>

namespace drm {

std::vector<Prediction> predict(const DrmModel& model, std::span<const SceneGraphSample> samples,
                                Task task, std::uint64_t feature_seed) {
  std::vector<Prediction> out;
  out.reserve(samples.size());
  const bool gt_labels = task == Task::PredCls;
  for (const auto& sample : samples) {
    const FeatureBundle f = featurize(sample, model.tables(), feature_seed, gt_labels);
    Tape tape(&model.params());
    const std::vector<int>* given = gt_labels ? &f.labels : nullptr;
    const EncodedScene enc =
        model.encode(tape, f.entity, f.semantic, f.union_, f.pairs, given);
    const Matrix rel = softmax_rows(model.relation_logits(tape, enc.p_prime, enc.t_prime).value());

    Prediction p;
    p.sample_id = sample.sample_id;
    std::vector<double> entity_score(static_cast<std::size_t>(f.num_entities()), 1.0);
    if (gt_labels) {
      p.entity_labels = f.labels;
    } else {
      p.entity_labels = enc.triplet_labels;
      const Matrix ent = softmax_rows(enc.entity_logits.value());
      for (int i = 0; i < f.num_entities(); ++i) entity_score[i] = ent(i, p.entity_labels[i]);
    }
    p.triplets.reserve(f.pairs.size() * static_cast<std::size_t>(rel.cols()));
    for (std::size_t k = 0; k < f.pairs.size(); ++k) {
      const auto [i, j] = f.pairs[k];
      for (Eigen::Index c = 0; c < rel.cols(); ++c) {
        p.triplets.push_back({i, j, static_cast<int>(c),
                              rel(static_cast<Eigen::Index>(k), c) * entity_score[i] *
                                  entity_score[j]});
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

// Row of each annotated relation inside the all-pairs index.
std::vector<int> relation_rows(const SceneGraphSample& s) {
  const int n = static_cast<int>(s.entities.size());
  std::vector<int> rows;
  for (const auto& r : s.relations) {
    const int i = r.subject_index, j = r.object_index;
    rows.push_back(i * (n - 1) + (j < i ? j : j - 1));
  }
  return rows;
}

template <typename Fn>
void for_each_relation_batch(const DrmModel& model, std::span<const SceneGraphSample> samples,
                             std::uint64_t feature_seed, Fn&& fn) {
  for (const auto& sample : samples) {
    if (sample.relations.empty()) continue;
    const FeatureBundle f = featurize(sample, model.tables(), feature_seed, true);
    Tape tape(&model.params());
    const EncodedScene enc = model.encode(tape, f.entity, f.semantic, f.union_, f.pairs, &f.labels);
    const auto rows = relation_rows(sample);
    fn(sample, tape, enc, rows);
  }
}

void append_rows(Matrix& dst, const Matrix& src) {
  if (dst.size() == 0) {
    dst = src;
    return;
  }
  const Eigen::Index old = dst.rows();
  dst.conservativeResize(old + src.rows(), Eigen::NoChange);
  dst.bottomRows(src.rows()) = src;
}

}  // namespace

RelationFeatures extract_relation_features(const DrmModel& model,
                                           std::span<const SceneGraphSample> samples,
                                           std::uint64_t feature_seed) {
  RelationFeatures out;
  std::vector<Matrix> p_parts, t_parts;
  for_each_relation_batch(model, samples, feature_seed,
                          [&](const SceneGraphSample& s, Tape&, const EncodedScene& enc,
                              const std::vector<int>& rows) {
                            Matrix p(static_cast<Eigen::Index>(rows.size()), enc.p_prime.cols());
                            Matrix t(static_cast<Eigen::Index>(rows.size()), enc.t_prime.cols());
                            for (std::size_t k = 0; k < rows.size(); ++k) {
                              p.row(static_cast<Eigen::Index>(k)) = enc.p_prime.value().row(rows[k]);
                              t.row(static_cast<Eigen::Index>(k)) = enc.t_prime.value().row(rows[k]);
                            }
                            p_parts.push_back(std::move(p));
                            t_parts.push_back(std::move(t));
                            for (const auto& r : s.relations) {
                              out.predicate_labels.push_back(r.predicate_id);
                              out.triplet_keys.push_back({s.entities[r.subject_index].category_id,
                                                          r.predicate_id,
                                                          s.entities[r.object_index].category_id});
                            }
                          });
  Eigen::Index total = 0;
  for (const auto& m : p_parts) total += m.rows();
  const Eigen::Index d = p_parts.empty() ? 0 : p_parts.front().cols();
  out.predicate.resize(total, d);
  out.triplet.resize(total, d);
  Eigen::Index off = 0;
  for (std::size_t k = 0; k < p_parts.size(); ++k) {
    out.predicate.middleRows(off, p_parts[k].rows()) = p_parts[k];
    out.triplet.middleRows(off, t_parts[k].rows()) = t_parts[k];
    off += p_parts[k].rows();
  }
  return out;
}

ProjectedFeatures extract_projected_features(const DrmModel& model,
                                             std::span<const SceneGraphSample> samples,
                                             std::uint64_t feature_seed) {
  ProjectedFeatures out;
  for_each_relation_batch(
      model, samples, feature_seed,
      [&](const SceneGraphSample& s, Tape& tape, const EncodedScene& enc,
          const std::vector<int>& rows) {
        append_rows(out.predicate,
                    model.project_predicate(tape, ops::gather_rows(enc.p_prime, rows)).value());
        if (model.config().use_triplet_encoder) {
          append_rows(out.triplet,
                      model.project_triplet(tape, ops::gather_rows(enc.t_prime, rows)).value());
        }
        for (const auto& r : s.relations) {
          out.predicate_labels.push_back(r.predicate_id);
          out.triplet_keys.push_back({s.entities[r.subject_index].category_id, r.predicate_id,
                                      s.entities[r.object_index].category_id});
        }
      });
  return out;
}

ClusterStats cluster_stats(const Matrix& rows, std::span<const int> labels, bool keep_values) {
  if (static_cast<Eigen::Index>(labels.size()) != rows.rows()) {
    throw std::invalid_argument("one label per row required");
  }
  ClusterStats s;
  const Matrix sims = rows * rows.transpose();
  double intra = 0.0, inter = 0.0;
  for (Eigen::Index a = 0; a < rows.rows(); ++a) {
    for (Eigen::Index b = a + 1; b < rows.rows(); ++b) {
      const double v = sims(a, b);
      if (labels[a] == labels[b]) {
        intra += v;
        ++s.intra_pairs;
        if (keep_values) s.intra_values.push_back(v);
      } else {
        inter += v;
        ++s.inter_pairs;
        if (keep_values) s.inter_values.push_back(v);
      }
    }
  }
  s.intra = s.intra_pairs > 0 ? intra / s.intra_pairs : 0.0;
  s.inter = s.inter_pairs > 0 ? inter / s.inter_pairs : 0.0;
  return s;
}

}  // namespace drm
