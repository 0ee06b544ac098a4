#pragma once

// Helpers shared by the unit tests and the acceptance binary.

#include "drm/autograd.hpp"
#include "drm/metrics.hpp"
#include "drm/model.hpp"
#include "drm/pipeline.hpp"
#include "drm/synthgraph.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <vector>

namespace drm::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
                            double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// A model small enough for finite differences.
inline ModelConfig tiny_model_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.num_entity_classes = 4;
  c.num_predicates = 3;
  c.features.entity = 16;
  c.features.semantic = 8;
  c.features.union_ = 24;
  c.attention.d_model = 8;
  c.attention.heads = 2;
  c.attention.ffn_hidden = 8;
  c.projection_dim = 8;
  c.classifier_hidden = 8;
  c.init_seed = seed;
  c.table_seed = seed + 100;
  return c;
}

// Random valid scene with n entities and the given relations (s, o, p).
inline SceneGraphSample random_scene(int n, int num_entity_classes, std::mt19937_64& rng,
                                     const std::vector<std::array<int, 3>>& relations = {}) {
  std::uniform_real_distribution<double> u(0.0, 0.5);
  std::uniform_int_distribution<int> cat(0, num_entity_classes - 1);
  SceneGraphSample s;
  s.sample_id = "t" + std::to_string(rng() % 100000);
  for (int i = 0; i < n; ++i) {
    const double x = u(rng), y = u(rng);
    s.entities.push_back({cat(rng), {x, y, x + 0.1 + u(rng), y + 0.1 + u(rng)}, rng()});
  }
  for (const auto& r : relations) s.relations.push_back({r[0], r[1], r[2]});
  return s;
}

struct GradCheckResult {
  double max_rel_error = 0;
  long checked = 0;
};

// Compares tape gradients of a scalar f with central differences (step h) for
// every trainable parameter element and every element of `inputs`. At most
// `max_coords` coordinates per tensor are probed (chosen at random) when > 0.
// The error per tensor is ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-6);
// the floor keeps tensors with an identically zero gradient (attention key
// biases, which softmax ignores) from dividing rounding noise by rounding noise.
inline GradCheckResult grad_check(ParameterStore& store, std::vector<Matrix> inputs,
                                  const std::function<Var(Tape&, const std::vector<Var>&)>& f,
                                  double h = 1e-4, int max_coords = 0,
                                  std::uint64_t seed = 0) {
  auto evaluate = [&](const std::vector<Matrix>& in) {
    Tape t(&store);
    std::vector<Var> vars;
    for (const auto& m : in) vars.push_back(t.input(m));
    return f(t, vars).value()(0, 0);
  };
  Tape tape(&store);
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(tape.input(m));
  const Var out = f(tape, vars);
  tape.backward(out);
  Gradients grads(store);
  tape.collect(grads);

  std::mt19937_64 rng(seed);
  GradCheckResult res;
  auto probe = [&](Matrix& target, const Matrix& analytic) {
    std::vector<Eigen::Index> coords(static_cast<std::size_t>(target.size()));
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = static_cast<Eigen::Index>(i);
    if (max_coords > 0 && coords.size() > static_cast<std::size_t>(max_coords)) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(max_coords));
    }
    double diff = 0, na = 0, nn = 0;
    for (Eigen::Index c : coords) {
      const double orig = target.data()[c];
      target.data()[c] = orig + h;
      const double up = evaluate(inputs);
      target.data()[c] = orig - h;
      const double down = evaluate(inputs);
      target.data()[c] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic.size() ? analytic.data()[c] : 0.0;
      diff += (a - numeric) * (a - numeric);
      na += a * a;
      nn += numeric * numeric;
      ++res.checked;
    }
    const double rel = std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn), 1e-6);
    res.max_rel_error = std::max(res.max_rel_error, rel);
  };
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (!store.at(i).trainable) continue;
    const Matrix analytic = grads.grads[i];
    probe(store.at(i).value, analytic);
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Matrix analytic = tape.grad(vars[i]);
    probe(inputs[i], analytic);
  }
  return res;
}

// Scalar readout <out, weights> so every output element carries gradient.
inline Var weighted_sum(Tape& t, Var out, const Matrix& weights) {
  return ops::sum(ops::hadamard(out, t.constant(weights)));
}

// Exhaustive recall oracle. Every candidate is compared against every other
// with a direct rank count; no sorting or shared ranking code.
struct OracleRecall {
  double recall = 0;
  std::vector<HitRecord> hits;
};

inline bool oracle_better(const ScoredTriplet& a, const ScoredTriplet& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.subject != b.subject) return a.subject < b.subject;
  if (a.object != b.object) return a.object < b.object;
  return a.predicate < b.predicate;
}

inline OracleRecall oracle_recall(const std::vector<Prediction>& preds,
                                  const std::vector<GroundTruth>& gts, int k, bool constraint,
                                  Task task, RecallAveraging averaging) {
  OracleRecall out;
  long hits_total = 0, gt_total = 0, images = 0;
  double image_sum = 0;
  for (std::size_t img = 0; img < gts.size(); ++img) {
    const auto& gt = gts[img];
    const auto& cands = preds[img].triplets;
    if (gt.relations.empty()) continue;
    // Survivors under the constraint: a candidate survives when no candidate
    // of the same pair beats it.
    std::vector<bool> alive(cands.size(), true);
    if (constraint) {
      for (std::size_t a = 0; a < cands.size(); ++a) {
        for (std::size_t b = 0; b < cands.size(); ++b) {
          if (a != b && cands[a].subject == cands[b].subject &&
              cands[a].object == cands[b].object && oracle_better(cands[b], cands[a])) {
            alive[a] = false;
          }
        }
      }
    }
    long hits = 0;
    for (const auto& rel : gt.relations) {
      bool hit = false;
      for (std::size_t a = 0; a < cands.size() && !hit; ++a) {
        if (!alive[a] || cands[a].subject != rel.subject_index ||
            cands[a].object != rel.object_index || cands[a].predicate != rel.predicate_id) {
          continue;
        }
        long ahead = 0;
        for (std::size_t b = 0; b < cands.size(); ++b) {
          if (b != a && alive[b] && oracle_better(cands[b], cands[a])) ++ahead;
        }
        hit = ahead < k;
      }
      if (hit && task == Task::SGCls) {
        const auto& lab = preds[img].entity_labels;
        hit = lab.at(rel.subject_index) == gt.entity_labels[rel.subject_index] &&
              lab.at(rel.object_index) == gt.entity_labels[rel.object_index];
      }
      hits += hit;
      out.hits.push_back({static_cast<int>(img), gt.entity_labels[rel.subject_index],
                          rel.predicate_id, gt.entity_labels[rel.object_index], hit});
    }
    hits_total += hits;
    gt_total += static_cast<long>(gt.relations.size());
    image_sum += static_cast<double>(hits) / static_cast<double>(gt.relations.size());
    ++images;
  }
  if (averaging == RecallAveraging::Micro) {
    out.recall = gt_total ? static_cast<double>(hits_total) / static_cast<double>(gt_total) : 0.0;
  } else {
    out.recall = images ? image_sum / static_cast<double>(images) : 0.0;
  }
  return out;
}

// Mean recall straight from the hit list: per predicate, pooled (micro) or
// averaged over images that contain the predicate (per image).
inline double oracle_mean_recall(const std::vector<HitRecord>& hits, int num_predicates,
                                 RecallAveraging averaging) {
  double sum = 0;
  int present = 0;
  for (int p = 0; p < num_predicates; ++p) {
    long h = 0, g = 0;
    std::vector<int> images;
    for (const auto& r : hits) {
      if (r.predicate != p) continue;
      h += r.hit;
      ++g;
      if (std::find(images.begin(), images.end(), r.image) == images.end()) images.push_back(r.image);
    }
    if (g == 0) continue;
    double rec = 0;
    if (averaging == RecallAveraging::Micro) {
      rec = static_cast<double>(h) / static_cast<double>(g);
    } else {
      for (int img : images) {
        long ih = 0, ig = 0;
        for (const auto& r : hits) {
          if (r.predicate == p && r.image == img) {
            ih += r.hit;
            ++ig;
          }
        }
        rec += static_cast<double>(ih) / static_cast<double>(ig);
      }
      rec /= static_cast<double>(images.size());
    }
    sum += rec;
    ++present;
  }
  return present ? sum / present : 0.0;
}

// Random prediction/ground-truth instance over at most `max_samples` images.
// Scores come from a small grid so ties are common.
inline void random_eval_instance(std::mt19937_64& rng, int max_samples, int num_predicates,
                                 int num_entity_classes, std::vector<Prediction>& preds,
                                 std::vector<GroundTruth>& gts) {
  preds.clear();
  gts.clear();
  const int samples = std::uniform_int_distribution<int>(1, max_samples)(rng);
  for (int s = 0; s < samples; ++s) {
    const int n = std::uniform_int_distribution<int>(2, 4)(rng);
    GroundTruth gt;
    gt.sample_id = "s" + std::to_string(s);
    Prediction pred;
    pred.sample_id = gt.sample_id;
    std::uniform_int_distribution<int> cat(0, num_entity_classes - 1);
    for (int i = 0; i < n; ++i) {
      gt.entity_labels.push_back(cat(rng));
      pred.entity_labels.push_back(rng() % 4 == 0 ? cat(rng) : gt.entity_labels.back());
    }
    std::bernoulli_distribution keep(0.3);
    std::uniform_int_distribution<int> score(0, 5);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (i == j) continue;
        for (int p = 0; p < num_predicates; ++p) {
          if (keep(rng)) gt.relations.push_back({i, j, p});
          if (rng() % 5 != 0) pred.triplets.push_back({i, j, p, 0.2 * score(rng)});
        }
      }
    }
    std::shuffle(pred.triplets.begin(), pred.triplets.end(), rng);
    gts.push_back(std::move(gt));
    preds.push_back(std::move(pred));
  }
}

// Dataset matching tiny_model_config's class counts.
inline DatasetSpec tiny_dataset_spec(int train = 40) {
  DatasetSpec s;
  s.num_entity_categories = 4;
  s.num_predicate_categories = 3;
  s.zipf_exponent = 1.0;
  s.triplet_compatibility = {{{0, 1}, {2, 3}, {1, 2}}, {{0, 1}, {3, 0}}, {{2, 1}}};
  s.geometry_rules = {GeometryRule::Above, GeometryRule::LeftOf, GeometryRule::Inside};
  s.train_samples = train;
  s.val_samples = 10;
  s.test_samples = 10;
  s.min_entities = 3;
  s.max_entities = 5;
  return s;
}

// Pipeline-sized but quick: tiny data and model, one training epoch.
inline ExperimentConfig tiny_experiment_config(const std::string& run_id = "tiny") {
  ExperimentConfig c;
  c.run_id = run_id;
  c.seed = 3;
  c.dataset = tiny_dataset_spec(60);
  c.model = tiny_model_config();
  c.train.epochs = 1;
  c.train.batch_size = 8;
  c.train.log_validation = false;
  c.dkt.finetune_epochs = 3;
  return c;
}

// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("drm_tests_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace drm::testing
