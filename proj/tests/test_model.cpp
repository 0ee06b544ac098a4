#include "drm/contrastive.hpp"
#include "drm/model.hpp"
#include "drm/training.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace drm;
using drm::testing::random_matrix;

namespace {

struct Scene {
  SceneGraphSample sample;
  FeatureBundle features;
};

Scene make_scene(const DrmModel& model, int n, std::uint64_t seed,
                 const std::vector<std::array<int, 3>>& relations) {
  std::mt19937_64 rng(seed);
  Scene s;
  s.sample = testing::random_scene(n, model.config().num_entity_classes, rng, relations);
  s.features = featurize(s.sample, model.tables(), seed);
  return s;
}

EncodedScene encode(Tape& t, const DrmModel& m, const FeatureBundle& f, EncoderProbes* probes = nullptr) {
  return m.encode(t, f.entity, f.semantic, f.union_, f.pairs, &f.labels, probes);
}

Matrix unit_rows(Matrix m) {
  m.rowwise().normalize();
  return m;
}

// A random rotation from the QR factorization of a Gaussian matrix.
Matrix random_rotation(int d, std::mt19937_64& rng) {
  const Eigen::MatrixXd g = random_matrix(d, d, rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return Eigen::MatrixXd(qr.householderQ());
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("predicate masks for N = 2") {
    const auto pairs = all_pairs(2);
    const BoolMatrix m = predicate_to_entity_mask(pairs, 2);
    REQUIRE(m.rows() == 2);
    CHECK(m.row(0).count() == 2);
    CHECK(m(0, 0));
    CHECK(m(0, 1));
  }

  TEST_CASE("entity k sees the 2(N-1) pairs incident to it") {
    const auto pairs = all_pairs(3);
    const BoolMatrix m = entity_to_predicate_mask(pairs, 3);
    REQUIRE(m.rows() == 3);
    for (int k = 0; k < 3; ++k) CHECK(m.row(k).count() == 4);
    std::vector<std::pair<int, int>> seen;
    for (std::size_t q = 0; q < pairs.size(); ++q) {
      if (m(0, static_cast<Eigen::Index>(q))) seen.push_back(pairs[q]);
    }
    CHECK(seen == std::vector<std::pair<int, int>>{{0, 1}, {0, 2}, {1, 0}, {2, 0}});
    CHECK_THROWS_AS(predicate_to_entity_mask({{0, 3}}, 3), std::out_of_range);
  }

  TEST_CASE("predicate-to-entity attention mass outside subject and object is exactly 0") {
    const DrmModel model(testing::tiny_model_config());
    for (int n = 2; n <= 5; ++n) {
      const Scene s = make_scene(model, n, 100 + n, {});
      Tape t(&model.params());
      EncoderProbes probes;
      encode(t, model, s.features, &probes);
      REQUIRE(probes.predicate_encoder.size() == kPredicateEncoderLayers);
      for (const auto& layer : probes.predicate_encoder) {
        for (const auto& w : layer.ca_x.weights) {
          for (std::size_t q = 0; q < s.features.pairs.size(); ++q) {
            const auto [i, j] = s.features.pairs[q];
            double outside = 0;
            for (int k = 0; k < n; ++k) {
              if (k != i && k != j) outside += w(static_cast<Eigen::Index>(q), k);
            }
            CHECK(outside == 0.0);
          }
        }
        // Entity queries only see incident pairs.
        for (const auto& w : layer.ca_y.weights) {
          for (int k = 0; k < n; ++k) {
            for (std::size_t q = 0; q < s.features.pairs.size(); ++q) {
              const auto [i, j] = s.features.pairs[q];
              if (i != k && j != k) CHECK(w(k, static_cast<Eigen::Index>(q)) == 0.0);
            }
          }
        }
      }
    }
  }

  TEST_CASE("cross-attention from a pair ignores non-incident entities") {
    // The masked CA unit cannot see entity 2 from pair (0, 1): changing that
    // entity's row leaves the pair's CA output bit-for-bit unchanged.
    AttentionConfig cfg{8, 2, 16};
    ParameterStore store;
    std::mt19937_64 rng(5);
    add_attention_unit_params(store, "ca", cfg, true, rng);
    const auto pairs = all_pairs(3);
    const BoolMatrix mask = predicate_to_entity_mask(pairs, 3);
    const Matrix p = random_matrix(6, 8, rng);
    Matrix e = random_matrix(3, 8, rng);
    Tape t(&store);
    const Var pv = t.constant(p), e1 = t.constant(e);
    const Matrix a = attention_unit(t, "ca", 2, pv, &e1, &mask).value();
    e.row(2).setZero();
    const Var e2 = t.constant(e);
    const Matrix b = attention_unit(t, "ca", 2, pv, &e2, &mask).value();
    CHECK(a.row(0) == b.row(0));  // pair (0, 1)
    CHECK(a.row(2) == b.row(2));  // pair (1, 0)
    CHECK(a.row(1) != b.row(1));  // pair (0, 2) sees entity 2
  }

  TEST_CASE("full predicate encoder: non-incident entities still reach p' through self-attention") {
    // Only the CA units are masked. Entity SA mixes entity 2 into entities 0
    // and 1, and predicate SA mixes every pair, so p'(0, 1) moves. This
    // records the leak rather than asserting invariance.
    const DrmModel model(testing::tiny_model_config());
    Scene s = make_scene(model, 3, 77, {});
    Tape t1(&model.params());
    const Matrix a = encode(t1, model, s.features).p_prime.value();
    s.features.entity.row(2).setZero();
    Tape t2(&model.params());
    const Matrix b = encode(t2, model, s.features).p_prime.value();
    CHECK((a.row(0) - b.row(0)).norm() > 0.0);
  }

  TEST_CASE("output shapes and projection norms") {
    const DrmModel model(testing::tiny_model_config());
    const Scene s = make_scene(model, 4, 9, {});
    Tape t(&model.params());
    const auto enc = encode(t, model, s.features);
    CHECK(enc.entity_logits.rows() == 4);
    CHECK(enc.entity_logits.cols() == 4);
    CHECK(enc.p_prime.rows() == 12);
    CHECK(enc.t_prime.rows() == 12);
    const Var logits = model.relation_logits(t, enc.p_prime, enc.t_prime);
    CHECK(logits.rows() == 12);
    CHECK(logits.cols() == 3);
    CHECK(logits.value().allFinite());
    const Matrix pp = model.project_predicate(t, enc.p_prime).value();
    const Matrix tt = model.project_triplet(t, enc.t_prime).value();
    for (int r = 0; r < 12; ++r) {
      CHECK(std::abs(pp.row(r).norm() - 1.0) < 1e-6);
      CHECK(std::abs(tt.row(r).norm() - 1.0) < 1e-6);
    }
  }

  TEST_CASE("relation classifier is pure and checks its input dim") {
    const DrmModel model(testing::tiny_model_config());
    std::mt19937_64 rng(1);
    const Matrix p = random_matrix(5, 8, rng), q = random_matrix(5, 8, rng);
    Tape t(&model.params());
    const Matrix a = model.relation_logits(t, t.constant(p), t.constant(q)).value();
    const Matrix b = model.relation_logits(t, t.constant(p), t.constant(q)).value();
    CHECK(a == b);
    CHECK_THROWS(model.relation_logits(t, t.constant(random_matrix(5, 7, rng))));
  }

  TEST_CASE("triplet encoder with one pair is defined; pair order is equivariant") {
    const DrmModel model(testing::tiny_model_config());
    Scene s = make_scene(model, 2, 12, {});
    Tape t(&model.params());
    const auto enc = encode(t, model, s.features);
    CHECK(enc.t_prime.value().allFinite());

    // One pair alone.
    FeatureBundle one = s.features;
    one.pairs = {{0, 1}};
    one.union_ = s.features.union_.topRows(1);
    const auto enc1 = encode(t, model, one);
    CHECK(enc1.t_prime.rows() == 1);
    CHECK(enc1.t_prime.value().allFinite());

    // Reversed pair order permutes t'.
    FeatureBundle rev = s.features;
    rev.pairs = {{1, 0}, {0, 1}};
    rev.union_ = s.features.union_.colwise().reverse();
    const auto enc2 = encode(t, model, rev);
    CHECK((enc2.t_prime.value().row(0) - enc.t_prime.value().row(1)).norm() < 1e-12);
    CHECK((enc2.t_prime.value().row(1) - enc.t_prime.value().row(0)).norm() < 1e-12);
  }

  TEST_CASE("baseline without cue encoders classifies the projected union feature") {
    auto cfg = testing::tiny_model_config();
    cfg.use_predicate_encoder = cfg.use_triplet_encoder = false;
    const DrmModel model(cfg);
    const std::string stack = prefix::kPredicateEncoder + ".ha";
    const std::string trip = prefix::kTripletEncoder + ".";
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      const std::string& name = model.params().at(i).name;
      CHECK(name.rfind(stack, 0) != 0);
      CHECK(name.rfind(trip, 0) != 0);
    }
    CHECK(model.relation_input_dim() == cfg.attention.d_model);
    const Scene s = make_scene(model, 3, 9, {{0, 1, 0}});
    Tape t(&model.params());
    const auto enc = encode(t, model, s.features);
    const Matrix p0 =
        apply_linear(t, prefix::kPredicateEncoder + ".pred_in", t.constant(s.features.union_)).value();
    CHECK(enc.p_prime.value() == p0);
    CHECK(enc.t_prime.value() == p0);
    CHECK(model.relation_logits(t, enc.p_prime, enc.t_prime).value().cols() == cfg.num_predicates);
  }

  TEST_CASE("contrastive: identical pair has zero loss") {
    Matrix r(2, 3);
    r << 1, 0, 0, 1, 0, 0;
    const std::vector<int> labels = {4, 4};
    CHECK(contrastive_loss(r, labels, 1.0) == doctest::Approx(0.0).epsilon(1e-15));
  }

  TEST_CASE("contrastive: {x, x, -x} with labels {A, A, B} at tau 1") {
    Matrix r(3, 2);
    r << 0.6, 0.8, 0.6, 0.8, -0.6, -0.8;
    const std::vector<int> labels = {0, 0, 1};
    const double expected = std::log1p(std::exp(-2.0));
    CHECK(expected == doctest::Approx(0.1269).epsilon(1e-3));
    CHECK(contrastive_loss(r, labels, 1.0) == doctest::Approx(expected).epsilon(1e-12));
  }

  TEST_CASE("contrastive: no positive pair is an error") {
    Matrix r = Matrix::Identity(3, 3);
    const std::vector<int> labels = {0, 1, 2};
    CHECK_THROWS_AS(contrastive_loss(r, labels, 0.5), std::invalid_argument);
    const std::vector<int> ok = {0, 1, 1};
    CHECK_THROWS_AS(contrastive_loss(r, ok, 0.0), std::invalid_argument);
  }

  TEST_CASE("contrastive: non-negative, permutation and rotation invariant") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 20; ++trial) {
      const Matrix r = unit_rows(random_matrix(10, 6, rng));
      std::vector<int> labels(10);
      for (auto& l : labels) l = static_cast<int>(rng() % 3);
      labels[1] = labels[0];
      const double base = contrastive_loss(r, labels, 0.3);
      CHECK(base >= 0.0);

      std::vector<int> perm(10);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      Matrix rp(10, 6);
      std::vector<int> lp(10);
      for (int i = 0; i < 10; ++i) {
        rp.row(i) = r.row(perm[i]);
        lp[i] = labels[perm[i]];
      }
      CHECK(contrastive_loss(rp, lp, 0.3) == doctest::Approx(base).epsilon(1e-12));
      const Matrix rot = r * random_rotation(6, rng);
      CHECK(contrastive_loss(rot, labels, 0.3) == doctest::Approx(base).epsilon(1e-10));
    }
  }

  TEST_CASE("contrastive: lower temperature widens the hard/easy gap") {
    // Positive at angle 0.6 from the anchor; the negative sits either closer
    // than the positive (hard) or nearly opposite (easy).
    auto batch = [](double neg_angle) {
      Matrix r(3, 2);
      r << 1, 0, std::cos(0.6), std::sin(0.6), std::cos(-neg_angle), std::sin(-neg_angle);
      return r;
    };
    const std::vector<int> labels = {0, 0, 1};
    double last_gap = -1;
    for (double tau : {1.0, 0.5, 0.2, 0.1}) {
      const double gap =
          contrastive_loss(batch(0.2), labels, tau) - contrastive_loss(batch(2.8), labels, tau);
      CHECK(gap > last_gap);
      last_gap = gap;
    }
  }

  TEST_CASE("gradient check: contrastive loss through normalization") {
    std::mt19937_64 rng(4);
    ParameterStore none;
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<int> labels = {0, 0, 1, 1, 2, 0};
      const double tau = 0.1 + 0.2 * trial;
      const auto res = testing::grad_check(
          none, {random_matrix(6, 5, rng)}, [&](Tape& t, const std::vector<Var>& in) {
            return contrastive_loss(ops::l2_normalize_rows(in[0]), labels, tau);
          });
      CHECK(res.max_rel_error < 1e-3);
    }
  }

  TEST_CASE("gradient check: predicate cue encoder stack with masks") {
    AttentionConfig cfg{8, 2, 8};
    ParameterStore store;
    std::mt19937_64 rng(31);
    add_ha_stack_params(store, "prd", cfg, kPredicateEncoderLayers, rng);
    const auto pairs = all_pairs(3);
    const BoolMatrix to_e = predicate_to_entity_mask(pairs, 3);
    const BoolMatrix to_p = to_e.transpose();
    const Matrix w = random_matrix(6, 8, rng);
    const auto res = testing::grad_check(
        store, {random_matrix(6, 8, rng), random_matrix(3, 8, rng)},
        [&](Tape& t, const std::vector<Var>& in) {
          const auto o = ha_stack(t, "prd", 2, kPredicateEncoderLayers, {in[0], in[1]}, {&to_e, &to_p});
          return testing::weighted_sum(t, o.x, w);
        },
        1e-4, 30, 31);
    CHECK(res.max_rel_error < 1e-3);
  }

  TEST_CASE("gradient check: triplet cue encoder stack at M = 4, d = 16") {
    AttentionConfig cfg{16, 4, 16};
    ParameterStore store;
    std::mt19937_64 rng(32);
    add_ha_stack_params(store, "tpt", cfg, kTripletEncoderLayers, rng);
    const Matrix w = random_matrix(4, 16, rng);
    const auto res = testing::grad_check(
        store, {random_matrix(4, 16, rng), random_matrix(4, 16, rng)},
        [&](Tape& t, const std::vector<Var>& in) {
          const auto o = ha_stack(t, "tpt", 4, kTripletEncoderLayers, {in[0], in[1]});
          return testing::weighted_sum(t, ops::add(o.x, o.y), w);
        },
        1e-4, 30, 32);
    CHECK(res.max_rel_error < 1e-3);
  }

  TEST_CASE("gradient check: each loss term and the weighted total") {
    DrmModel model(testing::tiny_model_config(3));
    const Scene a = make_scene(model, 3, 41, {{0, 1, 0}, {1, 2, 1}, {2, 0, 0}});
    const Scene b = make_scene(model, 3, 42, {{0, 2, 0}, {1, 0, 1}});
    std::vector<SceneView> views = {{&a.sample, &a.features}, {&a.sample, &a.features},
                                    {&b.sample, &b.features}};
    const LossWeights defaults;
    struct Case {
      const char* name;
      LossWeights w;
    };
    auto only = [&](double e, double r, double p, double t) {
      LossWeights w = defaults;
      w.entity = e;
      w.relation = r;
      w.predicate = p;
      w.triplet = t;
      return w;
    };
    for (const Case& c : {Case{"L_e", only(1, 0, 0, 0)}, Case{"L_r", only(0, 1, 0, 0)},
                          Case{"L_p", only(0, 0, 1, 0)}, Case{"L_t", only(0, 0, 0, 1)},
                          Case{"L", defaults}}) {
      CAPTURE(c.name);
      const auto res = testing::grad_check(
          model.params(), {},
          [&](Tape& t, const std::vector<Var>&) { return total_loss(t, model, views, c.w).total; },
          1e-4, 4, 5);
      CHECK(res.max_rel_error < 1e-3);
    }
  }

  TEST_CASE("total loss: zero weights, isolation and weighted sum") {
    const DrmModel model(testing::tiny_model_config(4));
    const Scene a = make_scene(model, 4, 51, {{0, 1, 0}, {2, 3, 0}, {1, 3, 2}});
    const Scene b = make_scene(model, 3, 52, {{0, 1, 0}, {2, 1, 2}});
    // Scene a twice, as the two views of training, so every term has positives.
    std::vector<SceneView> views = {{&a.sample, &a.features}, {&a.sample, &a.features},
                                    {&b.sample, &b.features}};

    LossWeights zero;
    zero.entity = zero.relation = zero.predicate = zero.triplet = 0;
    Tape t0(&model.params());
    CHECK(total_loss(t0, model, views, zero).total.value()(0, 0) == 0.0);

    LossWeights rel = zero;
    rel.relation = 1;
    Tape t1(&model.params());
    const double l = total_loss(t1, model, views, rel).total.value()(0, 0);
    // Relation cross-entropy recomputed by hand from the logits.
    double ce = 0;
    int count = 0;
    for (const Scene* s : {&a, &a, &b}) {
      Tape t(&model.params());
      const auto enc = encode(t, model, s->features);
      const Matrix logits = model.relation_logits(t, enc.p_prime, enc.t_prime).value();
      const int n = static_cast<int>(s->sample.entities.size());
      for (const auto& r : s->sample.relations) {
        const int row = r.subject_index * (n - 1) +
                        (r.object_index < r.subject_index ? r.object_index : r.object_index - 1);
        REQUIRE(s->features.pairs[row] == std::make_pair(r.subject_index, r.object_index));
        const double m = logits.row(row).maxCoeff();
        const double lse = m + std::log((logits.row(row).array() - m).exp().sum());
        ce += lse - logits(row, r.predicate_id);
        ++count;
      }
    }
    CHECK(l == doctest::Approx(ce / count).epsilon(1e-12));

    const LossWeights w;
    Tape t2(&model.params());
    const auto full = total_loss(t2, model, views, w);
    const auto& tm = full.terms;
    CHECK(tm.entity > 0);
    CHECK(tm.predicate > 0);
    CHECK(tm.triplet > 0);
    CHECK(std::abs(tm.total - (w.entity * tm.entity + w.relation * tm.relation +
                               w.predicate * tm.predicate + w.triplet * tm.triplet)) < 1e-6);
  }

  TEST_CASE("total loss: no positive pair drops the contrastive terms") {
    const DrmModel model(testing::tiny_model_config(4));
    const Scene a = make_scene(model, 3, 61, {{0, 1, 0}, {1, 2, 1}});
    std::vector<SceneView> views = {{&a.sample, &a.features}};
    Tape t(&model.params());
    const auto l = total_loss(t, model, views, LossWeights{});
    CHECK(l.terms.predicate == 0.0);
    CHECK(l.terms.triplet == 0.0);
    CHECK(l.terms.relation > 0.0);
  }

  TEST_CASE("invalid loss weights are rejected") {
    LossWeights w;
    w.tau_triplet = 0;
    CHECK_THROWS_AS(validate(w), std::invalid_argument);
    w = LossWeights{};
    w.entity = -1;
    CHECK_THROWS_AS(validate(w), std::invalid_argument);
  }
}
