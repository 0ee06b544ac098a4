#include "drm/featurizer.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace drm {

namespace {

void require_valid(const Box& b) {
  if (!(b.x2 > b.x1) || !(b.y2 > b.y1)) {
    throw std::invalid_argument("degenerate box (zero area)");
  }
}

double iou(const Box& a, const Box& b, double* inter_out = nullptr) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = (w > 0 && h > 0) ? w * h : 0.0;
  if (inter_out != nullptr) *inter_out = inter;
  return inter / (a.area() + b.area() - inter);
}

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, sigma);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace

FeatureTables make_feature_tables(int num_entity_categories, const FeatureDims& dims,
                                  double appearance_noise, std::uint64_t seed) {
  if (dims.union_appearance() <= 0 || dims.appearance() <= 0) {
    throw std::invalid_argument("feature dims too small for the spatial codes");
  }
  std::mt19937_64 rng(seed);
  FeatureTables t;
  t.dims = dims;
  t.appearance_noise = appearance_noise;
  t.semantic = gaussian_matrix(num_entity_categories, dims.semantic, 1.0, rng);
  t.semantic.rowwise().normalize();
  t.prototypes = gaussian_matrix(num_entity_categories, dims.appearance(), 1.0, rng);
  t.union_projection = gaussian_matrix(dims.appearance(), dims.union_appearance(),
                                       1.0 / std::sqrt(dims.appearance()), rng);
  return t;
}

PairIndex all_pairs(int n) {
  PairIndex pairs;
  pairs.reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(std::max(n - 1, 0)));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i != j) pairs.emplace_back(i, j);
    }
  }
  return pairs;
}

Vector spatial_encoding(const Box& b) {
  require_valid(b);
  Vector v(kSpatialDim);
  v << b.x1, b.y1, b.x2, b.y2, b.cx(), b.cy(), b.width(), b.height(), b.area();
  return v;
}

Vector relative_spatial(const Box& s, const Box& o) {
  require_valid(s);
  require_valid(o);
  const double dx = o.cx() - s.cx(), dy = o.cy() - s.cy();
  double inter = 0.0;
  const double overlap = iou(s, o, &inter);
  Vector v(kRelativeDim);
  v << dx, dy, dx / s.width(), dy / s.height(), std::log(o.width() / s.width()),
      std::log(o.height() / s.height()), std::log(o.area() / s.area()), overlap,
      inter / s.area();
  return v;
}

Vector appearance(const FeatureTables& tables, const EntityInstance& e, std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(e.appearance_seed),
                    static_cast<std::uint32_t>(e.appearance_seed >> 32),
                    static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> n(0.0, tables.appearance_noise);
  Vector a = tables.prototypes.row(e.category_id).transpose();
  for (Eigen::Index k = 0; k < a.size(); ++k) a[k] += n(rng);
  return a;
}

int proposal_label(const FeatureTables& tables, const Vector& a) {
  Eigen::Index best = 0;
  (tables.prototypes.rowwise() - a.transpose()).rowwise().squaredNorm().minCoeff(&best);
  return static_cast<int>(best);
}

FeatureBundle featurize(const SceneGraphSample& sample, const FeatureTables& tables,
                        std::uint64_t seed, bool use_gt_labels) {
  const int n = static_cast<int>(sample.entities.size());
  if (n < 2) throw std::invalid_argument("featurize needs at least 2 entities");
  const FeatureDims& d = tables.dims;
  FeatureBundle f;
  f.entity.resize(n, d.entity);
  f.semantic.resize(n, d.semantic);
  f.labels.resize(static_cast<std::size_t>(n));
  std::vector<Vector> app(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto& e = sample.entities[i];
    if (e.category_id < 0 || e.category_id >= tables.semantic.rows()) {
      throw std::out_of_range("entity category outside the embedding table");
    }
    app[i] = appearance(tables, e, seed);
    f.entity.row(i).head(d.appearance()) = app[i].transpose();
    f.entity.row(i).tail(kSpatialDim) = spatial_encoding(e.box).transpose();
    f.labels[i] = use_gt_labels ? e.category_id : proposal_label(tables, app[i]);
    f.semantic.row(i) = tables.semantic.row(f.labels[i]);
  }
  f.pairs = all_pairs(n);
  f.union_.resize(static_cast<Eigen::Index>(f.pairs.size()), d.union_);
  for (std::size_t k = 0; k < f.pairs.size(); ++k) {
    const auto [i, j] = f.pairs[k];
    const Box& bi = sample.entities[i].box;
    const Box& bj = sample.entities[j].box;
    const Box ub{std::min(bi.x1, bj.x1), std::min(bi.y1, bj.y1), std::max(bi.x2, bj.x2),
                 std::max(bi.y2, bj.y2)};
    const Vector mean_app = 0.5 * (app[i] + app[j]);
    auto row = f.union_.row(static_cast<Eigen::Index>(k));
    row.head(kRelativeDim) = relative_spatial(bi, bj).transpose();
    row.segment(kRelativeDim, kSpatialDim) = spatial_encoding(ub).transpose();
    row.tail(d.union_appearance()) = mean_app.transpose() * tables.union_projection;
  }
  return f;
}

}  // namespace drm
