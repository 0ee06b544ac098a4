#include "drm/synthgraph.hpp"

#include "drm/json_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace drm {

namespace {

constexpr std::array<GeometryRule, 7> kAllRules = {
    GeometryRule::Above,  GeometryRule::Below,    GeometryRule::LeftOf, GeometryRule::RightOf,
    GeometryRule::Inside, GeometryRule::Contains, GeometryRule::Overlap};

bool strictly_inside(const Box& inner, const Box& outer) {
  return inner.x1 > outer.x1 && inner.y1 > outer.y1 && inner.x2 < outer.x2 &&
         inner.y2 < outer.y2;
}

double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

// Cumulative Zipf(s) weights over ranks 1..n; s = 0 gives the uniform law.
std::discrete_distribution<int> zipf(int n, double s) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) w[k] = std::pow(static_cast<double>(k + 1), -s);
  return std::discrete_distribution<int>(w.begin(), w.end());
}

// Subject box laid out against an object box [0, ow] x [0, oh] in a local frame.
Box local_subject(GeometryRule rule, double ow, double oh, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  Box s;
  switch (rule) {
    case GeometryRule::Above:
    case GeometryRule::Below: {
      const double sw = ow * uni(0.5, 1.2), sh = oh * uni(0.4, 1.0), gap = oh * uni(0.05, 0.3);
      const double cx = ow * uni(0.3, 0.7);
      s.x1 = cx - sw / 2;
      s.x2 = cx + sw / 2;
      if (rule == GeometryRule::Above) {
        s.y2 = -gap;
        s.y1 = s.y2 - sh;
      } else {
        s.y1 = oh + gap;
        s.y2 = s.y1 + sh;
      }
      break;
    }
    case GeometryRule::LeftOf:
    case GeometryRule::RightOf: {
      const double sw = ow * uni(0.4, 1.0), sh = oh * uni(0.5, 1.2), gap = ow * uni(0.05, 0.3);
      const double cy = oh * uni(0.3, 0.7);
      s.y1 = cy - sh / 2;
      s.y2 = cy + sh / 2;
      if (rule == GeometryRule::LeftOf) {
        s.x2 = -gap;
        s.x1 = s.x2 - sw;
      } else {
        s.x1 = ow + gap;
        s.x2 = s.x1 + sw;
      }
      break;
    }
    case GeometryRule::Inside: {
      const double sw = ow * uni(0.2, 0.6), sh = oh * uni(0.2, 0.6);
      s.x1 = uni(0.05 * ow, ow - sw - 0.05 * ow);
      s.y1 = uni(0.05 * oh, oh - sh - 0.05 * oh);
      s.x2 = s.x1 + sw;
      s.y2 = s.y1 + sh;
      break;
    }
    case GeometryRule::Contains: {
      s.x1 = -ow * uni(0.1, 0.5);
      s.y1 = -oh * uni(0.1, 0.5);
      s.x2 = ow * (1.0 + uni(0.1, 0.5));
      s.y2 = oh * (1.0 + uni(0.1, 0.5));
      break;
    }
    case GeometryRule::Overlap: {
      // Starts inside the object horizontally and ends past its right edge.
      s.x1 = ow * uni(0.4, 0.8);
      s.x2 = s.x1 + ow * uni(0.7, 1.2);
      s.y1 = oh * uni(-0.4, 0.5);
      s.y2 = s.y1 + oh * uni(0.6, 1.2);
      break;
    }
  }
  return s;
}

Box random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double w = 0.1 + 0.3 * u(rng), h = 0.1 + 0.3 * u(rng);
  const double x = (1.0 - w) * u(rng), y = (1.0 - h) * u(rng);
  return Box{x, y, x + w, y + h};
}

Box perturb(const Box& b, double sigma, std::mt19937_64& rng) {
  if (sigma <= 0) return b;
  std::normal_distribution<double> n(0.0, sigma);
  Box r{b.x1 + n(rng), b.y1 + n(rng), b.x2 + n(rng), b.y2 + n(rng)};
  constexpr double kMin = 0.01;
  r.x1 = std::clamp(r.x1, 0.0, 1.0 - kMin);
  r.y1 = std::clamp(r.y1, 0.0, 1.0 - kMin);
  r.x2 = std::clamp(r.x2, r.x1 + kMin, 1.0);
  r.y2 = std::clamp(r.y2, r.y1 + kMin, 1.0);
  return r;
}

// Lays out a (subject, object) pair for `rule` inside the unit square.
std::pair<Box, Box> layout_pair(GeometryRule rule, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double ow = 0.6 + 0.8 * u(rng), oh = 0.6 + 0.8 * u(rng);
  const Box o{0, 0, ow, oh};
  const Box s = local_subject(rule, ow, oh, rng);
  const double ux1 = std::min(o.x1, s.x1), uy1 = std::min(o.y1, s.y1);
  const double ux2 = std::max(o.x2, s.x2), uy2 = std::max(o.y2, s.y2);
  const double extent = 0.4 + 0.5 * u(rng);
  const double k = extent / std::max(ux2 - ux1, uy2 - uy1);
  const double tx = (1.0 - k * (ux2 - ux1)) * u(rng), ty = (1.0 - k * (uy2 - uy1)) * u(rng);
  auto place = [&](const Box& b) {
    return Box{tx + k * (b.x1 - ux1), ty + k * (b.y1 - uy1), tx + k * (b.x2 - ux1),
               ty + k * (b.y2 - uy1)};
  };
  return {place(s), place(o)};
}

std::vector<SceneGraphSample> generate_split(const DatasetSpec& spec, const std::string& prefix,
                                             int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto predicate_dist = zipf(spec.num_predicate_categories, spec.zipf_exponent);
  std::vector<std::discrete_distribution<int>> triplet_dist;
  for (const auto& pairs : spec.triplet_compatibility) {
    triplet_dist.push_back(zipf(static_cast<int>(pairs.size()), spec.triplet_zipf_exponent));
  }
  std::uniform_int_distribution<int> n_entities(spec.min_entities, spec.max_entities);
  std::uniform_int_distribution<int> any_category(0, spec.num_entity_categories - 1);

  std::vector<SceneGraphSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    SceneGraphSample s;
    s.sample_id = prefix + "_" + std::to_string(i);
    const int n = n_entities(rng);
    for (int r = 0; r + 1 < n; r += 2) {
      const int p = predicate_dist(rng);
      const CategoryPair cats = spec.triplet_compatibility[p][triplet_dist[p](rng)];
      auto [sb, ob] = layout_pair(spec.geometry_rules[p], rng);
      const int si = static_cast<int>(s.entities.size());
      s.entities.push_back({cats.subject, perturb(sb, spec.box_noise, rng), rng()});
      s.entities.push_back({cats.object, perturb(ob, spec.box_noise, rng), rng()});
      s.relations.push_back({si, si + 1, p});
    }
    if (n % 2 == 1) {
      const int c = any_category(rng);
      s.entities.push_back({c, random_box(rng), rng()});
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

const char* to_string(GeometryRule rule) {
  switch (rule) {
    case GeometryRule::Above: return "above";
    case GeometryRule::Below: return "below";
    case GeometryRule::LeftOf: return "left_of";
    case GeometryRule::RightOf: return "right_of";
    case GeometryRule::Inside: return "inside";
    case GeometryRule::Contains: return "contains";
    case GeometryRule::Overlap: return "overlap";
  }
  return "?";
}

GeometryRule geometry_rule_from_string(const std::string& name) {
  for (GeometryRule r : kAllRules) {
    if (name == to_string(r)) return r;
  }
  throw ValidationError("unknown geometry rule: " + name);
}

bool satisfies(GeometryRule rule, const Box& s, const Box& o) {
  switch (rule) {
    case GeometryRule::Above: return s.y2 < o.y1;
    case GeometryRule::Below: return s.y1 > o.y2;
    case GeometryRule::LeftOf: return s.x2 < o.x1;
    case GeometryRule::RightOf: return s.x1 > o.x2;
    case GeometryRule::Inside: return strictly_inside(s, o);
    case GeometryRule::Contains: return strictly_inside(o, s);
    case GeometryRule::Overlap:
      return intersection_area(s, o) > 0 && !strictly_inside(s, o) && !strictly_inside(o, s);
  }
  return false;
}

DatasetSpec default_dataset_spec() {
  DatasetSpec spec;
  const int ce = spec.num_entity_categories, cp = spec.num_predicate_categories;
  std::mt19937_64 rng(20240611);
  std::uniform_int_distribution<int> cat(0, ce - 1);
  spec.triplet_compatibility.resize(static_cast<std::size_t>(cp));
  std::set<CategoryPair> used;
  auto fresh_pair = [&]() {
    for (;;) {
      CategoryPair p{cat(rng), cat(rng)};
      if (p.subject != p.object && used.insert(p).second) return p;
    }
  };
  // The rarer half of the predicates each refine a frequent "twin": same
  // layout rule, and the twin's two least common category pairs lead their
  // own compatibility list, followed by two pairs of their own. On the shared
  // types only frequency separates the two, which is where long-tail bias
  // bites: those types are a small slice of the twin but most of the tail.
  const int heads = (cp + 1) / 2;
  for (int p = 0; p < cp; ++p) {
    const bool tail = p >= heads;
    const int twin = p - heads;
    spec.geometry_rules.push_back(
        tail ? spec.geometry_rules[static_cast<std::size_t>(twin)]
             : kAllRules[static_cast<std::size_t>(p) % kAllRules.size()]);
    if (tail) {
      const auto& shared = spec.triplet_compatibility[static_cast<std::size_t>(twin)];
      for (std::size_t k = 0; k < std::min<std::size_t>(2, shared.size()); ++k) {
        spec.triplet_compatibility[p].push_back(shared[shared.size() - 1 - k]);
      }
      for (int k = 0; k < 2; ++k) spec.triplet_compatibility[p].push_back(fresh_pair());
    } else {
      // Frequent predicates cover many subject/object combinations.
      for (int k = 0; k < 8 - p; ++k) spec.triplet_compatibility[p].push_back(fresh_pair());
    }
  }
  return spec;
}

void validate(const DatasetSpec& spec) {
  if (spec.num_entity_categories < 2) throw ValidationError("need at least 2 entity categories");
  if (spec.num_predicate_categories < 1) throw ValidationError("need at least 1 predicate");
  if (!(spec.zipf_exponent >= 0) || !(spec.triplet_zipf_exponent >= 0)) {
    throw ValidationError("zipf exponents must be non-negative");
  }
  if (spec.train_samples <= 0 || spec.val_samples <= 0 || spec.test_samples <= 0) {
    throw ValidationError("every split needs a positive sample count");
  }
  if (spec.min_entities < 2 || spec.max_entities < spec.min_entities) {
    throw ValidationError("entity count range must satisfy 2 <= min <= max");
  }
  if (spec.box_noise < 0 || spec.appearance_noise < 0) {
    throw ValidationError("noise levels must be non-negative");
  }
  const auto cp = static_cast<std::size_t>(spec.num_predicate_categories);
  if (spec.triplet_compatibility.size() != cp || spec.geometry_rules.size() != cp) {
    throw ValidationError("compatibility map and geometry rules must cover every predicate");
  }
  for (std::size_t p = 0; p < cp; ++p) {
    const auto& pairs = spec.triplet_compatibility[p];
    if (pairs.empty()) {
      throw ValidationError("predicate " + std::to_string(p) + " has no compatible pair");
    }
    for (const auto& c : pairs) {
      if (c.subject < 0 || c.subject >= spec.num_entity_categories || c.object < 0 ||
          c.object >= spec.num_entity_categories) {
        throw ValidationError("predicate " + std::to_string(p) +
                              " references an unknown entity category");
      }
    }
  }
}

void validate(const SceneGraphSample& s, int num_entity_categories, int num_predicates) {
  const std::string where = "sample '" + s.sample_id + "': ";
  if (s.entities.size() < 2) throw ValidationError(where + "needs at least 2 entities");
  for (std::size_t i = 0; i < s.entities.size(); ++i) {
    const auto& e = s.entities[i];
    if (e.category_id < 0 || e.category_id >= num_entity_categories) {
      throw ValidationError(where + "entity " + std::to_string(i) + " category out of range");
    }
    if (!(e.box.x1 < e.box.x2) || !(e.box.y1 < e.box.y2)) {
      throw ValidationError(where + "entity " + std::to_string(i) + " has a degenerate box");
    }
  }
  std::set<std::array<int, 3>> seen;
  const int n = static_cast<int>(s.entities.size());
  for (std::size_t k = 0; k < s.relations.size(); ++k) {
    const auto& r = s.relations[k];
    const std::string rel = where + "relation " + std::to_string(k) + ": ";
    if (r.subject_index < 0 || r.subject_index >= n || r.object_index < 0 ||
        r.object_index >= n) {
      throw ValidationError(rel + "entity index out of range");
    }
    if (r.subject_index == r.object_index) {
      throw ValidationError(rel + "subject_index equals object_index");
    }
    if (r.predicate_id < 0 || r.predicate_id >= num_predicates) {
      throw ValidationError(rel + "predicate out of range");
    }
    if (!seen.insert({r.subject_index, r.object_index, r.predicate_id}).second) {
      throw ValidationError(rel + "duplicate triple");
    }
  }
}

const char* to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

const std::vector<SceneGraphSample>& split_of(const Dataset& d, Split split) {
  switch (split) {
    case Split::Train: return d.train;
    case Split::Val: return d.val;
    case Split::Test: return d.test;
  }
  return d.train;
}

Dataset generate_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  validate(spec);
  // Independent streams per split keep each split stable when others change size.
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  std::array<std::uint64_t, 3> split_seeds{};
  {
    std::mt19937_64 mix(seq);
    for (auto& s : split_seeds) s = mix();
  }
  Dataset d;
  d.spec = spec;
  d.train = generate_split(spec, "train", spec.train_samples, split_seeds[0]);
  d.val = generate_split(spec, "val", spec.val_samples, split_seeds[1]);
  d.test = generate_split(spec, "test", spec.test_samples, split_seeds[2]);
  return d;
}

std::string to_string(const TripletKey& key) {
  std::ostringstream out;
  out << key.subject_category << "-" << key.predicate << "-" << key.object_category;
  return out.str();
}

long FrequencyTable::total() const {
  return std::accumulate(predicate_counts.begin(), predicate_counts.end(), 0L);
}

FrequencyTable frequency_table(const std::vector<SceneGraphSample>& split, int num_predicates) {
  FrequencyTable t;
  t.predicate_counts.assign(static_cast<std::size_t>(num_predicates), 0);
  for (const auto& s : split) {
    for (const auto& r : s.relations) {
      t.predicate_counts.at(static_cast<std::size_t>(r.predicate_id)) += 1;
      t.triplet_counts[{s.entities[r.subject_index].category_id, r.predicate_id,
                        s.entities[r.object_index].category_id}] += 1;
    }
  }
  return t;
}

void save_split(const DatasetSpec& spec, const std::vector<SceneGraphSample>& samples,
                const std::filesystem::path& file) {
  nlohmann::json doc;
  doc["spec"] = spec;
  doc["samples"] = samples;
  write_text_atomic(file, doc.dump(1) + "\n");
}

std::pair<DatasetSpec, std::vector<SceneGraphSample>> load_split(
    const std::filesystem::path& file) {
  const nlohmann::json doc = read_json(file);
  if (!doc.is_object() || !doc.contains("spec") || !doc.contains("samples")) {
    throw ValidationError(file.string() + ": expected top-level {\"spec\", \"samples\"}");
  }
  DatasetSpec spec;
  try {
    spec = doc.at("spec").get<DatasetSpec>();
  } catch (const std::exception& e) {
    throw ValidationError(file.string() + ": bad spec: " + e.what());
  }
  validate(spec);
  std::vector<SceneGraphSample> samples;
  const auto& arr = doc.at("samples");
  if (!arr.is_array()) throw ValidationError(file.string() + ": samples must be an array");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    SceneGraphSample s;
    try {
      s = arr[i].get<SceneGraphSample>();
    } catch (const std::exception& e) {
      throw ValidationError(file.string() + ": sample record " + std::to_string(i) + ": " +
                            e.what());
    }
    try {
      validate(s, spec.num_entity_categories, spec.num_predicate_categories);
    } catch (const ValidationError& e) {
      throw ValidationError(file.string() + ": sample record " + std::to_string(i) + ": " +
                            e.what());
    }
    samples.push_back(std::move(s));
  }
  return {std::move(spec), std::move(samples)};
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_split(dataset.spec, dataset.train, dir / "train.json");
  save_split(dataset.spec, dataset.val, dir / "val.json");
  save_split(dataset.spec, dataset.test, dir / "test.json");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  auto [spec, train] = load_split(dir / "train.json");
  auto [spec_val, val] = load_split(dir / "val.json");
  auto [spec_test, test] = load_split(dir / "test.json");
  if (!(spec == spec_val) || !(spec == spec_test)) {
    throw ValidationError(dir.string() + ": splits disagree on the dataset spec");
  }
  d.spec = std::move(spec);
  d.train = std::move(train);
  d.val = std::move(val);
  d.test = std::move(test);
  return d;
}

}  // namespace drm
