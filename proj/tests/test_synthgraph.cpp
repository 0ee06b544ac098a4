#include "drm/json_io.hpp"
#include "drm/synthgraph.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

using namespace drm;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("drm_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

DatasetSpec small_spec() {
  DatasetSpec s = default_dataset_spec();
  s.train_samples = 120;
  s.val_samples = 20;
  s.test_samples = 20;
  return s;
}

}  // namespace

TEST_SUITE("synthgraph") {
  TEST_CASE("zero skew gives a uniform predicate marginal") {
    DatasetSpec s;
    s.num_entity_categories = 6;
    s.num_predicate_categories = 2;
    s.zipf_exponent = 0.0;
    s.triplet_compatibility = {{{0, 1}, {2, 3}}, {{0, 1}, {2, 3}}};
    s.geometry_rules = {GeometryRule::LeftOf, GeometryRule::Above};
    s.train_samples = 1000;
    const Dataset d = generate_dataset(s, 3);
    const auto freq = frequency_table(d.train, 2);
    const double a = static_cast<double>(freq.predicate_counts[0]);
    const double b = static_cast<double>(freq.predicate_counts[1]);
    CHECK(a > 0);
    CHECK(std::abs(a - b) / (a + b) < 0.05);
  }

  TEST_CASE("zipf 1.5 rank-1 to rank-10 ratio is near 10^1.5") {
    DatasetSpec s = default_dataset_spec();
    s.train_samples = 1500;
    const Dataset d = generate_dataset(s, 7);
    auto counts = frequency_table(d.train, 10).predicate_counts;
    std::sort(counts.begin(), counts.end(), std::greater<>());
    REQUIRE(counts.back() > 0);
    const double ratio = static_cast<double>(counts.front()) / static_cast<double>(counts.back());
    const double expected = std::pow(10.0, 1.5);
    CHECK(ratio > 10.0);
    CHECK(ratio >= 0.5 * expected);
    CHECK(ratio <= 1.5 * expected);
  }

  TEST_CASE("same spec and seed write byte-identical files") {
    const DatasetSpec s = small_spec();
    const fs::path a = scratch_dir("gen_a"), b = scratch_dir("gen_b");
    save_dataset(generate_dataset(s, 11), a);
    save_dataset(generate_dataset(s, 11), b);
    for (const char* f : {"train.json", "val.json", "test.json"}) {
      CHECK(read_text(a / f) == read_text(b / f));
    }
    save_dataset(generate_dataset(s, 12), b);
    CHECK(read_text(a / "train.json") != read_text(b / "train.json"));
  }

  TEST_CASE("round trip through files is the identity") {
    const Dataset d = generate_dataset(small_spec(), 5);
    const fs::path dir = scratch_dir("roundtrip");
    save_dataset(d, dir);
    CHECK(load_dataset(dir) == d);
  }

  TEST_CASE("generated samples satisfy the record invariants") {
    const Dataset d = generate_dataset(small_spec(), 5);
    for (const auto* split : {&d.train, &d.val, &d.test}) {
      for (const auto& s : *split) {
        CHECK_NOTHROW(validate(s, d.spec.num_entity_categories, d.spec.num_predicate_categories));
        CHECK(s.entities.size() >= 3);
        CHECK(s.entities.size() <= 6);
      }
    }
  }

  TEST_CASE("subject equal to object is rejected on load") {
    const DatasetSpec s = small_spec();
    Dataset d = generate_dataset(s, 5);
    auto it = std::find_if(d.train.begin(), d.train.end(),
                           [](const SceneGraphSample& x) { return !x.relations.empty(); });
    REQUIRE(it != d.train.end());
    it->relations[0].object_index = it->relations[0].subject_index;
    const fs::path dir = scratch_dir("bad");
    save_split(s, d.train, dir / "train.json");
    CHECK_THROWS_AS(load_split(dir / "train.json"), ValidationError);
  }

  TEST_CASE("malformed records name the offending record") {
    const fs::path dir = scratch_dir("malformed");
    nlohmann::json j = {{"spec", small_spec()},
                        {"samples", nlohmann::json::array({{{"sample_id", "x"}}})}};
    write_text_atomic(dir / "train.json", j.dump());
    try {
      load_split(dir / "train.json");
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("record 0") != std::string::npos);
    }
  }

  TEST_CASE("invalid specs are rejected") {
    DatasetSpec s = small_spec();
    s.triplet_compatibility[3].clear();
    CHECK_THROWS_AS(validate(s), ValidationError);
    s = small_spec();
    s.test_samples = 0;
    CHECK_THROWS_AS(validate(s), ValidationError);
    CHECK_THROWS_AS(geometry_rule_from_string("beside"), ValidationError);
  }

  TEST_CASE("frequency table counts directly") {
    SceneGraphSample s;
    s.sample_id = "a";
    s.entities = {{1, {0, 0, 0.2, 0.2}, 0}, {2, {0.5, 0.5, 0.7, 0.7}, 0}, {3, {0.1, 0.6, 0.3, 0.9}, 0}};
    s.relations = {{0, 1, 0}, {2, 1, 1}};
    SceneGraphSample t = s;
    t.sample_id = "b";
    t.relations = {{0, 1, 0}};
    const auto freq = frequency_table({s, t}, 2);
    CHECK(freq.predicate_counts == std::vector<long>{2, 1});
    CHECK(freq.triplet_counts.at({1, 0, 2}) == 2);
    CHECK(freq.triplet_counts.at({3, 1, 2}) == 1);
    CHECK(freq.total() == 3);

    const auto empty = frequency_table({}, 3);
    CHECK(empty.predicate_counts == std::vector<long>{0, 0, 0});
    CHECK(empty.triplet_counts.empty());
    CHECK(empty.total() == 0);
  }

  TEST_CASE("frequency table matches an independent recount") {
    const Dataset d = generate_dataset(default_dataset_spec(), 7);
    const auto freq = frequency_table(d.train, 10);
    std::map<int, long> preds;
    std::map<std::tuple<int, int, int>, long> trips;
    long relations = 0;
    for (const auto& s : d.train) {
      for (const auto& r : s.relations) {
        ++preds[r.predicate_id];
        ++trips[{s.entities[r.subject_index].category_id, r.predicate_id,
                 s.entities[r.object_index].category_id}];
        ++relations;
      }
    }
    for (int p = 0; p < 10; ++p) CHECK(freq.predicate_counts[p] == preds[p]);
    CHECK(freq.triplet_counts.size() == trips.size());
    for (const auto& [k, c] : freq.triplet_counts) {
      CHECK(trips[{k.subject_category, k.predicate, k.object_category}] == c);
    }
    CHECK(freq.total() == relations);
  }

  TEST_CASE("noise-free layouts follow each predicate's geometry rule") {
    DatasetSpec s = small_spec();
    s.box_noise = 0.0;
    const Dataset d = generate_dataset(s, 9);
    long checked = 0;
    for (const auto& sample : d.train) {
      for (const auto& r : sample.relations) {
        const auto rule = s.geometry_rules[static_cast<std::size_t>(r.predicate_id)];
        CHECK(satisfies(rule, sample.entities[r.subject_index].box,
                        sample.entities[r.object_index].box));
        ++checked;
      }
    }
    CHECK(checked > 100);
  }

  TEST_CASE("compatible pairs only") {
    const Dataset d = generate_dataset(small_spec(), 4);
    for (const auto& sample : d.train) {
      for (const auto& r : sample.relations) {
        const CategoryPair pair{sample.entities[r.subject_index].category_id,
                                sample.entities[r.object_index].category_id};
        const auto& allowed = d.spec.triplet_compatibility[static_cast<std::size_t>(r.predicate_id)];
        CHECK(std::find(allowed.begin(), allowed.end(), pair) != allowed.end());
      }
    }
  }
}
