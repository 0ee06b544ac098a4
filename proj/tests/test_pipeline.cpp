#include "drm/json_io.hpp"
#include "drm/pipeline.hpp"

#include "support.hpp"

#include <doctest.h>

#include <numeric>

using namespace drm;
namespace fs = std::filesystem;

namespace {

// Minimal report.json with one stage and the given graph-constrained values.
nlohmann::json fake_report(const std::string& run_id, const std::string& task, double base) {
  nlohmann::json gc;
  for (const char* k : {"R@50", "R@100", "mR@50", "mR@100", "M@50", "M@100", "F@50", "F@100"}) {
    gc[k] = base;
  }
  return {{"run_id", run_id},
          {"task", task},
          {"stages", {{{"stage", "stage1"}, {"metrics", {{"graph_constraint", gc}}}}}}};
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("config validation") {
    ExperimentConfig c;
    CHECK_NOTHROW(validate(c));
    c.ablation.use_P = c.ablation.use_T = false;
    CHECK_NOTHROW(validate(c));  // the no-cue baseline
    c = ExperimentConfig{};
    c.ablation.use_A = false;
    CHECK_THROWS_AS(validate(c), ValidationError);  // C needs A
    c.ablation.use_C = false;
    CHECK_NOTHROW(validate(c));
    c = ExperimentConfig{};
    c.run_id = "a/b";
    CHECK_THROWS_AS(validate(c), ValidationError);
    c = ExperimentConfig{};
    c.model.attention.heads = 3;
    CHECK_THROWS_AS(validate(c), ValidationError);
    c = ExperimentConfig{};
    c.train.learning_rate = 0;
    CHECK_THROWS_AS(validate(c), ValidationError);
  }

  TEST_CASE("config files: unknown keys, defaults and round trip") {
    const auto dir = testing::scratch_dir("config");
    write_text_atomic(dir / "bad.json", R"({"run_id": "x", "sede": 1})");
    CHECK_THROWS_AS(load_experiment_config(dir / "bad.json"), ValidationError);
    write_text_atomic(dir / "broken.json", "{");
    CHECK_THROWS(load_experiment_config(dir / "broken.json"));

    write_text_atomic(dir / "small.json", R"({"run_id": "s1", "seed": 4, "ablation": {"dkt": "P"}})");
    const ExperimentConfig c = load_experiment_config(dir / "small.json");
    CHECK(c.run_id == "s1");
    CHECK(c.seed == 4);
    CHECK(c.ablation.dkt == DktMode::P);
    CHECK(c.averaging == RecallAveraging::Micro);
    CHECK(c.train.epochs == TrainConfig{}.epochs);

    const ExperimentConfig full = testing::tiny_experiment_config();
    const ExperimentConfig back = nlohmann::json(full).get<ExperimentConfig>();
    CHECK(nlohmann::json(back) == nlohmann::json(full));
  }

  TEST_CASE("resolved pushes flags and seed into the sub-configs") {
    ExperimentConfig c;
    c.seed = 11;
    c.ablation.use_T = false;
    c.ablation.use_A = c.ablation.use_C = false;
    c.ablation.dkt = DktMode::T;
    const ExperimentConfig r = resolved(c);
    CHECK(r.model.use_predicate_encoder);
    CHECK_FALSE(r.model.use_triplet_encoder);
    CHECK_FALSE(r.train.use_augmentation);
    CHECK_FALSE(r.train.use_constraints);
    CHECK(r.dkt.mode == DktMode::T);
    CHECK(r.model.init_seed == 11);
    CHECK(r.train.seed == 11);
    CHECK(r.dkt.seed == 11);
  }

  TEST_CASE("output root honours DRM_RUN_DIR") {
    ::setenv("DRM_RUN_DIR", "/tmp/elsewhere", 1);
    CHECK(output_root() == fs::path("/tmp/elsewhere"));
    ::unsetenv("DRM_RUN_DIR");
    CHECK(output_root() == fs::path("runs"));
  }

  TEST_CASE("dkt none runs one stage") {
    ExperimentConfig c = testing::tiny_experiment_config("one_stage");
    c.ablation.dkt = DktMode::None;
    const auto dir = testing::scratch_dir("one_stage");
    const RunResult r = run_pipeline(c, dir);
    REQUIRE(r.stages.size() == 1);
    CHECK(r.stages[0].name == "stage1");
    CHECK(r.finetune_log.empty());
    CHECK(fs::exists(dir / "stage1.ckpt"));
    CHECK_FALSE(fs::exists(dir / "stage2.ckpt"));
    CHECK_FALSE(fs::exists(dir / "stats.json"));
  }

  TEST_CASE("full pipeline: two stages, frozen encoders, artifacts, determinism") {
    const ExperimentConfig c = testing::tiny_experiment_config("two_stage");
    const auto dir = testing::scratch_dir("two_stage");
    const RunResult r = run_pipeline(c, dir);
    REQUIRE(r.stages.size() == 2);
    CHECK(r.stages[0].encoder_hash == r.stages[1].encoder_hash);
    CHECK(r.finetune_log.size() == 3);
    for (const char* f : {"config.json", "train_log.jsonl", "stage1.ckpt", "predictions_stage1.jsonl",
                          "stats.json", "stage2.ckpt", "predictions_stage2.jsonl", "cluster.json",
                          "report.json", "timing.json"}) {
      CHECK_MESSAGE(fs::exists(dir / f), f);
    }
    CHECK(fs::exists(dir / "plots" / "two_stage_predrecall.svg"));
    CHECK(fs::exists(dir / "plots" / "two_stage_cosine.svg"));

    const auto again = testing::scratch_dir("two_stage_again");
    run_pipeline(c, again);
    CHECK(read_text(dir / "report.json") == read_text(again / "report.json"));
    CHECK(read_text(dir / "stage2.ckpt") == read_text(again / "stage2.ckpt"));

    // Cosine histogram means agree with the cluster statistics.
    const auto hist = cosine_histogram(r.predicate_cluster);
    CHECK(std::abs(hist.intra_mean - r.predicate_cluster.intra) < 1e-9);
    CHECK(std::abs(hist.inter_mean - r.predicate_cluster.inter) < 1e-9);
    const long counted = std::accumulate(hist.intra_counts.begin(), hist.intra_counts.end(), 0L);
    CHECK(counted == r.predicate_cluster.intra_pairs);
  }

  TEST_CASE("the stage-1 ablation matrix runs and writes one report per row") {
    struct Row {
      bool p, t, a, c;
    };
    const std::vector<Row> rows = {{false, false, false, false}, {true, false, false, false},
                                   {false, true, false, false},  {true, true, false, false},
                                   {true, true, true, false},    {true, false, true, true},
                                   {false, true, true, true},    {true, true, true, true}};
    const auto root = testing::scratch_dir("ablation");
    std::vector<nlohmann::json> reports;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      ExperimentConfig c = testing::tiny_experiment_config("row" + std::to_string(i));
      c.ablation = {rows[i].p, rows[i].t, rows[i].a, rows[i].c, DktMode::None};
      const RunResult r = run_pipeline(c, root / c.run_id);
      CHECK(r.stages.size() == 1);
      reports.push_back(read_json(root / c.run_id / "report.json"));
    }
    std::size_t files = 0;
    for (const auto& entry : fs::directory_iterator(root)) files += fs::exists(entry.path() / "report.json");
    CHECK(files == rows.size());
    const Table t = emit_report(reports);
    REQUIRE(t.json.at("rows").size() == rows.size());
    CHECK(t.json.at("rows")[0].at("run_id") == "row0");
    CHECK(t.json.at("rows")[7].at("run_id") == "row7");
  }

  TEST_CASE("invalid config fails before any output") {
    ExperimentConfig c = testing::tiny_experiment_config("invalid");
    c.ablation.use_A = false;
    const auto dir = testing::scratch_dir("invalid") / "run";
    CHECK_THROWS_AS(run_pipeline(c, dir), ValidationError);
    CHECK_FALSE(fs::exists(dir));
  }

  TEST_CASE("report table") {
    std::vector<nlohmann::json> one = {fake_report("a", "PredCls", 12.345)};
    const Table t = emit_report(one);
    CHECK(t.json.at("rows").size() == 1);
    CHECK(t.json.at("rows")[0].at("mR@50") == 12.3);
    CHECK(t.text.find("12.3") != std::string::npos);
    CHECK(t.text.find("task: PredCls") == 0);

    std::vector<nlohmann::json> two = {fake_report("a", "PredCls", 1), fake_report("b", "PredCls", 2)};
    const Table u = emit_report(two);
    CHECK(u.json.at("rows")[1].at("run_id") == "b");

    std::vector<nlohmann::json> mixed = {fake_report("a", "PredCls", 1), fake_report("b", "SGCls", 1)};
    CHECK_THROWS_AS(emit_report(mixed), ValidationError);
    CHECK_THROWS_AS(emit_report({}), ValidationError);
  }

  TEST_CASE("single-predicate plot has one bar") {
    const auto dir = testing::scratch_dir("plot");
    nlohmann::json rep = fake_report("p", "PredCls", 50);
    rep["stages"][0]["metrics"]["per_class@100"] = {
        {"predicates", {{{"predicate", 0}, {"recall", 42.0}, {"train_count", 10}}}}};
    write_text_atomic(dir / "report.json", rep.dump());
    const auto paths = emit_plots(dir);
    REQUIRE(paths.size() == 1);
    const std::string svg = read_text(paths[0]);
    std::size_t bars = 0;
    for (auto pos = svg.find("<rect"); pos != std::string::npos; pos = svg.find("<rect", pos + 1)) ++bars;
    CHECK(bars == 1);
    CHECK(svg.find("data-recall=\"42.00\"") != std::string::npos);

    rep["stages"] = nlohmann::json::array();
    write_text_atomic(dir / "report.json", rep.dump());
    CHECK_THROWS_AS(emit_plots(dir), ValidationError);
  }

  TEST_CASE("histogram bins") {
    ClusterStats s;
    s.intra_values = {-1.0, 0.99, 1.0};
    s.inter_values = {0.0};
    const auto h = cosine_histogram(s, 4);
    CHECK(h.intra_counts == std::vector<long>{1, 0, 0, 2});
    CHECK(h.inter_counts == std::vector<long>{0, 0, 1, 0});
    CHECK(h.intra_mean == doctest::Approx(0.33).epsilon(1e-12));
    const auto back = cosine_histogram_from_json(to_json(h));
    CHECK(back.intra_counts == h.intra_counts);
    CHECK_THROWS(cosine_histogram(s, 0));
  }
}
