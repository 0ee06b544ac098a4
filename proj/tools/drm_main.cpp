// drm: command-line front end for data generation, training, DKT, evaluation
// and experiment runs. Exit codes: 0 ok, 2 validation error, 1 runtime failure.

#include "drm/checkpoint.hpp"
#include "drm/dkt.hpp"
#include "drm/json_io.hpp"
#include "drm/pipeline.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace drm;

namespace {

ExperimentConfig config_or_default(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  return load_experiment_config(path);
}

// Dataset from --data when given, else generated from the config.
Dataset dataset_for(const ExperimentConfig& cfg, const std::string& data_dir) {
  if (!data_dir.empty()) return load_dataset(data_dir);
  return load_or_generate(cfg);
}

fs::path default_out(const ExperimentConfig& cfg, const std::string& name) {
  return output_root() / cfg.run_id / name;
}

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

FrequencyTable train_frequencies(const DrmModel& model, const Dataset& data) {
  return frequency_table(data.train, model.config().num_predicates);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-granularity relation modeling on synthetic scene graphs"};
  app.require_subcommand(1);

  // data generate
  auto* data_cmd = app.add_subcommand("data", "dataset utilities");
  data_cmd->require_subcommand(1);
  auto* gen = data_cmd->add_subcommand("generate", "generate a synthetic dataset");
  std::string spec_file, out_dir;
  std::uint64_t data_seed = 7;
  gen->add_option("--spec", spec_file, "dataset spec JSON (default spec when omitted)")
      ->check(CLI::ExistingFile);
  gen->add_option("--seed", data_seed, "generator seed");
  gen->add_option("--out", out_dir, "output directory")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "stage-1 training");
  std::string config_file, data_dir, out_file, log_file;
  train_cmd->add_option("--config", config_file, "experiment config JSON")->check(CLI::ExistingFile);
  train_cmd->add_option("--data", data_dir, "dataset directory")->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", out_file, "checkpoint path");
  train_cmd->add_option("--log", log_file, "training log (JSON lines)");

  // dkt calibrate / finetune
  auto* dkt_cmd = app.add_subcommand("dkt", "dual-granularity knowledge transfer");
  dkt_cmd->require_subcommand(1);
  auto* calib = dkt_cmd->add_subcommand("calibrate", "estimate and calibrate class statistics");
  std::string ckpt_file, stats_file;
  calib->add_option("--checkpoint", ckpt_file, "stage-1 checkpoint")->required()->check(CLI::ExistingFile);
  calib->add_option("--config", config_file, "experiment config JSON")->check(CLI::ExistingFile);
  calib->add_option("--data", data_dir, "dataset directory")->check(CLI::ExistingDirectory);
  calib->add_option("--out", out_file, "stats JSON")->required();
  auto* ft = dkt_cmd->add_subcommand("finetune", "fine-tune the relation classifier on a balanced set");
  ft->add_option("--checkpoint", ckpt_file, "stage-1 checkpoint")->required()->check(CLI::ExistingFile);
  ft->add_option("--stats", stats_file, "stats JSON from calibrate")->required()->check(CLI::ExistingFile);
  ft->add_option("--config", config_file, "experiment config JSON")->check(CLI::ExistingFile);
  ft->add_option("--data", data_dir, "dataset directory")->check(CLI::ExistingDirectory);
  ft->add_option("--out", out_file, "stage-2 checkpoint")->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string task_name, split_name = "test", preds_file;
  eval_cmd->add_option("--checkpoint", ckpt_file, "checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--config", config_file, "experiment config JSON")->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", data_dir, "dataset directory")->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--task", task_name, "PredCls or SGCls (default from config)");
  eval_cmd->add_option("--split", split_name, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("--out", out_file, "metrics JSON (stdout when omitted)");
  eval_cmd->add_option("--predictions", preds_file, "predictions JSON lines");

  // run
  auto* run_cmd = app.add_subcommand("run", "full two-stage pipeline");
  std::string run_dir;
  run_cmd->add_option("--config", config_file, "experiment config JSON")
      ->required()
      ->check(CLI::ExistingFile);
  run_cmd->add_option("--run-dir", run_dir, "run directory (default <root>/<run_id>)");

  // report
  auto* report_cmd = app.add_subcommand("report", "comparison table over runs");
  std::vector<std::string> runs;
  std::string json_out;
  report_cmd->add_option("runs", runs, "run directories or report.json files")->required();
  report_cmd->add_option("--json", json_out, "also write the table as JSON");

  // plot
  auto* plot_cmd = app.add_subcommand("plot", "write SVG plots for a run");
  std::string plot_run;
  plot_cmd->add_option("run", plot_run, "run directory")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      DatasetSpec spec = default_dataset_spec();
      if (!spec_file.empty()) {
        try {
          spec = read_json(spec_file).get<DatasetSpec>();
        } catch (const nlohmann::json::exception& e) {
          throw ValidationError(spec_file + ": " + e.what());
        }
      }
      validate(spec);
      save_dataset(generate_dataset(spec, data_seed), out_dir);
      std::cout << "wrote dataset to " << out_dir << "\n";
    } else if (train_cmd->parsed()) {
      const ExperimentConfig cfg = resolved(config_or_default(config_file));
      const Dataset data = dataset_for(cfg, data_dir);
      ModelConfig mc = cfg.model;
      mc.num_entity_classes = data.spec.num_entity_categories;
      mc.num_predicates = data.spec.num_predicate_categories;
      mc.appearance_noise = data.spec.appearance_noise;
      DrmModel model(mc);
      const fs::path ckpt = out_file.empty() ? default_out(cfg, "stage1.ckpt") : fs::path(out_file);
      const fs::path log = log_file.empty() ? ckpt.parent_path() / "train_log.jsonl" : fs::path(log_file);
      ensure_parent(ckpt);
      ensure_parent(log);
      std::string text;
      try {
        train_stage1(model, data.train, data.val, cfg.train, [&](const EpochLog& l) {
          text += to_json(l).dump() + "\n";
          write_text_atomic(log, text);
          std::cout << to_json(l).dump() << "\n";
        });
      } catch (const TrainingDiverged& e) {
        save_checkpoint(DrmModel(mc, e.last_good()), ckpt, {{"stage", "stage1"}, {"diverged", e.what()}});
        throw;
      }
      save_checkpoint(model, ckpt, {{"stage", "stage1"}, {"run_id", cfg.run_id}});
      std::cout << "wrote " << ckpt.string() << "\n";
    } else if (calib->parsed()) {
      const ExperimentConfig cfg = resolved(config_or_default(config_file));
      const LoadedCheckpoint loaded = load_checkpoint(ckpt_file);
      const Dataset data = dataset_for(cfg, data_dir);
      DktConfig dkt = cfg.dkt;
      if (dkt.mode == DktMode::None) dkt.mode = DktMode::PT;
      const RelationFeatures real =
          extract_relation_features(loaded.model, data.train, cfg.train.feature_seed);
      const DktStats stats = compute_dkt_stats(real, train_frequencies(loaded.model, data), dkt);
      ensure_parent(out_file);
      write_text_atomic(out_file, to_json(stats).dump() + "\n");
      std::cout << "Q = " << stats.q << "; wrote " << out_file << "\n";
    } else if (ft->parsed()) {
      const ExperimentConfig cfg = resolved(config_or_default(config_file));
      LoadedCheckpoint loaded = load_checkpoint(ckpt_file);
      const Dataset data = dataset_for(cfg, data_dir);
      DktStats stats;
      try {
        stats = dkt_stats_from_json(read_json(stats_file));
      } catch (const nlohmann::json::exception& e) {
        throw ValidationError(stats_file + ": " + e.what());
      }
      const RelationFeatures real =
          extract_relation_features(loaded.model, data.train, cfg.train.feature_seed);
      const BalancedSet set = build_balanced_set(real, stats, cfg.dkt.seed);
      const auto losses = finetune_classifier(loaded.model, set, cfg.dkt);
      ensure_parent(out_file);
      save_checkpoint(loaded.model, out_file, {{"stage", "stage2"}, {"run_id", cfg.run_id}});
      std::cout << "balanced set: " << set.labels.size() << " records; final loss "
                << (losses.empty() ? 0.0 : losses.back()) << "; wrote " << out_file << "\n";
    } else if (eval_cmd->parsed()) {
      const ExperimentConfig cfg = resolved(config_or_default(config_file));
      const LoadedCheckpoint loaded = load_checkpoint(ckpt_file);
      const Dataset data = dataset_for(cfg, data_dir);
      const Task task = task_name.empty() ? cfg.task : task_from_string(task_name);
      const Split split = split_name == "train" ? Split::Train
                          : split_name == "val" ? Split::Val
                                                : Split::Test;
      const auto& samples = split_of(data, split);
      const auto preds = predict(loaded.model, samples, task, cfg.train.feature_seed);
      if (!preds_file.empty()) {
        ensure_parent(preds_file);
        save_predictions(preds, preds_file);
      }
      std::vector<GroundTruth> gts;
      for (const auto& s : samples) gts.push_back(ground_truth(s));
      const MetricsReport rep = evaluate(preds, gts, task, loaded.model.config().num_predicates,
                                         train_frequencies(loaded.model, data), cfg.averaging);
      const std::string text = to_json(rep).dump(2) + "\n";
      if (out_file.empty()) {
        std::cout << text;
      } else {
        ensure_parent(out_file);
        write_text_atomic(out_file, text);
        std::cout << "wrote " << out_file << "\n";
      }
    } else if (run_cmd->parsed()) {
      const ExperimentConfig cfg = load_experiment_config(config_file);
      const fs::path dir = run_dir.empty() ? output_root() / cfg.run_id : fs::path(run_dir);
      const RunResult r = run_pipeline(cfg, dir);
      std::vector<nlohmann::json> reps = {read_json(dir / "report.json")};
      std::cout << emit_report(reps).text << "wrote " << dir.string() << " in " << r.wall_seconds
                << " s\n";
    } else if (report_cmd->parsed()) {
      std::vector<nlohmann::json> reps;
      for (const auto& r : runs) {
        const fs::path p = fs::is_directory(r) ? fs::path(r) / "report.json" : fs::path(r);
        if (!fs::exists(p)) throw ValidationError("no report at " + p.string());
        reps.push_back(read_json(p));
      }
      const Table t = emit_report(reps);
      std::cout << t.text;
      if (!json_out.empty()) {
        ensure_parent(json_out);
        write_text_atomic(json_out, t.json.dump(2) + "\n");
      }
    } else if (plot_cmd->parsed()) {
      for (const auto& p : emit_plots(plot_run)) std::cout << "wrote " << p.string() << "\n";
    }
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
