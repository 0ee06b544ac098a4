#pragma once

#include "drm/dkt.hpp"
#include "drm/inference.hpp"
#include "drm/metrics.hpp"
#include "drm/model.hpp"
#include "drm/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace drm {

struct AblationFlags {
  bool use_P = true;  // predicate cue encoder
  bool use_T = true;  // triplet cue encoder
  bool use_A = true;  // two-view augmentation
  bool use_C = true;  // dual-granularity contrastive constraints
  DktMode dkt = DktMode::PT;
};

struct ExperimentConfig {
  std::string run_id = "drm";
  std::uint64_t seed = 0;
  Task task = Task::PredCls;
  RecallAveraging averaging = RecallAveraging::Micro;
  std::optional<std::filesystem::path> dataset_path;  // else generated from spec + data_seed
  DatasetSpec dataset = default_dataset_spec();
  std::uint64_t data_seed = 7;
  ModelConfig model;
  TrainConfig train;
  DktConfig dkt;
  AblationFlags ablation;
};

// Throws ValidationError: use_C without use_A, bad run id, bad optimizer settings, etc.
void validate(const ExperimentConfig& cfg);

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Reads and validates a config file. Missing keys take defaults.
ExperimentConfig load_experiment_config(const std::filesystem::path& file);

// The config with flags and the top-level seed pushed into the sub-configs.
ExperimentConfig resolved(const ExperimentConfig& cfg);

Dataset load_or_generate(const ExperimentConfig& cfg);

// Output root: $DRM_RUN_DIR when set, else ./runs.
std::filesystem::path output_root();

struct StageResult {
  std::string name;  // "stage1" or "stage2"
  MetricsReport metrics;
  double tail_mean_recall = 0;  // mean R@50 (constrained) over tail predicates
  double head_mean_recall = 0;
  std::string encoder_hash;
};

struct RunResult {
  nlohmann::json config;
  std::string input_hash;
  std::vector<StageResult> stages;
  std::vector<EpochLog> train_log;
  std::vector<double> finetune_log;
  ClusterStats predicate_cluster;
  std::optional<ClusterStats> triplet_cluster;
  HeadTailSplit split;
  double wall_seconds = 0;
};

// data -> stage 1 -> evaluate -> (dkt != none) stats, calibrate, sample,
// fine-tune -> re-evaluate. Artifacts land in run_dir: config.json,
// train_log.jsonl, stage1.ckpt, predictions_stage1.jsonl, stats.json,
// stage2.ckpt, predictions_stage2.jsonl, cluster.json, report.json,
// timing.json, plots/. On failure the files written so far stay.
RunResult run_pipeline(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);

// Deterministic summary (no wall clock); this is report.json.
nlohmann::json report_json(const RunResult& result);

struct Table {
  std::string text;
  nlohmann::json json;
};

// One row per (run, stage) of R@50/100, mR@50/100, M@50/100, F@50/100 under
// the graph constraint, in the order given. Values are rounded to one decimal
// in both renderings. Throws ValidationError on mixed tasks.
Table emit_report(std::span<const nlohmann::json> reports);

// Cosine-similarity histograms of projected features, intra vs inter class.
struct CosineHistogram {
  double lo = -1.0, hi = 1.0;
  std::vector<long> intra_counts, inter_counts;
  double intra_mean = 0, inter_mean = 0;
};

CosineHistogram cosine_histogram(const ClusterStats& stats, int bins = 40);
nlohmann::json to_json(const CosineHistogram& h);
CosineHistogram cosine_histogram_from_json(const nlohmann::json& j);

// Writes plots/{run_id}_predrecall.svg (per-predicate R@100 of the last stage,
// sorted by train frequency) and plots/{run_id}_cosine.svg. Returns the paths.
std::vector<std::filesystem::path> emit_plots(const std::filesystem::path& run_dir);

}  // namespace drm
