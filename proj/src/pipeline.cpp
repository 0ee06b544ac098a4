#include "drm/pipeline.hpp"

#include "drm/checkpoint.hpp"
#include "drm/json_io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <set>
#include <sstream>

namespace drm {

namespace fs = std::filesystem;

void validate(const ExperimentConfig& c) {
  if (c.run_id.empty() || c.run_id.find_first_of("/\\") != std::string::npos) {
    throw ValidationError("run_id must be a non-empty file-name-safe string");
  }
  if (c.ablation.use_C && !c.ablation.use_A) {
    throw ValidationError("use_C requires use_A (contrastive views come from augmentation)");
  }
  if (!c.dataset_path) validate(c.dataset);
  if (c.train.epochs < 0 || c.train.batch_size <= 0 || !(c.train.learning_rate > 0)) {
    throw ValidationError("train needs epochs >= 0, batch_size > 0 and learning_rate > 0");
  }
  if (c.dkt.finetune_epochs < 0 || c.dkt.batch_size <= 0 || !(c.dkt.learning_rate > 0)) {
    throw ValidationError("dkt needs finetune_epochs >= 0, batch_size > 0 and learning_rate > 0");
  }
  if (c.dkt.q_override && *c.dkt.q_override <= 0) throw ValidationError("dkt.q_override must be > 0");
  if (!(c.dkt.epsilon > 0)) throw ValidationError("dkt.epsilon must be positive");
  try {
    validate(c.train.weights);
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  const auto& a = c.model.attention;
  if (a.heads <= 0 || a.d_model % a.heads != 0) {
    throw ValidationError("model.d_model must be divisible by model.heads");
  }
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json dkt = c.dkt;
  dkt.erase("mode");
  j = {{"run_id", c.run_id},
       {"seed", c.seed},
       {"task", to_string(c.task)},
       {"recall_averaging", to_string(c.averaging)},
       {"dataset",
        {{"path", c.dataset_path ? nlohmann::json(c.dataset_path->string()) : nlohmann::json(nullptr)},
         {"seed", c.data_seed},
         {"spec", c.dataset}}},
       {"model", c.model},
       {"train", c.train},
       {"dkt", dkt},
       {"ablation",
        {{"use_P", c.ablation.use_P},
         {"use_T", c.ablation.use_T},
         {"use_A", c.ablation.use_A},
         {"use_C", c.ablation.use_C},
         {"dkt", to_string(c.ablation.dkt)}}}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  static const std::set<std::string> known = {"run_id", "seed",  "task", "recall_averaging",
                                              "dataset", "model", "train", "dkt", "ablation"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ValidationError("unknown config key: " + key);
  }
  c = ExperimentConfig{};
  c.run_id = j.value("run_id", c.run_id);
  c.seed = j.value("seed", c.seed);
  if (j.contains("task")) c.task = task_from_string(j.at("task").get<std::string>());
  if (j.contains("recall_averaging")) {
    c.averaging = averaging_from_string(j.at("recall_averaging").get<std::string>());
  }
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    if (d.contains("path") && !d.at("path").is_null()) c.dataset_path = d.at("path").get<std::string>();
    c.data_seed = d.value("seed", c.data_seed);
    if (d.contains("spec")) c.dataset = d.at("spec").get<DatasetSpec>();
  }
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("dkt")) {
    nlohmann::json dkt = j.at("dkt");
    dkt.erase("mode");
    c.dkt = dkt.get<DktConfig>();
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    c.ablation.use_P = a.value("use_P", true);
    c.ablation.use_T = a.value("use_T", true);
    c.ablation.use_A = a.value("use_A", true);
    c.ablation.use_C = a.value("use_C", true);
    c.ablation.dkt = dkt_mode_from_string(a.value("dkt", std::string("PT")));
  }
}

ExperimentConfig load_experiment_config(const fs::path& file) {
  ExperimentConfig c;
  try {
    c = read_json(file).get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(file.string() + ": " + e.what());
  }
  validate(c);
  return c;
}

ExperimentConfig resolved(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.model.use_predicate_encoder = c.ablation.use_P;
  c.model.use_triplet_encoder = c.ablation.use_T;
  c.model.init_seed = c.seed;
  c.train.use_augmentation = c.ablation.use_A;
  c.train.use_constraints = c.ablation.use_C;
  c.train.seed = c.seed;
  c.dkt.mode = c.ablation.dkt;
  c.dkt.seed = c.seed;
  return c;
}

Dataset load_or_generate(const ExperimentConfig& cfg) {
  return cfg.dataset_path ? load_dataset(*cfg.dataset_path)
                          : generate_dataset(cfg.dataset, cfg.data_seed);
}

fs::path output_root() {
  if (const char* env = std::getenv("DRM_RUN_DIR"); env != nullptr && *env != '\0') return env;
  return "runs";
}

namespace {

std::vector<GroundTruth> ground_truths(std::span<const SceneGraphSample> samples) {
  std::vector<GroundTruth> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(ground_truth(s));
  return out;
}

StageResult evaluate_stage(const std::string& name, const DrmModel& model,
                           const ExperimentConfig& cfg, const Dataset& data,
                           const FrequencyTable& freq, const HeadTailSplit& split,
                           const fs::path& run_dir) {
  const auto preds = predict(model, data.test, cfg.task, cfg.train.feature_seed);
  save_predictions(preds, run_dir / ("predictions_" + name + ".jsonl"));
  const auto gts = ground_truths(data.test);
  StageResult r;
  r.name = name;
  r.metrics = evaluate(preds, gts, cfg.task, model.config().num_predicates, freq, cfg.averaging);
  r.tail_mean_recall = r.metrics.mean_recall_over(split.tail_predicates);
  r.head_mean_recall = r.metrics.mean_recall_over(split.head_predicates);
  r.encoder_hash = model.params().content_hash(frozen_prefixes());
  return r;
}

nlohmann::json cluster_json(const ClusterStats& s) {
  return {{"intra", s.intra}, {"inter", s.inter}, {"margin", s.margin()},
          {"intra_pairs", s.intra_pairs}, {"inter_pairs", s.inter_pairs}};
}

}  // namespace

RunResult run_pipeline(const ExperimentConfig& input, const fs::path& run_dir) {
  validate(input);
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentConfig cfg = resolved(input);
  fs::create_directories(run_dir / "plots");

  const Dataset data = load_or_generate(cfg);
  cfg.model.num_entity_classes = data.spec.num_entity_categories;
  cfg.model.num_predicates = data.spec.num_predicate_categories;
  cfg.model.appearance_noise = data.spec.appearance_noise;

  RunResult result;
  result.config = cfg;
  nlohmann::json data_json = {{"spec", data.spec}, {"train", data.train}, {"val", data.val},
                              {"test", data.test}};
  result.input_hash = sha256_hex(result.config.dump() + data_json.dump());
  write_text_atomic(run_dir / "config.json", result.config.dump(2) + "\n");

  const FrequencyTable freq = frequency_table(data.train, cfg.model.num_predicates);
  result.split = split_head_tail(freq, cfg.dkt.triplet_threshold);

  DrmModel model(cfg.model);
  std::string log_text;
  try {
    result.train_log = train_stage1(model, data.train, data.val, cfg.train, [&](const EpochLog& l) {
      log_text += to_json(l).dump() + "\n";
      write_text_atomic(run_dir / "train_log.jsonl", log_text);
    });
  } catch (const TrainingDiverged& e) {
    save_checkpoint(DrmModel(cfg.model, e.last_good()), run_dir / "stage1.ckpt",
                    {{"stage", "stage1"}, {"diverged", e.what()}});
    throw;
  }
  if (log_text.empty()) write_text_atomic(run_dir / "train_log.jsonl", "");
  save_checkpoint(model, run_dir / "stage1.ckpt", {{"stage", "stage1"}, {"run_id", cfg.run_id}});
  result.stages.push_back(evaluate_stage("stage1", model, cfg, data, freq, result.split, run_dir));

  // Cluster structure of the projected features on the test split.
  const ProjectedFeatures proj = extract_projected_features(model, data.test, cfg.train.feature_seed);
  result.predicate_cluster = cluster_stats(proj.predicate, proj.predicate_labels, true);
  if (cfg.model.use_triplet_encoder) {
    std::vector<int> tl;
    for (const auto& k : proj.triplet_keys) {
      tl.push_back(triplet_label(k, cfg.model.num_predicates, cfg.model.num_entity_classes));
    }
    result.triplet_cluster = cluster_stats(proj.triplet, tl, true);
  }
  nlohmann::json cluster = {{"predicate", to_json(cosine_histogram(result.predicate_cluster))}};
  if (result.triplet_cluster) cluster["triplet"] = to_json(cosine_histogram(*result.triplet_cluster));
  write_text_atomic(run_dir / "cluster.json", cluster.dump(2) + "\n");

  if (cfg.dkt.mode != DktMode::None) {
    const RelationFeatures real = extract_relation_features(model, data.train, cfg.train.feature_seed);
    const DktStats stats = compute_dkt_stats(real, freq, cfg.dkt);
    write_text_atomic(run_dir / "stats.json", to_json(stats).dump() + "\n");
    const BalancedSet set = build_balanced_set(real, stats, cfg.dkt.seed);
    result.finetune_log = finetune_classifier(model, set, cfg.dkt);
    save_checkpoint(model, run_dir / "stage2.ckpt", {{"stage", "stage2"}, {"run_id", cfg.run_id}});
    result.stages.push_back(evaluate_stage("stage2", model, cfg, data, freq, result.split, run_dir));
  }

  write_text_atomic(run_dir / "report.json", report_json(result).dump(2) + "\n");
  emit_plots(run_dir);
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_text_atomic(run_dir / "timing.json",
                    nlohmann::json{{"wall_seconds", result.wall_seconds}}.dump() + "\n");
  return result;
}

nlohmann::json report_json(const RunResult& r) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : r.stages) {
    nlohmann::json m = to_json(s.metrics);
    stages.push_back({{"stage", s.name},
                      {"metrics", m},
                      {"tail_mean_recall@50", 100 * s.tail_mean_recall},
                      {"head_mean_recall@50", 100 * s.head_mean_recall},
                      {"encoder_hash", s.encoder_hash}});
  }
  nlohmann::json log = nlohmann::json::array();
  for (const auto& l : r.train_log) log.push_back(to_json(l));
  nlohmann::json cluster = {{"predicate", cluster_json(r.predicate_cluster)}};
  if (r.triplet_cluster) cluster["triplet"] = cluster_json(*r.triplet_cluster);
  return {{"run_id", r.config.at("run_id")},
          {"task", r.config.at("task")},
          {"config", r.config},
          {"input_hash", r.input_hash},
          {"split",
           {{"head_predicates", r.split.head_predicates},
            {"tail_predicates", r.split.tail_predicates}}},
          {"stages", stages},
          {"train_log", log},
          {"finetune_log", r.finetune_log},
          {"cluster", cluster}};
}

namespace {

std::string fixed1(double v) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(1) << v;
  return out.str();
}

double round1(double v) { return std::round(v * 10.0) / 10.0; }

}  // namespace

Table emit_report(std::span<const nlohmann::json> reports) {
  if (reports.empty()) throw ValidationError("report needs at least one run");
  static const std::vector<std::string> cols = {"R@50", "R@100", "mR@50", "mR@100",
                                                "M@50", "M@100", "F@50",  "F@100"};
  const std::string task = reports.front().at("task").get<std::string>();
  Table t;
  t.json = {{"task", task}, {"graph_constraint", true}, {"rows", nlohmann::json::array()}};
  std::vector<std::vector<std::string>> cells;
  for (const auto& rep : reports) {
    if (rep.at("task").get<std::string>() != task) {
      throw ValidationError("cannot tabulate mixed tasks: " + task + " and " +
                            rep.at("task").get<std::string>());
    }
    for (const auto& stage : rep.at("stages")) {
      const auto& m = stage.at("metrics").at("graph_constraint");
      nlohmann::json row = {{"run_id", rep.at("run_id")}, {"stage", stage.at("stage")}};
      std::vector<std::string> line = {rep.at("run_id").get<std::string>(),
                                       stage.at("stage").get<std::string>()};
      for (const auto& c : cols) {
        const double v = round1(m.at(c).get<double>());
        row[c] = v;
        line.push_back(fixed1(v));
      }
      t.json["rows"].push_back(row);
      cells.push_back(std::move(line));
    }
  }
  std::vector<std::string> header = {"run", "stage"};
  header.insert(header.end(), cols.begin(), cols.end());
  std::vector<std::size_t> width(header.size());
  for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  }
  std::ostringstream out;
  out << "task: " << task << " (graph constraint)\n";
  auto emit = [&](const std::vector<std::string>& line) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (i > 0) out << "  ";
      if (i < 2) {
        out << std::left << std::setw(static_cast<int>(width[i])) << line[i];
      } else {
        out << std::right << std::setw(static_cast<int>(width[i])) << line[i];
      }
    }
    out << "\n";
  };
  emit(header);
  for (const auto& line : cells) emit(line);
  t.text = out.str();
  return t;
}

CosineHistogram cosine_histogram(const ClusterStats& s, int bins) {
  if (bins <= 0) throw std::invalid_argument("histogram needs at least one bin");
  CosineHistogram h;
  h.intra_counts.assign(static_cast<std::size_t>(bins), 0);
  h.inter_counts.assign(static_cast<std::size_t>(bins), 0);
  auto fill = [&](const std::vector<double>& values, std::vector<long>& counts) {
    double sum = 0.0;
    for (double v : values) {
      const int b = std::clamp(static_cast<int>((v - h.lo) / (h.hi - h.lo) * bins), 0, bins - 1);
      ++counts[static_cast<std::size_t>(b)];
      sum += v;
    }
    return values.empty() ? 0.0 : sum / static_cast<double>(values.size());
  };
  h.intra_mean = fill(s.intra_values, h.intra_counts);
  h.inter_mean = fill(s.inter_values, h.inter_counts);
  return h;
}

nlohmann::json to_json(const CosineHistogram& h) {
  return {{"lo", h.lo},
          {"hi", h.hi},
          {"intra_counts", h.intra_counts},
          {"inter_counts", h.inter_counts},
          {"intra_mean", h.intra_mean},
          {"inter_mean", h.inter_mean}};
}

CosineHistogram cosine_histogram_from_json(const nlohmann::json& j) {
  CosineHistogram h;
  h.lo = j.at("lo").get<double>();
  h.hi = j.at("hi").get<double>();
  h.intra_counts = j.at("intra_counts").get<std::vector<long>>();
  h.inter_counts = j.at("inter_counts").get<std::vector<long>>();
  h.intra_mean = j.at("intra_mean").get<double>();
  h.inter_mean = j.at("inter_mean").get<double>();
  return h;
}

namespace {

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string predicate_recall_svg(const std::string& title, const nlohmann::json& rows) {
  const int n = static_cast<int>(rows.size());
  const int bar = 28, gap = 8, left = 50, top = 40, height = 220;
  const int width = left + n * (bar + gap) + 20;
  std::ostringstream svg;
  svg << std::fixed << std::setprecision(2);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << top + height + 50 << "\">\n";
  svg << "<text x=\"" << left << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">"
      << svg_escape(title) << "</text>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << top + height << "\" x2=\"" << width - 10
      << "\" y2=\"" << top + height << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 100; tick += 25) {
    const double y = top + height - height * tick / 100.0;
    svg << "<text x=\"" << left - 6 << "\" y=\"" << y + 4
        << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">" << tick
        << "</text>\n";
  }
  for (int i = 0; i < n; ++i) {
    const auto& row = rows[static_cast<std::size_t>(i)];
    const double recall = row.at("recall").is_null() ? 0.0 : row.at("recall").get<double>();
    const double h = height * recall / 100.0;
    const int x = left + gap + i * (bar + gap);
    svg << "<rect x=\"" << x << "\" y=\"" << top + height - h << "\" width=\"" << bar
        << "\" height=\"" << h << "\" fill=\"#4c72b0\" data-recall=\"" << recall << "\"/>\n";
    svg << "<text x=\"" << x + bar / 2 << "\" y=\"" << top + height + 14
        << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">p"
        << row.at("predicate").get<int>() << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void histogram_panel(std::ostringstream& svg, const std::string& label, const CosineHistogram& h,
                     int x0, int y0, int w, int hgt) {
  const auto bins = h.intra_counts.size();
  long total_intra = 0, total_inter = 0;
  for (long c : h.intra_counts) total_intra += c;
  for (long c : h.inter_counts) total_inter += c;
  double peak = 1e-12;
  for (std::size_t b = 0; b < bins; ++b) {
    if (total_intra) peak = std::max(peak, static_cast<double>(h.intra_counts[b]) / total_intra);
    if (total_inter) peak = std::max(peak, static_cast<double>(h.inter_counts[b]) / total_inter);
  }
  const double bw = static_cast<double>(w) / static_cast<double>(bins);
  svg << "<g data-panel=\"" << label << "\" data-intra-mean=\"" << std::setprecision(17)
      << h.intra_mean << "\" data-inter-mean=\"" << h.inter_mean << "\">\n"
      << std::setprecision(2);
  svg << "<text x=\"" << x0 << "\" y=\"" << y0 - 8 << "\" font-family=\"sans-serif\" font-size=\"12\">"
      << label << ": intra mean " << h.intra_mean << ", inter mean " << h.inter_mean << "</text>\n";
  for (std::size_t b = 0; b < bins; ++b) {
    const double fi = total_intra ? static_cast<double>(h.intra_counts[b]) / total_intra : 0.0;
    const double fo = total_inter ? static_cast<double>(h.inter_counts[b]) / total_inter : 0.0;
    const double x = x0 + bw * static_cast<double>(b);
    svg << "<rect x=\"" << x << "\" y=\"" << y0 + hgt - hgt * fo / peak << "\" width=\"" << bw
        << "\" height=\"" << hgt * fo / peak << "\" fill=\"#dd8452\" fill-opacity=\"0.6\"/>\n";
    svg << "<rect x=\"" << x << "\" y=\"" << y0 + hgt - hgt * fi / peak << "\" width=\"" << bw
        << "\" height=\"" << hgt * fi / peak << "\" fill=\"#4c72b0\" fill-opacity=\"0.6\"/>\n";
  }
  svg << "<line x1=\"" << x0 << "\" y1=\"" << y0 + hgt << "\" x2=\"" << x0 + w << "\" y2=\""
      << y0 + hgt << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << x0 << "\" y=\"" << y0 + hgt + 14
      << "\" font-family=\"sans-serif\" font-size=\"10\">" << h.lo << "</text>\n";
  svg << "<text x=\"" << x0 + w << "\" y=\"" << y0 + hgt + 14
      << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">" << h.hi
      << "</text>\n</g>\n";
}

}  // namespace

std::vector<fs::path> emit_plots(const fs::path& run_dir) {
  const nlohmann::json report = read_json(run_dir / "report.json");
  const std::string run_id = report.at("run_id").get<std::string>();
  if (report.at("stages").empty()) throw ValidationError("report has no stages to plot");
  const auto& last = report.at("stages").back();
  const auto& rows = last.at("metrics").at("per_class@100").at("predicates");
  if (rows.empty()) throw ValidationError("report has no per-class recall rows");
  fs::create_directories(run_dir / "plots");
  std::vector<fs::path> out;

  const fs::path bars = run_dir / "plots" / (run_id + "_predrecall.svg");
  write_text_atomic(bars, predicate_recall_svg(run_id + " " + last.at("stage").get<std::string>() +
                                                   ": R@100 per predicate (by train frequency)",
                                               rows));
  out.push_back(bars);

  if (fs::exists(run_dir / "cluster.json")) {
    const nlohmann::json cluster = read_json(run_dir / "cluster.json");
    std::ostringstream svg;
    svg << std::fixed << std::setprecision(2);
    const int panels = static_cast<int>(cluster.size());
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 40 + panels * 340
        << "\" height=\"260\">\n";
    int x = 30;
    for (const char* key : {"predicate", "triplet"}) {
      if (!cluster.contains(key)) continue;
      histogram_panel(svg, key, cosine_histogram_from_json(cluster.at(key)), x, 40, 300, 180);
      x += 340;
    }
    svg << "</svg>\n";
    const fs::path hist = run_dir / "plots" / (run_id + "_cosine.svg");
    write_text_atomic(hist, svg.str());
    out.push_back(hist);
  }
  return out;
}

}  // namespace drm
