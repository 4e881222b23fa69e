#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gfsseg/train.hpp"

namespace gfsseg {

struct DatasetRef {
  bool synthetic = true;
  std::string root;  // paired-PNG directory when not synthetic
  int num_classes = 8;
  int train_images = 48;
  int val_images = 16;
  int height = 64;
  int width = 64;
  std::uint64_t seed = 7;
};

// Parsed experiment description. The method name fixes the freeze policy and
// regularizer placement:
//   vanilla           stage 2 freezes the backbone, no regularizer
//   objdet_ft         stage 2 trains only the output head, no regularizer
//   triplet_ft        triplet on stage 2 only (weight lambda_triplet_ft)
//   triplet_all       triplet on both stages (lambda 0.5 base / 1.0 ft)
//   trip_base_ft_last triplet on stage 1 only, stage 2 trains only the head
//   cosine            cosine contrastive regularizer in both stages
struct ExperimentConfig {
  std::string name = "experiment";
  DatasetRef dataset;
  std::vector<int> folds{0};
  std::vector<int> shots{1};
  std::vector<std::uint64_t> seeds{1};
  std::string method = "vanilla";
  EvalMode eval_mode = EvalMode::generalized;
  int ratio_shift = 0;
  NetworkConfig net;
  StageConfig stage1;
  StageConfig stage2;
  std::string output_dir = "out";
  std::string cache_dir;  // defaults to <output_dir>/cache
  bool confidence = false;
  std::int64_t confidence_cap = 100000;
};

// Parses and validates a JSON config. Error messages are anchored to the line
// of the offending key in `source_name`. Applies the method mapping.
ExperimentConfig parse_experiment_config(const std::string& text,
                                         const std::string& source_name);

// Reads the file and honors the GFSSEG_OUT_ROOT override for output_dir.
ExperimentConfig load_experiment_config(const std::string& path);

SyntheticDataset materialize_dataset(const DatasetRef& ref);

struct RunRow {
  std::string method;
  int fold = 0;
  int shots = 0;
  std::uint64_t seed = 0;
  double base_miou = 0, novel_miou = 0, total_miou = 0;
};

struct ExperimentResult {
  std::vector<RunRow> rows;
  std::string summary_csv;     // path
  std::string cross_fold_csv;  // path
};

// Executes every (fold, shot, seed) combination and writes
// <out>/<method>/<fold>/<shots>/<seed>/{report.json, events.jsonl, final.ckpt,
// run.json} plus summary.csv and cross_fold.csv at the output root.
ExperimentResult run_experiment(const ExperimentConfig& config);

enum class SweepAxis { lr, lambda_triplet, shots, ratio_shift };

SweepAxis parse_sweep_axis(const std::string& name);

struct SweepRow {
  std::string value;  // axis setting as given
  double base_miou = 0, novel_miou = 0, total_miou = 0;
};

// One run_experiment per value, aggregated to a single row (mean over folds,
// seeds and shots). lambda_triplet values are "base:ft" pairs.
std::vector<SweepRow> run_sweep(const ExperimentConfig& base, SweepAxis axis,
                                const std::vector<std::string>& values);

std::string render_sweep_csv(SweepAxis axis, const std::vector<SweepRow>& rows);

// Fixed injective palette; the ignore label renders white.
std::array<std::uint8_t, 3> palette_color(int label, int ignore_value);

// Renders argmax predictions (and ground truth when present) of up to `limit`
// samples as indexed-color PNGs. Returns the number of files written.
int export_masks(Network& net, const std::vector<SegmentationSample>& samples,
                 const std::vector<int>& output_classes, const std::string& out_dir,
                 int ignore_value, int limit);

// Consolidated markdown over every report.json under out_dir, one table per
// method plus the cited reference rows. Throws config_error when the
// directory holds no reports.
std::string render_report(const std::string& out_dir);

// Shortest round-trip decimal rendering, shared by every CSV/table writer.
std::string format_double(double v);

}  // namespace gfsseg
