#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gfsseg/data.hpp"
#include "gfsseg/eval.hpp"
#include "gfsseg/loss.hpp"
#include "gfsseg/model.hpp"

namespace gfsseg {

enum class StageKind { base, finetune };
enum class Regularizer { none, triplet, cosine };

struct StageConfig {
  StageKind stage = StageKind::base;
  int epochs = 50;
  int batch_size = 16;
  double lr = 0.01;
  double lr_decay = 1e-5;  // decoupled weight decay factor, applied per step
  double momentum = 0.9;
  FreezePolicy freeze;
  Regularizer regularizer = Regularizer::none;
  LossWeights weights;
  int eval_every = 10;
  std::uint64_t seed = 0;
};

struct EpochLog {
  int epoch = 0;  // 1-based
  double loss = 0;
  std::map<std::string, double> components;  // main / aux / triplet / cosine
  double lr = 0;
};

struct EvalSnapshot {
  int epoch = 0;
  EvalReport report;
};

struct BestModel {
  int epoch = 0;
  double total_miou = 0;
};

struct TrainRecord {
  std::string stage;  // "base" | "finetune"
  std::vector<EpochLog> epochs;
  std::vector<EvalSnapshot> evals;
  std::optional<BestModel> best;
  bool aborted = false;
  std::string abort_reason;
  bool cache_hit = false;      // stage-1 checkpoint was reused
  std::string checkpoint;      // file backing this stage, when one exists
};

// Line-delimited JSON events (epoch / eval / best / cache / abort) for
// external monitoring.
std::string record_to_jsonl(const TrainRecord& record);

// Test seam: replaces the stage-2 validation metric. Returns the total mIoU
// to record for the given 1-based epoch.
struct TrainHooks {
  std::function<double(const Network& net, int epoch)> eval_metric;
};

// Maps dataset class ids onto contiguous output-channel indices (the position
// of the class in output_classes). Ignore pixels pass through. Classes absent
// from output_classes become channel 0 (background) when fold_to_background is
// set, otherwise they are a domain error.
LabelGrid to_output_indices(const LabelGrid& labels, const std::vector<int>& output_classes,
                            int ignore_value, bool fold_to_background);

// Forward in eval mode over each sample, argmax, confusion counts, mIoU per
// the fold split. In novel_only mode both prediction and truth collapse base
// classes to background before scoring.
EvalReport evaluate_network(Network& net, const std::vector<SegmentationSample>& eval_set,
                            const FoldSpec& fold, const std::vector<int>& output_classes,
                            EvalMode mode, int ignore_value, int shots = 0);

// Base training. train_set labels must already be in output-index space
// (use to_output_indices with novel classes folded to background). SGD with
// momentum and decoupled weight decay on the parameters left trainable by
// config.freeze; cross entropy plus the auxiliary head term, plus the
// configured regularizer on the penultimate features. The network is updated
// in place. A non-finite loss aborts and flags the record.
TrainRecord train_stage1(Network& net, const std::vector<SegmentationSample>& train_set,
                         const StageConfig& config, int ignore_value);

// K-shot fine-tuning on the episode support set (labels in dataset class-id
// space; the mapping to output indices happens here). Evaluates on
// episode.eval_set every eval_every epochs and on the last epoch, and leaves
// the network at the snapshot with the best total mIoU. No auxiliary term.
TrainRecord train_stage2(Network& net, const Episode& episode, const FoldSpec& fold,
                         const StageConfig& config, int ignore_value,
                         const TrainHooks* hooks = nullptr);

struct PipelineRequest {
  std::vector<int> folds{0};
  int ratio_shift = 0;
  int shots = 1;
  std::uint64_t seed = 0;
  NetworkConfig net;  // num_outputs is derived from the fold, not taken from here
  StageConfig stage1;
  StageConfig stage2;
  EvalMode eval_mode = EvalMode::generalized;
  std::string cache_dir;  // empty disables stage-1 checkpoint reuse
};

struct PipelineResult {
  int fold_index = 0;
  EvalReport report;
  TrainRecord stage1_record;
  TrainRecord stage2_record;
  Network network;
};

// Content key for the stage-1 checkpoint cache: dataset identity, fold split,
// network shape, stage-1 config and seed.
std::string stage1_cache_key(const SyntheticDataset& data, const FoldSpec& fold,
                             const NetworkConfig& net, const StageConfig& stage1,
                             std::uint64_t seed);

// Per requested fold: stage 1 on base-only labels (cached per fold and seed
// when cache_dir is set), head expansion, episode sampling, stage 2, final
// evaluation of the selected model.
std::vector<PipelineResult> run_pipeline(const SyntheticDataset& data,
                                         const PipelineRequest& request);

}  // namespace gfsseg
