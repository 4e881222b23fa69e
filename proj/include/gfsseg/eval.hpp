#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "gfsseg/data.hpp"
#include "gfsseg/model.hpp"
#include "gfsseg/tensor.hpp"

namespace gfsseg {

// Per-class pixel confusion counts. Ignore pixels are counted nowhere.
struct ConfusionAccumulator {
  struct Counts {
    std::int64_t tp = 0, fp = 0, fn = 0;
  };
  std::map<int, Counts> counts;
};

void accumulate(ConfusionAccumulator& acc, const LabelGrid& predicted, const LabelGrid& truth,
                int ignore_value);
// Associative shard merge; merging in any order equals sequential accumulation.
void merge(ConfusionAccumulator& into, const ConfusionAccumulator& from);

struct ConfidenceStats {
  double mean = 0, median = 0, q1 = 0, q3 = 0;
  std::int64_t n = 0;
};

struct EvalReport {
  std::map<int, double> per_class_iou;  // defined classes only
  double base_miou = 0, novel_miou = 0, total_miou = 0;
  int fold_index = 0;
  int shots = 0;
  EvalMode mode = EvalMode::generalized;
  std::optional<ConfidenceStats> confidence;
};

// IoU_c = TP/(TP+FP+FN), classes with zero denominator are excluded from all
// means. generalized mode averages base_miou over C_b (background included),
// novel_miou over C_n, total over their union; novel_only restricts the class
// universe to {background} u C_n. Throws eval_error when every class in the
// universe is undefined.
EvalReport finalize(const ConfusionAccumulator& acc, const FoldSpec& fold, EvalMode mode);

struct CrossFoldSummary {
  double base_miou = 0, novel_miou = 0, total_miou = 0;
  std::vector<EvalReport> per_fold;
};

CrossFoldSummary cross_fold_average(const std::vector<EvalReport>& reports);

// Argmax over output channels, ties resolved to the lowest index, mapped back
// to dataset class ids through output_classes (output channel k predicts
// class output_classes[k]).
LabelGrid predict_labels(const Tensor& logits, int item, const std::vector<int>& output_classes);

// Softmax probability of the winning class at pixels where the prediction is
// correct and the ground truth is a novel class.
std::vector<double> collect_novel_confidences(const Tensor& logits, int item,
                                              const LabelGrid& truth,
                                              const std::vector<int>& output_classes,
                                              const std::set<int>& novel_classes,
                                              int ignore_value);

// Subsamples to cap without replacement (deterministic per seed) and reduces
// to mean/median/quartiles; quartiles use linear interpolation between order
// statistics. n is the count the statistics were computed over; n=0 means
// no correct novel pixels existed and the statistics are meaningless.
ConfidenceStats summarize_confidences(std::vector<double> values, std::int64_t cap,
                                      std::uint64_t seed);

ConfidenceStats confidence_analysis(Network& net, const std::vector<SegmentationSample>& eval_set,
                                    const FoldSpec& fold, std::int64_t sample_cap,
                                    std::uint64_t seed);

struct SaturationRow {
  int shots = 0;
  double base_miou = 0, novel_miou = 0, total_miou = 0;
  // Deltas against the previous (smaller) shot count; absent on the first row.
  std::optional<double> delta_base, delta_novel, delta_total;
};

std::vector<SaturationRow> saturation_summary(const std::map<int, EvalReport>& by_shots);

// Published GFS-Seg PASCAL-5i results (1/5/10-shot base/novel/total mIoU),
// kept for rendering comparison rows only; this code never recomputes them.
struct ReferenceRow {
  int shots = 0;
  double base_miou = 0, novel_miou = 0, total_miou = 0;
};
const std::vector<ReferenceRow>& gfsseg_pascal_reference();

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);

}  // namespace gfsseg
