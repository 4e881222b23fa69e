#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gfsseg/tensor.hpp"

namespace gfsseg {

// One image plus its per-pixel class labels. Image values live in [0,1];
// label values are class indices in [0, num_classes] or the ignore sentinel.
struct SegmentationSample {
  Tensor image;      // {1, channels, h, w}
  LabelGrid labels;  // h x w
  std::string id;
};

struct DatasetSpec {
  std::string name;
  int num_classes = 0;       // object classes, excluding background
  int background_index = 0;  // always 0
  int ignore_value = 255;
  int num_folds = 4;
};

// Partition of {0..num_classes} into base and novel classes for one fold.
// Background (0) is always a base class.
struct FoldSpec {
  int fold_index = 0;
  std::vector<int> base_classes;   // sorted, includes background
  std::vector<int> novel_classes;  // sorted, never includes background
  int ratio_shift = 0;
};

// K-shot fine-tuning set plus the held-out evaluation split.
struct Episode {
  int shots = 0;
  std::vector<SegmentationSample> support;
  std::vector<SegmentationSample> eval_set;
  std::uint64_t seed = 0;
};

enum class EvalMode { generalized, novel_only };

// Novel classes of PASCAL-5^i fold i: {5i+j : j in 1..5}.
std::vector<int> pascal_fold_classes(int fold_index);

// Novel classes of COCO-20^i fold i: {4j-3+i : j in 1..20}.
std::vector<int> coco_fold_classes(int fold_index);

// Builds the base/novel split for a fold. COCO-style datasets (name starting
// with "coco") use the interleaved formula; everything else splits the class
// range into num_folds contiguous blocks, which reproduces the PASCAL-5^i
// formula for 20 classes / 4 folds. ratio_shift moves that many classes
// between base and novel, lowest class index first: negative shrinks the
// novel set, positive grows it.
FoldSpec make_fold(const DatasetSpec& spec, int fold_index, int ratio_shift = 0);

// Draws K support images per class in C_b union C_n, uniformly without
// replacement among the images containing the class. One image may serve
// several classes and then appears once per class served. eval_set is the
// full validation split, ordered by id.
Episode sample_episode(const std::vector<SegmentationSample>& train_set,
                       const std::vector<SegmentationSample>& validation_set,
                       const FoldSpec& fold, int shots, std::uint64_t seed);

// generalized: identity. novel_only: base-class pixels become background,
// novel and ignore pixels are kept.
SegmentationSample remap_labels(const SegmentationSample& sample, const FoldSpec& fold,
                                EvalMode mode);
LabelGrid remap_label_grid(const LabelGrid& labels, const FoldSpec& fold, EvalMode mode,
                           int ignore_value);

struct SyntheticDataset {
  std::vector<SegmentationSample> train;
  std::vector<SegmentationSample> validation;
  DatasetSpec spec;
};

// Desk-scale stand-in for PASCAL/COCO: images of 1-4 non-overlapping shapes,
// one (shape kind, color range) signature per class. Shape interiors carry
// the class index, a 1-pixel rim around each shape is ignored, the rest is
// background. Bit-identical output per seed.
SyntheticDataset generate_synthetic_dataset(int num_classes, int train_images,
                                            int val_images, int height, int width,
                                            std::uint64_t seed);

// Paired-PNG directory ingestion: root/manifest.json + images/ + labels/.
SyntheticDataset load_dataset(const std::string& root);

// Writes a dataset in the same paired-PNG layout load_dataset reads.
void save_dataset(const SyntheticDataset& dataset, const std::string& root);

// True when at least one pixel of the class is present and not ignored.
bool sample_contains_class(const SegmentationSample& sample, int class_index,
                           int ignore_value);

}  // namespace gfsseg
