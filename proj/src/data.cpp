#include "gfsseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "gfsseg/io_png.hpp"
#include "gfsseg/rng.hpp"
#include "json.hpp"

namespace gfsseg {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<int> pascal_fold_classes(int fold_index) {
  if (fold_index < 0 || fold_index > 3)
    throw domain_error("pascal fold index must be in [0,3], got " + std::to_string(fold_index));
  std::vector<int> out;
  for (int j = 1; j <= 5; ++j) out.push_back(5 * fold_index + j);
  return out;
}

std::vector<int> coco_fold_classes(int fold_index) {
  if (fold_index < 0 || fold_index > 3)
    throw domain_error("coco fold index must be in [0,3], got " + std::to_string(fold_index));
  std::vector<int> out;
  for (int j = 1; j <= 20; ++j) out.push_back(4 * j - 3 + fold_index);
  return out;
}

FoldSpec make_fold(const DatasetSpec& spec, int fold_index, int ratio_shift) {
  if (fold_index < 0 || fold_index >= spec.num_folds)
    throw domain_error("fold index " + std::to_string(fold_index) + " outside [0," +
                       std::to_string(spec.num_folds) + ")");
  if (spec.num_classes % spec.num_folds != 0)
    throw domain_error("num_classes must divide evenly into folds");

  const int per_fold = spec.num_classes / spec.num_folds;
  std::vector<int> novel;
  if (spec.name.rfind("coco", 0) == 0) {
    for (int j = 1; j <= per_fold; ++j) novel.push_back(spec.num_folds * (j - 1) + 1 + fold_index);
  } else {
    for (int j = 1; j <= per_fold; ++j) novel.push_back(per_fold * fold_index + j);
  }

  if (std::abs(ratio_shift) > static_cast<int>(novel.size()) - 1)
    throw domain_error("ratio_shift " + std::to_string(ratio_shift) +
                       " would leave fewer than one novel class");

  std::set<int> novel_set(novel.begin(), novel.end());
  if (ratio_shift < 0) {
    // Move the lowest-indexed novel classes back to base.
    for (int i = 0; i < -ratio_shift; ++i) novel_set.erase(novel_set.begin());
  } else if (ratio_shift > 0) {
    // Move the lowest-indexed non-background base classes into novel.
    int moved = 0;
    for (int c = 1; c <= spec.num_classes && moved < ratio_shift; ++c) {
      if (novel_set.insert(c).second) ++moved;
    }
    if (moved < ratio_shift) throw domain_error("ratio_shift exceeds available base classes");
  }

  FoldSpec fold;
  fold.fold_index = fold_index;
  fold.ratio_shift = ratio_shift;
  fold.novel_classes.assign(novel_set.begin(), novel_set.end());
  for (int c = 0; c <= spec.num_classes; ++c)
    if (!novel_set.count(c)) fold.base_classes.push_back(c);
  return fold;
}

bool sample_contains_class(const SegmentationSample& sample, int class_index, int ignore_value) {
  if (class_index == ignore_value) return false;
  for (auto v : sample.labels.data)
    if (v == class_index) return true;
  return false;
}

Episode sample_episode(const std::vector<SegmentationSample>& train_set,
                       const std::vector<SegmentationSample>& validation_set,
                       const FoldSpec& fold, int shots, std::uint64_t seed) {
  if (train_set.empty()) throw domain_error("cannot sample an episode from an empty dataset");
  if (shots < 1) throw domain_error("shots must be >= 1");

  std::vector<int> classes = fold.base_classes;
  classes.insert(classes.end(), fold.novel_classes.begin(), fold.novel_classes.end());
  std::sort(classes.begin(), classes.end());

  // One pass over the dataset collecting which images contain which class.
  std::vector<std::set<int>> present(train_set.size());
  for (std::size_t i = 0; i < train_set.size(); ++i)
    for (auto v : train_set[i].labels.data) present[i].insert(v);

  Episode episode;
  episode.shots = shots;
  episode.seed = seed;

  Rng rng(Rng::mix(seed, 0x45504953ULL));  // episode stream
  for (int c : classes) {
    std::vector<int> containing;
    for (std::size_t i = 0; i < train_set.size(); ++i)
      if (present[i].count(c)) containing.push_back(static_cast<int>(i));
    if (containing.empty())
      throw domain_error("class " + std::to_string(c) + " has no containing samples");
    auto picks = rng.sample_without_replacement(static_cast<int>(containing.size()), shots);
    for (int p : picks)
      episode.support.push_back(train_set[static_cast<std::size_t>(containing[static_cast<std::size_t>(p)])]);
  }

  episode.eval_set = validation_set;
  std::sort(episode.eval_set.begin(), episode.eval_set.end(),
            [](const SegmentationSample& a, const SegmentationSample& b) { return a.id < b.id; });
  return episode;
}

LabelGrid remap_label_grid(const LabelGrid& labels, const FoldSpec& fold, EvalMode mode,
                           int ignore_value) {
  if (mode == EvalMode::generalized) return labels;
  std::set<int> novel(fold.novel_classes.begin(), fold.novel_classes.end());
  LabelGrid out = labels;
  for (auto& v : out.data) {
    if (v == ignore_value || novel.count(v)) continue;
    v = 0;
  }
  return out;
}

SegmentationSample remap_labels(const SegmentationSample& sample, const FoldSpec& fold,
                                EvalMode mode) {
  SegmentationSample out = sample;
  out.labels = remap_label_grid(sample.labels, fold, mode, 255);
  return out;
}

namespace {

struct Rgb {
  std::uint8_t r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0);
  double c = v * s;
  double x = c * (1.0 - std::fabs(std::fmod(h / 60.0, 2.0) - 1.0));
  double m = v - c;
  double r = 0, g = 0, b = 0;
  if (h < 60) { r = c; g = x; }
  else if (h < 120) { r = x; g = c; }
  else if (h < 180) { g = c; b = x; }
  else if (h < 240) { g = x; b = c; }
  else if (h < 300) { r = x; b = c; }
  else { r = c; b = x; }
  auto q = [m](double t) {
    return static_cast<std::uint8_t>(std::lround(std::clamp((t + m) * 255.0, 0.0, 255.0)));
  };
  return {q(r), q(g), q(b)};
}

enum class ShapeKind { rect, disk, triangle, diamond };

bool inside_shape(ShapeKind kind, double dx, double dy, double rx, double ry) {
  switch (kind) {
    case ShapeKind::rect:
      return std::fabs(dx) <= rx && std::fabs(dy) <= ry;
    case ShapeKind::disk: {
      double u = dx / rx, v = dy / ry;
      return u * u + v * v <= 1.0;
    }
    case ShapeKind::triangle:
      // apex up: width grows linearly from the top vertex to the base
      return dy >= -ry && dy <= ry && std::fabs(dx) <= rx * (dy + ry) / (2.0 * ry);
    case ShapeKind::diamond:
      return std::fabs(dx) / rx + std::fabs(dy) / ry <= 1.0;
  }
  return false;
}

struct PlacedShape {
  int cx, cy, rx, ry;
};

bool boxes_overlap(const PlacedShape& a, const PlacedShape& b, int gap) {
  return std::abs(a.cx - b.cx) <= a.rx + b.rx + gap &&
         std::abs(a.cy - b.cy) <= a.ry + b.ry + gap;
}

SegmentationSample make_shape_image(int num_classes, int height, int width, int first_class,
                                    int ignore_value, Rng& rng, const std::string& id) {
  SegmentationSample sample;
  sample.id = id;
  sample.image = Tensor(1, 3, height, width);
  sample.labels = LabelGrid(height, width, 0);

  // Background: dim gray with pixel noise, built in 8-bit so the PNG
  // round-trip is exact.
  int bg_level = rng.range_int(25, 80);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      int noise = rng.range_int(-12, 12);
      int v = std::clamp(bg_level + noise, 0, 255);
      for (int ch = 0; ch < 3; ++ch) sample.image.at(0, ch, y, x) = v / 255.0;
    }
  }

  const int min_r = 4;
  const int max_r = std::max(min_r + 1, std::min(height, width) / 5);
  int shape_count = 1 + static_cast<int>(rng.below(4));

  std::vector<PlacedShape> placed;
  for (int s = 0; s < shape_count; ++s) {
    int cls = s == 0 ? first_class : rng.range_int(1, num_classes);
    ShapeKind kind = static_cast<ShapeKind>((cls - 1) % 4);

    PlacedShape box{};
    bool ok = false;
    for (int attempt = 0; attempt < 40 && !ok; ++attempt) {
      box.rx = rng.range_int(min_r, max_r);
      box.ry = rng.range_int(min_r, max_r);
      box.cx = rng.range_int(box.rx + 1, width - box.rx - 2);
      box.cy = rng.range_int(box.ry + 1, height - box.ry - 2);
      ok = true;
      for (const auto& other : placed)
        if (boxes_overlap(box, other, 2)) ok = false;
    }
    if (!ok) continue;  // canvas too crowded; fewer shapes is fine
    placed.push_back(box);

    // Class color signature: evenly spaced hue centers with a band of
    // per-shape jitter wide enough that one example does not pin the class.
    double hue_center = 360.0 * (cls - 1) / num_classes;
    double band = 0.42 * 360.0 / num_classes;
    double hue = hue_center + rng.uniform(-band, band);
    double sat = rng.uniform(0.65, 1.0);
    double val = rng.uniform(0.55, 1.0);
    Rgb base = hsv_to_rgb(hue, sat, val);

    for (int y = box.cy - box.ry; y <= box.cy + box.ry; ++y) {
      for (int x = box.cx - box.rx; x <= box.cx + box.rx; ++x) {
        if (!inside_shape(kind, x - box.cx, y - box.cy, box.rx, box.ry)) continue;
        sample.labels.at(y, x) = cls;
        int jr = rng.range_int(-10, 10);
        sample.image.at(0, 0, y, x) = std::clamp(base.r + jr, 0, 255) / 255.0;
        sample.image.at(0, 1, y, x) = std::clamp(base.g + jr, 0, 255) / 255.0;
        sample.image.at(0, 2, y, x) = std::clamp(base.b + jr, 0, 255) / 255.0;
      }
    }

    // 1-pixel rim of the shape becomes ignore.
    std::vector<std::pair<int, int>> rim;
    for (int y = box.cy - box.ry; y <= box.cy + box.ry; ++y) {
      for (int x = box.cx - box.rx; x <= box.cx + box.rx; ++x) {
        if (sample.labels.at(y, x) != cls) continue;
        bool edge = y == 0 || x == 0 || y == height - 1 || x == width - 1 ||
                    sample.labels.at(y - 1, x) != cls || sample.labels.at(y + 1, x) != cls ||
                    sample.labels.at(y, x - 1) != cls || sample.labels.at(y, x + 1) != cls;
        if (edge) rim.emplace_back(y, x);
      }
    }
    for (auto [y, x] : rim) sample.labels.at(y, x) = ignore_value;
  }
  return sample;
}

int presence_count(const std::vector<SegmentationSample>& set, int cls, int ignore) {
  int n = 0;
  for (const auto& s : set)
    if (sample_contains_class(s, cls, ignore)) ++n;
  return n;
}

std::string padded_id(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-%04d", prefix, i);
  return buf;
}

}  // namespace

SyntheticDataset generate_synthetic_dataset(int num_classes, int train_images, int val_images,
                                            int height, int width, std::uint64_t seed) {
  if (num_classes < 8) throw domain_error("synthetic dataset needs >= 8 classes");
  if (height < 32 || width < 32) throw domain_error("synthetic images must be at least 32x32");
  if (train_images < 1 || val_images < 1) throw domain_error("need at least one image per split");

  SyntheticDataset ds;
  ds.spec.name = "synthetic";
  ds.spec.num_classes = num_classes;
  ds.spec.background_index = 0;
  ds.spec.ignore_value = 255;
  ds.spec.num_folds = 4;

  for (int attempt = 0; attempt < 5; ++attempt) {
    Rng rng(Rng::mix(seed + static_cast<std::uint64_t>(attempt), 0x53594E54ULL));
    ds.train.clear();
    ds.validation.clear();
    for (int i = 0; i < train_images; ++i)
      ds.train.push_back(make_shape_image(num_classes, height, width, i % num_classes + 1,
                                          ds.spec.ignore_value, rng, padded_id("train", i)));
    for (int i = 0; i < val_images; ++i)
      ds.validation.push_back(make_shape_image(num_classes, height, width, i % num_classes + 1,
                                               ds.spec.ignore_value, rng, padded_id("val", i)));

    bool ok = true;
    for (int c = 1; c <= num_classes && ok; ++c) {
      if (presence_count(ds.train, c, ds.spec.ignore_value) < train_images / (2 * num_classes))
        ok = false;
      if (val_images >= num_classes &&
          presence_count(ds.validation, c, ds.spec.ignore_value) < 1)
        ok = false;
    }
    if (ok) return ds;
  }
  throw domain_error("could not generate a class-balanced synthetic dataset in 5 attempts");
}

namespace {

PngImage sample_image_to_png(const Tensor& image) {
  PngImage png;
  png.width = image.w;
  png.height = image.h;
  png.channels = 3;
  png.pixels.resize(static_cast<std::size_t>(image.w) * image.h * 3);
  for (int y = 0; y < image.h; ++y)
    for (int x = 0; x < image.w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        png.pixels[(static_cast<std::size_t>(y) * image.w + x) * 3 + ch] =
            static_cast<std::uint8_t>(
                std::lround(std::clamp(image.at(0, ch, y, x), 0.0, 1.0) * 255.0));
  return png;
}

SegmentationSample read_sample(const fs::path& root, const std::string& id,
                               const DatasetSpec& spec) {
  fs::path image_path = root / "images" / (id + ".png");
  fs::path label_path = root / "labels" / (id + ".png");
  PngImage img = read_png(image_path.string());
  if (img.channels != 3) throw ingestion_error("expected RGB image: " + image_path.string());
  PngImage lab = read_png(label_path.string());
  if (lab.channels != 1)
    throw ingestion_error("expected single-channel label map: " + label_path.string());
  if (lab.width != img.width || lab.height != img.height)
    throw ingestion_error("image/label dimensions differ for " + id);

  SegmentationSample s;
  s.id = id;
  s.image = Tensor(1, 3, img.height, img.width);
  s.labels = LabelGrid(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int ch = 0; ch < 3; ++ch)
        s.image.at(0, ch, y, x) =
            img.pixels[(static_cast<std::size_t>(y) * img.width + x) * 3 + ch] / 255.0;
      int v = lab.pixels[static_cast<std::size_t>(y) * lab.width + x];
      if (v != spec.ignore_value && (v < 0 || v > spec.num_classes))
        throw ingestion_error("label value " + std::to_string(v) + " out of range in " +
                              label_path.string());
      s.labels.at(y, x) = v;
    }
  }
  return s;
}

}  // namespace

SyntheticDataset load_dataset(const std::string& root_str) {
  fs::path root(root_str);
  fs::path manifest_path = root / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw ingestion_error("missing manifest: " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw ingestion_error("bad manifest " + manifest_path.string() + ": " + e.what());
  }

  SyntheticDataset ds;
  try {
    ds.spec.name = manifest.at("name").get<std::string>();
    ds.spec.num_classes = manifest.at("num_classes").get<int>();
    ds.spec.ignore_value = manifest.at("ignore_value").get<int>();
    ds.spec.num_folds = manifest.at("num_folds").get<int>();
  } catch (const json::exception& e) {
    throw ingestion_error("manifest missing field: " + std::string(e.what()));
  }
  if (ds.spec.ignore_value >= 0 && ds.spec.ignore_value <= ds.spec.num_classes)
    throw ingestion_error("ignore_value must lie outside the class index range");

  auto read_split = [&](const char* key, std::vector<SegmentationSample>& out) {
    if (!manifest.contains("splits") || !manifest["splits"].contains(key))
      throw ingestion_error(std::string("manifest missing splits.") + key);
    for (const auto& id : manifest["splits"][key])
      out.push_back(read_sample(root, id.get<std::string>(), ds.spec));
    std::sort(out.begin(), out.end(),
              [](const SegmentationSample& a, const SegmentationSample& b) { return a.id < b.id; });
  };
  read_split("train", ds.train);
  read_split("val", ds.validation);
  return ds;
}

void save_dataset(const SyntheticDataset& dataset, const std::string& root_str) {
  fs::path root(root_str);
  fs::create_directories(root / "images");
  fs::create_directories(root / "labels");

  json manifest;
  manifest["name"] = dataset.spec.name;
  manifest["num_classes"] = dataset.spec.num_classes;
  manifest["ignore_value"] = dataset.spec.ignore_value;
  manifest["num_folds"] = dataset.spec.num_folds;
  manifest["splits"]["train"] = json::array();
  manifest["splits"]["val"] = json::array();

  auto write_split = [&](const std::vector<SegmentationSample>& samples, const char* key) {
    for (const auto& s : samples) {
      manifest["splits"][key].push_back(s.id);
      write_png((root / "images" / (s.id + ".png")).string(), sample_image_to_png(s.image));
      PngImage lab;
      lab.width = s.labels.w;
      lab.height = s.labels.h;
      lab.channels = 1;
      lab.pixels.resize(s.labels.size());
      for (std::size_t i = 0; i < s.labels.size(); ++i)
        lab.pixels[i] = static_cast<std::uint8_t>(s.labels.data[i]);
      write_png((root / "labels" / (s.id + ".png")).string(), lab);
    }
  };
  write_split(dataset.train, "train");
  write_split(dataset.validation, "val");

  std::ofstream out(root / "manifest.json");
  out << manifest.dump(2) << "\n";
}

}  // namespace gfsseg
