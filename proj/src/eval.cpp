#include "gfsseg/eval.hpp"

#include <algorithm>
#include <cmath>

#include "gfsseg/rng.hpp"
#include "json.hpp"

namespace gfsseg {

using nlohmann::json;

void accumulate(ConfusionAccumulator& acc, const LabelGrid& predicted, const LabelGrid& truth,
                int ignore_value) {
  if (predicted.h != truth.h || predicted.w != truth.w)
    throw domain_error("prediction and ground truth shapes differ");
  for (std::size_t i = 0; i < truth.data.size(); ++i) {
    int gt = truth.data[i];
    if (gt == ignore_value) continue;
    int pred = predicted.data[i];
    if (pred == gt) {
      acc.counts[gt].tp++;
    } else {
      acc.counts[pred].fp++;
      acc.counts[gt].fn++;
    }
  }
}

void merge(ConfusionAccumulator& into, const ConfusionAccumulator& from) {
  for (const auto& [cls, c] : from.counts) {
    auto& dst = into.counts[cls];
    dst.tp += c.tp;
    dst.fp += c.fp;
    dst.fn += c.fn;
  }
}

EvalReport finalize(const ConfusionAccumulator& acc, const FoldSpec& fold, EvalMode mode) {
  std::vector<int> base_set, novel_set = fold.novel_classes;
  if (mode == EvalMode::generalized) {
    base_set = fold.base_classes;
  } else {
    base_set = {0};  // novel-only scoring keeps background in the universe
  }

  EvalReport report;
  report.fold_index = fold.fold_index;
  report.mode = mode;

  auto iou_of = [&](int cls) -> std::optional<double> {
    auto it = acc.counts.find(cls);
    if (it == acc.counts.end()) return std::nullopt;
    std::int64_t denom = it->second.tp + it->second.fp + it->second.fn;
    if (denom == 0) return std::nullopt;
    return static_cast<double>(it->second.tp) / static_cast<double>(denom);
  };

  double base_sum = 0, novel_sum = 0, total_sum = 0;
  int base_n = 0, novel_n = 0, total_n = 0;
  for (int cls : base_set) {
    if (auto iou = iou_of(cls)) {
      report.per_class_iou[cls] = *iou;
      base_sum += *iou;
      ++base_n;
      total_sum += *iou;
      ++total_n;
    }
  }
  for (int cls : novel_set) {
    if (auto iou = iou_of(cls)) {
      report.per_class_iou[cls] = *iou;
      novel_sum += *iou;
      ++novel_n;
      total_sum += *iou;
      ++total_n;
    }
  }
  if (total_n == 0) throw eval_error("every class in the evaluation universe is undefined");

  report.base_miou = base_n ? base_sum / base_n : 0.0;
  report.novel_miou = novel_n ? novel_sum / novel_n : 0.0;
  report.total_miou = total_sum / total_n;
  return report;
}

CrossFoldSummary cross_fold_average(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw domain_error("cross-fold average of zero reports");
  CrossFoldSummary summary;
  summary.per_fold = reports;
  for (const auto& r : reports) {
    summary.base_miou += r.base_miou;
    summary.novel_miou += r.novel_miou;
    summary.total_miou += r.total_miou;
  }
  summary.base_miou /= static_cast<double>(reports.size());
  summary.novel_miou /= static_cast<double>(reports.size());
  summary.total_miou /= static_cast<double>(reports.size());
  return summary;
}

LabelGrid predict_labels(const Tensor& logits, int item, const std::vector<int>& output_classes) {
  if (static_cast<int>(output_classes.size()) != logits.c)
    throw domain_error("output_classes size does not match the logit channels");
  LabelGrid out(logits.h, logits.w);
  for (int y = 0; y < logits.h; ++y)
    for (int x = 0; x < logits.w; ++x) {
      int best = 0;
      double best_v = logits.at(item, 0, y, x);
      for (int c = 1; c < logits.c; ++c) {
        double v = logits.at(item, c, y, x);
        if (v > best_v) {  // strict: ties keep the lowest index
          best_v = v;
          best = c;
        }
      }
      out.at(y, x) = output_classes[static_cast<std::size_t>(best)];
    }
  return out;
}

std::vector<double> collect_novel_confidences(const Tensor& logits, int item,
                                              const LabelGrid& truth,
                                              const std::vector<int>& output_classes,
                                              const std::set<int>& novel_classes,
                                              int ignore_value) {
  std::vector<double> out;
  std::vector<double> ex(static_cast<std::size_t>(logits.c));
  for (int y = 0; y < logits.h; ++y)
    for (int x = 0; x < logits.w; ++x) {
      int gt = truth.at(y, x);
      if (gt == ignore_value || !novel_classes.count(gt)) continue;
      int best = 0;
      double best_v = logits.at(item, 0, y, x);
      for (int c = 1; c < logits.c; ++c)
        if (logits.at(item, c, y, x) > best_v) {
          best_v = logits.at(item, c, y, x);
          best = c;
        }
      if (output_classes[static_cast<std::size_t>(best)] != gt) continue;
      double denom = 0;
      for (int c = 0; c < logits.c; ++c) {
        ex[static_cast<std::size_t>(c)] = std::exp(logits.at(item, c, y, x) - best_v);
        denom += ex[static_cast<std::size_t>(c)];
      }
      out.push_back(ex[static_cast<std::size_t>(best)] / denom);
    }
  return out;
}

namespace {

double quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  double pos = q * static_cast<double>(sorted.size() - 1);
  std::size_t lo = static_cast<std::size_t>(pos);
  double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

}  // namespace

ConfidenceStats summarize_confidences(std::vector<double> values, std::int64_t cap,
                                      std::uint64_t seed) {
  ConfidenceStats stats;
  if (values.empty()) return stats;  // n = 0, stats undefined by contract

  if (cap > 0 && static_cast<std::int64_t>(values.size()) > cap) {
    Rng rng(Rng::mix(seed, 0x434F4E46ULL));  // confidence subsample stream
    auto picks = rng.sample_without_replacement(static_cast<int>(values.size()),
                                                static_cast<int>(cap));
    std::vector<double> subset;
    subset.reserve(picks.size());
    for (int i : picks) subset.push_back(values[static_cast<std::size_t>(i)]);
    values = std::move(subset);
  }

  std::sort(values.begin(), values.end());
  double sum = 0;
  for (double v : values) sum += v;
  stats.n = static_cast<std::int64_t>(values.size());
  stats.mean = sum / static_cast<double>(values.size());
  stats.median = quantile(values, 0.5);
  stats.q1 = quantile(values, 0.25);
  stats.q3 = quantile(values, 0.75);
  return stats;
}

ConfidenceStats confidence_analysis(Network& net, const std::vector<SegmentationSample>& eval_set,
                                    const FoldSpec& fold, std::int64_t sample_cap,
                                    std::uint64_t seed) {
  std::vector<int> output_classes = fold.base_classes;
  output_classes.insert(output_classes.end(), fold.novel_classes.begin(),
                        fold.novel_classes.end());
  std::set<int> novel(fold.novel_classes.begin(), fold.novel_classes.end());

  std::vector<double> values;
  for (const auto& sample : eval_set) {
    ForwardResult r = forward(net, sample.image, Mode::eval);
    auto v = collect_novel_confidences(r.logits, 0, sample.labels, output_classes, novel, 255);
    values.insert(values.end(), v.begin(), v.end());
  }
  return summarize_confidences(std::move(values), sample_cap, seed);
}

std::vector<SaturationRow> saturation_summary(const std::map<int, EvalReport>& by_shots) {
  std::vector<SaturationRow> rows;
  const EvalReport* prev = nullptr;
  for (const auto& [shots, report] : by_shots) {  // map iterates shots ascending
    SaturationRow row;
    row.shots = shots;
    row.base_miou = report.base_miou;
    row.novel_miou = report.novel_miou;
    row.total_miou = report.total_miou;
    if (prev) {
      row.delta_base = report.base_miou - prev->base_miou;
      row.delta_novel = report.novel_miou - prev->novel_miou;
      row.delta_total = report.total_miou - prev->total_miou;
    }
    prev = &report;
    rows.push_back(row);
  }
  return rows;
}

const std::vector<ReferenceRow>& gfsseg_pascal_reference() {
  // Published GFS-Seg PASCAL-5i numbers, percentage mIoU. Render-only.
  static const std::vector<ReferenceRow> rows{
      {1, 65.48, 18.85, 54.38},
      {5, 66.14, 22.41, 55.72},
      {10, 64.52, 23.19, 54.68},
  };
  return rows;
}

std::string report_to_json(const EvalReport& report) {
  json j;
  j["fold_index"] = report.fold_index;
  j["shots"] = report.shots;
  j["mode"] = report.mode == EvalMode::generalized ? "generalized" : "novel_only";
  j["base_miou"] = report.base_miou;
  j["novel_miou"] = report.novel_miou;
  j["total_miou"] = report.total_miou;
  j["per_class_iou"] = json::object();
  for (const auto& [cls, iou] : report.per_class_iou)
    j["per_class_iou"][std::to_string(cls)] = iou;
  if (report.confidence) {
    j["confidence"] = {{"mean", report.confidence->mean},
                       {"median", report.confidence->median},
                       {"q1", report.confidence->q1},
                       {"q3", report.confidence->q3},
                       {"n", report.confidence->n}};
  }
  return j.dump(2);
}

EvalReport report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ingestion_error("bad report json: " + std::string(e.what()));
  }
  EvalReport report;
  report.fold_index = j.at("fold_index").get<int>();
  report.shots = j.at("shots").get<int>();
  report.mode = j.at("mode").get<std::string>() == "novel_only" ? EvalMode::novel_only
                                                                : EvalMode::generalized;
  report.base_miou = j.at("base_miou").get<double>();
  report.novel_miou = j.at("novel_miou").get<double>();
  report.total_miou = j.at("total_miou").get<double>();
  for (const auto& [key, value] : j.at("per_class_iou").items())
    report.per_class_iou[std::stoi(key)] = value.get<double>();
  if (j.contains("confidence")) {
    ConfidenceStats s;
    s.mean = j["confidence"].at("mean").get<double>();
    s.median = j["confidence"].at("median").get<double>();
    s.q1 = j["confidence"].at("q1").get<double>();
    s.q3 = j["confidence"].at("q3").get<double>();
    s.n = j["confidence"].at("n").get<std::int64_t>();
    report.confidence = s;
  }
  return report;
}

}  // namespace gfsseg
