#include "doctest.h"

#include <cmath>
#include <set>

#include "gfsseg/eval.hpp"
#include "gfsseg/rng.hpp"

using namespace gfsseg;

namespace {

LabelGrid random_grid(int h, int w, int num_classes, double ignore_prob, Rng& rng) {
  LabelGrid g(h, w);
  for (auto& v : g.data)
    v = rng.uniform() < ignore_prob ? 255 : static_cast<std::int32_t>(rng.below(
                                                static_cast<std::uint64_t>(num_classes)));
  return g;
}

FoldSpec toy_fold() {
  FoldSpec fold;
  fold.fold_index = 0;
  fold.base_classes = {0, 3, 4};
  fold.novel_classes = {1, 2};
  return fold;
}

}  // namespace

TEST_CASE("perfect prediction scores IoU 1 on every present class") {
  Rng rng(401);
  LabelGrid gt = random_grid(8, 8, 4, 0.1, rng);
  ConfusionAccumulator acc;
  accumulate(acc, gt, gt, 255);
  for (const auto& [cls, c] : acc.counts) {
    CHECK(c.fp == 0);
    CHECK(c.fn == 0);
    CHECK(c.tp > 0);
  }

  FoldSpec fold;
  fold.base_classes = {0, 1};
  fold.novel_classes = {2, 3};
  EvalReport r = finalize(acc, fold, EvalMode::generalized);
  for (const auto& [cls, iou] : r.per_class_iou) CHECK(iou == 1.0);
  CHECK(r.total_miou == 1.0);
}

TEST_CASE("ignore pixels are counted nowhere") {
  LabelGrid gt(4, 4, 255);
  LabelGrid pred(4, 4, 2);
  ConfusionAccumulator acc;
  accumulate(acc, pred, gt, 255);
  CHECK(acc.counts.empty());

  LabelGrid bad(3, 4, 0);
  CHECK_THROWS_AS(accumulate(acc, bad, gt, 255), domain_error);
}

TEST_CASE("accumulator matches the pixel-set oracle exactly") {
  Rng rng(402);
  for (int trial = 0; trial < 50; ++trial) {
    LabelGrid gt = random_grid(16, 16, 5, 0.15, rng);
    LabelGrid pred = random_grid(16, 16, 5, 0.0, rng);
    ConfusionAccumulator acc;
    accumulate(acc, pred, gt, 255);

    for (int cls = 0; cls < 5; ++cls) {
      std::set<int> p_set, g_set;
      for (int i = 0; i < 256; ++i) {
        if (gt.data[static_cast<std::size_t>(i)] == 255) continue;  // counted nowhere
        if (pred.data[static_cast<std::size_t>(i)] == cls) p_set.insert(i);
        if (gt.data[static_cast<std::size_t>(i)] == cls) g_set.insert(i);
      }
      std::int64_t tp = 0, fp = 0, fn = 0;
      for (int i : p_set) tp += g_set.count(i) ? 1 : 0;
      fp = static_cast<std::int64_t>(p_set.size()) - tp;
      fn = static_cast<std::int64_t>(g_set.size()) - tp;

      auto it = acc.counts.find(cls);
      std::int64_t got_tp = it == acc.counts.end() ? 0 : it->second.tp;
      std::int64_t got_fp = it == acc.counts.end() ? 0 : it->second.fp;
      std::int64_t got_fn = it == acc.counts.end() ? 0 : it->second.fn;
      CHECK(got_tp == tp);
      CHECK(got_fp == fp);
      CHECK(got_fn == fn);

      // IoU = 1 exactly when the class appears with no disagreement.
      if (tp + fp + fn > 0) {
        double iou = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
        CHECK(iou >= 0.0);
        CHECK(iou <= 1.0);
        CHECK((iou == 1.0) == (fp == 0 && fn == 0 && tp > 0));
      }
    }
  }
}

TEST_CASE("finalize computes the documented means and exclusions") {
  ConfusionAccumulator acc;
  acc.counts[0] = {3, 1, 2};  // IoU 3/6 = 0.5
  acc.counts[1] = {4, 0, 0};  // 1.0
  acc.counts[3] = {1, 3, 0};  // 0.25
  // class 2 and 4 never appear -> undefined, excluded

  EvalReport r = finalize(acc, toy_fold(), EvalMode::generalized);
  CHECK(r.per_class_iou.at(0) == doctest::Approx(0.5));
  CHECK(r.per_class_iou.at(1) == doctest::Approx(1.0));
  CHECK(r.per_class_iou.at(3) == doctest::Approx(0.25));
  CHECK(r.per_class_iou.count(2) == 0);
  CHECK(r.per_class_iou.count(4) == 0);
  CHECK(r.base_miou == doctest::Approx((0.5 + 0.25) / 2));
  CHECK(r.novel_miou == doctest::Approx(1.0));
  CHECK(r.total_miou == doctest::Approx((0.5 + 1.0 + 0.25) / 3));

  // Total is the mean over the union, not the mean of the two group means.
  CHECK(std::fabs(r.total_miou - (r.base_miou + r.novel_miou) / 2) > 1e-6);

  ConfusionAccumulator empty;
  CHECK_THROWS_AS(finalize(empty, toy_fold(), EvalMode::generalized), eval_error);
}

TEST_CASE("novel-only mode scores over background plus the novel classes") {
  ConfusionAccumulator acc;
  acc.counts[0] = {8, 2, 0};  // 0.8
  acc.counts[1] = {1, 1, 2};  // 0.25
  acc.counts[3] = {5, 0, 0};  // base class 3: outside the novel-only universe
  EvalReport r = finalize(acc, toy_fold(), EvalMode::novel_only);
  CHECK(r.per_class_iou.count(3) == 0);
  CHECK(r.base_miou == doctest::Approx(0.8));
  CHECK(r.novel_miou == doctest::Approx(0.25));
  CHECK(r.total_miou == doctest::Approx((0.8 + 0.25) / 2));
}

TEST_CASE("accumulation is additive and merge is associative") {
  Rng rng(403);
  LabelGrid gt1 = random_grid(8, 8, 4, 0.1, rng), pred1 = random_grid(8, 8, 4, 0.0, rng);
  LabelGrid gt2 = random_grid(8, 8, 4, 0.1, rng), pred2 = random_grid(8, 8, 4, 0.0, rng);
  LabelGrid gt3 = random_grid(8, 8, 4, 0.1, rng), pred3 = random_grid(8, 8, 4, 0.0, rng);

  ConfusionAccumulator seq;
  accumulate(seq, pred1, gt1, 255);
  accumulate(seq, pred2, gt2, 255);
  accumulate(seq, pred3, gt3, 255);

  ConfusionAccumulator a, b, c;
  accumulate(a, pred1, gt1, 255);
  accumulate(b, pred2, gt2, 255);
  accumulate(c, pred3, gt3, 255);
  ConfusionAccumulator m1;
  merge(m1, a);
  merge(m1, b);
  merge(m1, c);
  ConfusionAccumulator bc;
  merge(bc, b);
  merge(bc, c);
  ConfusionAccumulator m2;
  merge(m2, a);
  merge(m2, bc);

  // Shard order must not matter either.
  ConfusionAccumulator perm;
  accumulate(perm, pred3, gt3, 255);
  accumulate(perm, pred1, gt1, 255);
  accumulate(perm, pred2, gt2, 255);

  for (auto* other : {&m1, &m2, &perm}) {
    REQUIRE(other->counts.size() == seq.counts.size());
    for (const auto& [cls, counts] : seq.counts) {
      CHECK(other->counts.at(cls).tp == counts.tp);
      CHECK(other->counts.at(cls).fp == counts.fp);
      CHECK(other->counts.at(cls).fn == counts.fn);
    }
  }
}

TEST_CASE("cross-fold averaging is the arithmetic mean") {
  EvalReport a;
  a.base_miou = 0.5;
  a.novel_miou = 0.7;
  a.total_miou = 0.6;
  EvalReport b = a;
  b.total_miou = 0.8;

  CrossFoldSummary same = cross_fold_average({a, a, a});
  CHECK(same.total_miou == doctest::Approx(a.total_miou));
  CHECK(same.base_miou == doctest::Approx(a.base_miou));

  CrossFoldSummary two = cross_fold_average({a, b});
  CHECK(two.total_miou == doctest::Approx(0.7));
  CHECK(two.per_fold.size() == 2);

  CHECK_THROWS_AS(cross_fold_average({}), domain_error);

  // Four-fold mean equals an independent recomputation.
  std::vector<EvalReport> four(4, a);
  for (int i = 0; i < 4; ++i) four[static_cast<std::size_t>(i)].total_miou = 0.1 * (i + 1);
  double expect = (0.1 + 0.2 + 0.3 + 0.4) / 4;
  CHECK(cross_fold_average(four).total_miou == doctest::Approx(expect));
}

TEST_CASE("argmax prediction breaks ties toward the lowest index") {
  Tensor logits(1, 3, 1, 2);
  // Pixel 0: exact tie between channels 0 and 2. Pixel 1: channel 1 wins.
  logits.at(0, 0, 0, 0) = 2.0;
  logits.at(0, 1, 0, 0) = 1.0;
  logits.at(0, 2, 0, 0) = 2.0;
  logits.at(0, 1, 0, 1) = 5.0;
  LabelGrid pred = predict_labels(logits, 0, {0, 7, 9});
  CHECK(pred.at(0, 0) == 0);
  CHECK(pred.at(0, 1) == 7);

  CHECK_THROWS_AS(predict_labels(logits, 0, {0, 1}), domain_error);
}

TEST_CASE("confidence collection and summarization") {
  // One-hot style logits: the winning probability approaches 1.
  Tensor logits(1, 3, 2, 2);
  LabelGrid gt(2, 2, 2);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) logits.at(0, 2, y, x) = 50.0;
  auto vals = collect_novel_confidences(logits, 0, gt, {0, 1, 2}, {2}, 255);
  REQUIRE(vals.size() == 4);
  for (double v : vals) CHECK(v > 0.999);

  // Uniform logits: every pixel scores exactly 1/C, but argmax picks class 0,
  // so only pixels whose truth is class 0 would count; class 0 is not novel
  // here, hence nothing is collected.
  Tensor uniform(1, 4, 2, 2);
  auto none = collect_novel_confidences(uniform, 0, gt, {0, 1, 2, 3}, {2}, 255);
  CHECK(none.empty());
  // Make the truth match the argmax winner and mark it novel.
  LabelGrid gt0(2, 2, 0);
  auto quarter = collect_novel_confidences(uniform, 0, gt0, {0, 1, 2, 3}, {0}, 255);
  REQUIRE(quarter.size() == 4);
  for (double v : quarter) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  ConfidenceStats zero = summarize_confidences({}, 100, 1);
  CHECK(zero.n == 0);

  // Population below the cap: statistics are over the full population.
  std::vector<double> pop{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  ConfidenceStats full = summarize_confidences(pop, 100, 7);
  CHECK(full.n == 9);
  CHECK(full.mean == doctest::Approx(0.5));
  CHECK(full.median == doctest::Approx(0.5));
  CHECK(full.q1 == doctest::Approx(0.3));
  CHECK(full.q3 == doctest::Approx(0.7));

  // Subsampling: deterministic per seed, close to the population stats.
  std::vector<double> big;
  Rng rng(404);
  for (int i = 0; i < 5000; ++i) big.push_back(rng.uniform());
  ConfidenceStats s1 = summarize_confidences(big, 1000, 11);
  ConfidenceStats s2 = summarize_confidences(big, 1000, 11);
  CHECK(s1.n == 1000);
  CHECK(s1.mean == s2.mean);
  CHECK(s1.median == s2.median);
  ConfidenceStats all = summarize_confidences(big, 0, 11);  // cap 0 = no cap
  CHECK(all.n == 5000);
  CHECK(std::fabs(s1.mean - all.mean) < 0.03);
}

TEST_CASE("saturation table reports per-shot rows and successive deltas") {
  EvalReport one;
  one.shots = 1;
  one.base_miou = 0.5;
  one.novel_miou = 0.2;
  one.total_miou = 0.4;
  EvalReport ten = one;
  ten.shots = 10;
  ten.novel_miou = 0.35;
  ten.total_miou = 0.6;

  auto single = saturation_summary({{1, one}});
  REQUIRE(single.size() == 1);
  CHECK_FALSE(single[0].delta_total.has_value());

  auto rows = saturation_summary({{1, one}, {10, ten}});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].shots == 1);
  CHECK(rows[1].shots == 10);
  REQUIRE(rows[1].delta_total.has_value());
  CHECK(*rows[1].delta_total == doctest::Approx(0.2));
  CHECK(*rows[1].delta_novel == doctest::Approx(0.15));
}

TEST_CASE("published reference rows are frozen") {
  const auto& rows = gfsseg_pascal_reference();
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].shots == 1);
  CHECK(rows[0].base_miou == doctest::Approx(65.48));
  CHECK(rows[0].novel_miou == doctest::Approx(18.85));
  CHECK(rows[0].total_miou == doctest::Approx(54.38));
  CHECK(rows[1].shots == 5);
  CHECK(rows[1].total_miou == doctest::Approx(55.72));
  CHECK(rows[2].shots == 10);
  CHECK(rows[2].novel_miou == doctest::Approx(23.19));
}

TEST_CASE("report json round trip") {
  EvalReport r;
  r.fold_index = 2;
  r.shots = 5;
  r.mode = EvalMode::novel_only;
  r.base_miou = 0.61;
  r.novel_miou = 0.33;
  r.total_miou = 0.52;
  r.per_class_iou = {{0, 0.61}, {5, 0.4}, {6, 0.26}};
  ConfidenceStats s;
  s.mean = 0.7;
  s.median = 0.72;
  s.q1 = 0.6;
  s.q3 = 0.81;
  s.n = 12345;
  r.confidence = s;

  EvalReport back = report_from_json(report_to_json(r));
  CHECK(back.fold_index == r.fold_index);
  CHECK(back.shots == r.shots);
  CHECK(back.mode == r.mode);
  CHECK(back.base_miou == r.base_miou);
  CHECK(back.per_class_iou == r.per_class_iou);
  REQUIRE(back.confidence.has_value());
  CHECK(back.confidence->n == 12345);
  CHECK(back.confidence->q3 == r.confidence->q3);

  CHECK_THROWS_AS(report_from_json("not json"), ingestion_error);
}
