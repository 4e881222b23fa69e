#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gfsseg/rng.hpp"
#include "gfsseg/train.hpp"
#include "json.hpp"

using namespace gfsseg;

namespace {

NetworkConfig tiny_net() {
  NetworkConfig cfg;
  cfg.backbone_channels = {4, 6};
  cfg.classifier_hidden = 8;
  cfg.pooling_scales = {1, 2};
  cfg.num_outputs = 7;
  return cfg;
}

SyntheticDataset tiny_data() {
  return generate_synthetic_dataset(8, 24, 8, 32, 32, 9001);
}

std::vector<SegmentationSample> stage1_view(const SyntheticDataset& data,
                                            const FoldSpec& fold) {
  std::vector<SegmentationSample> out = data.train;
  for (auto& s : out)
    s.labels = to_output_indices(s.labels, fold.base_classes, data.spec.ignore_value, true);
  return out;
}

StageConfig quick_stage1(int epochs, std::uint64_t seed) {
  StageConfig c;
  c.stage = StageKind::base;
  c.epochs = epochs;
  c.batch_size = 8;
  c.seed = seed;
  return c;
}

bool params_equal(Network& a, Network& b) {
  auto pa = all_parameters(a), pb = all_parameters(b);
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].name != pb[i].name) return false;
    if (pa[i].value->data != pb[i].value->data) return false;
  }
  return true;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("class-id labels map onto output channels") {
  LabelGrid g(1, 5);
  g.data = {0, 3, 7, 255, 5};
  LabelGrid m = to_output_indices(g, {0, 3, 5, 6}, 255, true);
  CHECK(m.data == std::vector<std::int32_t>({0, 1, 0, 255, 2}));  // 7 folds to bg

  CHECK_THROWS_AS(to_output_indices(g, {0, 3, 5, 6}, 255, false), domain_error);
}

TEST_CASE("stage 1 is deterministic and its loss decreases") {
  SyntheticDataset data = tiny_data();
  FoldSpec fold = make_fold(data.spec, 0);
  auto train_set = stage1_view(data, fold);

  Network a = build_network(tiny_net(), 7);
  Network b = build_network(tiny_net(), 7);
  TrainRecord ra = train_stage1(a, train_set, quick_stage1(2, 11), 255);
  TrainRecord rb = train_stage1(b, train_set, quick_stage1(2, 11), 255);
  CHECK(params_equal(a, b));
  REQUIRE(ra.epochs.size() == 2);
  CHECK(ra.epochs[0].loss == rb.epochs[0].loss);
  CHECK(ra.epochs[1].loss == rb.epochs[1].loss);

  // A different seed changes the batch order and hence the trajectory.
  Network c = build_network(tiny_net(), 7);
  TrainRecord rc = train_stage1(c, train_set, quick_stage1(2, 12), 255);
  CHECK(ra.epochs[1].loss != rc.epochs[1].loss);

  // Optimization makes progress: late epochs beat early ones on average.
  Network d = build_network(tiny_net(), 7);
  TrainRecord rd = train_stage1(d, train_set, quick_stage1(10, 11), 255);
  double head = (rd.epochs[0].loss + rd.epochs[1].loss + rd.epochs[2].loss) / 3;
  double tail = (rd.epochs[7].loss + rd.epochs[8].loss + rd.epochs[9].loss) / 3;
  CHECK(tail < head);

  // Components: main + aux present, no regularizer entry.
  for (const auto& e : rd.epochs) {
    CHECK(e.components.count("main") == 1);
    CHECK(e.components.count("aux") == 1);
    CHECK(e.components.count("triplet") == 0);
    CHECK(e.components.count("cosine") == 0);
    CHECK(e.loss == doctest::Approx(e.components.at("main") + 0.4 * e.components.at("aux")));
  }
}

TEST_CASE("regularized stages record their component") {
  SyntheticDataset data = tiny_data();
  FoldSpec fold = make_fold(data.spec, 0);
  auto train_set = stage1_view(data, fold);

  StageConfig cfg = quick_stage1(1, 3);
  cfg.regularizer = Regularizer::triplet;
  Network net = build_network(tiny_net(), 7);
  TrainRecord rec = train_stage1(net, train_set, cfg, 255);
  REQUIRE(rec.epochs.size() == 1);
  CHECK(rec.epochs[0].components.count("triplet") == 1);
  CHECK(rec.epochs[0].loss ==
        doctest::Approx(rec.epochs[0].components.at("main") +
                        0.4 * rec.epochs[0].components.at("aux") +
                        0.5 * rec.epochs[0].components.at("triplet")));

  cfg.regularizer = Regularizer::cosine;
  Network net2 = build_network(tiny_net(), 7);
  TrainRecord rec2 = train_stage1(net2, train_set, cfg, 255);
  CHECK(rec2.epochs[0].components.count("cosine") == 1);
  CHECK(rec2.epochs[0].components.count("triplet") == 0);
}

TEST_CASE("stage 2 honors freezing exactly") {
  SyntheticDataset data = tiny_data();
  FoldSpec fold = make_fold(data.spec, 0);

  Network net = build_network(tiny_net(), 7);
  train_stage1(net, stage1_view(data, fold), quick_stage1(2, 5), 255);
  expand_classifier_outputs(net, 7, 9, 99);
  Episode ep = sample_episode(data.train, data.validation, fold, 2, 77);

  StageConfig cfg;
  cfg.stage = StageKind::finetune;
  cfg.epochs = 4;
  cfg.batch_size = 8;
  cfg.eval_every = 2;
  cfg.seed = 21;

  SUBCASE("freeze_backbone leaves every backbone tensor bit-identical") {
    cfg.freeze.variant = FreezeVariant::freeze_backbone;
    Network before = net;
    TrainRecord rec = train_stage2(net, ep, fold, cfg, 255);
    REQUIRE_FALSE(rec.aborted);
    auto pre = all_parameters(before), post = all_parameters(net);
    bool classifier_moved = false;
    for (std::size_t i = 0; i < pre.size(); ++i) {
      if (pre[i].group == "backbone") {
        CHECK(pre[i].value->data == post[i].value->data);
      } else if (pre[i].value->data != post[i].value->data) {
        classifier_moved = true;
      }
    }
    CHECK(classifier_moved);
    // Frozen batch-norm stats must not drift either.
    auto buf_pre = all_buffers(before), buf_post = all_buffers(net);
    for (std::size_t i = 0; i < buf_pre.size(); ++i)
      if (buf_pre[i].group == "backbone")
        CHECK(buf_pre[i].value->data == buf_post[i].value->data);
  }

  SUBCASE("freeze_all_but_last moves only the output head") {
    cfg.freeze.variant = FreezeVariant::freeze_all_but_last;
    Network before = net;
    TrainRecord rec = train_stage2(net, ep, fold, cfg, 255);
    REQUIRE_FALSE(rec.aborted);
    auto pre = all_parameters(before), post = all_parameters(net);
    bool head_moved = false;
    for (std::size_t i = 0; i < pre.size(); ++i) {
      if (pre[i].group == "classifier.final") {
        if (pre[i].value->data != post[i].value->data) head_moved = true;
      } else {
        CHECK(pre[i].value->data == post[i].value->data);
      }
    }
    CHECK(head_moved);
    auto buf_pre = all_buffers(before), buf_post = all_buffers(net);
    for (std::size_t i = 0; i < buf_pre.size(); ++i)
      CHECK(buf_pre[i].value->data == buf_post[i].value->data);
  }

  SUBCASE("empty support is rejected") {
    Episode hollow = ep;
    hollow.support.clear();
    CHECK_THROWS_AS(train_stage2(net, hollow, fold, cfg, 255), domain_error);
  }
}

TEST_CASE("best-checkpoint selection picks the argmax evaluation") {
  SyntheticDataset data = tiny_data();
  FoldSpec fold = make_fold(data.spec, 0);
  Network net = build_network(tiny_net(), 7);
  expand_classifier_outputs(net, 7, 9, 99);
  Episode ep = sample_episode(data.train, data.validation, fold, 1, 77);

  StageConfig cfg;
  cfg.stage = StageKind::finetune;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.eval_every = 1;
  cfg.seed = 8;

  std::vector<Network> snapshots;
  double rigged[] = {0.3, 0.5, 0.4};
  TrainHooks hooks;
  hooks.eval_metric = [&](const Network& n, int epoch) {
    snapshots.push_back(n);
    return rigged[epoch - 1];
  };

  TrainRecord rec = train_stage2(net, ep, fold, cfg, 255, &hooks);
  REQUIRE(rec.best.has_value());
  CHECK(rec.best->epoch == 2);
  CHECK(rec.best->total_miou == doctest::Approx(0.5));
  REQUIRE(snapshots.size() == 3);
  CHECK(params_equal(net, snapshots[1]));
  CHECK_FALSE(params_equal(net, snapshots[2]));

  // Selection monotonicity over the recorded snapshots.
  for (const auto& s : rec.evals) CHECK(rec.best->total_miou >= s.report.total_miou);
}

TEST_CASE("real stage 2 evaluation tracks the best snapshot") {
  SyntheticDataset data = tiny_data();
  FoldSpec fold = make_fold(data.spec, 0);
  Network net = build_network(tiny_net(), 7);
  train_stage1(net, stage1_view(data, fold), quick_stage1(3, 5), 255);
  expand_classifier_outputs(net, 7, 9, 99);
  Episode ep = sample_episode(data.train, data.validation, fold, 2, 77);

  StageConfig cfg;
  cfg.stage = StageKind::finetune;
  cfg.epochs = 5;
  cfg.batch_size = 8;
  cfg.eval_every = 2;  // evals at 2, 4, 5
  cfg.freeze.variant = FreezeVariant::freeze_backbone;
  cfg.seed = 31;

  TrainRecord rec = train_stage2(net, ep, fold, cfg, 255);
  REQUIRE_FALSE(rec.aborted);
  REQUIRE(rec.evals.size() == 3);
  CHECK(rec.evals[0].epoch == 2);
  CHECK(rec.evals[1].epoch == 4);
  CHECK(rec.evals[2].epoch == 5);
  REQUIRE(rec.best.has_value());
  for (const auto& s : rec.evals) {
    CHECK(rec.best->total_miou >= s.report.total_miou);
    CHECK(s.report.total_miou >= 0.0);
    CHECK(s.report.total_miou <= 1.0);
    // Fine-tuning records never carry an aux component.
  }
  for (const auto& e : rec.epochs) CHECK(e.components.count("aux") == 0);

  // The returned network reproduces the best snapshot's metric exactly.
  std::vector<int> outputs = fold.base_classes;
  outputs.insert(outputs.end(), fold.novel_classes.begin(), fold.novel_classes.end());
  EvalReport again =
      evaluate_network(net, ep.eval_set, fold, outputs, EvalMode::generalized, 255, 2);
  CHECK(again.total_miou == doctest::Approx(rec.best->total_miou));
}

TEST_CASE("divergence aborts with a diagnostic record") {
  SyntheticDataset data = tiny_data();
  FoldSpec fold = make_fold(data.spec, 0);
  auto train_set = stage1_view(data, fold);

  StageConfig cfg = quick_stage1(6, 2);
  cfg.lr = 1e14;  // guarantees overflow within a few steps
  Network net = build_network(tiny_net(), 7);
  TrainRecord rec = train_stage1(net, train_set, cfg, 255);
  CHECK(rec.aborted);
  CHECK_FALSE(rec.abort_reason.empty());
  CHECK(rec.epochs.size() < 6);
}

TEST_CASE("config invariants are enforced") {
  SyntheticDataset data = tiny_data();
  FoldSpec fold = make_fold(data.spec, 0);
  auto train_set = stage1_view(data, fold);
  Network net = build_network(tiny_net(), 7);

  StageConfig cfg = quick_stage1(1, 1);
  cfg.lr = 0;
  CHECK_THROWS_AS(train_stage1(net, train_set, cfg, 255), config_error);
  cfg = quick_stage1(0, 1);
  CHECK_THROWS_AS(train_stage1(net, train_set, cfg, 255), config_error);
  cfg = quick_stage1(1, 1);
  cfg.batch_size = 0;
  CHECK_THROWS_AS(train_stage1(net, train_set, cfg, 255), config_error);
  cfg = quick_stage1(1, 1);
  cfg.stage = StageKind::finetune;
  CHECK_THROWS_AS(train_stage1(net, train_set, cfg, 255), config_error);
}

TEST_CASE("pipeline runs end to end, caches stage 1, and is reproducible") {
  SyntheticDataset data = tiny_data();
  std::string cache = "build_fast/cache_test";
  std::filesystem::remove_all(cache);

  PipelineRequest req;
  req.folds = {0};
  req.shots = 1;
  req.seed = 424242;
  req.net = tiny_net();
  req.stage1 = quick_stage1(2, 0);
  req.stage2.stage = StageKind::finetune;
  req.stage2.epochs = 4;
  req.stage2.batch_size = 8;
  req.stage2.eval_every = 2;
  req.stage2.freeze.variant = FreezeVariant::freeze_backbone;
  req.cache_dir = cache;

  auto first = run_pipeline(data, req);
  REQUIRE(first.size() == 1);
  CHECK(first[0].fold_index == 0);
  CHECK_FALSE(first[0].stage1_record.cache_hit);
  CHECK(first[0].report.total_miou >= 0.0);
  CHECK(first[0].report.total_miou <= 1.0);
  CHECK(first[0].report.shots == 1);
  REQUIRE_FALSE(first[0].stage1_record.checkpoint.empty());
  std::string ckpt1 = slurp(first[0].stage1_record.checkpoint);

  // Same request again: stage 1 must come from the cache, metrics unchanged.
  auto second = run_pipeline(data, req);
  CHECK(second[0].stage1_record.cache_hit);
  CHECK(second[0].stage1_record.epochs.empty());
  CHECK(second[0].report.total_miou == first[0].report.total_miou);
  CHECK(second[0].report.base_miou == first[0].report.base_miou);
  CHECK(second[0].report.novel_miou == first[0].report.novel_miou);
  CHECK(second[0].report.per_class_iou == first[0].report.per_class_iou);

  // Different shot counts share the identical stage-1 checkpoint.
  req.shots = 5;
  auto five = run_pipeline(data, req);
  CHECK(five[0].stage1_record.cache_hit);
  CHECK(five[0].stage1_record.checkpoint == first[0].stage1_record.checkpoint);
  CHECK(slurp(five[0].stage1_record.checkpoint) == ckpt1);

  // A different seed must not collide with the cached checkpoint.
  req.seed = 424243;
  auto other = run_pipeline(data, req);
  CHECK_FALSE(other[0].stage1_record.cache_hit);
  CHECK(other[0].stage1_record.checkpoint != first[0].stage1_record.checkpoint);

  std::filesystem::remove_all(cache);
}

TEST_CASE("pipeline novel-only mode scores the reduced universe") {
  SyntheticDataset data = tiny_data();
  PipelineRequest req;
  req.folds = {0};
  req.shots = 1;
  req.seed = 9;
  req.net = tiny_net();
  req.stage1 = quick_stage1(1, 0);
  req.stage2.stage = StageKind::finetune;
  req.stage2.epochs = 2;
  req.stage2.batch_size = 8;
  req.stage2.eval_every = 2;
  req.eval_mode = EvalMode::novel_only;

  auto res = run_pipeline(data, req);
  FoldSpec fold = make_fold(data.spec, 0);
  for (const auto& [cls, iou] : res[0].report.per_class_iou) {
    bool allowed = cls == 0 || std::count(fold.novel_classes.begin(),
                                          fold.novel_classes.end(), cls) > 0;
    CHECK(allowed);
  }
  CHECK(res[0].report.mode == EvalMode::novel_only);
}

TEST_CASE("train records serialize to parseable jsonl") {
  TrainRecord rec;
  rec.stage = "finetune";
  EpochLog e;
  e.epoch = 1;
  e.loss = 0.75;
  e.lr = 0.01;
  e.components = {{"main", 0.5}, {"triplet", 0.25}};
  rec.epochs.push_back(e);
  EvalSnapshot s;
  s.epoch = 1;
  s.report.total_miou = 0.4;
  rec.evals.push_back(s);
  rec.best = BestModel{1, 0.4};

  std::string text = record_to_jsonl(rec);
  std::vector<nlohmann::json> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    lines.push_back(nlohmann::json::parse(text.substr(pos, nl - pos)));
    pos = nl + 1;
  }
  REQUIRE(lines.size() == 3);
  CHECK(lines[0]["event"] == "epoch");
  CHECK(lines[0]["components"]["triplet"] == doctest::Approx(0.25));
  CHECK(lines[0]["components"].contains("aux") == false);
  CHECK(lines[1]["event"] == "eval");
  CHECK(lines[1]["total_miou"] == doctest::Approx(0.4));
  CHECK(lines[2]["event"] == "best");
  CHECK(lines[2]["epoch"] == 1);

  TrainRecord cached;
  cached.stage = "base";
  cached.cache_hit = true;
  cached.checkpoint = "x.ckpt";
  std::string ctext = record_to_jsonl(cached);
  auto cj = nlohmann::json::parse(ctext.substr(0, ctext.find('\n')));
  CHECK(cj["event"] == "cache");
  CHECK(cj["hit"] == true);
}
