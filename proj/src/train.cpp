#include "gfsseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <unordered_map>

#include "gfsseg/rng.hpp"
#include "json.hpp"

namespace gfsseg {

namespace {

constexpr std::uint64_t kShuffleTag = 0x53485546;  // batch order
constexpr std::uint64_t kRegTag = 0x524547;        // triplet/cosine point sampling

void validate_stage_config(const StageConfig& c) {
  if (c.lr <= 0) throw config_error("lr must be positive");
  if (c.epochs < 1) throw config_error("epochs must be >= 1");
  if (c.batch_size < 1) throw config_error("batch_size must be >= 1");
  if (c.eval_every < 1) throw config_error("eval_every must be >= 1");
  if (c.momentum < 0 || c.momentum >= 1) throw config_error("momentum must be in [0, 1)");
  if (c.lr_decay < 0) throw config_error("lr_decay must be >= 0");
}

struct Batch {
  Tensor images;
  std::vector<LabelGrid> labels;
};

Batch assemble_batch(const std::vector<SegmentationSample>& samples,
                     const std::vector<LabelGrid>& mapped_labels,
                     const std::vector<std::size_t>& order, std::size_t begin,
                     std::size_t end) {
  const Tensor& first = samples[order[begin]].image;
  int c = first.c, h = first.h, w = first.w;
  Batch batch;
  batch.images = Tensor(static_cast<int>(end - begin), c, h, w);
  for (std::size_t i = begin; i < end; ++i) {
    const Tensor& img = samples[order[i]].image;
    if (img.c != c || img.h != h || img.w != w)
      throw config_error("batch mixes image sizes: " + img.shape_str() + " vs " +
                         first.shape_str());
    std::copy(img.data.begin(), img.data.end(),
              batch.images.data.begin() +
                  static_cast<std::ptrdiff_t>((i - begin) * img.size()));
    batch.labels.push_back(mapped_labels[order[i]]);
  }
  return batch;
}

struct Sgd {
  std::vector<ParamRef> params;
  std::vector<std::vector<double>> velocity;

  explicit Sgd(std::vector<ParamRef> trainable) : params(std::move(trainable)) {
    velocity.reserve(params.size());
    for (const auto& p : params) velocity.emplace_back(p.value->size(), 0.0);
  }

  void step(double lr, double momentum, double decay) {
    double keep = 1.0 - lr * decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& val = params[i].value->data;
      const auto& grad = params[i].grad->data;
      auto& vel = velocity[i];
      for (std::size_t k = 0; k < val.size(); ++k) {
        vel[k] = momentum * vel[k] + grad[k];
        val[k] = (val[k] - lr * vel[k]) * keep;
      }
    }
  }
};

std::vector<int> foreground_channels(int num_outputs) {
  std::vector<int> classes;
  for (int i = 1; i < num_outputs; ++i) classes.push_back(i);
  return classes;
}

// Runs one optimization epoch. Returns false (and flags the record) when the
// loss goes non-finite; the pending update is discarded.
bool run_epoch(Network& net, Sgd& sgd, const std::vector<SegmentationSample>& samples,
               const std::vector<LabelGrid>& mapped_labels, const StageConfig& config,
               int ignore_value, int epoch, TrainRecord& record) {
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffle_rng(Rng::mix(config.seed, kShuffleTag, static_cast<std::uint64_t>(epoch)));
  shuffle_rng.shuffle(order);

  Stage stage = config.stage == StageKind::base ? Stage::base : Stage::ft;
  bool use_aux = config.stage == StageKind::base && net.config.aux_tap;
  double lambda_reg = stage == Stage::base ? config.weights.lambda_triplet_base
                                           : config.weights.lambda_triplet_ft;
  const char* reg_key = config.regularizer == Regularizer::cosine ? "cosine" : "triplet";

  EpochLog log;
  log.epoch = epoch;
  log.lr = config.lr;
  int batches = 0;

  for (std::size_t begin = 0; begin < order.size();
       begin += static_cast<std::size_t>(config.batch_size)) {
    std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
    Batch batch = assemble_batch(samples, mapped_labels, order, begin, end);

    ForwardCache cache;
    ForwardResult out;
    try {
      out = forward(net, batch.images, Mode::train, &cache);
    } catch (const numeric_error& e) {
      // Divergence usually surfaces as non-finite activations before the
      // scalar loss itself overflows; both end the run the same way.
      record.aborted = true;
      record.abort_reason = std::string("epoch ") + std::to_string(epoch) + " batch " +
                            std::to_string(batches) + ": " + e.what();
      return false;
    }

    Tensor dlogits;
    double main = masked_cross_entropy(out.logits, batch.labels, ignore_value, &dlogits);

    double aux = 0;
    Tensor daux;
    if (use_aux) {
      aux = masked_cross_entropy(out.aux_logits, batch.labels, ignore_value, &daux);
      for (auto& v : daux.data) v *= config.weights.lambda_aux;
    }

    double reg = 0;
    Tensor dpen;
    if (config.regularizer != Regularizer::none) {
      std::vector<LabelGrid> feat_labels;
      feat_labels.reserve(batch.labels.size());
      for (const auto& lg : batch.labels)
        feat_labels.push_back(
            downsample_labels_nearest(lg, out.penultimate.h, out.penultimate.w));
      std::vector<int> classes = foreground_channels(net.config.num_outputs);
      std::uint64_t reg_seed =
          Rng::mix(config.seed, kRegTag,
                   (static_cast<std::uint64_t>(epoch) << 32) |
                       static_cast<std::uint64_t>(begin));
      if (config.regularizer == Regularizer::triplet) {
        TripletSet set = build_triplet_set(out.penultimate, feat_labels, classes,
                                           config.weights.tau, ignore_value, reg_seed);
        reg = triplet_set_loss(out.penultimate, set, config.weights.mu, &dpen);
      } else {
        reg = cosine_contrastive_loss(out.penultimate, feat_labels, classes,
                                      config.weights.tau, ignore_value, reg_seed, &dpen);
      }
      for (auto& v : dpen.data) v *= lambda_reg;
    }

    double total;
    if (config.regularizer == Regularizer::none)
      total = stage == Stage::base ? stage1_loss(main, aux, config.weights)
                                   : stage2_loss(main);
    else
      total = stage_loss_with_triplet(
          main, use_aux ? std::optional<double>(aux) : std::nullopt, reg,
          config.weights, stage);

    if (!std::isfinite(total)) {
      char buf[160];
      std::snprintf(buf, sizeof buf,
                    "non-finite loss at epoch %d batch %d (main=%g aux=%g reg=%g)",
                    epoch, batches, main, aux, reg);
      record.aborted = true;
      record.abort_reason = buf;
      return false;
    }

    zero_grad(net);
    backward(net, cache, dlogits, dpen.size() > 0 ? &dpen : nullptr,
             use_aux ? &daux : nullptr);
    sgd.step(config.lr, config.momentum, config.lr_decay);

    log.loss += total;
    log.components["main"] += main;
    if (use_aux) log.components["aux"] += aux;
    if (config.regularizer != Regularizer::none) log.components[reg_key] += reg;
    ++batches;
  }

  log.loss /= batches;
  for (auto& [_, v] : log.components) v /= batches;
  record.epochs.push_back(std::move(log));
  return true;
}

void append_hex(std::string& out, std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  out += buf;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

void put(std::string& blob, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g|", v);
  blob += buf;
}

void put(std::string& blob, const std::string& s) {
  blob += s;
  blob += '|';
}

void put(std::string& blob, long long v) { blob += std::to_string(v) + "|"; }

}  // namespace

LabelGrid to_output_indices(const LabelGrid& labels, const std::vector<int>& output_classes,
                            int ignore_value, bool fold_to_background) {
  std::unordered_map<int, int> index;
  for (std::size_t i = 0; i < output_classes.size(); ++i)
    index[output_classes[i]] = static_cast<int>(i);
  LabelGrid out(labels.h, labels.w);
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    std::int32_t v = labels.data[i];
    if (v == ignore_value) {
      out.data[i] = v;
      continue;
    }
    auto it = index.find(v);
    if (it != index.end())
      out.data[i] = it->second;
    else if (fold_to_background)
      out.data[i] = 0;
    else
      throw domain_error("label " + std::to_string(v) + " has no output channel");
  }
  return out;
}

EvalReport evaluate_network(Network& net, const std::vector<SegmentationSample>& eval_set,
                            const FoldSpec& fold, const std::vector<int>& output_classes,
                            EvalMode mode, int ignore_value, int shots) {
  ConfusionAccumulator acc;
  for (const auto& sample : eval_set) {
    ForwardResult out = forward(net, sample.image, Mode::eval);
    LabelGrid pred = predict_labels(out.logits, 0, output_classes);
    if (mode == EvalMode::novel_only) {
      pred = remap_label_grid(pred, fold, EvalMode::novel_only, ignore_value);
      LabelGrid truth = remap_label_grid(sample.labels, fold, EvalMode::novel_only, ignore_value);
      accumulate(acc, pred, truth, ignore_value);
    } else {
      accumulate(acc, pred, sample.labels, ignore_value);
    }
  }
  EvalReport report = finalize(acc, fold, mode);
  report.fold_index = fold.fold_index;
  report.shots = shots;
  report.mode = mode;
  return report;
}

TrainRecord train_stage1(Network& net, const std::vector<SegmentationSample>& train_set,
                         const StageConfig& config, int ignore_value) {
  validate_stage_config(config);
  if (config.stage != StageKind::base) throw config_error("train_stage1 needs stage=base");
  if (train_set.empty()) throw domain_error("stage 1 training set is empty");

  Sgd sgd(apply_freeze(net, config.freeze));
  std::vector<LabelGrid> labels;
  labels.reserve(train_set.size());
  for (const auto& s : train_set) labels.push_back(s.labels);

  TrainRecord record;
  record.stage = "base";
  for (int epoch = 1; epoch <= config.epochs; ++epoch)
    if (!run_epoch(net, sgd, train_set, labels, config, ignore_value, epoch, record)) break;
  return record;
}

TrainRecord train_stage2(Network& net, const Episode& episode, const FoldSpec& fold,
                         const StageConfig& config, int ignore_value,
                         const TrainHooks* hooks) {
  validate_stage_config(config);
  if (config.stage != StageKind::finetune)
    throw config_error("train_stage2 needs stage=finetune");
  if (episode.support.empty()) throw domain_error("episode has an empty support set");

  std::vector<int> output_classes = fold.base_classes;
  output_classes.insert(output_classes.end(), fold.novel_classes.begin(),
                        fold.novel_classes.end());
  if (static_cast<int>(output_classes.size()) != net.config.num_outputs)
    throw config_error("network has " + std::to_string(net.config.num_outputs) +
                       " outputs but the fold defines " +
                       std::to_string(output_classes.size()) + " classes");

  Sgd sgd(apply_freeze(net, config.freeze));
  std::vector<LabelGrid> labels;
  labels.reserve(episode.support.size());
  for (const auto& s : episode.support)
    labels.push_back(to_output_indices(s.labels, output_classes, ignore_value, true));

  TrainRecord record;
  record.stage = "finetune";
  double best_total = -1;
  int best_epoch = 0;
  Network best_net;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    if (!run_epoch(net, sgd, episode.support, labels, config, ignore_value, epoch, record))
      return record;
    if (epoch % config.eval_every != 0 && epoch != config.epochs) continue;

    EvalSnapshot snap;
    snap.epoch = epoch;
    if (hooks && hooks->eval_metric) {
      snap.report.total_miou = hooks->eval_metric(net, epoch);
      snap.report.fold_index = fold.fold_index;
      snap.report.shots = episode.shots;
    } else {
      snap.report = evaluate_network(net, episode.eval_set, fold, output_classes,
                                     EvalMode::generalized, ignore_value, episode.shots);
    }
    if (snap.report.total_miou > best_total) {
      best_total = snap.report.total_miou;
      best_epoch = epoch;
      best_net = net;
    }
    record.evals.push_back(std::move(snap));
  }

  net = std::move(best_net);
  record.best = BestModel{best_epoch, best_total};
  return record;
}

std::string stage1_cache_key(const SyntheticDataset& data, const FoldSpec& fold,
                             const NetworkConfig& net, const StageConfig& stage1,
                             std::uint64_t seed) {
  std::string blob;
  put(blob, data.spec.name);
  put(blob, static_cast<long long>(data.spec.num_classes));
  put(blob, static_cast<long long>(data.spec.ignore_value));
  put(blob, static_cast<long long>(data.spec.num_folds));
  put(blob, static_cast<long long>(data.train.size()));
  put(blob, static_cast<long long>(data.validation.size()));
  for (const auto& s : data.train) put(blob, s.id);
  put(blob, static_cast<long long>(fold.fold_index));
  put(blob, static_cast<long long>(fold.ratio_shift));
  for (int c : fold.base_classes) put(blob, static_cast<long long>(c));
  for (int c : fold.novel_classes) put(blob, static_cast<long long>(-c));
  for (int c : net.backbone_channels) put(blob, static_cast<long long>(c));
  put(blob, static_cast<long long>(net.classifier_hidden));
  put(blob, static_cast<long long>(net.num_outputs));
  for (int s : net.pooling_scales) put(blob, static_cast<long long>(s));
  put(blob, static_cast<long long>(net.aux_tap));
  put(blob, static_cast<long long>(net.in_channels));
  put(blob, static_cast<long long>(stage1.epochs));
  put(blob, static_cast<long long>(stage1.batch_size));
  put(blob, stage1.lr);
  put(blob, stage1.lr_decay);
  put(blob, stage1.momentum);
  put(blob, static_cast<long long>(stage1.freeze.variant));
  put(blob, static_cast<long long>(stage1.regularizer));
  put(blob, stage1.weights.lambda_aux);
  put(blob, stage1.weights.lambda_triplet_base);
  put(blob, stage1.weights.lambda_triplet_ft);
  put(blob, stage1.weights.mu);
  put(blob, static_cast<long long>(stage1.weights.tau));
  put(blob, static_cast<long long>(stage1.seed));
  put(blob, static_cast<long long>(seed));

  std::string key;
  append_hex(key, fnv1a(blob));
  return key;
}

std::vector<PipelineResult> run_pipeline(const SyntheticDataset& data,
                                         const PipelineRequest& request) {
  if (request.folds.empty()) throw config_error("no folds requested");
  int ignore_value = data.spec.ignore_value;
  std::vector<PipelineResult> results;

  for (int fold_index : request.folds) {
    FoldSpec fold = make_fold(data.spec, fold_index, request.ratio_shift);

    StageConfig s1 = request.stage1;
    s1.stage = StageKind::base;
    s1.seed = Rng::mix(request.seed, 1, static_cast<std::uint64_t>(fold_index));
    NetworkConfig net_cfg = request.net;
    net_cfg.num_outputs = static_cast<int>(fold.base_classes.size());

    std::string key = stage1_cache_key(data, fold, net_cfg, s1, request.seed);
    std::string ckpt_path =
        request.cache_dir.empty() ? "" : request.cache_dir + "/stage1_" + key + ".ckpt";

    PipelineResult result;
    result.fold_index = fold_index;
    Network net;
    if (!ckpt_path.empty() && std::filesystem::exists(ckpt_path)) {
      net = load_checkpoint(ckpt_path, net_cfg);
      result.stage1_record.stage = "base";
      result.stage1_record.cache_hit = true;
      result.stage1_record.checkpoint = ckpt_path;
    } else {
      net = build_network(net_cfg, Rng::mix(request.seed, 0, static_cast<std::uint64_t>(fold_index)));
      std::vector<SegmentationSample> base_train = data.train;
      for (auto& s : base_train)
        s.labels = to_output_indices(s.labels, fold.base_classes, ignore_value, true);
      result.stage1_record = train_stage1(net, base_train, s1, ignore_value);
      if (result.stage1_record.aborted)
        throw numeric_error("stage 1 aborted on fold " + std::to_string(fold_index) +
                            ": " + result.stage1_record.abort_reason);
      if (!ckpt_path.empty()) {
        std::filesystem::create_directories(request.cache_dir);
        save_checkpoint(net, ckpt_path);
        result.stage1_record.checkpoint = ckpt_path;
      }
    }

    std::vector<int> all_classes = fold.base_classes;
    all_classes.insert(all_classes.end(), fold.novel_classes.begin(),
                       fold.novel_classes.end());
    expand_classifier_outputs(net, static_cast<int>(fold.base_classes.size()),
                              static_cast<int>(all_classes.size()),
                              Rng::mix(request.seed, 4, static_cast<std::uint64_t>(fold_index)));

    Episode episode = sample_episode(data.train, data.validation, fold, request.shots,
                                     Rng::mix(request.seed, 3, static_cast<std::uint64_t>(fold_index)));

    StageConfig s2 = request.stage2;
    s2.stage = StageKind::finetune;
    s2.seed = Rng::mix(request.seed, 2, static_cast<std::uint64_t>(fold_index));
    result.stage2_record = train_stage2(net, episode, fold, s2, ignore_value);
    if (result.stage2_record.aborted)
      throw numeric_error("stage 2 aborted on fold " + std::to_string(fold_index) +
                          ": " + result.stage2_record.abort_reason);

    result.report = evaluate_network(net, episode.eval_set, fold, all_classes,
                                     request.eval_mode, ignore_value, request.shots);
    result.network = std::move(net);
    results.push_back(std::move(result));
  }
  return results;
}

std::string record_to_jsonl(const TrainRecord& record) {
  std::string out;
  auto emit = [&out](const nlohmann::json& j) {
    out += j.dump();
    out += '\n';
  };
  if (record.cache_hit)
    emit({{"event", "cache"}, {"stage", record.stage}, {"hit", true},
          {"checkpoint", record.checkpoint}});
  for (const auto& e : record.epochs) {
    nlohmann::json j{{"event", "epoch"}, {"stage", record.stage}, {"epoch", e.epoch},
                     {"loss", e.loss}, {"lr", e.lr}};
    j["components"] = e.components;
    emit(j);
  }
  for (const auto& s : record.evals)
    emit({{"event", "eval"}, {"stage", record.stage}, {"epoch", s.epoch},
          {"base_miou", s.report.base_miou}, {"novel_miou", s.report.novel_miou},
          {"total_miou", s.report.total_miou}});
  if (record.best)
    emit({{"event", "best"}, {"stage", record.stage}, {"epoch", record.best->epoch},
          {"total_miou", record.best->total_miou}});
  if (record.aborted)
    emit({{"event", "abort"}, {"stage", record.stage}, {"reason", record.abort_reason}});
  return out;
}

}  // namespace gfsseg
