#include "gfsseg/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <tuple>

#include "gfsseg/io_png.hpp"
#include "gfsseg/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace gfsseg {

namespace {

int line_of(const std::string& text, const std::string& needle) {
  std::size_t pos = text.find(needle);
  if (pos == std::string::npos) return 1;
  return 1 + static_cast<int>(std::count(text.begin(),
                                         text.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
}

// Anchors every config complaint to source:line of the offending key.
struct ConfigReader {
  const std::string& text;
  std::string src;

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw config_error(src + ":" + std::to_string(line_of(text, "\"" + key + "\"")) +
                       ": " + msg);
  }

  int geti(const json& j, const char* key, int def) const {
    if (!j.contains(key)) return def;
    if (!j.at(key).is_number_integer()) fail(key, std::string("'") + key + "' must be an integer");
    return j.at(key).get<int>();
  }

  double getd(const json& j, const char* key, double def) const {
    if (!j.contains(key)) return def;
    if (!j.at(key).is_number()) fail(key, std::string("'") + key + "' must be a number");
    return j.at(key).get<double>();
  }

  bool getb(const json& j, const char* key, bool def) const {
    if (!j.contains(key)) return def;
    if (!j.at(key).is_boolean()) fail(key, std::string("'") + key + "' must be a boolean");
    return j.at(key).get<bool>();
  }

  std::string gets(const json& j, const char* key, const std::string& def) const {
    if (!j.contains(key)) return def;
    if (!j.at(key).is_string()) fail(key, std::string("'") + key + "' must be a string");
    return j.at(key).get<std::string>();
  }

  std::vector<int> getvi(const json& j, const char* key, std::vector<int> def) const {
    if (!j.contains(key)) return def;
    if (!j.at(key).is_array()) fail(key, std::string("'") + key + "' must be an array");
    std::vector<int> out;
    for (const auto& v : j.at(key)) {
      if (!v.is_number_integer()) fail(key, std::string("'") + key + "' must hold integers");
      out.push_back(v.get<int>());
    }
    return out;
  }
};

void parse_stage(const ConfigReader& r, const json& parent, const char* key,
                 StageConfig& stage) {
  if (!parent.contains(key)) return;
  const json& j = parent.at(key);
  if (!j.is_object()) r.fail(key, std::string("'") + key + "' must be an object");
  stage.epochs = r.geti(j, "epochs", stage.epochs);
  stage.batch_size = r.geti(j, "batch_size", stage.batch_size);
  stage.lr = r.getd(j, "lr", stage.lr);
  stage.lr_decay = r.getd(j, "lr_decay", stage.lr_decay);
  stage.momentum = r.getd(j, "momentum", stage.momentum);
  stage.eval_every = r.geti(j, "eval_every", stage.eval_every);
  if (stage.epochs < 1) r.fail("epochs", "'epochs' must be >= 1");
  if (stage.batch_size < 1) r.fail("batch_size", "'batch_size' must be >= 1");
  if (stage.lr <= 0) r.fail("lr", "'lr' must be positive");
  if (stage.eval_every < 1) r.fail("eval_every", "'eval_every' must be >= 1");
}

// The documented method table: freeze policy and regularizer placement are
// functions of the method name alone.
void apply_method(ExperimentConfig& c, const ConfigReader& r) {
  c.stage1.stage = StageKind::base;
  c.stage2.stage = StageKind::finetune;
  c.stage1.freeze.variant = FreezeVariant::none;
  c.stage1.regularizer = Regularizer::none;
  c.stage2.regularizer = Regularizer::none;
  c.stage2.freeze.variant = FreezeVariant::freeze_backbone;

  if (c.method == "vanilla") {
  } else if (c.method == "objdet_ft") {
    c.stage2.freeze.variant = FreezeVariant::freeze_all_but_last;
  } else if (c.method == "triplet_ft") {
    c.stage2.regularizer = Regularizer::triplet;
  } else if (c.method == "triplet_all") {
    c.stage1.regularizer = Regularizer::triplet;
    c.stage2.regularizer = Regularizer::triplet;
  } else if (c.method == "trip_base_ft_last") {
    c.stage1.regularizer = Regularizer::triplet;
    c.stage2.freeze.variant = FreezeVariant::freeze_all_but_last;
  } else if (c.method == "cosine") {
    c.stage1.regularizer = Regularizer::cosine;
    c.stage2.regularizer = Regularizer::cosine;
  } else {
    r.fail("method", "unknown method '" + c.method +
                         "' (expected vanilla, objdet_ft, triplet_ft, triplet_all, "
                         "trip_base_ft_last or cosine)");
  }
}

std::string run_dir(const ExperimentConfig& c, int fold, int shots, std::uint64_t seed) {
  return c.output_dir + "/" + c.method + "/" + std::to_string(fold) + "/" +
         std::to_string(shots) + "/" + std::to_string(seed);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ingestion_error("cannot write " + path);
  out << text;
}

std::string csv_run_rows(const std::vector<RunRow>& rows) {
  std::string text = "method,fold,shots,seed,base_miou,novel_miou,total_miou\n";
  for (const auto& r : rows) {
    text += r.method + "," + std::to_string(r.fold) + "," + std::to_string(r.shots) + "," +
            std::to_string(r.seed) + "," + format_double(r.base_miou) + "," +
            format_double(r.novel_miou) + "," + format_double(r.total_miou) + "\n";
  }
  return text;
}

double parse_double_value(const std::string& s) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw config_error("not a number: '" + s + "'");
  }
}

int parse_int_value(const std::string& s) {
  try {
    std::size_t used = 0;
    int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw config_error("not an integer: '" + s + "'");
  }
}

std::string sanitize_dir_token(const std::string& value) {
  std::string out;
  for (char ch : value)
    out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-') ? ch : '_';
  return out;
}

const char* axis_name(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::lr: return "lr";
    case SweepAxis::lambda_triplet: return "lambda_triplet";
    case SweepAxis::shots: return "shots";
    case SweepAxis::ratio_shift: return "ratio_shift";
  }
  return "?";
}

struct ReportFile {
  std::string method;
  int fold = 0, shots = 0;
  EvalReport report;
};

std::vector<ReportFile> scan_reports(const std::string& out_dir) {
  std::vector<ReportFile> found;
  if (!fs::exists(out_dir)) return found;
  for (const auto& entry : fs::recursive_directory_iterator(out_dir)) {
    if (!entry.is_regular_file() || entry.path().filename() != "report.json") continue;
    fs::path rel = fs::relative(entry.path(), out_dir);
    std::vector<std::string> parts;
    for (const auto& p : rel) parts.push_back(p.string());
    if (parts.size() != 5) continue;  // method/fold/shots/seed/report.json
    ReportFile rf;
    rf.method = parts[0];
    try {
      rf.fold = std::stoi(parts[1]);
      rf.shots = std::stoi(parts[2]);
    } catch (const std::exception&) {
      continue;
    }
    std::ifstream in(entry.path(), std::ios::binary);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    rf.report = report_from_json(text);
    found.push_back(std::move(rf));
  }
  std::sort(found.begin(), found.end(), [](const ReportFile& a, const ReportFile& b) {
    return std::tie(a.method, a.shots, a.fold) < std::tie(b.method, b.shots, b.fold);
  });
  return found;
}

std::string md_row(std::initializer_list<std::string> cells) {
  std::string row = "|";
  for (const auto& c : cells) row += " " + c + " |";
  row += "\n";
  return row;
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

ExperimentConfig parse_experiment_config(const std::string& text,
                                         const std::string& source_name) {
  ConfigReader r{text, source_name};
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    int line = 1 + static_cast<int>(std::count(
                       text.begin(),
                       text.begin() + static_cast<std::ptrdiff_t>(
                                          std::min(text.size(), static_cast<std::size_t>(e.byte))),
                       '\n'));
    throw config_error(source_name + ":" + std::to_string(line) + ": " + e.what());
  }
  if (!j.is_object()) throw config_error(source_name + ":1: config must be a JSON object");

  static const std::set<std::string> known{
      "schema_version", "name",       "dataset",   "folds",      "shots",
      "seeds",          "method",     "eval_mode", "ratio_shift", "network",
      "stage1",         "stage2",     "weights",   "output_dir", "cache_dir",
      "confidence",     "confidence_cap"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) r.fail(key, "unknown key '" + key + "'");

  if (!j.contains("schema_version")) r.fail("schema_version", "missing 'schema_version'");
  if (r.geti(j, "schema_version", 0) != 1)
    r.fail("schema_version", "unsupported schema_version (expected 1)");

  ExperimentConfig c;
  c.name = r.gets(j, "name", c.name);
  c.method = r.gets(j, "method", c.method);
  c.output_dir = r.gets(j, "output_dir", c.output_dir);
  c.cache_dir = r.gets(j, "cache_dir", c.cache_dir);
  c.ratio_shift = r.geti(j, "ratio_shift", 0);
  c.confidence = r.getb(j, "confidence", false);
  c.confidence_cap = r.geti(j, "confidence_cap", 100000);
  if (c.confidence_cap < 0) r.fail("confidence_cap", "'confidence_cap' must be >= 0");

  std::string mode = r.gets(j, "eval_mode", "generalized");
  if (mode == "generalized")
    c.eval_mode = EvalMode::generalized;
  else if (mode == "novel_only")
    c.eval_mode = EvalMode::novel_only;
  else
    r.fail("eval_mode", "eval_mode must be 'generalized' or 'novel_only'");

  c.folds = r.getvi(j, "folds", c.folds);
  c.shots = r.getvi(j, "shots", c.shots);
  if (c.folds.empty()) r.fail("folds", "'folds' must name at least one fold");
  if (c.shots.empty()) r.fail("shots", "'shots' must name at least one K");
  for (int f : c.folds)
    if (f < 0) r.fail("folds", "fold indices must be >= 0");
  for (int k : c.shots)
    if (k < 1) r.fail("shots", "shot counts must be >= 1");

  if (j.contains("seeds")) {
    if (!j.at("seeds").is_array()) r.fail("seeds", "'seeds' must be an array");
    c.seeds.clear();
    for (const auto& v : j.at("seeds")) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
        r.fail("seeds", "'seeds' must hold non-negative integers");
      c.seeds.push_back(v.get<std::uint64_t>());
    }
  }
  if (c.seeds.empty()) r.fail("seeds", "'seeds' must name at least one seed");

  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    if (!d.is_object()) r.fail("dataset", "'dataset' must be an object");
    std::string kind = r.gets(d, "kind", "synthetic");
    if (kind == "synthetic") {
      c.dataset.synthetic = true;
      c.dataset.num_classes = r.geti(d, "num_classes", c.dataset.num_classes);
      c.dataset.train_images = r.geti(d, "train_images", c.dataset.train_images);
      c.dataset.val_images = r.geti(d, "val_images", c.dataset.val_images);
      c.dataset.height = r.geti(d, "height", c.dataset.height);
      c.dataset.width = r.geti(d, "width", c.dataset.width);
      c.dataset.seed = static_cast<std::uint64_t>(r.geti(d, "seed", static_cast<int>(c.dataset.seed)));
      if (c.dataset.num_classes < 8) r.fail("num_classes", "synthetic datasets need >= 8 classes");
      if (c.dataset.height < 32 || c.dataset.width < 32)
        r.fail("height", "synthetic images must be at least 32x32");
      if (c.dataset.train_images < 1 || c.dataset.val_images < 1)
        r.fail("train_images", "synthetic splits need at least one image each");
    } else if (kind == "path") {
      c.dataset.synthetic = false;
      c.dataset.root = r.gets(d, "root", "");
      if (c.dataset.root.empty()) r.fail("root", "dataset kind 'path' needs 'root'");
    } else {
      r.fail("kind", "dataset kind must be 'synthetic' or 'path'");
    }
  }

  if (j.contains("network")) {
    const json& n = j.at("network");
    if (!n.is_object()) r.fail("network", "'network' must be an object");
    c.net.backbone_channels = r.getvi(n, "backbone_channels", c.net.backbone_channels);
    c.net.classifier_hidden = r.geti(n, "classifier_hidden", c.net.classifier_hidden);
    c.net.pooling_scales = r.getvi(n, "pooling_scales", c.net.pooling_scales);
    c.net.aux_tap = r.getb(n, "aux_tap", c.net.aux_tap);
    if (c.net.backbone_channels.size() < 2)
      r.fail("backbone_channels", "'backbone_channels' needs at least two blocks");
    if (c.net.pooling_scales.empty())
      r.fail("pooling_scales", "'pooling_scales' must not be empty");
  }

  parse_stage(r, j, "stage1", c.stage1);
  c.stage2.epochs = 100;  // fine-tuning default before overrides
  c.stage2.eval_every = 10;
  parse_stage(r, j, "stage2", c.stage2);

  if (j.contains("weights")) {
    const json& w = j.at("weights");
    if (!w.is_object()) r.fail("weights", "'weights' must be an object");
    LossWeights lw;
    lw.lambda_aux = r.getd(w, "lambda_aux", lw.lambda_aux);
    lw.lambda_triplet_base = r.getd(w, "lambda_triplet_base", lw.lambda_triplet_base);
    lw.lambda_triplet_ft = r.getd(w, "lambda_triplet_ft", lw.lambda_triplet_ft);
    lw.mu = r.getd(w, "mu", lw.mu);
    lw.tau = r.geti(w, "tau", lw.tau);
    if (lw.mu <= 0) r.fail("mu", "'mu' must be positive");
    if (lw.tau < 1) r.fail("tau", "'tau' must be >= 1");
    c.stage1.weights = lw;
    c.stage2.weights = lw;
  }

  apply_method(c, r);
  if (c.cache_dir.empty()) c.cache_dir = c.output_dir + "/cache";
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot read config file " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ExperimentConfig c = parse_experiment_config(text, path);
  if (const char* root = std::getenv("GFSSEG_OUT_ROOT"); root && *root) {
    c.output_dir = root;
    c.cache_dir = c.output_dir + "/cache";
  }
  return c;
}

SyntheticDataset materialize_dataset(const DatasetRef& ref) {
  if (ref.synthetic)
    return generate_synthetic_dataset(ref.num_classes, ref.train_images, ref.val_images,
                                      ref.height, ref.width, ref.seed);
  return load_dataset(ref.root);
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  SyntheticDataset data = materialize_dataset(config.dataset);
  fs::create_directories(config.output_dir);

  ExperimentResult result;
  std::string cross_csv = "method,shots,seed,folds,base_miou,novel_miou,total_miou\n";

  for (int shots : config.shots) {
    for (std::uint64_t seed : config.seeds) {
      PipelineRequest req;
      req.folds = config.folds;
      req.ratio_shift = config.ratio_shift;
      req.shots = shots;
      req.seed = seed;
      req.net = config.net;
      req.stage1 = config.stage1;
      req.stage2 = config.stage2;
      req.eval_mode = config.eval_mode;
      req.cache_dir = config.cache_dir;

      std::vector<PipelineResult> runs = run_pipeline(data, req);
      std::vector<EvalReport> fold_reports;
      for (auto& run : runs) {
        FoldSpec fold = make_fold(data.spec, run.fold_index, config.ratio_shift);
        if (config.confidence)
          run.report.confidence = confidence_analysis(run.network, data.validation, fold,
                                                      config.confidence_cap, seed);

        std::string dir = run_dir(config, run.fold_index, shots, seed);
        fs::create_directories(dir);
        write_text(dir + "/report.json", report_to_json(run.report));
        write_text(dir + "/events.jsonl", record_to_jsonl(run.stage1_record) +
                                              record_to_jsonl(run.stage2_record));
        save_checkpoint(run.network, dir + "/final.ckpt");

        std::vector<int> output_classes = fold.base_classes;
        output_classes.insert(output_classes.end(), fold.novel_classes.begin(),
                              fold.novel_classes.end());
        json run_meta{{"schema_version", 1},
                      {"method", config.method},
                      {"fold", run.fold_index},
                      {"shots", shots},
                      {"seed", seed},
                      {"eval_mode", config.eval_mode == EvalMode::novel_only
                                        ? "novel_only"
                                        : "generalized"},
                      {"output_classes", output_classes}};
        write_text(dir + "/run.json", run_meta.dump(2) + "\n");

        result.rows.push_back(RunRow{config.method, run.fold_index, shots, seed,
                                     run.report.base_miou, run.report.novel_miou,
                                     run.report.total_miou});
        fold_reports.push_back(run.report);
      }

      CrossFoldSummary cfs = cross_fold_average(fold_reports);
      cross_csv += config.method + "," + std::to_string(shots) + "," + std::to_string(seed) +
                   "," + std::to_string(fold_reports.size()) + "," +
                   format_double(cfs.base_miou) + "," + format_double(cfs.novel_miou) + "," +
                   format_double(cfs.total_miou) + "\n";
    }
  }

  result.summary_csv = config.output_dir + "/summary.csv";
  result.cross_fold_csv = config.output_dir + "/cross_fold.csv";
  write_text(result.summary_csv, csv_run_rows(result.rows));
  write_text(result.cross_fold_csv, cross_csv);
  return result;
}

SweepAxis parse_sweep_axis(const std::string& name) {
  if (name == "lr") return SweepAxis::lr;
  if (name == "lambda_triplet") return SweepAxis::lambda_triplet;
  if (name == "shots") return SweepAxis::shots;
  if (name == "ratio_shift") return SweepAxis::ratio_shift;
  throw config_error("unknown sweep axis '" + name +
                     "' (expected lr, lambda_triplet, shots or ratio_shift)");
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& base, SweepAxis axis,
                                const std::vector<std::string>& values) {
  if (values.empty()) throw config_error("sweep needs at least one value");
  std::vector<SweepRow> rows;

  for (const std::string& value : values) {
    ExperimentConfig cfg = base;
    cfg.output_dir = base.output_dir + "/sweep_" + axis_name(axis) + "/" +
                     sanitize_dir_token(value);
    switch (axis) {
      case SweepAxis::lr:
        cfg.stage2.lr = parse_double_value(value);
        if (cfg.stage2.lr <= 0) throw config_error("lr values must be positive");
        break;
      case SweepAxis::lambda_triplet: {
        std::size_t colon = value.find(':');
        if (colon == std::string::npos)
          throw config_error("lambda_triplet values look like 'base:ft', got '" + value + "'");
        double lb = parse_double_value(value.substr(0, colon));
        double lf = parse_double_value(value.substr(colon + 1));
        cfg.stage1.weights.lambda_triplet_base = lb;
        cfg.stage2.weights.lambda_triplet_base = lb;
        cfg.stage1.weights.lambda_triplet_ft = lf;
        cfg.stage2.weights.lambda_triplet_ft = lf;
        break;
      }
      case SweepAxis::shots:
        cfg.shots = {parse_int_value(value)};
        if (cfg.shots[0] < 1) throw config_error("shot counts must be >= 1");
        break;
      case SweepAxis::ratio_shift:
        cfg.ratio_shift = parse_int_value(value);
        break;
    }

    ExperimentResult result = run_experiment(cfg);
    SweepRow row;
    row.value = value;
    for (const auto& r : result.rows) {
      row.base_miou += r.base_miou;
      row.novel_miou += r.novel_miou;
      row.total_miou += r.total_miou;
    }
    double n = static_cast<double>(result.rows.size());
    row.base_miou /= n;
    row.novel_miou /= n;
    row.total_miou /= n;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string render_sweep_csv(SweepAxis axis, const std::vector<SweepRow>& rows) {
  std::string text = std::string(axis_name(axis)) + ",base_miou,novel_miou,total_miou\n";
  for (const auto& r : rows)
    text += r.value + "," + format_double(r.base_miou) + "," + format_double(r.novel_miou) +
            "," + format_double(r.total_miou) + "\n";
  return text;
}

std::array<std::uint8_t, 3> palette_color(int label, int ignore_value) {
  if (label == ignore_value) return {255, 255, 255};
  std::array<std::uint8_t, 3> rgb{0, 0, 0};
  int c = label;
  for (int shift = 7; shift >= 0 && c; --shift) {
    rgb[0] = static_cast<std::uint8_t>(rgb[0] | ((c >> 0) & 1) << shift);
    rgb[1] = static_cast<std::uint8_t>(rgb[1] | ((c >> 1) & 1) << shift);
    rgb[2] = static_cast<std::uint8_t>(rgb[2] | ((c >> 2) & 1) << shift);
    c >>= 3;
  }
  return rgb;
}

namespace {

void write_mask_png(const std::string& path, const LabelGrid& labels, int ignore_value) {
  PngImage img;
  img.width = labels.w;
  img.height = labels.h;
  img.channels = 3;
  img.pixels.resize(static_cast<std::size_t>(labels.w) * labels.h * 3);
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    auto rgb = palette_color(labels.data[i], ignore_value);
    img.pixels[i * 3 + 0] = rgb[0];
    img.pixels[i * 3 + 1] = rgb[1];
    img.pixels[i * 3 + 2] = rgb[2];
  }
  write_png(path, img);
}

}  // namespace

int export_masks(Network& net, const std::vector<SegmentationSample>& samples,
                 const std::vector<int>& output_classes, const std::string& out_dir,
                 int ignore_value, int limit) {
  if (static_cast<int>(output_classes.size()) != net.config.num_outputs)
    throw config_error("output_classes has " + std::to_string(output_classes.size()) +
                       " entries for a network with " +
                       std::to_string(net.config.num_outputs) + " outputs");
  fs::create_directories(out_dir);
  int written = 0;
  int count = std::min<int>(limit, static_cast<int>(samples.size()));
  for (int i = 0; i < count; ++i) {
    const auto& sample = samples[static_cast<std::size_t>(i)];
    ForwardResult out = forward(net, sample.image, Mode::eval);
    LabelGrid pred = predict_labels(out.logits, 0, output_classes);
    write_mask_png(out_dir + "/" + sample.id + "_pred.png", pred, ignore_value);
    write_mask_png(out_dir + "/" + sample.id + "_gt.png", sample.labels, ignore_value);
    written += 2;
  }
  return written;
}

std::string render_report(const std::string& out_dir) {
  std::vector<ReportFile> files = scan_reports(out_dir);
  if (files.empty()) throw config_error("no report.json files under " + out_dir);

  // method -> shots -> reports across folds and seeds
  std::map<std::string, std::map<int, std::vector<EvalReport>>> grouped;
  for (const auto& f : files) grouped[f.method][f.shots].push_back(f.report);

  std::string md = "# Experiment report\n\n";
  md += "Scores are mIoU in [0, 1], averaged over folds and seeds.\n";

  for (const auto& [method, by_shots] : grouped) {
    md += "\n## " + method + "\n\n";
    md += md_row({"shots", "base mIoU", "novel mIoU", "total mIoU", "runs"});
    md += md_row({"---", "---", "---", "---", "---"});
    std::map<int, EvalReport> means;
    for (const auto& [shots, reports] : by_shots) {
      EvalReport mean;
      for (const auto& r : reports) {
        mean.base_miou += r.base_miou;
        mean.novel_miou += r.novel_miou;
        mean.total_miou += r.total_miou;
      }
      double n = static_cast<double>(reports.size());
      mean.base_miou /= n;
      mean.novel_miou /= n;
      mean.total_miou /= n;
      mean.shots = shots;
      means[shots] = mean;
      md += md_row({std::to_string(shots), format_double(mean.base_miou),
                    format_double(mean.novel_miou), format_double(mean.total_miou),
                    std::to_string(reports.size())});
    }

    if (means.size() > 1) {
      md += "\nShot scaling (deltas against the previous K):\n\n";
      md += md_row({"shots", "novel mIoU", "delta novel", "delta total"});
      md += md_row({"---", "---", "---", "---"});
      for (const auto& row : saturation_summary(means)) {
        md += md_row({std::to_string(row.shots), format_double(row.novel_miou),
                      row.delta_novel ? format_double(*row.delta_novel) : std::string("-"),
                      row.delta_total ? format_double(*row.delta_total) : std::string("-")});
      }
    }
  }

  md += "\n## Reference: GFS-Seg on PASCAL-5i (% mIoU)\n\n";
  md += "Cited numbers, rendered for comparison only; never recomputed here.\n\n";
  md += md_row({"shots", "base", "novel", "total", "source"});
  md += md_row({"---", "---", "---", "---", "---"});
  for (const auto& row : gfsseg_pascal_reference())
    md += md_row({std::to_string(row.shots), format_double(row.base_miou),
                  format_double(row.novel_miou), format_double(row.total_miou),
                  "from paper"});
  return md;
}

}  // namespace gfsseg
