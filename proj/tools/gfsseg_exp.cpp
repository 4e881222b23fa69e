#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "gfsseg/experiment.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace gfsseg;

namespace {

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const config_error& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

std::vector<std::string> split_csv(const std::string& arg) {
  std::vector<std::string> out;
  std::stringstream ss(arg);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t a = item.find_first_not_of(" \t");
    std::size_t b = item.find_last_not_of(" \t");
    if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
  }
  return out;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ingestion_error("cannot read " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"generalized few-shot segmentation experiment runner"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run_cmd = app.add_subcommand("run", "execute an experiment config end to end");
  run_cmd->add_option("config", config_path, "JSON experiment config")->required();

  std::string sweep_config, sweep_axis, sweep_values;
  auto* sweep_cmd = app.add_subcommand("sweep", "rerun a config across one axis");
  sweep_cmd->add_option("config", sweep_config, "JSON experiment config")->required();
  sweep_cmd->add_option("--axis", sweep_axis, "lr | lambda_triplet | shots | ratio_shift")
      ->required();
  sweep_cmd
      ->add_option("--values", sweep_values,
                   "comma-separated settings; lambda_triplet uses base:ft pairs")
      ->required();

  std::string report_dir;
  auto* report_cmd = app.add_subcommand("report", "consolidate an output directory");
  report_cmd->add_option("dir", report_dir, "experiment output directory")->required();

  std::string masks_source, masks_out, masks_dataset, masks_cfg, masks_split = "val";
  int masks_limit = 8;
  auto* masks_cmd = app.add_subcommand("export-masks", "render predictions as PNG masks");
  masks_cmd
      ->add_option("run", masks_source, "run directory (with final.ckpt + run.json) or a checkpoint file")
      ->required();
  masks_cmd->add_option("out", masks_out, "directory for the PNGs")->required();
  masks_cmd->add_option("--dataset", masks_dataset, "paired-PNG dataset root");
  masks_cmd->add_option("--config", masks_cfg, "experiment config supplying the dataset");
  masks_cmd->add_option("--split", masks_split, "train or val (default val)");
  masks_cmd->add_option("--limit", masks_limit, "max samples to render (default 8)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (run_cmd->parsed())
    return guarded([&] {
      ExperimentConfig cfg = load_experiment_config(config_path);
      ExperimentResult result = run_experiment(cfg);
      std::cout << "wrote " << result.summary_csv << " (" << result.rows.size()
                << " runs)\n";
      return 0;
    });

  if (sweep_cmd->parsed())
    return guarded([&] {
      ExperimentConfig cfg = load_experiment_config(sweep_config);
      SweepAxis axis = parse_sweep_axis(sweep_axis);
      std::vector<std::string> values = split_csv(sweep_values);
      std::vector<SweepRow> rows = run_sweep(cfg, axis, values);

      std::string csv = render_sweep_csv(axis, rows);
      fs::create_directories(cfg.output_dir);
      std::string csv_path = cfg.output_dir + "/sweep_" + sweep_axis + ".csv";
      std::ofstream(csv_path, std::ios::binary) << csv;
      std::cout << csv << "wrote " << csv_path << "\n";
      return 0;
    });

  if (report_cmd->parsed())
    return guarded([&] {
      std::string md = render_report(report_dir);
      std::string md_path = report_dir + "/report.md";
      std::ofstream(md_path, std::ios::binary) << md;
      std::cout << md;
      return 0;
    });

  return guarded([&] {
    if (masks_dataset.empty() == masks_cfg.empty())
      throw config_error("export-masks needs exactly one of --dataset or --config");
    if (masks_split != "train" && masks_split != "val")
      throw config_error("--split must be 'train' or 'val'");

    SyntheticDataset data;
    if (!masks_dataset.empty()) {
      data = load_dataset(masks_dataset);
    } else {
      ExperimentConfig cfg = load_experiment_config(masks_cfg);
      data = materialize_dataset(cfg.dataset);
    }
    const auto& samples = masks_split == "train" ? data.train : data.validation;

    std::string ckpt = masks_source;
    std::vector<int> output_classes;
    if (fs::is_directory(masks_source)) {
      ckpt = masks_source + "/final.ckpt";
      auto meta = nlohmann::json::parse(slurp(masks_source + "/run.json"));
      output_classes = meta.at("output_classes").get<std::vector<int>>();
    }
    Network net = load_checkpoint(ckpt);
    if (output_classes.empty())
      for (int i = 0; i < net.config.num_outputs; ++i) output_classes.push_back(i);

    int written = export_masks(net, samples, output_classes, masks_out,
                               data.spec.ignore_value, masks_limit);
    std::cout << "wrote " << written << " PNGs to " << masks_out << "\n";
    return 0;
  });
}
