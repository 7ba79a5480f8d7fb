// SPDX-License-Identifier: Apache-2.0
//
// rtda: cost model, data generation, training, evaluation and gradient
// checks from the command line.
//
// Exit codes: 0 success, 1 invalid input or failed check, 2 numerical abort.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rtda/data.hpp"
#include "rtda/gradcheck.hpp"
#include "rtda/metrics.hpp"
#include "rtda/models.hpp"
#include "rtda/trainer.hpp"

using namespace rtda;

namespace {

std::vector<int> parse_class_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw ConfigError("bad class index '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty class list");
  return out;
}

int cmd_count(const std::string& variant_text, int classes, bool verbose) {
  const auto variant = parse_variant(variant_text);
  ModelGraph d = build_discriminator(variant, classes);
  const auto params = d.num_params();
  if (verbose) {
    for (const auto& row : d.account({1, classes, 32, 32})) std::cout << row.name << " " << row.params << "\n";
  }
  std::cout << variant_name(variant) << " params " << params << "\n";
  return 0;
}

int cmd_flops(const std::string& variant_text, int classes, int h, int w, bool csv) {
  const auto variant = parse_variant(variant_text);
  ModelGraph d = build_discriminator(variant, classes);
  const CostReport report = count_flops(d, h, w);
  std::cout << (csv ? report.to_csv() : report.to_text());
  if (!csv) std::cout << variant_name(variant) << " flops " << report.total_flops() << "\n";
  return 0;
}

int cmd_gen_data(const std::string& root, std::size_t seeds, int size, int classes,
                 const std::vector<std::string>& splits) {
  const ShiftConfig shift = ShiftConfig::defaults(classes);
  for (const auto& split : splits) {
    DomainSplit::generate(shift, split, seeds, size, classes).save(root, split);
    std::cout << "wrote " << seeds << " scenes per domain to " << root << "/" << split << "\n";
  }
  write_dataset_meta(root, {classes, size});
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& resume_path, const std::string& out_dir) {
  TrainConfig cfg = TrainConfig::from_file(config_path);
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  const DomainSplit train = training_split(cfg);
  std::optional<Checkpoint> resume;
  if (!resume_path.empty()) resume = Checkpoint::load(resume_path);
  const TrainResult result = run_training(cfg, train, resume);
  if (!result.log.empty()) {
    const auto& last = result.log.back();
    std::cout << "iter " << last.iter << " l_seg " << last.l_seg << " l_adv " << last.l_adv << " l_d " << last.l_d
              << "\n";
  }
  if (!cfg.out_dir.empty()) std::cout << "checkpoint " << cfg.out_dir << "/final.rtda\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& root, const std::string& split_name,
             const std::string& domain_text, const std::string& classes_text) {
  const Checkpoint ckpt = Checkpoint::load(ckpt_path);
  const DatasetMeta meta = read_dataset_meta(root);
  const DomainSplit split = DomainSplit::load(root, split_name, meta.num_classes);
  std::optional<std::vector<int>> subset;
  if (!classes_text.empty() && classes_text != "all") subset = parse_class_list(classes_text);
  std::optional<std::span<const int>> view;
  if (subset) view = std::span<const int>(*subset);
  const IouReport report = evaluate(ckpt, split, parse_domain(domain_text), view);
  std::cout << report.to_csv();
  return 0;
}

int cmd_gradcheck(int instances) {
  GradCheckOptions options;
  options.instances = instances;
  bool ok = true;
  for (const auto& r : run_gradcheck_suite(options)) {
    std::printf("%-24s %s  %d/%d  worst %.3e\n", r.primitive.c_str(), r.ok() ? "PASS" : "FAIL", r.passed,
                r.instances, r.worst_relative_error);
    ok = ok && r.ok();
  }
  return ok ? 0 : 1;
}

int cmd_compare(const std::string& config_path) {
  const TrainConfig cfg = TrainConfig::from_file(config_path);
  const auto rows = compare_variants(cfg);
  std::cout << comparison_table(rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Real-time adversarial domain adaptation toolkit"};
  app.require_subcommand(1);

  std::string variant;
  int classes = 19;
  bool verbose = false;
  auto* count = app.add_subcommand("count", "Discriminator parameter count");
  count->add_option("variant", variant, "FCD, FCD-Light or FCD-Light&Thin")->required();
  count->add_option("--classes", classes, "Input channels (number of classes)");
  count->add_flag("--layers", verbose, "Print per-layer counts");

  int fh = 512, fw = 1024;
  bool csv = false;
  auto* flops = app.add_subcommand("flops", "Discriminator FLOPs at a resolution");
  flops->set_help_flag("--help", "Print this help message and exit");
  flops->add_option("variant", variant, "FCD, FCD-Light or FCD-Light&Thin")->required();
  flops->add_option("--h", fh, "Input height");
  flops->add_option("--w", fw, "Input width");
  flops->add_option("--classes", classes, "Input channels (number of classes)");
  flops->add_flag("--csv", csv, "CSV output");

  std::string root = "data";
  std::size_t seeds = 200;
  int size = kDefaultSize;
  int data_classes = kDefaultClasses;
  std::vector<std::string> splits{"train", "val"};
  auto* gen = app.add_subcommand("gen-data", "Write the synthetic two-domain benchmark");
  gen->add_option("--root", root, "Output directory");
  gen->add_option("--seeds", seeds, "Scenes per domain and split")->check(CLI::PositiveNumber);
  gen->add_option("--size", size, "Scene height and width");
  gen->add_option("--classes", data_classes, "Number of classes");
  gen->add_option("--split", splits, "Splits to write");

  std::string config_path, resume_path, out_dir;
  auto* train = app.add_subcommand("train", "Adversarial training run");
  train->add_option("--config", config_path, "key = value config file")->required();
  train->add_option("--resume", resume_path, "Checkpoint to resume from");
  train->add_option("--out", out_dir, "Overrides out_dir from the config");

  std::string ckpt_path, split_name = "val", domain_text = "target", classes_text = "all";
  auto* eval = app.add_subcommand("eval", "mIoU of a checkpoint on a dataset split");
  eval->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  eval->add_option("--root", root, "Dataset directory");
  eval->add_option("--split", split_name, "Split name");
  eval->add_option("--domain", domain_text, "source or target");
  eval->add_option("--classes", classes_text, "Comma-separated class subset, or 'all'");

  int instances = 20;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every primitive");
  grad->add_option("--instances", instances, "Random instances per primitive");

  auto* compare = app.add_subcommand("compare", "Train once per discriminator variant and tabulate");
  compare->add_option("--config", config_path, "key = value config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*count) return cmd_count(variant, classes, verbose);
    if (*flops) return cmd_flops(variant, classes, fh, fw, csv);
    if (*gen) return cmd_gen_data(root, seeds, size, data_classes, splits);
    if (*train) return cmd_train(config_path, resume_path, out_dir);
    if (*eval) return cmd_eval(ckpt_path, root, split_name, domain_text, classes_text);
    if (*grad) return cmd_gradcheck(instances);
    if (*compare) return cmd_compare(config_path);
  } catch (const NumericError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
