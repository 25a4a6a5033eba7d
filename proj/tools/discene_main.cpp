#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "discene/checkpoint.hpp"
#include "discene/distill.hpp"
#include "discene/scene_io.hpp"
#include "discene/syndata.hpp"
#include "discene/train.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitVerification = 3;

struct GenOptions {
  std::uint64_t seed = 0;
  std::size_t count = 8;
  std::string out;
  std::string grid = "toy";
  std::size_t furniture_min = 2;
  std::size_t furniture_max = 5;
};

struct TrainOptions {
  std::string role = "teacher";
  std::string data;
  std::string out;
  std::size_t epochs = 10;
  double lr = 2e-4;
  double weight_decay = 0.01;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  std::string teacher_ckpt;
  std::string distill;  // comma list of efa,ql,pl,al
  std::string ql_mode = "cfd";
  bool tgi = false;
  std::string lambdas = "1,0.2,0.2,0.5";
  bool depth_prior = false;
};

struct EvalOptions {
  std::string ckpt;
  std::string data;
  std::string report;
  double threshold = 0.0;
};

struct GradcheckOptions {
  std::string component = "all";
  std::size_t trials = 2;
  std::uint64_t seed = 2024;
};

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string token;
  while (std::getline(ss, token, ',')) {
    if (!token.empty()) out.push_back(token);
  }
  return out;
}

discene::DistillPlan parse_plan(const TrainOptions& opt) {
  discene::DistillPlan plan;
  for (const std::string& token : split_csv(opt.distill)) {
    if (token == "efa") {
      plan.enable_efa = true;
    } else if (token == "ql") {
      plan.enable_ql = true;
    } else if (token == "pl") {
      plan.enable_pl = true;
    } else if (token == "al") {
      plan.enable_al = true;
    } else {
      throw CLI::ValidationError("--distill",
                                 "unknown level '" + token +
                                     "' (expected efa, ql, pl, al)");
    }
  }
  plan.enable_tgi = opt.tgi;
  if (opt.ql_mode == "cfd") {
    plan.ql_mode = discene::QlMode::kCfd;
  } else if (opt.ql_mode == "fld") {
    plan.ql_mode = discene::QlMode::kFld;
  } else {
    throw CLI::ValidationError("--ql-mode", "expected cfd or fld");
  }
  const std::vector<std::string> weights = split_csv(opt.lambdas);
  if (weights.size() != 4) {
    throw CLI::ValidationError("--lambdas", "expected four comma-separated values");
  }
  plan.weights.efa = std::stod(weights[0]);
  plan.weights.ql = std::stod(weights[1]);
  plan.weights.pl = std::stod(weights[2]);
  plan.weights.al = std::stod(weights[3]);
  return plan;
}

/// Optional JSON config file: defaults < config file < explicit flags.
/// Keys are long option names of the active subcommand.
void apply_config_file(const std::string& path, CLI::App* subcommand) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("bad config file: ") + e.what());
  }
  for (const auto& [key, value] : j.items()) {
    CLI::Option* opt = subcommand->get_option_no_throw("--" + key);
    if (opt == nullptr) {
      throw CLI::ValidationError("--config", "unknown key '" + key + "'");
    }
    const std::string text =
        value.is_string() ? value.get<std::string>() : value.dump();
    if (opt->get_expected_min() == 0) {
      // Flag-style option; accept true/false.
      opt->add_result(value.get<bool>() ? "true" : "false");
    } else {
      opt->add_result(text);
    }
  }
}

int run_gen(const GenOptions& opt) {
  discene::SceneRecipe recipe;
  recipe.seed = opt.seed;
  recipe.furniture_min = opt.furniture_min;
  recipe.furniture_max = opt.furniture_max;
  if (opt.grid == "toy") {
    recipe.grid = discene::toy_grid_spec();
  } else if (opt.grid == "paper") {
    recipe.grid = discene::paper_grid_spec();
  } else {
    std::fprintf(stderr, "error: --grid expects toy or paper\n");
    return kExitUsage;
  }
  discene::generate_dataset(recipe, opt.count, opt.out);
  std::printf("wrote %zu scene(s) + manifest to %s\n", opt.count,
              opt.out.c_str());
  return kExitOk;
}

int run_train(const TrainOptions& opt) {
  const discene::DistillPlan plan = parse_plan(opt);
  const bool is_student = opt.role == "student";
  if (!is_student && opt.role != "teacher") {
    std::fprintf(stderr, "error: --role expects teacher or student\n");
    return kExitUsage;
  }
  if (is_student && opt.teacher_ckpt.empty()) {
    std::fprintf(stderr,
                 "error: --role student requires --teacher-ckpt <file>\n");
    return kExitUsage;
  }

  const discene::Dataset dataset =
      discene::load_dataset(opt.data, opt.depth_prior);

  discene::TrainConfig config;
  config.epochs = opt.epochs;
  config.lr = opt.lr;
  config.weight_decay = opt.weight_decay;
  config.batch_size = opt.batch_size;
  config.seed = opt.seed;
  config.role = is_student ? discene::Role::kStudent : discene::Role::kTeacher;
  config.plan = plan;
  config.model = is_student ? discene::student_config()
                            : discene::teacher_config();
  config.model.n_classes = dataset.k_sem();
  config.model.image_width = dataset.manifest.recipe.image_width;
  config.model.image_height = dataset.manifest.recipe.image_height;
  config.model.depth_branch_enabled = opt.depth_prior;

  std::optional<discene::Model> teacher;
  if (is_student) {
    auto [params, teacher_config] = discene::load_checkpoint(opt.teacher_ckpt);
    teacher = discene::Model{teacher_config, std::move(params)};
  }

  std::filesystem::create_directories(opt.out);
  discene::TrainResult result;
  if (is_student) {
    result = discene::train_student(config, dataset.scenes, dataset.box(),
                                    dataset.k_sem(), *teacher);
  } else {
    result = discene::train_teacher(config, dataset.scenes, dataset.box(),
                                    dataset.k_sem());
  }

  const auto out = std::filesystem::path(opt.out);
  discene::save_checkpoint((out / "checkpoint.dspk").string(),
                           result.model.params, result.model.config);
  discene::write_train_log((out / "train_log.jsonl").string(), result.log);
  const auto& last = result.log.back();
  std::printf("epoch %zu: l_task=%.4f total=%.4f iou=%.4f miou=%s\n",
              last.epoch, last.l_task, last.total, last.iou,
              last.miou ? std::to_string(*last.miou).c_str() : "n/a");
  std::printf("checkpoint: %s\n", (out / "checkpoint.dspk").c_str());
  return kExitOk;
}

int run_eval(const EvalOptions& opt) {
  auto [params, config] = discene::load_checkpoint(opt.ckpt);
  const discene::Model model{config, std::move(params)};
  const discene::Dataset dataset =
      discene::load_dataset(opt.data, config.depth_branch_enabled);
  if (config.n_classes != dataset.k_sem()) {
    std::fprintf(stderr,
                 "error: checkpoint has %zu classes but the dataset has %zu\n",
                 config.n_classes, dataset.k_sem());
    return kExitData;
  }
  std::vector<std::size_t> all(dataset.scenes.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const discene::EvalSummary summary = discene::evaluate_model(
      model, dataset.scenes, all, dataset.k_sem(), opt.threshold);
  const nlohmann::json j = discene::metrics_to_json(summary.report());
  if (!opt.report.empty()) {
    discene::write_metrics_json(opt.report, summary.report());
  }
  std::printf("%s\n", j.dump(2).c_str());
  return kExitOk;
}

int run_gradcheck(const GradcheckOptions& opt) {
  const auto names = discene::gradcheck_component_names();
  if (opt.component != "all" &&
      std::find(names.begin(), names.end(), opt.component) == names.end()) {
    std::fprintf(stderr, "error: unknown component '%s'; valid components:\n",
                 opt.component.c_str());
    std::fprintf(stderr, "  all");
    for (const auto& n : names) std::fprintf(stderr, " %s", n.c_str());
    std::fprintf(stderr, "\n");
    return kExitUsage;
  }
  const discene::GradCheckReport report =
      discene::gradcheck(opt.component, opt.trials, opt.seed);
  for (const auto& e : report.entries) {
    std::printf("%-14s max_rel_err=%.3e tolerance=%.0e %s\n",
                e.component.c_str(), e.max_rel_err, e.tolerance,
                e.passed ? "PASS" : "FAIL");
  }
  return report.all_passed() ? kExitOk : kExitVerification;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"discene: sparse query-based occupancy prediction with "
               "multi-level teacher-student distillation"};
  app.require_subcommand(1);

  GenOptions gen;
  CLI::App* gen_cmd =
      app.add_subcommand("gen", "Generate a synthetic scene dataset");
  gen_cmd->add_option("--seed", gen.seed, "Base RNG seed")
      ->capture_default_str();
  gen_cmd->add_option("--count", gen.count, "Number of scenes")
      ->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output dataset directory")->required();
  gen_cmd->add_option("--grid", gen.grid, "Grid preset: toy (24x24x16 @ 0.2m) or paper (60x60x36 @ 0.08m)")
      ->capture_default_str();
  gen_cmd->add_option("--furniture-min", gen.furniture_min,
                      "Minimum furniture boxes per scene")
      ->capture_default_str();
  gen_cmd->add_option("--furniture-max", gen.furniture_max,
                      "Maximum furniture boxes per scene")
      ->capture_default_str();

  TrainOptions train;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a teacher or student");
  train_cmd->add_option("--role", train.role, "teacher or student")
      ->capture_default_str();
  train_cmd->add_option("--data", train.data, "Dataset directory")->required();
  train_cmd->add_option("--out", train.out, "Output directory (checkpoint + log)")
      ->required();
  train_cmd->add_option("--epochs", train.epochs, "Training epochs")
      ->capture_default_str();
  train_cmd->add_option("--lr", train.lr, "AdamW learning rate")
      ->capture_default_str();
  train_cmd->add_option("--weight-decay", train.weight_decay,
                        "AdamW decoupled weight decay")
      ->capture_default_str();
  train_cmd->add_option("--batch-size", train.batch_size, "Scenes per batch")
      ->capture_default_str();
  train_cmd->add_option("--seed", train.seed, "Training RNG seed")
      ->capture_default_str();
  train_cmd->add_option("--teacher-ckpt", train.teacher_ckpt,
                        "Teacher checkpoint (required for --role student)");
  train_cmd->add_option("--distill", train.distill,
                        "Comma list of distillation levels: efa,ql,pl,al "
                        "(empty = none)");
  train_cmd->add_option("--ql-mode", train.ql_mode,
                        "Query-level match loss: cfd or fld")
      ->capture_default_str();
  train_cmd->add_flag("--tgi", train.tgi, "Teacher-guided initialization");
  train_cmd->add_option("--lambdas", train.lambdas,
                        "Distillation weights efa,ql,pl,al")
      ->capture_default_str();
  train_cmd->add_flag("--depth-prior", train.depth_prior,
                      "Enable the depth branch with a simulated depth prior");

  EvalOptions eval;
  CLI::App* eval_cmd =
      app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--ckpt", eval.ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval.data, "Dataset directory")->required();
  eval_cmd->add_option("--report", eval.report, "Write the metrics JSON here");
  eval_cmd->add_option("--threshold", eval.threshold,
                       "Score threshold for point votes")
      ->capture_default_str();

  GradcheckOptions gradcheck;
  CLI::App* gradcheck_cmd = app.add_subcommand(
      "gradcheck", "Verify analytic gradients against finite differences");
  gradcheck_cmd->add_option("--component", gradcheck.component,
                            "Component name or 'all'")
      ->capture_default_str();
  gradcheck_cmd->add_option("--trials", gradcheck.trials,
                            "Random trials per component")
      ->capture_default_str();
  gradcheck_cmd->add_option("--seed", gradcheck.seed, "RNG seed")
      ->capture_default_str();

  std::string config_path;
  for (CLI::App* sub : {gen_cmd, train_cmd, eval_cmd, gradcheck_cmd}) {
    sub->add_option("--config", config_path,
                    "JSON config file (keys = long option names; flags "
                    "override it)");
  }

  // Pre-scan for --config so file values land before flag parsing; CLI11's
  // TakeLast policy then lets explicit flags win.
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--config") config_path = argv[i + 1];
  }

  try {
    if (!config_path.empty() && argc > 1) {
      const std::string sub_name = argv[1];
      CLI::App* sub = app.get_subcommand_no_throw(sub_name);
      if (sub != nullptr) {
        for (CLI::Option* option : sub->get_options()) {
          option->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
        }
        apply_config_file(config_path, sub);
      }
    }
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) return run_gen(gen);
    if (train_cmd->parsed()) return run_train(train);
    if (eval_cmd->parsed()) return run_eval(eval);
    if (gradcheck_cmd->parsed()) return run_gradcheck(gradcheck);
  } catch (const CLI::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  }
  return kExitUsage;
}
