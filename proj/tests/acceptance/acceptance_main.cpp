// Acceptance suite: one check per numbered criterion, one PASS/FAIL line
// each, nonzero exit if anything fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "discene/checkpoint.hpp"
#include "discene/distill.hpp"
#include "discene/matching.hpp"
#include "discene/scene_io.hpp"
#include "discene/syndata.hpp"
#include "discene/train.hpp"

namespace fs = std::filesystem;
using namespace discene;

namespace {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

std::vector<CriterionResult> g_results;

template <typename Fn>
void run_criterion(int id, const std::string& name, Fn&& fn) {
  CriterionResult result;
  result.id = id;
  result.name = name;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    result.passed = fn(result.detail);
  } catch (const std::exception& e) {
    result.passed = false;
    result.detail = std::string("exception: ") + e.what();
  }
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  std::printf("%s criterion %2d (%s): %s [%.1fs]\n",
              result.passed ? "PASS" : "FAIL", id, name.c_str(),
              result.detail.c_str(), result.seconds);
  std::fflush(stdout);
  g_results.push_back(result);
}

std::string cli_path() {
  if (const char* env = std::getenv("DISCENE_CLI")) return env;
  return "";
}

int run_command(const std::string& command) {
  const int status = std::system((command + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string file_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// --------------------------------------------------------------------------
// 1. Hungarian equals exhaustive enumeration, exact total costs.
// --------------------------------------------------------------------------
bool criterion_matching_oracle(std::string& detail) {
  Rng rng(0xACC01ULL);
  std::size_t checked = 0;
  for (std::size_t n = 2; n <= 7; ++n) {
    for (int trial = 0; trial < 200; ++trial) {
      CostMatrix cost(n);
      for (auto& v : cost.values.data) v = rng.uniform(0.0, 100.0);
      const MatchResult result = hungarian(cost);

      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      double best = std::numeric_limits<double>::infinity();
      do {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) total += cost.at(i, perm[i]);
        best = std::min(best, total);
      } while (std::next_permutation(perm.begin(), perm.end()));

      if (result.total_cost != best) {
        detail = "mismatch at N=" + std::to_string(n) + " trial " +
                 std::to_string(trial);
        return false;
      }
      ++checked;
    }
  }
  detail = std::to_string(checked) + " matrices, exact equality";
  return true;
}

// --------------------------------------------------------------------------
// 2. Finite-difference gradient suite.
// --------------------------------------------------------------------------
bool criterion_gradient_suite(std::string& detail) {
  const GradCheckReport report = gradcheck("all", 2, 2024);
  double worst = 0.0;
  std::string failing;
  for (const auto& e : report.entries) {
    worst = std::max(worst, e.max_rel_err);
    if (!e.passed) failing += " " + e.component;
  }
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%zu components, worst rel err %.2e",
                report.entries.size(), worst);
  detail = buf;
  if (!failing.empty()) detail += "; failing:" + failing;
  return report.all_passed();
}

// --------------------------------------------------------------------------
// 3. Self-distillation fixed point.
// --------------------------------------------------------------------------
bool criterion_self_distillation(std::string& detail) {
  SceneRecipe recipe;
  recipe.seed = 33;
  auto [grid, cam] = generate_scene(recipe, 0);
  const SceneSample scene = make_scene_sample(
      std::move(grid), cam, recipe.image_height, recipe.image_width, false, 0);
  Model teacher{teacher_config(), {}};
  teacher.config.n_classes = recipe.k_sem;
  teacher.params = init_params(teacher.config, recipe.grid, 7);
  const Model student = teacher;  // identical params and encoder

  const DistillStepResult r =
      distill_step(student, &teacher, scene, DistillPlan::full(), 11);
  const double residual = std::abs(r.total.value - r.l_task);
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "efa=%g ql=%g pl=%g al=%g |total-l_task|=%.1e", r.l_efa, r.l_ql,
                r.l_pl, r.l_al, residual);
  detail = buf;
  return r.l_efa == 0.0 && r.l_ql == 0.0 && r.l_pl == 0.0 && r.l_al == 0.0 &&
         residual <= 1e-12;
}

// --------------------------------------------------------------------------
// 4. Loss bookkeeping identity with the published lambda values.
// --------------------------------------------------------------------------
bool criterion_bookkeeping(std::string& detail) {
  SceneRecipe recipe;
  recipe.seed = 44;
  std::vector<SceneSample> scenes;
  for (std::uint64_t s = 0; s < 6; ++s) {
    auto [grid, cam] = generate_scene(recipe, s);
    scenes.push_back(make_scene_sample(std::move(grid), cam,
                                       recipe.image_height, recipe.image_width,
                                       false, s));
  }
  Model teacher{teacher_config(), {}};
  teacher.config.n_classes = recipe.k_sem;
  teacher.params = init_params(teacher.config, recipe.grid, 3);
  Model student{student_config(), {}};
  student.config.n_classes = recipe.k_sem;
  student.params = init_params(student.config, recipe.grid, 4);

  const DistillWeights paper{1.0, 0.2, 0.2, 0.5};
  DistillPlan plan = DistillPlan::full();
  plan.weights = paper;

  // Per-step identity.
  double worst = 0.0;
  for (std::size_t step = 0; step < scenes.size(); ++step) {
    const DistillStepResult r =
        distill_step(student, &teacher, scenes[step], plan, step);
    const double recombined = r.l_task + 1.0 * r.l_efa + 0.2 * r.l_ql +
                              0.2 * r.l_pl + 0.5 * r.l_al;
    worst = std::max(worst, std::abs(r.total.value - recombined));
  }

  // Logged (per-epoch mean) identity over a short training run.
  TrainConfig config;
  config.epochs = 3;
  config.batch_size = 2;
  config.seed = 5;
  config.role = Role::kStudent;
  config.plan = plan;
  config.model = student.config;
  const TrainResult result =
      train_student(config, scenes, recipe.grid, recipe.k_sem, teacher);
  for (const EpochRecord& rec : result.log) {
    const double recombined = rec.l_task + 1.0 * rec.l_efa + 0.2 * rec.l_ql +
                              0.2 * rec.l_pl + 0.5 * rec.l_al;
    worst = std::max(worst, std::abs(rec.total - recombined));
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max |total - recombined| = %.2e", worst);
  detail = buf;
  return worst <= 1e-9;
}

// --------------------------------------------------------------------------
// 5. Directional distillation ablation.
// --------------------------------------------------------------------------
bool criterion_directional(std::string& detail) {
  SceneRecipe recipe;
  recipe.seed = 0;
  std::vector<SceneSample> scenes(64);
  parallel_for(64, [&](std::size_t i) {
    auto [grid, cam] = generate_scene(recipe, i);
    scenes[i] = make_scene_sample(std::move(grid), cam, recipe.image_height,
                                  recipe.image_width, false, i);
  });

  TrainConfig teacher_cfg;
  teacher_cfg.epochs = 30;
  teacher_cfg.seed = 1;
  teacher_cfg.model = teacher_config();
  teacher_cfg.model.n_classes = recipe.k_sem;
  const TrainResult teacher =
      train_teacher(teacher_cfg, scenes, recipe.grid, recipe.k_sem);

  const auto [train_ids, val_ids] = train_val_split(scenes.size());
  const auto student_miou = [&](const DistillPlan& plan, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.seed = seed;
    cfg.role = Role::kStudent;
    cfg.plan = plan;
    cfg.model = student_config();
    cfg.model.n_classes = recipe.k_sem;
    const TrainResult result =
        train_student(cfg, scenes, recipe.grid, recipe.k_sem, teacher.model);
    const EvalSummary eval =
        evaluate_model(result.model, scenes, val_ids, recipe.k_sem);
    return eval.miou.value_or(0.0);
  };

  const auto level_plan = [](bool ql, bool pl, bool al) {
    DistillPlan plan;
    plan.enable_efa = true;  // feature alignment accompanies every level
    plan.enable_ql = ql;
    plan.enable_pl = pl;
    plan.enable_al = al;
    return plan;
  };

  const std::vector<std::uint64_t> seeds = {100, 101, 102, 103, 104};
  const auto mean_over_seeds = [&](const DistillPlan& plan) {
    double sum = 0.0;
    for (const std::uint64_t seed : seeds) sum += student_miou(plan, seed);
    return sum / static_cast<double>(seeds.size());
  };

  const double baseline = mean_over_seeds(DistillPlan{});
  const double full = mean_over_seeds(DistillPlan::full());
  const double ql_only = mean_over_seeds(level_plan(true, false, false));
  const double pl_only = mean_over_seeds(level_plan(false, true, false));
  const double al_only = mean_over_seeds(level_plan(false, false, true));

  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "mIoU means: baseline=%.4f full=%.4f ql=%.4f pl=%.4f al=%.4f",
                baseline, full, ql_only, pl_only, al_only);
  detail = buf;
  const double floor = baseline - 0.01;
  return full > baseline && ql_only >= floor && pl_only >= floor &&
         al_only >= floor;
}

// --------------------------------------------------------------------------
// 6. Teacher-guided initialization lowers the step-0 task loss.
// --------------------------------------------------------------------------
bool criterion_tgi_convergence(std::string& detail) {
  SceneRecipe recipe;
  recipe.seed = 0;
  std::vector<SceneSample> scenes(16);
  parallel_for(16, [&](std::size_t i) {
    auto [grid, cam] = generate_scene(recipe, i);
    scenes[i] = make_scene_sample(std::move(grid), cam, recipe.image_height,
                                  recipe.image_width, false, i);
  });

  TrainConfig teacher_cfg;
  teacher_cfg.epochs = 30;
  teacher_cfg.seed = 1;
  teacher_cfg.model = teacher_config();
  teacher_cfg.model.n_classes = recipe.k_sem;
  const TrainResult teacher =
      train_teacher(teacher_cfg, scenes, recipe.grid, recipe.k_sem);

  ModelConfig student_cfg = student_config();
  student_cfg.n_classes = recipe.k_sem;

  const auto mean_task_loss = [&](const ModelParams& params) {
    const Model model{student_cfg, params};
    double sum = 0.0;
    for (const SceneSample& scene : scenes) {
      sum += distill_step(model, nullptr, scene, DistillPlan{}, 0).l_task;
    }
    return sum / static_cast<double>(scenes.size());
  };

  ModelParams tgi_params = init_params(student_cfg, recipe.grid, 500);
  teacher_guided_init(tgi_params, teacher.model.params);
  const double tgi_loss = mean_task_loss(tgi_params);

  double random_sum = 0.0;
  for (std::uint64_t seed = 500; seed < 505; ++seed) {
    random_sum += mean_task_loss(init_params(student_cfg, recipe.grid, seed));
  }
  const double random_mean = random_sum / 5.0;

  char buf[96];
  std::snprintf(buf, sizeof(buf), "step-0 L_task: tgi=%.4f random mean=%.4f",
                tgi_loss, random_mean);
  detail = buf;
  return tgi_loss < random_mean;
}

// --------------------------------------------------------------------------
// 7. Anchor rebalancing proportions.
// --------------------------------------------------------------------------
bool criterion_anchor_rebalancing(std::string& detail) {
  GroundTruthSet gt;
  Rng rng(77);
  for (int i = 0; i < 90; ++i) {
    gt.positions.push_back({rng.uniform(0, 1), rng.uniform(0, 1), 0.0});
    gt.classes.push_back(1);
  }
  for (int i = 0; i < 10; ++i) {
    gt.positions.push_back({rng.uniform(0, 1), rng.uniform(0, 1), 1.0});
    gt.classes.push_back(2);
  }
  const AnchorSet anchors = sample_anchors(gt, 10000, 123);
  std::size_t class1 = 0;
  for (const auto c : anchors.classes) class1 += (c == 1);
  const double p1 = static_cast<double>(class1) / 10000.0;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "class-1 proportion %.4f", p1);
  detail = buf;
  return p1 >= 0.45 && p1 <= 0.55;
}

// --------------------------------------------------------------------------
// 8. Voxelize round trip plus the hand-computed metric cases.
// --------------------------------------------------------------------------
bool criterion_roundtrip_metrics(std::string& detail) {
  Rng rng(88);
  for (int trial = 0; trial < 100; ++trial) {
    GridSpec spec(2 + rng.uniform_index(6), 2 + rng.uniform_index(6),
                  2 + rng.uniform_index(5), 0.25,
                  Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0});
    VoxelGrid grid(spec);
    for (auto& label : grid.labels) {
      if (rng.uniform() < 0.35) {
        label = static_cast<std::uint8_t>(1 + rng.uniform_index(6));
      }
    }
    const GroundTruthSet gt = extract_gt_set(grid);
    std::vector<std::pair<Vec3, std::uint8_t>> points;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      points.emplace_back(gt.positions[i], gt.classes[i]);
    }
    if (!(voxelize(points, spec) == grid)) {
      detail = "round trip failed at trial " + std::to_string(trial);
      return false;
    }
  }

  // IoU hand case: pred {A,B}, gt {B,C} -> 1/3.
  const GridSpec spec(4, 3, 2, 0.5);
  VoxelGrid a(spec), b(spec);
  a.at(0, 0, 0) = 1;
  a.at(1, 0, 0) = 1;
  b.at(1, 0, 0) = 1;
  b.at(2, 0, 0) = 1;
  if (occupancy_iou(a, b) != 1.0 / 3.0) {
    detail = "IoU hand case failed";
    return false;
  }

  // mIoU hand case: pred relabels both class-2 voxels as class 1.
  VoxelGrid pred(spec), gt_grid(spec);
  gt_grid.at(0, 0, 0) = gt_grid.at(1, 0, 0) = gt_grid.at(2, 0, 0) = 1;
  gt_grid.at(0, 1, 0) = gt_grid.at(1, 1, 0) = 2;
  pred.at(0, 0, 0) = pred.at(1, 0, 0) = pred.at(2, 0, 0) = 1;
  pred.at(0, 1, 0) = pred.at(1, 1, 0) = 1;
  const MetricsReport report = miou(pred, gt_grid, 2);
  if (!report.per_class_iou[0] || *report.per_class_iou[0] != 0.6 ||
      !report.per_class_iou[1] || *report.per_class_iou[1] != 0.0 ||
      !report.miou || *report.miou != 0.3) {
    detail = "mIoU hand case failed";
    return false;
  }

  // Two all-empty grids compare as IoU 1 with no defined classes.
  const VoxelGrid empty1(spec), empty2(spec);
  if (occupancy_iou(empty1, empty2) != 1.0 ||
      miou(empty1, empty2, 2).miou.has_value()) {
    detail = "empty-grid conventions failed";
    return false;
  }

  detail = "100 round trips + hand cases exact";
  return true;
}

// --------------------------------------------------------------------------
// 9. CLI determinism: byte-identical datasets, checkpoints and reports.
// --------------------------------------------------------------------------
bool criterion_cli_determinism(std::string& detail) {
  const std::string cli = cli_path();
  if (cli.empty()) {
    detail = "DISCENE_CLI not set";
    return false;
  }
  const fs::path work = fs::temp_directory_path() / "discene_acc_det";
  fs::remove_all(work);
  fs::create_directories(work);

  const auto gen = [&](const std::string& tag) {
    const fs::path dir = work / ("data_" + tag);
    return run_command(cli + " gen --out " + dir.string() +
                       " --count 4 --seed 5") == 0;
  };
  if (!gen("a") || !gen("b")) {
    detail = "gen failed";
    return false;
  }
  for (const std::string name :
       {std::string("manifest.json"), std::string("scene_0003.dsc")}) {
    if (file_bytes(work / "data_a" / name) !=
        file_bytes(work / "data_b" / name)) {
      detail = "dataset bytes differ: " + name;
      return false;
    }
  }

  const auto train = [&](const std::string& tag) {
    const fs::path out = work / ("teacher_" + tag);
    return run_command(cli + " train --data " + (work / "data_a").string() +
                       " --out " + out.string() + " --epochs 2 --seed 3") == 0;
  };
  if (!train("a") || !train("b")) {
    detail = "train failed";
    return false;
  }
  if (file_bytes(work / "teacher_a" / "checkpoint.dspk") !=
      file_bytes(work / "teacher_b" / "checkpoint.dspk")) {
    detail = "checkpoint bytes differ";
    return false;
  }
  if (file_bytes(work / "teacher_a" / "train_log.jsonl") !=
      file_bytes(work / "teacher_b" / "train_log.jsonl")) {
    detail = "train log bytes differ";
    return false;
  }

  const auto eval = [&](const std::string& tag) {
    return run_command(cli + " eval --ckpt " +
                       (work / "teacher_a" / "checkpoint.dspk").string() +
                       " --data " + (work / "data_a").string() + " --report " +
                       (work / ("report_" + tag + ".json")).string()) == 0;
  };
  if (!eval("a") || !eval("b")) {
    detail = "eval failed";
    return false;
  }
  if (file_bytes(work / "report_a.json") != file_bytes(work / "report_b.json")) {
    detail = "report bytes differ";
    return false;
  }
  fs::remove_all(work);
  detail = "datasets, checkpoints, logs and reports byte-identical";
  return true;
}

// --------------------------------------------------------------------------
// 10. Depth prior consistency on clean renders.
// --------------------------------------------------------------------------
bool criterion_depth_consistency(std::string& detail) {
  SceneRecipe recipe;
  recipe.seed = 99;
  std::size_t visible = 0, consistent = 0;
  for (std::uint64_t scene_seed = 0; scene_seed < 20; ++scene_seed) {
    const auto [grid, cam] = generate_scene(recipe, scene_seed);
    std::vector<long> hits;
    const Tensor depth =
        render_depth(grid, cam, recipe.image_height, recipe.image_width, &hits);
    const auto [nx, ny, nz] = grid.spec.dims;
    const auto w = recipe.image_width, h = recipe.image_height;
    for (std::size_t x = 0; x < nx; ++x) {
      for (std::size_t y = 0; y < ny; ++y) {
        for (std::size_t z = 0; z < nz; ++z) {
          if (grid.at(x, y, z) == 0) continue;
          const Vec3 uvz = cam.project(grid.spec.voxel_center(x, y, z));
          if (uvz.z <= 0.0) continue;
          const long px = static_cast<long>(std::floor(uvz.x));
          const long py = static_cast<long>(std::floor(uvz.y));
          if (px < 0 || py < 0 || px >= static_cast<long>(w) ||
              py >= static_cast<long>(h)) {
            continue;
          }
          if (hits[py * w + px] !=
              static_cast<long>(grid.spec.index(x, y, z))) {
            continue;  // occluded or not the first hit: not "visible"
          }
          ++visible;
          // d_p exactly as the depth branch samples it: bilinear at (u, v)
          // in pixel-center coordinates.
          ad::Tape tape;
          Tensor uv{1, 3};
          uv(0, 0) = uvz.x;
          uv(0, 1) = uvz.y;
          uv(0, 2) = uvz.z;
          const ad::Value sample =
              ad::sample_image_rows(depth, tape.constant(uv), {1});
          const double d_p = tape.data(sample)(0, 0);
          if (std::abs(d_p - uvz.z) <= grid.spec.voxel_size) ++consistent;
        }
      }
    }
  }
  const double rate =
      static_cast<double>(consistent) / static_cast<double>(visible);
  char buf[96];
  std::snprintf(buf, sizeof(buf),
                "%zu/%zu visible centers within 1 voxel (%.1f%%)", consistent,
                visible, 100.0 * rate);
  detail = buf;
  return visible > 500 && rate >= 0.95;
}

}  // namespace

int main() {
  run_criterion(1, "matching oracle", criterion_matching_oracle);
  run_criterion(2, "gradient suite", criterion_gradient_suite);
  run_criterion(3, "self-distillation fixed point", criterion_self_distillation);
  run_criterion(4, "loss bookkeeping identity", criterion_bookkeeping);
  run_criterion(5, "directional distillation ablation", criterion_directional);
  run_criterion(6, "TGI convergence", criterion_tgi_convergence);
  run_criterion(7, "anchor rebalancing", criterion_anchor_rebalancing);
  run_criterion(8, "round trip and metrics", criterion_roundtrip_metrics);
  run_criterion(9, "CLI determinism", criterion_cli_determinism);
  run_criterion(10, "depth prior consistency", criterion_depth_consistency);

  std::size_t failed = 0;
  for (const auto& r : g_results) failed += !r.passed;
  std::printf("%zu/%zu criteria passed\n", g_results.size() - failed,
              g_results.size());
  return failed == 0 ? 0 : 1;
}
