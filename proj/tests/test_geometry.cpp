#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "discene/geometry.hpp"
#include "discene/rng.hpp"
#include "discene/scene_io.hpp"

using namespace discene;

namespace {

GridSpec toy_spec() { return GridSpec(4, 3, 2, 0.5, Vec3{0.0, 0.0, 0.0}); }

VoxelGrid random_grid(Rng& rng, std::size_t k_sem = 5) {
  GridSpec spec(2 + rng.uniform_index(5), 2 + rng.uniform_index(5),
                2 + rng.uniform_index(4), 0.25, Vec3{-1.0, 0.5, 0.0});
  VoxelGrid grid(spec);
  for (auto& label : grid.labels) {
    if (rng.uniform() < 0.4) {
      label = static_cast<std::uint8_t>(1 + rng.uniform_index(k_sem));
    }
  }
  return grid;
}

}  // namespace

TEST_CASE("voxelize basics") {
  const GridSpec spec = toy_spec();

  SECTION("empty point list gives an all-empty grid") {
    const VoxelGrid g = voxelize({}, spec);
    CHECK(g.occupied_count() == 0);
  }

  SECTION("single point lands in its containing voxel") {
    const VoxelGrid g = voxelize({{spec.voxel_center(0, 0, 0), 3}}, spec);
    CHECK(g.at(0, 0, 0) == 3);
    CHECK(g.occupied_count() == 1);
  }

  SECTION("majority vote, ties to lowest class id") {
    const Vec3 c = spec.voxel_center(1, 1, 1);
    const VoxelGrid g = voxelize({{c, 5}, {c, 2}, {c, 2}}, spec);
    CHECK(g.at(1, 1, 1) == 2);

    const VoxelGrid tie = voxelize({{c, 5}, {c, 2}}, spec);
    CHECK(tie.at(1, 1, 1) == 2);
  }

  SECTION("out-of-bounds points are dropped and counted") {
    std::size_t dropped = 0;
    const VoxelGrid g =
        voxelize({{Vec3{-1.0, 0.0, 0.0}, 1}, {spec.voxel_center(0, 0, 0), 2}},
                 spec, &dropped);
    CHECK(dropped == 1);
    CHECK(g.occupied_count() == 1);
  }

  SECTION("containment is half-open per axis") {
    // A point exactly on the upper boundary belongs to the next voxel.
    const VoxelGrid g = voxelize({{Vec3{0.5, 0.0, 0.0}, 4}}, spec);
    CHECK(g.at(1, 0, 0) == 4);
    CHECK(g.at(0, 0, 0) == 0);
  }
}

TEST_CASE("extract_gt_set") {
  SECTION("all-empty grid gives M = 0") {
    const VoxelGrid g(toy_spec());
    CHECK(extract_gt_set(g).size() == 0);
  }

  SECTION("voxel center formula") {
    VoxelGrid g(GridSpec(4, 4, 4, 0.1, Vec3{0.0, 0.0, 0.0}));
    g.at(1, 0, 0) = 2;
    const GroundTruthSet gt = extract_gt_set(g);
    REQUIRE(gt.size() == 1);
    CHECK(gt.positions[0].x == Catch::Approx(0.15).margin(1e-12));
    CHECK(gt.positions[0].y == Catch::Approx(0.05).margin(1e-12));
    CHECK(gt.positions[0].z == Catch::Approx(0.05).margin(1e-12));
    CHECK(gt.classes[0] == 2);
  }

  SECTION("positions are exact voxel centers") {
    Rng rng(7);
    const VoxelGrid g = random_grid(rng);
    for (const Vec3& p : extract_gt_set(g).positions) {
      for (int a = 0; a < 3; ++a) {
        const double idx = (p[a] - g.spec.origin[a]) / g.spec.voxel_size - 0.5;
        CHECK(std::abs(idx - std::round(idx)) < 1e-9);
      }
    }
  }
}

TEST_CASE("voxelize round trip") {
  Rng rng(42);
  for (int trial = 0; trial < 25; ++trial) {
    const VoxelGrid g = random_grid(rng);
    const GroundTruthSet gt = extract_gt_set(g);
    std::vector<std::pair<Vec3, std::uint8_t>> points;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      points.emplace_back(gt.positions[i], gt.classes[i]);
    }
    const VoxelGrid back = voxelize(points, g.spec);
    REQUIRE(back == g);
  }
}

TEST_CASE("predset_to_grid") {
  const GridSpec spec = toy_spec();

  SECTION("impossible threshold empties the grid") {
    PredictionSet pred;
    pred.positions = Tensor::from_rows({spec.voxel_center(0, 0, 0)});
    pred.logits = Tensor{1, 3};
    pred.logits(0, 0) = 5.0;
    const VoxelGrid g = predset_to_grid(pred, spec, 1.1);
    CHECK(g.occupied_count() == 0);
  }

  SECTION("confident points vote their argmax class") {
    PredictionSet pred;
    pred.positions = Tensor::from_rows(
        {spec.voxel_center(0, 0, 0), spec.voxel_center(1, 2, 1)});
    pred.logits = Tensor{2, 3};
    pred.logits(0, 1) = 4.0;  // class id 2
    pred.logits(1, 2) = 4.0;  // class id 3
    const VoxelGrid g = predset_to_grid(pred, spec, 0.5);
    CHECK(g.at(0, 0, 0) == 2);
    CHECK(g.at(1, 2, 1) == 3);
  }

  SECTION("unanimous votes in one voxel") {
    PredictionSet pred;
    const Vec3 c = spec.voxel_center(2, 1, 0);
    pred.positions = Tensor::from_rows({c, c + Vec3{0.01, 0.0, 0.0}});
    pred.logits = Tensor{2, 5};
    pred.logits(0, 3) = 3.0;
    pred.logits(1, 3) = 2.0;
    const VoxelGrid g = predset_to_grid(pred, spec, 0.0);
    CHECK(g.at(2, 1, 0) == 4);
  }
}

TEST_CASE("occupancy_iou") {
  const GridSpec spec = toy_spec();
  VoxelGrid a(spec), b(spec);

  SECTION("both empty compare as 1") { CHECK(occupancy_iou(a, b) == 1.0); }

  SECTION("identical occupied grids compare as 1") {
    a.at(0, 0, 0) = 1;
    b.at(0, 0, 0) = 2;  // binary occupancy only
    CHECK(occupancy_iou(a, b) == 1.0);
  }

  SECTION("disjoint sets compare as 0") {
    a.at(0, 0, 0) = 1;
    b.at(1, 0, 0) = 1;
    CHECK(occupancy_iou(a, b) == 0.0);
  }

  SECTION("partial overlap: {A,B} vs {B,C} = 1/3") {
    a.at(0, 0, 0) = 1;
    a.at(1, 0, 0) = 1;
    b.at(1, 0, 0) = 1;
    b.at(2, 0, 0) = 1;
    CHECK(occupancy_iou(a, b) == Catch::Approx(1.0 / 3.0));
    CHECK(occupancy_iou(b, a) == occupancy_iou(a, b));
  }

  SECTION("spec mismatch throws") {
    const VoxelGrid other(GridSpec(2, 2, 2, 0.5));
    CHECK_THROWS_AS(occupancy_iou(a, other), std::invalid_argument);
  }

  SECTION("IoU is 1 exactly when binary occupancy matches") {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
      VoxelGrid x(spec), y(spec);
      for (std::size_t i = 0; i < x.labels.size(); ++i) {
        if (rng.uniform() < 0.5) {
          x.labels[i] = static_cast<std::uint8_t>(1 + rng.uniform_index(4));
          // Same occupancy, possibly different class.
          y.labels[i] = static_cast<std::uint8_t>(1 + rng.uniform_index(4));
        }
      }
      const double same = occupancy_iou(x, y);
      CHECK(same == 1.0);
      // One flipped voxel breaks the identity.
      VoxelGrid z = y;
      z.labels[0] = z.labels[0] == 0 ? 1 : 0;
      const double flipped = occupancy_iou(x, z);
      CHECK(flipped >= 0.0);
      CHECK(flipped < 1.0);
    }
  }
}

TEST_CASE("miou") {
  const GridSpec spec = toy_spec();
  VoxelGrid pred(spec), gt(spec);

  SECTION("identical grids have miou 1") {
    pred.at(0, 0, 0) = gt.at(0, 0, 0) = 1;
    pred.at(1, 0, 0) = gt.at(1, 0, 0) = 3;
    const MetricsReport r = miou(pred, gt, 4);
    REQUIRE(r.miou.has_value());
    CHECK(*r.miou == 1.0);
    CHECK(r.per_class_iou[0] == 1.0);
    CHECK(r.per_class_iou[2] == 1.0);
    CHECK_FALSE(r.per_class_iou[1].has_value());
    CHECK_FALSE(r.per_class_iou[3].has_value());
  }

  SECTION("relabeling class 2 as class 1") {
    // gt: three class-1 voxels, two class-2 voxels; pred calls all of them 1.
    gt.at(0, 0, 0) = gt.at(1, 0, 0) = gt.at(2, 0, 0) = 1;
    gt.at(0, 1, 0) = gt.at(1, 1, 0) = 2;
    pred.at(0, 0, 0) = pred.at(1, 0, 0) = pred.at(2, 0, 0) = 1;
    pred.at(0, 1, 0) = pred.at(1, 1, 0) = 1;
    const MetricsReport r = miou(pred, gt, 2);
    CHECK(*r.per_class_iou[0] == Catch::Approx(3.0 / 5.0));
    CHECK(*r.per_class_iou[1] == 0.0);
    CHECK(*r.miou == Catch::Approx(0.3));
  }

  SECTION("no semantic classes present") {
    const MetricsReport r = miou(pred, gt, 3);
    CHECK_FALSE(r.miou.has_value());
    CHECK(r.iou == 1.0);
  }

  SECTION("per-class IoU is symmetric") {
    Rng rng(11);
    const VoxelGrid a = random_grid(rng);
    VoxelGrid b(a.spec);
    for (auto& label : b.labels) {
      if (rng.uniform() < 0.4) {
        label = static_cast<std::uint8_t>(1 + rng.uniform_index(5));
      }
    }
    const MetricsReport ab = miou(a, b, 5);
    const MetricsReport ba = miou(b, a, 5);
    for (std::size_t c = 0; c < 5; ++c) {
      CHECK(ab.per_class_iou[c].has_value() == ba.per_class_iou[c].has_value());
      if (ab.per_class_iou[c]) {
        CHECK(*ab.per_class_iou[c] == Catch::Approx(*ba.per_class_iou[c]));
      }
    }
  }
}

TEST_CASE("scene file round trip") {
  Rng rng(3);
  VoxelGrid grid = random_grid(rng);
  // Header fields are stored as f32; snap so the round trip is exact.
  grid.spec.voxel_size = f32(grid.spec.voxel_size);
  for (int a = 0; a < 3; ++a) grid.spec.origin[a] = f32(grid.spec.origin[a]);

  Camera cam = Camera::look_at(Vec3{1.0, 0.5, 0.25}, Vec3{0.0, 0.0, 0.0},
                               32.0, 32.0, 16.0, 16.0);
  for (auto& v : cam.rotation) v = f32(v);
  for (int a = 0; a < 3; ++a) cam.position[a] = f32(cam.position[a]);

  const auto path = std::filesystem::temp_directory_path() / "ds_scene_test.dsc";
  write_scene(path.string(), grid, cam);
  const auto [loaded, loaded_cam] = read_scene(path.string());
  CHECK(loaded == grid);
  CHECK(loaded_cam.fx == cam.fx);
  CHECK(loaded_cam.position.x == cam.position.x);
  CHECK(loaded_cam.rotation == cam.rotation);
  std::filesystem::remove(path);

  SECTION("bad magic is rejected") {
    const auto bad = std::filesystem::temp_directory_path() / "ds_bad.dsc";
    {
      std::ofstream os(bad, std::ios::binary);
      os << "NOPE this is not a scene";
    }
    CHECK_THROWS_AS(read_scene(bad.string()), std::runtime_error);
    std::filesystem::remove(bad);
  }
}

TEST_CASE("metrics json shape") {
  MetricsReport r;
  r.iou = 0.5;
  r.per_class_iou = {0.25, std::nullopt};
  r.miou = 0.25;
  const nlohmann::json j = metrics_to_json(r);
  CHECK(j["iou"] == 0.5);
  CHECK(j["per_class_iou"][0] == 0.25);
  CHECK(j["per_class_iou"][1].is_null());
  CHECK(j["miou"] == 0.25);

  MetricsReport empty;
  empty.iou = 1.0;
  CHECK(metrics_to_json(empty)["miou"].is_null());
}
