#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "discene/syndata.hpp"

using namespace discene;

TEST_CASE("generate_scene structure") {
  SceneRecipe recipe;
  recipe.seed = 7;

  SECTION("zero furniture leaves only shell classes") {
    SceneRecipe bare = recipe;
    bare.furniture_min = bare.furniture_max = 0;
    const auto [grid, cam] = generate_scene(bare, 0);
    std::set<std::uint8_t> classes;
    for (const auto label : grid.labels) {
      if (label != 0) classes.insert(label);
    }
    CHECK(classes == std::set<std::uint8_t>{1, 2, 3});
  }

  SECTION("same seed reproduces the scene bit-exactly") {
    const auto [g1, c1] = generate_scene(recipe, 3);
    const auto [g2, c2] = generate_scene(recipe, 3);
    CHECK(g1 == g2);
    CHECK(c1.rotation == c2.rotation);
    CHECK(c1.position.x == c2.position.x);
    CHECK(c1.fx == c2.fx);
  }

  SECTION("different seeds give different scenes") {
    const auto [g1, c1] = generate_scene(recipe, 0);
    const auto [g2, c2] = generate_scene(recipe, 1);
    CHECK_FALSE(g1 == g2);
  }

  SECTION("1000 seeds: shell intact, furniture interior, camera in free space") {
    std::size_t violations = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const auto [grid, cam] = generate_scene(recipe, seed);
      const auto [nx, ny, nz] = grid.spec.dims;
      for (std::size_t x = 0; x < nx && violations == 0; ++x) {
        for (std::size_t y = 0; y < ny; ++y) {
          for (std::size_t z = 0; z < nz; ++z) {
            const std::uint8_t label = grid.at(x, y, z);
            const std::uint8_t expected_shell =
                z == 0 ? 1
                : z == nz - 1
                    ? 2
                    : (x == 0 || x == nx - 1 || y == 0 || y == ny - 1) ? 3 : 0;
            if (expected_shell != 0) {
              violations += (label != expected_shell);
            } else if (label != 0 && (label < 4 || label > recipe.k_sem)) {
              ++violations;
            }
          }
        }
      }
      const auto cell = grid.spec.locate(cam.position);
      if (!cell || grid.at((*cell)[0], (*cell)[1], (*cell)[2]) != 0) {
        ++violations;
      }
    }
    CHECK(violations == 0);
  }

  SECTION("k_sem below 4 is rejected") {
    SceneRecipe bad = recipe;
    bad.k_sem = 3;
    CHECK_THROWS_AS(generate_scene(bad, 0), std::invalid_argument);
  }
}

TEST_CASE("render_depth") {
  SECTION("all-empty grid renders all zeros") {
    const GridSpec spec(8, 8, 8, 0.25);
    const VoxelGrid grid(spec);
    const Camera cam = Camera::look_at(Vec3{1, 1, 1}, Vec3{1.9, 1, 1}, 25.6,
                                       25.6, 16, 16);
    const Tensor depth = render_depth(grid, cam, 32, 32);
    for (const double d : depth.data) CHECK(d == 0.0);
  }

  SECTION("flat wall three meters ahead") {
    const GridSpec spec(40, 20, 20, 0.2);
    VoxelGrid grid(spec);
    for (std::size_t y = 0; y < 20; ++y) {
      for (std::size_t z = 0; z < 20; ++z) grid.at(19, y, z) = 3;
    }
    const Vec3 eye{0.8, 2.0, 2.0};
    const Camera cam = Camera::look_at(eye, eye + Vec3{1, 0, 0}, 25.6, 25.6,
                                       16.0, 16.0);
    const Tensor depth = render_depth(grid, cam, 32, 32);
    CHECK(depth(16, 16) == Catch::Approx(3.0).margin(spec.voxel_size));
  }

  SECTION("depth never exceeds the grid diagonal") {
    SceneRecipe recipe;
    recipe.seed = 99;
    const auto [grid, cam] = generate_scene(recipe, 0);
    const double diag = grid.spec.extent().norm();
    const Tensor depth =
        render_depth(grid, cam, recipe.image_height, recipe.image_width);
    for (const double d : depth.data) {
      CHECK(d >= 0.0);
      CHECK(d <= diag);
    }
  }

  SECTION("rendered depth agrees with projected voxel centers") {
    SceneRecipe recipe;
    recipe.seed = 5;
    const auto [grid, cam] = generate_scene(recipe, 2);
    std::vector<long> hits;
    const Tensor depth = render_depth(grid, cam, recipe.image_height,
                                      recipe.image_width, &hits);
    const auto [nx, ny, nz] = grid.spec.dims;
    std::size_t visible = 0, consistent = 0;
    for (std::size_t x = 0; x < nx; ++x) {
      for (std::size_t y = 0; y < ny; ++y) {
        for (std::size_t z = 0; z < nz; ++z) {
          if (grid.at(x, y, z) == 0) continue;
          const Vec3 uvz = cam.project(grid.spec.voxel_center(x, y, z));
          if (uvz.z <= 0.0) continue;
          const long px = static_cast<long>(std::floor(uvz.x));
          const long py = static_cast<long>(std::floor(uvz.y));
          if (px < 0 || py < 0 ||
              px >= static_cast<long>(recipe.image_width) ||
              py >= static_cast<long>(recipe.image_height)) {
            continue;
          }
          // Visible = this voxel is the first hit along its own pixel ray.
          if (hits[py * recipe.image_width + px] !=
              static_cast<long>(grid.spec.index(x, y, z))) {
            continue;
          }
          ++visible;
          const double d = depth(static_cast<std::size_t>(py),
                                 static_cast<std::size_t>(px));
          if (std::abs(d - uvz.z) <= grid.spec.voxel_size) ++consistent;
        }
      }
    }
    REQUIRE(visible > 50);
    CHECK(static_cast<double>(consistent) >= 0.95 * static_cast<double>(visible));
  }
}

TEST_CASE("dataset directory round trip") {
  SceneRecipe recipe;
  recipe.seed = 13;
  const auto dir =
      std::filesystem::temp_directory_path() / "discene_test_dataset";
  std::filesystem::remove_all(dir);

  const DatasetManifest written = generate_dataset(recipe, 3, dir.string());
  CHECK(written.files.size() == 3);

  const DatasetManifest manifest = read_manifest(dir.string());
  CHECK(manifest.seeds == written.seeds);
  CHECK(manifest.files == written.files);
  CHECK(manifest.recipe.k_sem == recipe.k_sem);
  CHECK(manifest.recipe.grid.dims == recipe.grid.dims);

  // Stored scenes reload to exactly what generate_scene produces.
  for (std::size_t i = 0; i < manifest.files.size(); ++i) {
    const auto [grid, cam] = read_scene((dir / manifest.files[i]).string());
    const auto [expected_grid, expected_cam] =
        generate_scene(manifest.recipe, manifest.seeds[i]);
    CHECK(grid == expected_grid);
    CHECK(cam.rotation == expected_cam.rotation);
  }
  std::filesystem::remove_all(dir);
}
