#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "discene/geometry.hpp"
#include "discene/rng.hpp"
#include "discene/scene_io.hpp"

namespace discene {

/// Procedural indoor scene family: a one-voxel-thick room shell (floor = 1,
/// ceiling = 2, walls = 3) plus overlap-free axis-aligned furniture boxes
/// with classes 4..k_sem, viewed by a camera placed in free space looking at
/// the room center.
struct SceneRecipe {
  std::uint64_t seed = 0;  // base seed; per-scene seeds mix into it
  GridSpec grid{24, 24, 16, 0.2, Vec3{0.0, 0.0, 0.0}};
  std::size_t k_sem = 6;
  std::size_t furniture_min = 2;
  std::size_t furniture_max = 5;
  std::size_t image_width = 32;
  std::size_t image_height = 32;

  void validate() const {
    require(k_sem >= 4, "SceneRecipe: k_sem must be at least 4");
    require(furniture_min <= furniture_max, "SceneRecipe: bad furniture range");
    require(grid.dims[0] >= 4 && grid.dims[1] >= 4 && grid.dims[2] >= 4,
            "SceneRecipe: grid too small for a room shell");
  }
};

/// The paper-scale benchmark geometry (60x60x36 voxels at 0.08 m).
inline GridSpec paper_grid_spec() {
  return GridSpec(60, 60, 36, f32(0.08), Vec3{0.0, 0.0, 0.0});
}

inline GridSpec toy_grid_spec() {
  return GridSpec(24, 24, 16, f32(0.2), Vec3{0.0, 0.0, 0.0});
}

inline std::pair<VoxelGrid, Camera> generate_scene(const SceneRecipe& recipe,
                                                   std::uint64_t scene_seed) {
  recipe.validate();
  Rng rng(mix64(recipe.seed, scene_seed, 0x5ce7e5ULL));
  GridSpec spec = recipe.grid;
  spec.voxel_size = f32(spec.voxel_size);
  for (int a = 0; a < 3; ++a) spec.origin[a] = f32(spec.origin[a]);
  const std::size_t nx = spec.dims[0], ny = spec.dims[1], nz = spec.dims[2];

  VoxelGrid grid(spec);
  for (std::size_t x = 0; x < nx; ++x) {
    for (std::size_t y = 0; y < ny; ++y) {
      for (std::size_t z = 0; z < nz; ++z) {
        if (z == 0) {
          grid.at(x, y, z) = 1;
        } else if (z == nz - 1) {
          grid.at(x, y, z) = 2;
        } else if (x == 0 || x == nx - 1 || y == 0 || y == ny - 1) {
          grid.at(x, y, z) = 3;
        }
      }
    }
  }

  const std::size_t n_boxes =
      recipe.furniture_min +
      rng.uniform_index(recipe.furniture_max - recipe.furniture_min + 1);
  const std::size_t interior[3] = {nx - 2, ny - 2, nz - 2};
  for (std::size_t b = 0; b < n_boxes; ++b) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      std::size_t size[3], pos[3];
      for (int a = 0; a < 3; ++a) {
        const std::size_t max_side = std::min<std::size_t>(interior[a], 6);
        size[a] = 1 + rng.uniform_index(max_side);
        pos[a] = 1 + rng.uniform_index(interior[a] - size[a] + 1);
      }
      bool overlap = false;
      for (std::size_t x = pos[0]; x < pos[0] + size[0] && !overlap; ++x) {
        for (std::size_t y = pos[1]; y < pos[1] + size[1] && !overlap; ++y) {
          for (std::size_t z = pos[2]; z < pos[2] + size[2] && !overlap; ++z) {
            overlap = grid.at(x, y, z) != 0;
          }
        }
      }
      if (overlap) continue;
      const auto cls = static_cast<std::uint8_t>(
          4 + rng.uniform_index(recipe.k_sem - 3));
      for (std::size_t x = pos[0]; x < pos[0] + size[0]; ++x) {
        for (std::size_t y = pos[1]; y < pos[1] + size[1]; ++y) {
          for (std::size_t z = pos[2]; z < pos[2] + size[2]; ++z) {
            grid.at(x, y, z) = cls;
          }
        }
      }
      placed = true;
    }
    if (!placed) {
      throw std::runtime_error("generate_scene: furniture rejection sampling "
                               "exceeded 1000 attempts");
    }
  }

  // Camera: a random free interior voxel, looking at the room center.
  const Vec3 room_center = spec.origin + spec.extent() * 0.5;
  std::vector<Vec3> free_centers;
  for (std::size_t x = 1; x + 1 < nx; ++x) {
    for (std::size_t y = 1; y + 1 < ny; ++y) {
      for (std::size_t z = 1; z + 1 < nz; ++z) {
        if (grid.at(x, y, z) != 0) continue;
        const Vec3 c = spec.voxel_center(x, y, z);
        if ((c - room_center).norm() > 2.0 * spec.voxel_size) {
          free_centers.push_back(c);
        }
      }
    }
  }
  if (free_centers.empty()) {
    throw std::runtime_error("generate_scene: no free space for the camera");
  }
  const Vec3 eye = free_centers[rng.uniform_index(free_centers.size())];
  const double fxy = f32(0.8 * static_cast<double>(recipe.image_width));
  Camera cam = Camera::look_at(
      eye, room_center, fxy, fxy,
      f32(0.5 * static_cast<double>(recipe.image_width)),
      f32(0.5 * static_cast<double>(recipe.image_height)));
  // Snap pose values through f32 so in-memory cameras match reloaded ones.
  for (auto& v : cam.rotation) v = f32(v);
  for (int a = 0; a < 3; ++a) cam.position[a] = f32(cam.position[a]);
  return {std::move(grid), cam};
}

/// Ray-marches every pixel through the grid (Amanatides-Woo traversal) and
/// records the camera-frame depth of the first non-empty voxel boundary hit;
/// 0 means no hit. Rays are parameterized so t equals camera-frame z. When
/// given, hit_voxels receives the linear index of the struck voxel per pixel
/// (-1 for misses).
inline Tensor render_depth(const VoxelGrid& grid, const Camera& cam,
                           std::size_t height, std::size_t width,
                           std::vector<long>* hit_voxels = nullptr) {
  const GridSpec& spec = grid.spec;
  Tensor depth{height, width};
  if (hit_voxels) hit_voxels->assign(height * width, -1);
  const Vec3 origin_cells = (cam.position - spec.origin) / spec.voxel_size;

  for (std::size_t py = 0; py < height; ++py) {
    for (std::size_t px = 0; px < width; ++px) {
      const Vec3 dir_cam{(static_cast<double>(px) + 0.5 - cam.cx) / cam.fx,
                         (static_cast<double>(py) + 0.5 - cam.cy) / cam.fy, 1.0};
      const Vec3 dir = cam.rotate_to_world(dir_cam) / spec.voxel_size;

      long cell[3] = {static_cast<long>(std::floor(origin_cells.x)),
                      static_cast<long>(std::floor(origin_cells.y)),
                      static_cast<long>(std::floor(origin_cells.z))};
      bool inside = true;
      for (int a = 0; a < 3; ++a) {
        inside = inside && cell[a] >= 0 &&
                 cell[a] < static_cast<long>(spec.dims[a]);
      }
      if (!inside) continue;  // camera outside the grid: no hit recorded

      long step[3];
      double t_max[3], t_delta[3];
      for (int a = 0; a < 3; ++a) {
        const double d = dir[a];
        if (d > 0.0) {
          step[a] = 1;
          t_max[a] = (static_cast<double>(cell[a]) + 1.0 - origin_cells[a]) / d;
          t_delta[a] = 1.0 / d;
        } else if (d < 0.0) {
          step[a] = -1;
          t_max[a] = (static_cast<double>(cell[a]) - origin_cells[a]) / d;
          t_delta[a] = -1.0 / d;
        } else {
          step[a] = 0;
          t_max[a] = std::numeric_limits<double>::infinity();
          t_delta[a] = std::numeric_limits<double>::infinity();
        }
      }

      while (true) {
        const int axis = (t_max[0] <= t_max[1] && t_max[0] <= t_max[2]) ? 0
                         : (t_max[1] <= t_max[2])                       ? 1
                                                                        : 2;
        const double t_enter = t_max[axis];
        cell[axis] += step[axis];
        if (cell[axis] < 0 || cell[axis] >= static_cast<long>(spec.dims[axis])) {
          break;
        }
        t_max[axis] += t_delta[axis];
        if (grid.at(static_cast<std::size_t>(cell[0]),
                    static_cast<std::size_t>(cell[1]),
                    static_cast<std::size_t>(cell[2])) != 0) {
          depth(py, px) = t_enter;
          if (hit_voxels) {
            (*hit_voxels)[py * width + px] = static_cast<long>(
                spec.index(static_cast<std::size_t>(cell[0]),
                           static_cast<std::size_t>(cell[1]),
                           static_cast<std::size_t>(cell[2])));
          }
          break;
        }
      }
    }
  }
  return depth;
}

// ---------------------------------------------------------------------------
// Dataset directory: numbered scene files plus a JSON manifest.
// ---------------------------------------------------------------------------

inline nlohmann::json recipe_to_json(const SceneRecipe& recipe) {
  nlohmann::json j;
  j["seed"] = recipe.seed;
  j["grid"] = {{"dims", {recipe.grid.dims[0], recipe.grid.dims[1],
                         recipe.grid.dims[2]}},
               {"voxel_size", recipe.grid.voxel_size},
               {"origin", {recipe.grid.origin.x, recipe.grid.origin.y,
                           recipe.grid.origin.z}}};
  j["k_sem"] = recipe.k_sem;
  j["furniture_min"] = recipe.furniture_min;
  j["furniture_max"] = recipe.furniture_max;
  j["image_width"] = recipe.image_width;
  j["image_height"] = recipe.image_height;
  return j;
}

inline SceneRecipe recipe_from_json(const nlohmann::json& j) {
  SceneRecipe recipe;
  recipe.seed = j.at("seed").get<std::uint64_t>();
  const auto& g = j.at("grid");
  recipe.grid = GridSpec(g.at("dims")[0].get<std::size_t>(),
                         g.at("dims")[1].get<std::size_t>(),
                         g.at("dims")[2].get<std::size_t>(),
                         g.at("voxel_size").get<double>(),
                         Vec3{g.at("origin")[0].get<double>(),
                              g.at("origin")[1].get<double>(),
                              g.at("origin")[2].get<double>()});
  recipe.k_sem = j.at("k_sem").get<std::size_t>();
  recipe.furniture_min = j.at("furniture_min").get<std::size_t>();
  recipe.furniture_max = j.at("furniture_max").get<std::size_t>();
  recipe.image_width = j.at("image_width").get<std::size_t>();
  recipe.image_height = j.at("image_height").get<std::size_t>();
  return recipe;
}

struct DatasetManifest {
  SceneRecipe recipe;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> files;  // relative to the dataset directory
};

inline std::string scene_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%04zu.dsc", index);
  return buf;
}

/// Writes `count` scenes (seeds 0..count-1 mixed with the recipe seed) plus
/// manifest.json into out_dir.
inline DatasetManifest generate_dataset(const SceneRecipe& recipe,
                                        std::size_t count,
                                        const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  DatasetManifest manifest;
  manifest.recipe = recipe;
  for (std::size_t i = 0; i < count; ++i) {
    const auto [grid, cam] = generate_scene(recipe, i);
    const std::string name = scene_file_name(i);
    write_scene((std::filesystem::path(out_dir) / name).string(), grid, cam);
    manifest.seeds.push_back(i);
    manifest.files.push_back(name);
  }
  nlohmann::json j;
  j["recipe"] = recipe_to_json(recipe);
  j["seeds"] = manifest.seeds;
  j["files"] = manifest.files;
  std::ofstream os(std::filesystem::path(out_dir) / "manifest.json");
  if (!os) throw std::runtime_error("generate_dataset: cannot write manifest");
  os << j.dump(2) << "\n";
  return manifest;
}

inline DatasetManifest read_manifest(const std::string& dataset_dir) {
  std::ifstream is(std::filesystem::path(dataset_dir) / "manifest.json");
  if (!is) {
    throw std::runtime_error("read_manifest: no manifest.json in " +
                             dataset_dir);
  }
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("read_manifest: bad manifest: ") +
                             e.what());
  }
  DatasetManifest manifest;
  manifest.recipe = recipe_from_json(j.at("recipe"));
  manifest.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  manifest.files = j.at("files").get<std::vector<std::string>>();
  return manifest;
}

}  // namespace discene
