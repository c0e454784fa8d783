#pragma once

// Synthetic indoor scenes built from primitive surfaces, with per-point
// instance ids and per-instance category phrases.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "segvec3d/error.hpp"
#include "segvec3d/geometry.hpp"
#include "segvec3d/multimodal.hpp"
#include "segvec3d/random.hpp"

namespace segvec3d::data {

using geometry::Vec3;

enum class ShapeKind { kBox, kSphere, kCylinder, kPlaneFloor, kPlaneWall };

// Sizes: box (x width, y depth, z height); sphere (radius, -, -); cylinder (radius, -, height).
struct CategorySpec {
  std::string name;
  ShapeKind shape = ShapeKind::kBox;
  Vec3 size_min{1.0, 1.0, 1.0};
  Vec3 size_max{1.0, 1.0, 1.0};
  Vec3 color{0.5, 0.5, 0.5};
};

// table, cabinet, crate, ball, trash bin, lamp.
std::vector<CategorySpec> default_catalog();

inline constexpr int kFloorId = 0;
inline constexpr int kWallId = 1;

struct SceneSpec {
  std::size_t min_objects = 4;
  std::size_t max_objects = 6;
  std::vector<CategorySpec> catalog = default_catalog();
  bool distinct_categories = true;
  std::size_t min_points_per_object = 100;
  std::size_t max_points_per_object = 400;
  // Points per square meter of observed surface, clamped to the range above;
  // zero draws the count uniformly from the range instead.
  double object_point_density = 90.0;
  std::size_t floor_points = 1500;
  std::size_t wall_points = 700;
  double room_x = 4.0;
  double room_y = 4.0;
  double room_height = 2.5;
  // Yaw drawn from [-yaw_jitter, yaw_jitter].
  double yaw_jitter = 3.141592653589793;
  // Objects at the origin with zero yaw, for testing primitives.
  bool identity_pose = false;
  // Minimum footprint gap between objects and to the wall.
  double clearance = 0.15;
  // Unobserved floor band around each object's base.
  double floor_shadow = 0.0;
  double noise_sigma = 0.005;
  double instance_color_jitter = 0.04;
  double point_color_noise = 0.02;
  std::uint64_t seed = 0;

  void validate() const;
};

// Floor is instance 0, the wall instance 1, objects 2.. in placement order.
geometry::PointCloud generate_scene(const SceneSpec& spec);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> heldout;
};

Split split_indices(std::size_t count, double train_fraction, std::uint64_t seed);

template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_dataset(const std::vector<T>& items, double train_fraction,
                                                        std::uint64_t seed) {
  const Split s = split_indices(items.size(), train_fraction, seed);
  std::pair<std::vector<T>, std::vector<T>> out;
  for (std::size_t i : s.train) out.first.push_back(items[i]);
  for (std::size_t i : s.heldout) out.second.push_back(items[i]);
  return out;
}

// Seeded gaussian unit directions with pairwise |cos| < max_abs_cosine.
multimodal::TextEmbeddingTable build_text_table_for_categories(std::span<const std::string> categories,
                                                               std::size_t dim, std::uint64_t seed,
                                                               double max_abs_cosine = 0.3);

std::vector<std::string> category_names(const std::vector<CategorySpec>& catalog);

}  // namespace segvec3d::data
