#include "segvec3d/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace segvec3d::data {

std::vector<CategorySpec> default_catalog() {
  return {
      {"table", ShapeKind::kBox, {1.0, 0.6, 0.70}, {1.4, 0.8, 0.80}, {0.85, 0.45, 0.15}},
      {"cabinet", ShapeKind::kBox, {0.5, 0.4, 1.20}, {0.7, 0.5, 1.60}, {0.25, 0.45, 0.90}},
      {"crate", ShapeKind::kBox, {0.35, 0.35, 0.35}, {0.5, 0.5, 0.5}, {0.90, 0.85, 0.35}},
      {"ball", ShapeKind::kSphere, {0.15, 0.0, 0.0}, {0.25, 0.0, 0.0}, {0.90, 0.15, 0.20}},
      {"trash bin", ShapeKind::kCylinder, {0.15, 0.0, 0.35}, {0.22, 0.0, 0.55}, {0.20, 0.80, 0.30}},
      {"lamp", ShapeKind::kCylinder, {0.05, 0.0, 1.30}, {0.08, 0.0, 1.70}, {0.75, 0.30, 0.85}},
  };
}

std::vector<std::string> category_names(const std::vector<CategorySpec>& catalog) {
  std::vector<std::string> out;
  for (const auto& c : catalog) out.push_back(c.name);
  return out;
}

void SceneSpec::validate() const {
  auto check = [](bool ok, const char* msg) { require(ok, ErrorKind::kInvalidArgument, msg); };
  check(min_objects <= max_objects, "object count range is empty");
  check(min_points_per_object >= 1 && min_points_per_object <= max_points_per_object,
        "points-per-object range is empty");
  check(noise_sigma >= 0.0, "noise sigma must be non-negative");
  check(floor_shadow >= 0.0, "floor shadow must be non-negative");
  check(room_x > 0.0 && room_y > 0.0 && room_height > 0.0, "room dimensions must be positive");
  check(max_objects == 0 || !catalog.empty(), "object catalog is empty");
  check(!distinct_categories || max_objects <= catalog.size(), "more objects than distinct categories");
  for (const auto& c : catalog) {
    check(c.shape == ShapeKind::kBox || c.shape == ShapeKind::kSphere || c.shape == ShapeKind::kCylinder,
          "catalog objects must be boxes, spheres or cylinders");
    for (std::size_t d = 0; d < 3; ++d) check(c.size_min[d] <= c.size_max[d], "category size range is empty");
  }
}

namespace {

struct Placed {
  const CategorySpec* category;
  Vec3 size;
  double cx, cy, yaw;
  double footprint_radius;
};

double footprint_radius(ShapeKind shape, const Vec3& size) {
  switch (shape) {
    case ShapeKind::kBox: return 0.5 * std::hypot(size[0], size[1]);
    default: return size[0];
  }
}

// Local object frame: footprint centered at the origin, resting on z = 0.
Vec3 sample_box(const Vec3& s, Rng& rng) {
  // Bottom face rests on the floor and is not observed.
  const double top = s[0] * s[1];
  const double side_x = s[1] * s[2];
  const double side_y = s[0] * s[2];
  const double total = top + 2.0 * side_x + 2.0 * side_y;
  const double pick = rng.uniform() * total;
  const double u = rng.uniform() - 0.5;
  const double v = rng.uniform() - 0.5;
  if (pick < top) return {u * s[0], v * s[1], s[2]};
  if (pick < top + side_x) return {-0.5 * s[0], u * s[1], (v + 0.5) * s[2]};
  if (pick < top + 2.0 * side_x) return {0.5 * s[0], u * s[1], (v + 0.5) * s[2]};
  if (pick < top + 2.0 * side_x + side_y) return {u * s[0], -0.5 * s[1], (v + 0.5) * s[2]};
  return {u * s[0], 0.5 * s[1], (v + 0.5) * s[2]};
}

Vec3 sample_sphere(const Vec3& s, Rng& rng) {
  const double r = s[0];
  double x, y, z, n;
  do {
    x = rng.normal();
    y = rng.normal();
    z = rng.normal();
    n = std::sqrt(x * x + y * y + z * z);
  } while (n < 1e-12);
  return {r * x / n, r * y / n, r + r * z / n};
}

Vec3 sample_cylinder(const Vec3& s, Rng& rng) {
  const double r = s[0];
  const double h = s[2];
  const double side = 2.0 * std::numbers::pi * r * h;
  const double cap = std::numbers::pi * r * r;
  const double theta = 2.0 * std::numbers::pi * rng.uniform();
  if (rng.uniform() * (side + cap) < side) return {r * std::cos(theta), r * std::sin(theta), h * rng.uniform()};
  const double rho = r * std::sqrt(rng.uniform());
  return {rho * std::cos(theta), rho * std::sin(theta), h};
}

bool inside_footprint(const Placed& o, double x, double y, double pad) {
  const double dx = x - o.cx;
  const double dy = y - o.cy;
  if (o.category->shape == ShapeKind::kBox) {
    const double c = std::cos(o.yaw);
    const double s = std::sin(o.yaw);
    const double lx = c * dx + s * dy;
    const double ly = -s * dx + c * dy;
    return std::abs(lx) <= 0.5 * o.size[0] + pad && std::abs(ly) <= 0.5 * o.size[1] + pad;
  }
  return dx * dx + dy * dy <= (o.size[0] + pad) * (o.size[0] + pad);
}

// Observed area: boxes and cylinders have no bottom face.
double surface_area(const Placed& o) {
  const Vec3& s = o.size;
  switch (o.category->shape) {
    case ShapeKind::kBox: return s[0] * s[1] + 2.0 * s[2] * (s[0] + s[1]);
    case ShapeKind::kSphere: return 4.0 * std::numbers::pi * s[0] * s[0];
    default: return 2.0 * std::numbers::pi * s[0] * s[2] + std::numbers::pi * s[0] * s[0];
  }
}

Vec3 jitter_color(const Vec3& base, double amount, Rng& rng) {
  Vec3 out;
  for (std::size_t d = 0; d < 3; ++d) out[d] = std::clamp(base[d] + rng.uniform(-amount, amount), 0.0, 1.0);
  return out;
}

}  // namespace

geometry::PointCloud generate_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);

  const std::size_t object_count =
      spec.min_objects + static_cast<std::size_t>(rng.index(spec.max_objects - spec.min_objects + 1));
  std::vector<std::size_t> picks;
  if (spec.distinct_categories) {
    std::vector<std::size_t> order(spec.catalog.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = 0; i < object_count; ++i) std::swap(order[i], order[i + rng.index(order.size() - i)]);
    picks.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(object_count));
  } else {
    for (std::size_t i = 0; i < object_count; ++i) picks.push_back(rng.index(spec.catalog.size()));
  }

  std::vector<Placed> placed;
  for (std::size_t pick : picks) {
    const CategorySpec& cat = spec.catalog[pick];
    Vec3 size;
    for (std::size_t d = 0; d < 3; ++d) size[d] = rng.uniform(cat.size_min[d], cat.size_max[d]);
    const double radius = footprint_radius(cat.shape, size);
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
      Placed p{&cat, size, 0.0, 0.0, 0.0, radius};
      if (!spec.identity_pose) {
        const double margin = radius + spec.clearance;
        if (2.0 * margin >= spec.room_x || 2.0 * margin >= spec.room_y) break;
        p.cx = rng.uniform(margin, spec.room_x - margin);
        p.cy = rng.uniform(margin, spec.room_y - margin);
        p.yaw = rng.uniform(-spec.yaw_jitter, spec.yaw_jitter);
      }
      ok = std::all_of(placed.begin(), placed.end(), [&](const Placed& q) {
        return std::hypot(p.cx - q.cx, p.cy - q.cy) >= p.footprint_radius + q.footprint_radius + spec.clearance;
      });
      if (ok) placed.push_back(p);
    }
    if (!ok) fail(ErrorKind::kPlacementFailure, "could not place '" + cat.name + "' after 1000 attempts");
  }

  geometry::PointCloud cloud;
  cloud.colors.emplace();
  cloud.instance_labels.emplace();
  auto emit = [&](const Vec3& p, const Vec3& color, int label) {
    Vec3 q = p;
    if (spec.noise_sigma > 0.0)
      for (double& v : q) v += spec.noise_sigma * rng.normal();
    Vec3 c = color;
    if (spec.point_color_noise > 0.0)
      for (double& v : c) v = std::clamp(v + spec.point_color_noise * rng.normal(), 0.0, 1.0);
    cloud.positions.push_back(q);
    cloud.colors->push_back(c);
    cloud.instance_labels->push_back(label);
  };

  // Floor, skipping the area covered by objects.
  const Vec3 floor_color = jitter_color({0.12, 0.12, 0.14}, spec.instance_color_jitter, rng);
  for (std::size_t i = 0; i < spec.floor_points;) {
    const double x = rng.uniform(0.0, spec.room_x);
    const double y = rng.uniform(0.0, spec.room_y);
    if (std::any_of(placed.begin(), placed.end(), [&](const Placed& o) { return inside_footprint(o, x, y, spec.floor_shadow); })) {
      continue;
    }
    emit({x, y, 0.0}, floor_color, kFloorId);
    ++i;
  }
  cloud.category_names[kFloorId] = "floor";

  const Vec3 wall_color = jitter_color({0.92, 0.92, 0.88}, spec.instance_color_jitter, rng);
  for (std::size_t i = 0; i < spec.wall_points; ++i) {
    emit({rng.uniform(0.0, spec.room_x), spec.room_y, rng.uniform(0.0, spec.room_height)}, wall_color, kWallId);
  }
  cloud.category_names[kWallId] = "wall";

  int id = kWallId + 1;
  for (const Placed& o : placed) {
    std::size_t count = 0;
    if (spec.object_point_density > 0.0) {
      const auto wanted = static_cast<std::size_t>(std::llround(spec.object_point_density * surface_area(o)));
      count = std::clamp(wanted, spec.min_points_per_object, spec.max_points_per_object);
    } else {
      count = spec.min_points_per_object +
              static_cast<std::size_t>(rng.index(spec.max_points_per_object - spec.min_points_per_object + 1));
    }
    const Vec3 color = jitter_color(o.category->color, spec.instance_color_jitter, rng);
    const double c = std::cos(o.yaw);
    const double s = std::sin(o.yaw);
    for (std::size_t i = 0; i < count; ++i) {
      Vec3 local;
      switch (o.category->shape) {
        case ShapeKind::kBox: local = sample_box(o.size, rng); break;
        case ShapeKind::kSphere: local = sample_sphere(o.size, rng); break;
        default: local = sample_cylinder(o.size, rng); break;
      }
      emit({o.cx + c * local[0] - s * local[1], o.cy + s * local[0] + c * local[1], local[2]}, color, id);
    }
    cloud.category_names[id] = o.category->name;
    ++id;
  }
  cloud.validate();
  return cloud;
}

Split split_indices(std::size_t count, double train_fraction, std::uint64_t seed) {
  require(train_fraction > 0.0 && train_fraction < 1.0, ErrorKind::kInvalidArgument,
          "train fraction must be in (0, 1)");
  require(count >= 2, ErrorKind::kInvalidArgument, "need at least two items to split");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = count; i-- > 1;) std::swap(order[i], order[rng.index(i + 1)]);
  auto train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(count)));
  train = std::clamp<std::size_t>(train, 1, count - 1);
  Split s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(train));
  s.heldout.assign(order.begin() + static_cast<std::ptrdiff_t>(train), order.end());
  return s;
}

multimodal::TextEmbeddingTable build_text_table_for_categories(std::span<const std::string> categories,
                                                               std::size_t dim, std::uint64_t seed,
                                                               double max_abs_cosine) {
  require(!categories.empty(), ErrorKind::kInvalidArgument, "no categories");
  require(dim > 0, ErrorKind::kInvalidArgument, "dimension must be positive");
  std::set<std::string> seen;
  for (const auto& c : categories) {
    require(seen.insert(multimodal::normalize_phrase(c)).second, ErrorKind::kInvalidArgument,
            "duplicate category '" + c + "'");
  }
  Rng rng(seed);
  multimodal::TextEmbeddingTable table(dim);
  std::vector<std::vector<double>> accepted;
  for (const auto& phrase : categories) {
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
      std::vector<double> v(dim);
      for (double& x : v) x = rng.normal();
      const double n = nn::norm2(v);
      if (n == 0.0) continue;
      for (double& x : v) x /= n;
      ok = std::all_of(accepted.begin(), accepted.end(),
                       [&](const std::vector<double>& a) { return std::abs(nn::dot(a, v)) < max_abs_cosine; });
      if (ok) {
        accepted.push_back(v);
        table.add(phrase, std::move(v));
      }
    }
    if (!ok) {
      fail(ErrorKind::kDimensionalityTooSmall,
           "cannot place " + std::to_string(categories.size()) + " directions in dimension " + std::to_string(dim));
    }
  }
  return table;
}

}  // namespace segvec3d::data
