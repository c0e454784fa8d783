#pragma once

// ASCII PLY and CSV point clouds, category sidecars, and small text helpers.

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "segvec3d/geometry.hpp"

namespace segvec3d::io {

// Extra per-point integer property written after the standard ones (e.g. `selected`).
struct IntColumn {
  std::string name;
  std::vector<int> values;
};

geometry::PointCloud read_ply(const std::string& path);
geometry::PointCloud parse_ply(std::string_view text);
std::string format_ply(const geometry::PointCloud& cloud, const std::vector<IntColumn>& extra = {});
void write_ply(const std::string& path, const geometry::PointCloud& cloud, const std::vector<IntColumn>& extra = {});

// Header `x,y,z[,r,g,b][,instance]`; colors as 0-255 integers.
geometry::PointCloud read_csv(const std::string& path);
geometry::PointCloud parse_csv(std::string_view text);
std::string format_csv(const geometry::PointCloud& cloud, const std::vector<IntColumn>& extra = {});
void write_csv(const std::string& path, const geometry::PointCloud& cloud, const std::vector<IntColumn>& extra = {});

// Dispatches on extension: .ply, otherwise CSV.
geometry::PointCloud read_cloud(const std::string& path);
void write_cloud(const std::string& path, const geometry::PointCloud& cloud, const std::vector<IntColumn>& extra = {});

// `instance_id<TAB>phrase` per line.
std::map<int, std::string> parse_categories(std::string_view text);
std::map<int, std::string> read_categories(const std::string& path);
std::string format_categories(const std::map<int, std::string>& categories);
void write_categories(const std::string& path, const std::map<int, std::string>& categories);

// Reads a cloud and, if present, its `<stem>.categories.tsv` sidecar.
geometry::PointCloud read_scene(const std::string& path);
std::string sidecar_path(const std::string& cloud_path);

std::string read_file(const std::string& path);
// Writes to a temporary sibling then renames, so readers never see partial files.
void write_file_atomic(const std::string& path, std::string_view contents);

// Shortest representation that round-trips exactly.
std::string format_double(double v);
// Throws invalid-data on malformed or non-finite numbers.
double parse_double(std::string_view token);
std::vector<double> parse_doubles(std::string_view text, char separator);

}  // namespace segvec3d::io
