#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>

#include <unistd.h>

#include "doctest.h"
#include "segvec3d/io.hpp"
#include "test_util.hpp"

using namespace segvec3d;
using namespace segvec3d::io;
using testutil::error_kind;
namespace fs = std::filesystem;

namespace {

// Colors on the 0-255 grid so they survive the byte encoding exactly.
geometry::PointCloud sample_cloud(std::size_t n, Rng& rng) {
  geometry::PointCloud c;
  c.colors.emplace();
  c.instance_labels.emplace();
  for (std::size_t i = 0; i < n; ++i) {
    c.positions.push_back({rng.normal(), 1e-7 * rng.normal(), 1e5 * rng.uniform()});
    c.colors->push_back({static_cast<double>(rng.index(256)) / 255.0, static_cast<double>(rng.index(256)) / 255.0,
                         static_cast<double>(rng.index(256)) / 255.0});
    c.instance_labels->push_back(static_cast<int>(rng.index(4)) - 1);
  }
  c.instance_labels->at(0) = 2;
  return c;
}

std::string error_message(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("segvec3d_io_" + std::to_string(::getpid()))) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("PLY: format then parse reproduces positions, colors and labels exactly") {
  Rng rng(1);
  const auto c = sample_cloud(50, rng);
  CHECK(parse_ply(format_ply(c)) == c);
  geometry::PointCloud bare;
  bare.positions = c.positions;
  CHECK(parse_ply(format_ply(bare)) == bare);
}

TEST_CASE("CSV: format then parse reproduces positions, colors and labels exactly") {
  Rng rng(2);
  const auto c = sample_cloud(50, rng);
  const std::string text = format_csv(c);
  CHECK(text.rfind("x,y,z,r,g,b,instance\n", 0) == 0);
  CHECK(parse_csv(text) == c);
}

TEST_CASE("PLY and CSV: extra integer columns are written and ignored on read") {
  Rng rng(3);
  const auto c = sample_cloud(5, rng);
  const std::vector<IntColumn> extra{{"selected", {1, 0, 0, 1, 0}}};
  const std::string ply = format_ply(c, extra);
  CHECK(ply.find("property int selected") != std::string::npos);
  CHECK(parse_ply(ply) == c);
  CHECK(format_csv(c, extra).find(",selected\n") != std::string::npos);
  CHECK(parse_csv(format_csv(c, extra)) == c);
}

TEST_CASE("PLY: NaN and infinity are rejected with the line number") {
  const std::string good = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                           "property float z\nend_header\n0 0 0\n";
  CHECK(parse_ply(good + "1 2 3\n").size() == 2);
  const std::string msg = error_message([&] { parse_ply(good + "1 nan 3\n"); });
  CHECK(msg.find("line 9") != std::string::npos);
  CHECK(error_kind([&] { parse_ply(good + "1 2 inf\n"); }) == ErrorKind::kInvalidData);
  CHECK(error_kind([&] { parse_ply(good); }) == ErrorKind::kParse);
  CHECK(error_kind([&] { parse_ply("plx\n"); }) == ErrorKind::kParse);
}

TEST_CASE("CSV: NaN and infinity are rejected with the line number") {
  const std::string msg = error_message([] { parse_csv("x,y,z\n0,0,0\n1,2,3\n4,-inf,6\n"); });
  CHECK(msg.find("line 4") != std::string::npos);
  CHECK(error_kind([] { parse_csv("x,y,z\nNaN,0,0\n"); }) == ErrorKind::kInvalidData);
  CHECK(error_kind([] { parse_csv("x,y,z\n1,2\n"); }) == ErrorKind::kParse);
  CHECK(error_kind([] { parse_csv("x,y,z,r,g,b\n1,2,3,300,0,0\n"); }) == ErrorKind::kInvalidData);
}

TEST_CASE("categories: sidecar text round trip and path naming") {
  const std::map<int, std::string> cats{{0, "floor"}, {1, "wall"}, {2, "trash bin"}};
  CHECK(parse_categories(format_categories(cats)) == cats);
  CHECK(sidecar_path("/data/scene_003.ply") == "/data/scene_003.categories.tsv");
  CHECK(error_kind([] { parse_categories("0\tfloor\n0\twall\n"); }) == ErrorKind::kParse);
}

TEST_CASE("read_scene: picks up the sidecar and validates it") {
  TempDir dir;
  Rng rng(4);
  auto c = sample_cloud(10, rng);
  c.category_names = {{2, "lamp"}};
  const std::string path = (dir.path / "s.ply").string();
  write_ply(path, c);
  write_categories(sidecar_path(path), c.category_names);
  CHECK(read_scene(path) == c);
  write_categories(sidecar_path(path), {{9, "ghost"}});
  CHECK(error_kind([&] { read_scene(path); }) == ErrorKind::kInvalidData);
}

TEST_CASE("write_file_atomic: replaces the file and leaves no temporaries") {
  TempDir dir;
  const std::string path = (dir.path / "sub" / "out.txt").string();
  write_file_atomic(path, "first");
  write_file_atomic(path, "second");
  CHECK(read_file(path) == "second");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir.path)) files += e.is_regular_file();
  CHECK(files == 1);
  CHECK(error_kind([] { read_file("/nonexistent/segvec3d/file"); }) == ErrorKind::kIo);
}

TEST_CASE("format_double: shortest text that parses back to the same bits") {
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.normal() * std::pow(10.0, static_cast<double>(rng.index(40)) - 20.0);
    CHECK(parse_double(format_double(v)) == v);
  }
  CHECK(format_double(0.1) == "0.1");
  CHECK(error_kind([] { parse_double("1.5x"); }) == ErrorKind::kInvalidData);
  CHECK(error_kind([] { parse_double(""); }) == ErrorKind::kInvalidData);
}
