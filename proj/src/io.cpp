#include "segvec3d/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "segvec3d/error.hpp"

namespace segvec3d::io {

namespace fs = std::filesystem;

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

double parse_double(std::string_view token) {
  while (!token.empty() && (token.front() == ' ' || token.front() == '\t')) token.remove_prefix(1);
  while (!token.empty() && (token.back() == ' ' || token.back() == '\t' || token.back() == '\r')) {
    token.remove_suffix(1);
  }
  if (!token.empty() && token.front() == '+') token.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
  if (ec != std::errc() || ptr != token.data() + token.size() || token.empty()) {
    fail(ErrorKind::kInvalidData, "malformed number '" + std::string(token) + "'");
  }
  if (!std::isfinite(v)) fail(ErrorKind::kInvalidData, "non-finite value '" + std::string(token) + "'");
  return v;
}

std::vector<double> parse_doubles(std::string_view text, char separator) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find(separator, start);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view token = text.substr(start, end - start);
    if (!(separator == ' ' && token.empty())) out.push_back(parse_double(token));
    start = end + 1;
  }
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, std::string_view contents) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp);
      fail(ErrorKind::kIo, "write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    fail(ErrorKind::kIo, "cannot rename into " + path + ": " + ec.message());
  }
}

namespace {

class LineReader {
 public:
  explicit LineReader(std::string_view text) : text_(text) {}

  bool next(std::string_view& line) {
    if (pos_ >= text_.size()) return false;
    std::size_t end = text_.find('\n', pos_);
    if (end == std::string_view::npos) end = text_.size();
    line = text_.substr(pos_, end - pos_);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    pos_ = end + 1;
    ++line_no_;
    return true;
  }

  std::size_t line_no() const { return line_no_; }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
  std::size_t line_no_ = 0;
};

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

std::vector<std::string_view> split_char(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t end = line.find(sep, start);
    out.push_back(line.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start));
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return out;
}

[[noreturn]] void line_error(ErrorKind kind, const std::string& file_kind, std::size_t line, const std::string& what) {
  fail(kind, file_kind + " line " + std::to_string(line) + ": " + what);
}

double field_double(std::string_view token, const std::string& file_kind, std::size_t line) {
  try {
    return parse_double(token);
  } catch (const Error& e) {
    line_error(e.kind(), file_kind, line, e.what());
  }
}

int field_int(std::string_view token, const std::string& file_kind, std::size_t line) {
  const double v = field_double(token, file_kind, line);
  if (v != std::floor(v) || std::abs(v) > 2e9) line_error(ErrorKind::kInvalidData, file_kind, line, "not an integer");
  return static_cast<int>(v);
}

double color_from_byte(int v, const std::string& file_kind, std::size_t line) {
  if (v < 0 || v > 255) line_error(ErrorKind::kInvalidData, file_kind, line, "color outside 0-255");
  return static_cast<double>(v) / 255.0;
}

int color_to_byte(double c) { return static_cast<int>(std::lround(std::clamp(c, 0.0, 1.0) * 255.0)); }

void check_extra(const geometry::PointCloud& cloud, const std::vector<IntColumn>& extra) {
  for (const auto& col : extra) {
    require(col.values.size() == cloud.size(), ErrorKind::kInvalidArgument,
            "column '" + col.name + "' has the wrong length");
  }
}

}  // namespace

geometry::PointCloud parse_ply(std::string_view text) {
  const std::string kind = "PLY";
  LineReader reader(text);
  std::string_view line;
  if (!reader.next(line) || line != "ply") line_error(ErrorKind::kParse, kind, 1, "missing 'ply' magic");

  std::size_t vertex_count = 0;
  bool in_vertex = false;
  bool seen_vertex = false;
  std::vector<std::string> properties;
  bool header_done = false;
  while (reader.next(line)) {
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok[0] == "format") {
      if (tok.size() < 2 || tok[1] != "ascii") line_error(ErrorKind::kParse, kind, reader.line_no(), "only ASCII PLY");
    } else if (tok[0] == "comment" || tok[0] == "obj_info") {
      continue;
    } else if (tok[0] == "element") {
      if (tok.size() != 3) line_error(ErrorKind::kParse, kind, reader.line_no(), "malformed element");
      if (seen_vertex) line_error(ErrorKind::kParse, kind, reader.line_no(), "only a vertex element is supported");
      in_vertex = tok[1] == "vertex";
      if (!in_vertex) line_error(ErrorKind::kParse, kind, reader.line_no(), "only a vertex element is supported");
      seen_vertex = true;
      vertex_count = static_cast<std::size_t>(field_int(tok[2], kind, reader.line_no()));
    } else if (tok[0] == "property") {
      if (!in_vertex || tok.size() != 3) line_error(ErrorKind::kParse, kind, reader.line_no(), "malformed property");
      properties.emplace_back(tok[2]);
    } else if (tok[0] == "end_header") {
      header_done = true;
      break;
    } else {
      line_error(ErrorKind::kParse, kind, reader.line_no(), "unknown header line");
    }
  }
  if (!header_done) line_error(ErrorKind::kParse, kind, reader.line_no(), "missing end_header");

  auto index_of = [&properties](std::string_view name) -> int {
    auto it = std::find(properties.begin(), properties.end(), name);
    return it == properties.end() ? -1 : static_cast<int>(it - properties.begin());
  };
  const int ix = index_of("x"), iy = index_of("y"), iz = index_of("z");
  if (ix < 0 || iy < 0 || iz < 0) line_error(ErrorKind::kParse, kind, reader.line_no(), "x, y, z are required");
  const int ir = index_of("red"), ig = index_of("green"), ib = index_of("blue");
  const bool has_color = ir >= 0 && ig >= 0 && ib >= 0;
  const int il = index_of("instance");

  geometry::PointCloud cloud;
  cloud.positions.reserve(vertex_count);
  if (has_color) cloud.colors.emplace();
  if (il >= 0) cloud.instance_labels.emplace();
  for (std::size_t v = 0; v < vertex_count; ++v) {
    if (!reader.next(line)) line_error(ErrorKind::kParse, kind, reader.line_no() + 1, "unexpected end of file");
    const auto tok = split_ws(line);
    const std::size_t ln = reader.line_no();
    if (tok.size() != properties.size()) {
      line_error(ErrorKind::kParse, kind, ln,
                 "expected " + std::to_string(properties.size()) + " values, found " + std::to_string(tok.size()));
    }
    cloud.positions.push_back({field_double(tok[static_cast<std::size_t>(ix)], kind, ln),
                               field_double(tok[static_cast<std::size_t>(iy)], kind, ln),
                               field_double(tok[static_cast<std::size_t>(iz)], kind, ln)});
    if (has_color) {
      cloud.colors->push_back({color_from_byte(field_int(tok[static_cast<std::size_t>(ir)], kind, ln), kind, ln),
                               color_from_byte(field_int(tok[static_cast<std::size_t>(ig)], kind, ln), kind, ln),
                               color_from_byte(field_int(tok[static_cast<std::size_t>(ib)], kind, ln), kind, ln)});
    }
    if (il >= 0) cloud.instance_labels->push_back(field_int(tok[static_cast<std::size_t>(il)], kind, ln));
  }
  while (reader.next(line)) {
    if (!split_ws(line).empty()) line_error(ErrorKind::kParse, kind, reader.line_no(), "trailing data after vertices");
  }
  cloud.validate();
  return cloud;
}

std::string format_ply(const geometry::PointCloud& cloud, const std::vector<IntColumn>& extra) {
  check_extra(cloud, extra);
  std::ostringstream out;
  out << "ply\nformat ascii 1.0\nelement vertex " << cloud.size() << '\n';
  out << "property double x\nproperty double y\nproperty double z\n";
  if (cloud.colors) out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  if (cloud.instance_labels) out << "property int instance\n";
  for (const auto& col : extra) out << "property int " << col.name << '\n';
  out << "end_header\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.positions[i];
    out << format_double(p[0]) << ' ' << format_double(p[1]) << ' ' << format_double(p[2]);
    if (cloud.colors) {
      const auto& c = (*cloud.colors)[i];
      out << ' ' << color_to_byte(c[0]) << ' ' << color_to_byte(c[1]) << ' ' << color_to_byte(c[2]);
    }
    if (cloud.instance_labels) out << ' ' << (*cloud.instance_labels)[i];
    for (const auto& col : extra) out << ' ' << col.values[i];
    out << '\n';
  }
  return out.str();
}

geometry::PointCloud read_ply(const std::string& path) { return parse_ply(read_file(path)); }

void write_ply(const std::string& path, const geometry::PointCloud& cloud, const std::vector<IntColumn>& extra) {
  write_file_atomic(path, format_ply(cloud, extra));
}

geometry::PointCloud parse_csv(std::string_view text) {
  const std::string kind = "CSV";
  LineReader reader(text);
  std::string_view line;
  if (!reader.next(line)) line_error(ErrorKind::kParse, kind, 1, "missing header");
  std::vector<std::string> columns;
  for (auto c : split_char(line, ',')) {
    while (!c.empty() && c.front() == ' ') c.remove_prefix(1);
    while (!c.empty() && c.back() == ' ') c.remove_suffix(1);
    columns.emplace_back(c);
  }
  auto index_of = [&columns](std::string_view name) -> int {
    auto it = std::find(columns.begin(), columns.end(), name);
    return it == columns.end() ? -1 : static_cast<int>(it - columns.begin());
  };
  if (index_of("x") != 0 || index_of("y") != 1 || index_of("z") != 2) {
    line_error(ErrorKind::kParse, kind, 1, "header must start with x,y,z");
  }
  const int ir = index_of("r"), ig = index_of("g"), ib = index_of("b");
  const bool has_color = ir >= 0 && ig >= 0 && ib >= 0;
  const int il = index_of("instance");

  geometry::PointCloud cloud;
  if (has_color) cloud.colors.emplace();
  if (il >= 0) cloud.instance_labels.emplace();
  while (reader.next(line)) {
    if (line.empty()) continue;
    const std::size_t ln = reader.line_no();
    const auto tok = split_char(line, ',');
    if (tok.size() != columns.size()) {
      line_error(ErrorKind::kParse, kind, ln,
                 "expected " + std::to_string(columns.size()) + " fields, found " + std::to_string(tok.size()));
    }
    cloud.positions.push_back(
        {field_double(tok[0], kind, ln), field_double(tok[1], kind, ln), field_double(tok[2], kind, ln)});
    if (has_color) {
      cloud.colors->push_back({color_from_byte(field_int(tok[static_cast<std::size_t>(ir)], kind, ln), kind, ln),
                               color_from_byte(field_int(tok[static_cast<std::size_t>(ig)], kind, ln), kind, ln),
                               color_from_byte(field_int(tok[static_cast<std::size_t>(ib)], kind, ln), kind, ln)});
    }
    if (il >= 0) cloud.instance_labels->push_back(field_int(tok[static_cast<std::size_t>(il)], kind, ln));
  }
  cloud.validate();
  return cloud;
}

std::string format_csv(const geometry::PointCloud& cloud, const std::vector<IntColumn>& extra) {
  check_extra(cloud, extra);
  std::ostringstream out;
  out << "x,y,z";
  if (cloud.colors) out << ",r,g,b";
  if (cloud.instance_labels) out << ",instance";
  for (const auto& col : extra) out << ',' << col.name;
  out << '\n';
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.positions[i];
    out << format_double(p[0]) << ',' << format_double(p[1]) << ',' << format_double(p[2]);
    if (cloud.colors) {
      const auto& c = (*cloud.colors)[i];
      out << ',' << color_to_byte(c[0]) << ',' << color_to_byte(c[1]) << ',' << color_to_byte(c[2]);
    }
    if (cloud.instance_labels) out << ',' << (*cloud.instance_labels)[i];
    for (const auto& col : extra) out << ',' << col.values[i];
    out << '\n';
  }
  return out.str();
}

geometry::PointCloud read_csv(const std::string& path) { return parse_csv(read_file(path)); }

void write_csv(const std::string& path, const geometry::PointCloud& cloud, const std::vector<IntColumn>& extra) {
  write_file_atomic(path, format_csv(cloud, extra));
}

namespace {

bool is_ply(const std::string& path) {
  std::string ext = fs::path(path).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".ply";
}

}  // namespace

geometry::PointCloud read_cloud(const std::string& path) { return is_ply(path) ? read_ply(path) : read_csv(path); }

void write_cloud(const std::string& path, const geometry::PointCloud& cloud, const std::vector<IntColumn>& extra) {
  if (is_ply(path)) {
    write_ply(path, cloud, extra);
  } else {
    write_csv(path, cloud, extra);
  }
}

std::map<int, std::string> parse_categories(std::string_view text) {
  const std::string kind = "category sidecar";
  std::map<int, std::string> out;
  LineReader reader(text);
  std::string_view line;
  while (reader.next(line)) {
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string_view::npos) line_error(ErrorKind::kParse, kind, reader.line_no(), "expected id<TAB>phrase");
    const int id = field_int(line.substr(0, tab), kind, reader.line_no());
    const std::string phrase(line.substr(tab + 1));
    if (id < 0 || phrase.empty()) line_error(ErrorKind::kParse, kind, reader.line_no(), "bad entry");
    if (!out.emplace(id, phrase).second) line_error(ErrorKind::kParse, kind, reader.line_no(), "duplicate id");
  }
  return out;
}

std::map<int, std::string> read_categories(const std::string& path) { return parse_categories(read_file(path)); }

std::string format_categories(const std::map<int, std::string>& categories) {
  std::ostringstream out;
  for (const auto& [id, phrase] : categories) out << id << '\t' << phrase << '\n';
  return out.str();
}

void write_categories(const std::string& path, const std::map<int, std::string>& categories) {
  write_file_atomic(path, format_categories(categories));
}

std::string sidecar_path(const std::string& cloud_path) {
  fs::path p(cloud_path);
  p.replace_extension(".categories.tsv");
  return p.string();
}

geometry::PointCloud read_scene(const std::string& path) {
  geometry::PointCloud cloud = read_cloud(path);
  const std::string side = sidecar_path(path);
  if (fs::exists(side)) {
    cloud.category_names = read_categories(side);
    cloud.validate();
  }
  return cloud;
}

}  // namespace segvec3d::io
