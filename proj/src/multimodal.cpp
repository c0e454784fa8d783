#include "segvec3d/multimodal.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "segvec3d/error.hpp"
#include "segvec3d/io.hpp"
#include "segvec3d/random.hpp"

namespace segvec3d::multimodal {

std::string normalize_phrase(std::string_view phrase) {
  std::size_t b = 0;
  std::size_t e = phrase.size();
  while (b < e && std::isspace(static_cast<unsigned char>(phrase[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(phrase[e - 1]))) --e;
  std::string out(phrase.substr(b, e - b));
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::vector<std::string> TextEmbeddingTable::phrases() const {
  std::vector<std::string> out;
  for (const auto& [phrase, v] : entries_) out.push_back(phrase);
  return out;
}

void TextEmbeddingTable::add(std::string_view phrase, std::vector<double> vector) {
  const std::string key = normalize_phrase(phrase);
  require(!key.empty(), ErrorKind::kInvalidArgument, "empty phrase");
  require(key.find('"') == std::string::npos && key.find('\t') == std::string::npos &&
              key.find('\n') == std::string::npos,
          ErrorKind::kInvalidArgument, "phrase contains a quote, tab or newline");
  require(vector.size() == dim_, ErrorKind::kInvalidArgument,
          "vector for '" + key + "' has dimension " + std::to_string(vector.size()) + ", expected " +
              std::to_string(dim_));
  for (double v : vector) require(std::isfinite(v), ErrorKind::kInvalidArgument, "non-finite text vector");
  auto [it, inserted] = entries_.try_emplace(key, std::move(vector));
  require(inserted, ErrorKind::kInvalidArgument, "duplicate phrase '" + key + "'");
}

const std::vector<double>* TextEmbeddingTable::find(std::string_view phrase) const {
  auto it = entries_.find(normalize_phrase(phrase));
  return it == entries_.end() ? nullptr : &it->second;
}

namespace {

constexpr std::string_view kTableMagic = "segvec3d-textemb v1 dim=";

[[noreturn]] void table_error(std::size_t line, const std::string& message) {
  fail(ErrorKind::kParse, "text table line " + std::to_string(line) + ": " + message);
}

}  // namespace

TextEmbeddingTable parse_text_table(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) table_error(1, "missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.rfind(kTableMagic, 0) != 0) table_error(1, "bad header '" + line + "'");
  std::size_t dim = 0;
  const std::string_view dim_text = std::string_view(line).substr(kTableMagic.size());
  auto [ptr, ec] = std::from_chars(dim_text.data(), dim_text.data() + dim_text.size(), dim);
  if (ec != std::errc() || ptr != dim_text.data() + dim_text.size() || dim == 0) table_error(1, "bad dimension");

  TextEmbeddingTable table(dim);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() != '"') table_error(line_no, "phrase must be double-quoted");
    const std::size_t close = line.find('"', 1);
    if (close == std::string::npos) table_error(line_no, "unterminated phrase");
    if (close + 1 >= line.size() || line[close + 1] != '\t') table_error(line_no, "expected a tab after the phrase");
    const std::string phrase = line.substr(1, close - 1);
    std::vector<double> values;
    try {
      values = io::parse_doubles(std::string_view(line).substr(close + 2), ' ');
    } catch (const Error& e) {
      table_error(line_no, e.what());
    }
    if (values.size() != dim) {
      table_error(line_no, "expected " + std::to_string(dim) + " values, found " + std::to_string(values.size()));
    }
    if (table.find(phrase) != nullptr) table_error(line_no, "duplicate phrase '" + normalize_phrase(phrase) + "'");
    try {
      table.add(phrase, std::move(values));
    } catch (const Error& e) {
      table_error(line_no, e.what());
    }
  }
  return table;
}

TextEmbeddingTable load_text_table(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path);
  return parse_text_table(in);
}

void write_text_table(std::ostream& out, const TextEmbeddingTable& table) {
  out << kTableMagic << table.dim() << '\n';
  for (const auto& [phrase, v] : table.entries()) {
    out << '"' << phrase << "\"\t";
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i > 0) out << ' ';
      out << io::format_double(v[i]);
    }
    out << '\n';
  }
}

void save_text_table(const std::string& path, const TextEmbeddingTable& table) {
  std::ostringstream buffer;
  write_text_table(buffer, table);
  io::write_file_atomic(path, buffer.str());
}

void JointSpaceModel::validate() const {
  require(tau > 0.0 && std::isfinite(tau), ErrorKind::kInvalidArgument, "temperature must be positive");
  require(w3d.rows() == wtxt.rows() && w3d.rows() > 0, ErrorKind::kInvalidArgument,
          "projections must share the joint dimension");
  require(table.size() == 0 || table.dim() == wtxt.cols(), ErrorKind::kInvalidArgument,
          "text projection does not match the table dimension");
  nn::validate_finite(w3d, "3D projection");
  nn::validate_finite(wtxt, "text projection");
}

JointSpaceModel init_joint_model(std::size_t feature_dim, std::size_t text_dim, std::size_t joint_dim, double tau,
                                 std::uint64_t seed) {
  require(feature_dim > 0 && text_dim > 0 && joint_dim > 0, ErrorKind::kInvalidArgument,
          "joint space dimensions must be positive");
  Rng rng(seed);
  JointSpaceModel model;
  model.tau = tau;
  auto fill = [&rng](Matrix& m) {
    const double limit = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
    for (double& v : m.values()) v = rng.uniform(-limit, limit);
  };
  model.w3d = Matrix(joint_dim, feature_dim);
  model.wtxt = Matrix(joint_dim, text_dim);
  fill(model.w3d);
  fill(model.wtxt);
  model.table = TextEmbeddingTable(text_dim);
  return model;
}

InstanceDescriptor pool_instance(const Matrix& features, std::span<const std::size_t> members,
                                 std::string source_scene) {
  require(!members.empty(), ErrorKind::kInvalidArgument, "instance has no members");
  InstanceDescriptor desc;
  desc.u.assign(features.cols(), 0.0);
  for (std::size_t m : members) {
    require(m < features.rows(), ErrorKind::kInvalidArgument, "member index out of range");
    const auto row = features.row(m);
    for (std::size_t c = 0; c < row.size(); ++c) desc.u[c] += row[c];
  }
  for (double& v : desc.u) v /= static_cast<double>(members.size());
  const double norm = nn::norm2(desc.u);
  require(norm >= 1e-12, ErrorKind::kDegenerateInstance, "mean instance feature is zero");
  for (double& v : desc.u) v /= norm;
  desc.members.assign(members.begin(), members.end());
  desc.source_scene = std::move(source_scene);
  return desc;
}

namespace {

std::vector<double> mat_vec(const Matrix& w, std::span<const double> x) {
  require(w.cols() == x.size(), ErrorKind::kInvalidArgument,
          "projection expects dimension " + std::to_string(w.cols()) + ", got " + std::to_string(x.size()));
  std::vector<double> out(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) out[r] = nn::dot(w.row(r), x);
  return out;
}

void normalize(std::vector<double>& v) {
  const double norm = nn::norm2(v);
  if (norm > 0.0)
    for (double& x : v) x /= norm;
}

}  // namespace

std::vector<double> project_3d(const InstanceDescriptor& desc, const JointSpaceModel& model) {
  return mat_vec(model.w3d, desc.u);
}

std::vector<double> project_text(std::span<const double> text, const JointSpaceModel& model) {
  return mat_vec(model.wtxt, text);
}

std::vector<std::string> tokenize(std::string_view phrase) {
  std::vector<std::string> tokens;
  std::istringstream in(normalize_phrase(phrase));
  std::string token;
  while (in >> token) tokens.push_back(token);
  return tokens;
}

std::vector<double> hash_token_vector(std::string_view token, std::size_t dim) {
  Rng rng(mix_seed(fnv1a64(token), 0x5e93d3dULL));
  std::vector<double> v(dim);
  for (double& x : v) x = rng.normal();
  normalize(v);
  return v;
}

std::vector<double> encode_text(std::string_view phrase, const TextEmbeddingTable& table) {
  const std::string key = normalize_phrase(phrase);
  require(!key.empty(), ErrorKind::kInvalidArgument, "empty phrase");
  require(table.dim() > 0, ErrorKind::kInvalidArgument, "text table has no dimension");
  if (const auto* hit = table.find(key)) {
    std::vector<double> v = *hit;
    normalize(v);
    return v;
  }
  std::vector<double> sum(table.dim(), 0.0);
  const auto tokens = tokenize(key);
  for (const auto& token : tokens) {
    const auto v = hash_token_vector(token, table.dim());
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += v[i];
  }
  for (double& x : sum) x /= static_cast<double>(tokens.size());
  normalize(sum);
  return sum;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = nn::norm2(a);
  const double nb = nn::norm2(b);
  require(na > 0.0 && nb > 0.0, ErrorKind::kDegenerateEmbedding, "cosine of a zero vector");
  return nn::dot(a, b) / (na * nb);
}

InfoNceResult infonce_loss(const Matrix& shapes, const Matrix& text, double tau) {
  const std::size_t b = shapes.rows();
  const std::size_t d = shapes.cols();
  require(b >= 2, ErrorKind::kInvalidArgument, "InfoNCE needs a batch of at least 2");
  require(text.rows() == b && text.cols() == d, ErrorKind::kInvalidArgument, "InfoNCE batches differ in shape");
  require(tau > 0.0, ErrorKind::kInvalidArgument, "temperature must be positive");

  auto unit_rows = [b, d](const Matrix& m, std::vector<double>& norms) {
    Matrix out(b, d);
    norms.resize(b);
    for (std::size_t i = 0; i < b; ++i) {
      norms[i] = nn::norm2(m.row(i));
      require(norms[i] > 0.0, ErrorKind::kDegenerateEmbedding, "zero vector in InfoNCE batch");
      for (std::size_t c = 0; c < d; ++c) out(i, c) = m(i, c) / norms[i];
    }
    return out;
  };
  std::vector<double> norm_x;
  std::vector<double> norm_t;
  const Matrix x = unit_rows(shapes, norm_x);
  const Matrix t = unit_rows(text, norm_t);

  Matrix logits(b, b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) logits(i, j) = nn::dot(x.row(i), t.row(j)) / tau;

  // dlogits = 1/(2B) [(softmax_rows - I) + (softmax_cols - I)]
  const double inv_b = 1.0 / static_cast<double>(b);
  Matrix d_logits(b, b);
  double loss = 0.0;
  std::vector<double> column(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto p = nn::softmax(logits.row(i));
    loss -= std::log(p[i]);
    for (std::size_t j = 0; j < b; ++j) d_logits(i, j) += 0.5 * inv_b * (p[j] - (i == j ? 1.0 : 0.0));
  }
  for (std::size_t j = 0; j < b; ++j) {
    for (std::size_t i = 0; i < b; ++i) column[i] = logits(i, j);
    const auto p = nn::softmax(column);
    loss -= std::log(p[j]);
    for (std::size_t i = 0; i < b; ++i) d_logits(i, j) += 0.5 * inv_b * (p[i] - (i == j ? 1.0 : 0.0));
  }

  InfoNceResult result;
  result.loss = 0.5 * inv_b * loss;

  // Back through the cosine: d(v/|v|) -> (g - v_hat (v_hat . g)) / |v|.
  Matrix dx(b, d);
  Matrix dt(b, d);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      const double g = d_logits(i, j) / tau;
      for (std::size_t c = 0; c < d; ++c) {
        dx(i, c) += g * t(j, c);
        dt(j, c) += g * x(i, c);
      }
    }
  }
  auto through_norm = [b, d](const Matrix& unit, const Matrix& grad_unit, const std::vector<double>& norms) {
    Matrix out(b, d);
    for (std::size_t i = 0; i < b; ++i) {
      const double proj = nn::dot(unit.row(i), grad_unit.row(i));
      for (std::size_t c = 0; c < d; ++c) out(i, c) = (grad_unit(i, c) - unit(i, c) * proj) / norms[i];
    }
    return out;
  };
  result.grad_3d = through_norm(x, dx, norm_x);
  result.grad_text = through_norm(t, dt, norm_t);
  return result;
}

LabelResult zero_shot_label(const InstanceDescriptor& desc, std::span<const std::string> candidates,
                            const JointSpaceModel& model) {
  require(!candidates.empty(), ErrorKind::kInvalidArgument, "no candidate phrases");
  const auto v = project_3d(desc, model);
  require(nn::norm2(v) > 0.0, ErrorKind::kDegenerateEmbedding, "projected instance vector is zero");
  LabelResult result;
  result.scores.reserve(candidates.size());
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const auto vt = project_text(encode_text(candidates[c], model.table), model);
    result.scores.push_back(cosine(v, vt));
    if (result.scores[c] > result.scores[result.best]) result.best = c;
  }
  result.phrase = normalize_phrase(candidates[result.best]);
  return result;
}

std::vector<RankedInstance> retrieve_by_vector(std::span<const double> query_joint,
                                               std::span<const InstanceDescriptor> instances,
                                               const JointSpaceModel& model) {
  require(!instances.empty(), ErrorKind::kInvalidArgument, "no instances to rank");
  require(nn::norm2(query_joint) > 0.0, ErrorKind::kDegenerateEmbedding, "projected query is zero");
  std::vector<RankedInstance> ranked;
  ranked.reserve(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    ranked.push_back({i, cosine(project_3d(instances[i], model), query_joint)});
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const RankedInstance& a, const RankedInstance& b) { return a.score > b.score; });
  return ranked;
}

std::vector<RankedInstance> retrieve(std::string_view query, std::span<const InstanceDescriptor> instances,
                                     const JointSpaceModel& model) {
  const auto q = project_text(encode_text(query, model.table), model);
  return retrieve_by_vector(q, instances, model);
}

}  // namespace segvec3d::multimodal
