#pragma once

// Shared 3D/text space: instance pooling, linear modality projections,
// symmetric in-batch InfoNCE, zero-shot labeling and text-query retrieval.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "segvec3d/nn.hpp"
#include "segvec3d/segnet.hpp"

namespace segvec3d::multimodal {

using nn::Matrix;

struct InstanceDescriptor {
  std::vector<double> u;  // unit-norm mean of member features
  std::vector<std::size_t> members;
  std::string source_scene;
};

// Lowercased, trimmed phrase -> vector of dimension `dim`.
class TextEmbeddingTable {
 public:
  TextEmbeddingTable() = default;
  explicit TextEmbeddingTable(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::map<std::string, std::vector<double>>& entries() const noexcept { return entries_; }
  std::vector<std::string> phrases() const;

  // Throws invalid-argument on duplicates, wrong dimension or non-finite values.
  void add(std::string_view phrase, std::vector<double> vector);
  const std::vector<double>* find(std::string_view phrase) const;

  bool operator==(const TextEmbeddingTable&) const = default;

 private:
  std::size_t dim_ = 0;
  std::map<std::string, std::vector<double>> entries_;
};

std::string normalize_phrase(std::string_view phrase);

// Header `segvec3d-textemb v1 dim=<d>`, then `"<phrase>"<TAB><d decimals>` per line.
TextEmbeddingTable parse_text_table(std::istream& in);
TextEmbeddingTable load_text_table(const std::string& path);
void write_text_table(std::ostream& out, const TextEmbeddingTable& table);
void save_text_table(const std::string& path, const TextEmbeddingTable& table);

struct JointSpaceModel {
  Matrix w3d;   // d_v x d_f
  Matrix wtxt;  // d_v x d_t
  double tau = 0.07;
  TextEmbeddingTable table;

  std::size_t joint_dim() const noexcept { return w3d.rows(); }
  void validate() const;
  bool operator==(const JointSpaceModel&) const = default;
};

JointSpaceModel init_joint_model(std::size_t feature_dim, std::size_t text_dim, std::size_t joint_dim, double tau,
                                 std::uint64_t seed);

InstanceDescriptor pool_instance(const Matrix& features, std::span<const std::size_t> members,
                                 std::string source_scene = {});

std::vector<double> project_3d(const InstanceDescriptor& desc, const JointSpaceModel& model);
std::vector<double> project_text(std::span<const double> text, const JointSpaceModel& model);

// Table lookup, otherwise the hash encoder; always unit norm.
std::vector<double> encode_text(std::string_view phrase, const TextEmbeddingTable& table);
// Deterministic gaussian direction for one token, unit norm.
std::vector<double> hash_token_vector(std::string_view token, std::size_t dim);
std::vector<std::string> tokenize(std::string_view phrase);

double cosine(std::span<const double> a, std::span<const double> b);

struct InfoNceResult {
  double loss = 0.0;
  Matrix grad_3d;
  Matrix grad_text;
};

// Row i of `text` is the positive for row i of `shapes`; every other row is a negative.
InfoNceResult infonce_loss(const Matrix& shapes, const Matrix& text, double tau);

struct LabelResult {
  std::size_t best = 0;
  std::string phrase;
  std::vector<double> scores;
};

LabelResult zero_shot_label(const InstanceDescriptor& desc, std::span<const std::string> candidates,
                            const JointSpaceModel& model);

struct RankedInstance {
  std::size_t index;
  double score;
};

std::vector<RankedInstance> retrieve(std::string_view query, std::span<const InstanceDescriptor> instances,
                                     const JointSpaceModel& model);
std::vector<RankedInstance> retrieve_by_vector(std::span<const double> query_joint,
                                               std::span<const InstanceDescriptor> instances,
                                               const JointSpaceModel& model);

}  // namespace segvec3d::multimodal
