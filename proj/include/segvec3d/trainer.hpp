#pragma once

// Phase 1 trains the segmentation network with the pull-push loss on sparse
// instance labels; phase 2 fits the 3D/text projections with InfoNCE.
// Checkpoints are little-endian binary; see docs/checkpoint_format.md.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "segvec3d/clustering.hpp"
#include "segvec3d/error.hpp"
#include "segvec3d/geometry.hpp"
#include "segvec3d/multimodal.hpp"
#include "segvec3d/segnet.hpp"

namespace segvec3d::train {

struct TrainConfig {
  segnet::SegNetConfig net;
  double margin = 1.0;
  std::size_t pair_budget = 2000;
  double label_fraction = 0.05;
  double learning_rate = 1e-3;
  std::size_t epochs = 60;
  std::size_t batch_scenes = 1;
  std::uint64_t seed = 7;
  double clip_norm = 10.0;

  double tau = 0.07;
  std::size_t joint_dim = 32;
  std::size_t align_epochs = 40;
  std::size_t align_batch = 8;
  double align_learning_rate = 1e-3;
  bool fine_tune_backbone = false;

  void validate() const;
  // Flat `key = value` view; keys are stable and used by config files and CLI flags.
  std::map<std::string, std::string> to_map() const;
  void set(const std::string& key, const std::string& value);
  static std::vector<std::string> keys();

  bool operator==(const TrainConfig&) const = default;
};

// `key = value` lines, `#` comments; unknown keys are a parse error.
TrainConfig parse_config(std::string_view text, TrainConfig base = {});
TrainConfig load_config(const std::string& path, TrainConfig base = {});
std::string format_config(const TrainConfig& config);

struct MetricRecord {
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<double> ari;
  bool operator==(const MetricRecord&) const = default;
};

struct Checkpoint {
  TrainConfig config;
  segnet::SegNetParams segnet;
  std::optional<multimodal::JointSpaceModel> joint;
  std::vector<MetricRecord> history;
  std::vector<MetricRecord> align_history;

  bool operator==(const Checkpoint&) const = default;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Checkpoint& ckpt);
// Throws parse-error with a byte offset, or unsupported-version.
Checkpoint deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::string history_csv(std::span<const MetricRecord> history);

// Non-finite loss; carries the state before the failing step.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& message, std::shared_ptr<Checkpoint> last_good)
      : Error(ErrorKind::kTrainingDiverged, message), last_good_(std::move(last_good)) {}
  const std::shared_ptr<Checkpoint>& last_good() const noexcept { return last_good_; }

 private:
  std::shared_ptr<Checkpoint> last_good_;
};

using StepCallback = std::function<void(const MetricRecord&)>;

Checkpoint train_segnet(const TrainConfig& config, std::span<const geometry::PointCloud> scenes,
                        const StepCallback& on_step = {});

Checkpoint train_alignment(const TrainConfig& config, const Checkpoint& base,
                           std::span<const geometry::PointCloud> scenes, const multimodal::TextEmbeddingTable& table,
                           const StepCallback& on_step = {});

enum class Clusterer { kRadius, kDbscan, kMeanShift };

struct ClusterOptions {
  Clusterer kind = Clusterer::kRadius;
  // Zero selects the margin-derived default (m / 2).
  double radius = 0.0;
  double eps = 0.0;
  std::size_t min_pts = 4;
  double bandwidth = 0.0;
};

clustering::InstanceSegmentation cluster_embeddings(const nn::Matrix& embeddings, const ClusterOptions& options,
                                                    double margin);

struct SegmentedScene {
  segnet::ForwardResult forward;
  clustering::InstanceSegmentation segmentation;
  std::vector<multimodal::InstanceDescriptor> instances;  // noise points are skipped
  std::vector<int> instance_ids;                          // segmentation id of each descriptor
};

SegmentedScene segment_scene(const Checkpoint& ckpt, const geometry::PointCloud& cloud,
                             const ClusterOptions& options = {}, const std::string& scene_name = {});

struct EmbeddingSeparation {
  double mean_intra = 0.0;          // mean pairwise distance within a true instance
  double mean_nearest_inter = 0.0;  // mean distance from an instance centroid to the nearest other one
};

EmbeddingSeparation embedding_separation(const nn::Matrix& embeddings, std::span<const int> truth);

// Majority true instance of each predicted instance descriptor.
std::vector<int> majority_truth(const SegmentedScene& scene, std::span<const int> truth);

struct AlignmentEval {
  std::size_t label_trials = 0;
  std::size_t label_correct = 0;
  std::size_t retrieval_trials = 0;
  std::size_t retrieval_correct = 0;
  double label_accuracy() const { return label_trials ? double(label_correct) / double(label_trials) : 0.0; }
  double retrieval_accuracy() const {
    return retrieval_trials ? double(retrieval_correct) / double(retrieval_trials) : 0.0;
  }
};

// Each trial draws a predicted instance whose majority true category is in the
// table. Labeling is correct if the top phrase is that category; retrieval
// queries the category within the instance's scene and is correct if the top
// instance's majority category matches. trials == 0 visits every instance once.
AlignmentEval evaluate_alignment(const Checkpoint& ckpt, std::span<const geometry::PointCloud> scenes,
                                 std::span<const SegmentedScene> segmented, std::size_t trials, std::uint64_t seed);

}  // namespace segvec3d::train
