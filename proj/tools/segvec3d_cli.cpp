// segvec3d command-line tool.
//
// Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric or training failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "segvec3d/data.hpp"
#include "segvec3d/gradcheck.hpp"
#include "segvec3d/io.hpp"
#include "segvec3d/multimodal.hpp"
#include "segvec3d/trainer.hpp"

namespace fs = std::filesystem;
using namespace segvec3d;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return kExitUsage;
    case ErrorKind::kTrainingDiverged:
    case ErrorKind::kDegenerateEmbedding:
    case ErrorKind::kInvalidState: return kExitNumeric;
    default: return kExitData;
  }
}

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

// Every config key becomes a `--kebab-case` flag with its default shown in help.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "Config file of `key = value` lines; flags override it");
    const auto defaults = train::TrainConfig{}.to_map();
    for (const auto& key : train::TrainConfig::keys()) {
      app->add_option("--" + dashed(key), values[key], "Config " + key)->default_str(defaults.at(key));
    }
  }

  train::TrainConfig resolve(const CLI::App* app) const {
    train::TrainConfig config;
    if (!config_path.empty()) config = train::load_config(config_path);
    for (const auto& [key, value] : values) {
      if (app->get_option("--" + dashed(key))->count() > 0) config.set(key, value);
    }
    config.validate();
    return config;
  }
};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(item.substr(b, item.find_last_not_of(" \t") - b + 1));
  }
  return out;
}

std::vector<std::string> scene_files(const std::string& dir) {
  require(fs::is_directory(dir), ErrorKind::kIo, "not a directory: " + dir);
  std::vector<std::string> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension().string();
    if (ext == ".ply" || ext == ".csv") out.push_back(entry.path().string());
  }
  std::sort(out.begin(), out.end());
  require(!out.empty(), ErrorKind::kInvalidData, "no .ply or .csv scenes in " + dir);
  return out;
}

std::vector<geometry::PointCloud> load_scenes(const std::vector<std::string>& files) {
  std::vector<geometry::PointCloud> out;
  for (const auto& f : files) out.push_back(io::read_scene(f));
  return out;
}

struct ClusterFlags {
  std::string kind = "radius";
  train::ClusterOptions options;

  void attach(CLI::App* app) {
    app->add_option("--clusterer", kind, "radius, dbscan or mean-shift")
        ->check(CLI::IsMember({"radius", "dbscan", "mean-shift"}))
        ->capture_default_str();
    app->add_option("--radius", options.radius, "Linkage radius; 0 uses margin / 2")->capture_default_str();
    app->add_option("--eps", options.eps, "DBSCAN eps; 0 uses margin / 2")->capture_default_str();
    app->add_option("--min-pts", options.min_pts, "DBSCAN core threshold, counting the point itself")
        ->capture_default_str();
    app->add_option("--bandwidth", options.bandwidth, "Mean-shift bandwidth; 0 uses margin / 2")
        ->capture_default_str();
  }

  train::ClusterOptions resolve() const {
    train::ClusterOptions out = options;
    out.kind = kind == "dbscan" ? train::Clusterer::kDbscan
               : kind == "mean-shift" ? train::Clusterer::kMeanShift
                                      : train::Clusterer::kRadius;
    return out;
  }
};

train::Checkpoint require_joint(const std::string& path) {
  train::Checkpoint ckpt = train::load_checkpoint(path);
  require(ckpt.joint.has_value(), ErrorKind::kInvalidArgument,
          "checkpoint has no alignment model; run train-align first");
  return ckpt;
}

train::StepCallback progress(std::size_t every) {
  return [every](const train::MetricRecord& r) {
    if (every > 0 && r.step % every == 0) std::cout << "step " << r.step << " loss " << r.loss << "\n" << std::flush;
  };
}

void save_with_history(const train::Checkpoint& ckpt, const std::string& out, const std::string& history_path,
                       bool alignment) {
  train::save_checkpoint(ckpt, out);
  if (!history_path.empty()) {
    io::write_file_atomic(history_path, train::history_csv(alignment ? ckpt.align_history : ckpt.history));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instance segmentation and text alignment for point clouds"};
  app.require_subcommand(1);
  app.get_formatter()->column_width(40);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate synthetic scenes with category sidecars");
  std::size_t synth_count = 13;
  std::string synth_dir;
  std::string synth_format = "ply";
  data::SceneSpec spec;
  synth->add_option("--count", synth_count, "Number of scenes")->capture_default_str();
  synth->add_option("--out-dir", synth_dir, "Output directory")->required();
  synth->add_option("--format", synth_format, "ply or csv")->check(CLI::IsMember({"ply", "csv"}))->capture_default_str();
  synth->add_option("--seed", spec.seed, "Seed of the first scene; scene i uses seed + i")->capture_default_str();
  synth->add_option("--min-objects", spec.min_objects, "Fewest objects per scene")->capture_default_str();
  synth->add_option("--max-objects", spec.max_objects, "Most objects per scene")->capture_default_str();
  synth->add_option("--min-points-per-object", spec.min_points_per_object, "Object point count lower bound")
      ->capture_default_str();
  synth->add_option("--max-points-per-object", spec.max_points_per_object, "Object point count upper bound")
      ->capture_default_str();
  synth->add_option("--object-point-density", spec.object_point_density,
                    "Object points per square meter; 0 draws counts uniformly from the range")
      ->capture_default_str();
  synth->add_option("--floor-points", spec.floor_points, "Floor points")->capture_default_str();
  synth->add_option("--wall-points", spec.wall_points, "Wall points")->capture_default_str();
  synth->add_option("--noise-sigma", spec.noise_sigma, "Gaussian position noise in meters")->capture_default_str();
  synth->add_option("--clearance", spec.clearance, "Minimum gap between object footprints")->capture_default_str();
  synth->add_option("--yaw-jitter", spec.yaw_jitter, "Yaw drawn from [-v, v]")->capture_default_str();

  // make-table
  auto* make_table = app.add_subcommand("make-table", "Write a near-orthogonal text embedding table");
  std::string table_out;
  std::string table_categories;
  std::size_t table_dim = 64;
  std::uint64_t table_seed = 0;
  make_table->add_option("--out", table_out, "Output table path")->required();
  make_table->add_option("--categories", table_categories,
                         "Comma-separated phrases; default is the synthetic object catalog");
  make_table->add_option("--dim", table_dim, "Embedding dimension")->capture_default_str();
  make_table->add_option("--seed", table_seed, "Seed")->capture_default_str();

  // train-seg
  auto* train_seg = app.add_subcommand("train-seg", "Train the segmentation network (phase 1)");
  ConfigFlags seg_config;
  std::string seg_data, seg_out, seg_history;
  std::size_t seg_log_every = 50;
  seg_config.attach(train_seg);
  train_seg->add_option("--data-dir", seg_data, "Directory of labeled training scenes")->required();
  train_seg->add_option("--out", seg_out, "Output checkpoint")->required();
  train_seg->add_option("--history", seg_history, "Optional CSV of per-step loss");
  train_seg->add_option("--log-every", seg_log_every, "Print the loss every N steps; 0 disables")
      ->capture_default_str();

  // segment
  auto* segment = app.add_subcommand("segment", "Segment a point cloud into instances");
  std::string segment_ckpt, segment_in, segment_out;
  ClusterFlags segment_cluster;
  segment->add_option("--checkpoint", segment_ckpt, "Checkpoint")->required();
  segment->add_option("--input", segment_in, "Input cloud (.ply or .csv)")->required();
  segment->add_option("--output", segment_out, "Output cloud with an `instance` column")->required();
  segment_cluster.attach(segment);

  // train-align
  auto* train_align = app.add_subcommand("train-align", "Train the 3D/text projections (phase 2)");
  ConfigFlags align_config;
  std::string align_ckpt, align_data, align_table, align_out, align_history;
  std::size_t align_log_every = 50;
  align_config.attach(train_align);
  train_align->add_option("--checkpoint", align_ckpt, "Phase-1 checkpoint")->required();
  train_align->add_option("--data-dir", align_data, "Directory of scenes with category sidecars")->required();
  train_align->add_option("--table", align_table, "Text embedding table")->required();
  train_align->add_option("--out", align_out, "Output checkpoint")->required();
  train_align->add_option("--history", align_history, "Optional CSV of per-step loss");
  train_align->add_option("--log-every", align_log_every, "Print the loss every N steps; 0 disables")
      ->capture_default_str();

  // label
  auto* label = app.add_subcommand("label", "Segment a cloud and name each instance");
  std::string label_ckpt, label_in, label_table;
  std::optional<std::string> label_candidates;
  ClusterFlags label_cluster;
  label->add_option("--checkpoint", label_ckpt, "Checkpoint with an alignment model")->required();
  label->add_option("--input", label_in, "Input cloud")->required();
  label->add_option("--candidates", label_candidates, "Comma-separated candidate phrases");
  label->add_option("--table", label_table, "Table whose phrases and vectors are the candidates");
  label_cluster.attach(label);

  // query
  auto* query = app.add_subcommand("query", "Find the instance best matching a phrase");
  std::string query_ckpt, query_in, query_text, query_out;
  std::size_t query_top = 1;
  ClusterFlags query_cluster;
  query->add_option("--checkpoint", query_ckpt, "Checkpoint with an alignment model")->required();
  query->add_option("--input", query_in, "Input cloud")->required();
  query->add_option("--query", query_text, "Query phrase")->required();
  query->add_option("--top-n", query_top, "Instances to list")->capture_default_str();
  query->add_option("--output", query_out, "Cloud with a `selected` column marking the top instance");
  query_cluster.attach(query);

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on held-out labeled scenes");
  std::string eval_ckpt, eval_data, eval_report;
  ClusterFlags eval_cluster;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint")->required();
  eval->add_option("--data-dir", eval_data, "Directory of labeled scenes with category sidecars")->required();
  eval->add_option("--report", eval_report, "Output CSV report")->required();
  eval_cluster.attach(eval);

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  std::uint64_t gradcheck_seed = 0;
  gradcheck->add_option("--seed", gradcheck_seed, "Seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) {
      fs::create_directories(synth_dir);
      for (std::size_t i = 0; i < synth_count; ++i) {
        data::SceneSpec s = spec;
        s.seed = spec.seed + i;
        const auto cloud = data::generate_scene(s);
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%03zu.%s", i, synth_format.c_str());
        const std::string path = (fs::path(synth_dir) / name).string();
        io::write_cloud(path, cloud);
        io::write_categories(io::sidecar_path(path), cloud.category_names);
        std::cout << path << "\t" << cloud.size() << " points\t" << cloud.category_names.size() << " instances\n";
      }
    } else if (*make_table) {
      std::vector<std::string> cats =
          table_categories.empty() ? data::category_names(data::default_catalog()) : split_list(table_categories);
      require(!cats.empty(), ErrorKind::kInvalidArgument, "no categories given");
      const auto table = data::build_text_table_for_categories(cats, table_dim, table_seed);
      multimodal::save_text_table(table_out, table);
      std::cout << "wrote " << table.size() << " phrases of dimension " << table.dim() << " to " << table_out << "\n";
    } else if (*train_seg) {
      const auto config = seg_config.resolve(train_seg);
      const auto scenes = load_scenes(scene_files(seg_data));
      try {
        const auto ckpt = train::train_segnet(config, scenes, progress(seg_log_every));
        save_with_history(ckpt, seg_out, seg_history, false);
        std::cout << "trained " << ckpt.history.size() << " steps on " << scenes.size() << " scenes; final loss "
                  << ckpt.history.back().loss << "\nwrote " << seg_out << "\n";
      } catch (const train::TrainingDiverged& e) {
        if (e.last_good()) train::save_checkpoint(*e.last_good(), seg_out + ".last-good");
        throw;
      }
    } else if (*segment) {
      const auto ckpt = train::load_checkpoint(segment_ckpt);
      const auto cloud = io::read_cloud(segment_in);
      const auto result = train::segment_scene(ckpt, cloud, segment_cluster.resolve());
      geometry::PointCloud out = cloud;
      out.instance_labels.reset();
      out.category_names.clear();
      io::write_cloud(segment_out, out, {{"instance", result.segmentation.labels}});
      const auto noise = std::count(result.segmentation.labels.begin(), result.segmentation.labels.end(), -1);
      std::cout << "instances\t" << result.segmentation.num_instances << "\n";
      if (noise > 0) std::cout << "noise points\t" << noise << "\n";
    } else if (*train_align) {
      const auto config = align_config.resolve(train_align);
      const auto base = train::load_checkpoint(align_ckpt);
      const auto scenes = load_scenes(scene_files(align_data));
      const auto table = multimodal::load_text_table(align_table);
      try {
        const auto ckpt = train::train_alignment(config, base, scenes, table, progress(align_log_every));
        save_with_history(ckpt, align_out, align_history, true);
        std::cout << "trained " << ckpt.align_history.size() << " alignment steps; final loss "
                  << ckpt.align_history.back().loss << "\nwrote " << align_out << "\n";
      } catch (const train::TrainingDiverged& e) {
        if (e.last_good()) train::save_checkpoint(*e.last_good(), align_out + ".last-good");
        throw;
      }
    } else if (*label) {
      train::Checkpoint ckpt = require_joint(label_ckpt);
      std::vector<std::string> candidates;
      if (!label_table.empty()) {
        auto table = multimodal::load_text_table(label_table);
        require(table.dim() == ckpt.joint->table.dim(), ErrorKind::kInvalidArgument,
                "table dimension does not match the checkpoint");
        candidates = table.phrases();
        ckpt.joint->table = std::move(table);
      }
      if (label_candidates) {
        for (auto& c : split_list(*label_candidates)) candidates.push_back(c);
      } else if (label_table.empty()) {
        candidates = ckpt.joint->table.phrases();
      }
      if (candidates.empty()) {
        std::cerr << "label: the candidate list is empty\n" << label->help();
        return kExitUsage;
      }
      const auto cloud = io::read_cloud(label_in);
      const auto seg = train::segment_scene(ckpt, cloud, label_cluster.resolve());
      for (std::size_t i = 0; i < seg.instances.size(); ++i) {
        const auto result = multimodal::zero_shot_label(seg.instances[i], candidates, *ckpt.joint);
        std::cout << seg.instance_ids[i] << "\t" << result.phrase << "\t" << io::format_double(result.scores[result.best])
                  << "\n";
      }
    } else if (*query) {
      const auto ckpt = require_joint(query_ckpt);
      require(query_top > 0, ErrorKind::kInvalidArgument, "--top-n must be positive");
      const auto cloud = io::read_cloud(query_in);
      const auto seg = train::segment_scene(ckpt, cloud, query_cluster.resolve());
      const auto ranked = multimodal::retrieve(query_text, seg.instances, *ckpt.joint);
      const std::size_t shown = std::min(query_top, ranked.size());
      for (std::size_t r = 0; r < shown; ++r) {
        const auto& desc = seg.instances[ranked[r].index];
        std::cout << seg.instance_ids[ranked[r].index] << "\t" << io::format_double(ranked[r].score) << "\t"
                  << desc.members.size() << " points\n";
      }
      if (!query_out.empty()) {
        std::vector<int> selected(cloud.size(), 0);
        if (!ranked.empty())
          for (std::size_t m : seg.instances[ranked.front().index].members) selected[m] = 1;
        geometry::PointCloud out = cloud;
        out.instance_labels.reset();
        out.category_names.clear();
        io::write_cloud(query_out, out, {{"instance", seg.segmentation.labels}, {"selected", selected}});
      }
    } else if (*eval) {
      const auto ckpt = train::load_checkpoint(eval_ckpt);
      const auto files = scene_files(eval_data);
      const auto scenes = load_scenes(files);
      const auto options = eval_cluster.resolve();
      std::string csv = "scene,points,true_instances,predicted_instances,ari,mean_intra,mean_nearest_inter";
      if (ckpt.joint) csv += ",label_accuracy,retrieval_accuracy";
      csv += "\n";
      double ari_sum = 0.0;
      train::AlignmentEval total;
      for (std::size_t s = 0; s < scenes.size(); ++s) {
        const auto& scene = scenes[s];
        require(scene.has_labels(), ErrorKind::kInvalidData, files[s] + " has no instance labels");
        const auto seg = train::segment_scene(ckpt, scene, options, files[s]);
        const auto& truth = *scene.instance_labels;
        const double ari = clustering::adjusted_rand_index(seg.segmentation, truth);
        const auto sep = train::embedding_separation(seg.forward.embeddings, truth);
        std::vector<int> ids(truth.begin(), truth.end());
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
        ids.erase(std::remove(ids.begin(), ids.end(), -1), ids.end());
        ari_sum += ari;
        csv += fs::path(files[s]).filename().string() + "," + std::to_string(scene.size()) + "," +
               std::to_string(ids.size()) + "," + std::to_string(seg.segmentation.num_instances) + "," +
               io::format_double(ari) + "," + io::format_double(sep.mean_intra) + "," +
               io::format_double(sep.mean_nearest_inter);
        std::cout << fs::path(files[s]).filename().string() << "\tari " << ari << "\tinstances "
                  << seg.segmentation.num_instances << "/" << ids.size();
        if (ckpt.joint) {
          const std::vector<geometry::PointCloud> one{scene};
          const std::vector<train::SegmentedScene> segs{seg};
          const auto a = train::evaluate_alignment(ckpt, one, segs, 0, 0);
          total.label_trials += a.label_trials;
          total.label_correct += a.label_correct;
          total.retrieval_trials += a.retrieval_trials;
          total.retrieval_correct += a.retrieval_correct;
          csv += "," + io::format_double(a.label_accuracy()) + "," + io::format_double(a.retrieval_accuracy());
          std::cout << "\tlabel " << a.label_accuracy() << "\tretrieval " << a.retrieval_accuracy();
        }
        csv += "\n";
        std::cout << "\n";
      }
      const double mean_ari = ari_sum / static_cast<double>(scenes.size());
      csv += "mean,,,," + io::format_double(mean_ari) + ",,";
      if (ckpt.joint) csv += "," + io::format_double(total.label_accuracy()) + "," +
                             io::format_double(total.retrieval_accuracy());
      csv += "\n";
      io::write_file_atomic(eval_report, csv);
      std::cout << "mean ari\t" << mean_ari << "\n";
      if (ckpt.joint) {
        std::cout << "zero-shot accuracy\t" << total.label_accuracy() << "\nretrieval top-1\t"
                  << total.retrieval_accuracy() << "\n";
      }
    } else if (*gradcheck) {
      bool ok = true;
      for (const auto& entry : gradcheck::run_gradient_suite(gradcheck_seed)) {
        std::cout << (entry.report.passed() ? "ok  " : "FAIL") << "\t" << entry.name << "\tchecked "
                  << entry.report.checked << "\tmax rel err " << entry.report.max_rel_error << "\n";
        ok = ok && entry.report.passed();
      }
      return ok ? kExitOk : kExitNumeric;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}
