#include "segvec3d/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>
#include <sstream>

#include "segvec3d/io.hpp"
#include "segvec3d/losses.hpp"
#include "segvec3d/random.hpp"

namespace segvec3d::train {

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  net.validate();
  auto check = [](bool ok, const char* msg) { require(ok, ErrorKind::kInvalidArgument, msg); };
  check(margin > 0.0, "margin must be positive");
  check(pair_budget > 0, "pair_budget must be positive");
  check(label_fraction > 0.0 && label_fraction <= 1.0, "label_fraction must be in (0, 1]");
  check(learning_rate >= 0.0 && align_learning_rate >= 0.0, "learning rates must be non-negative");
  check(batch_scenes > 0 && align_batch > 0, "batch sizes must be positive");
  check(clip_norm > 0.0, "clip_norm must be positive");
  check(tau > 0.0, "tau must be positive");
  check(joint_dim > 0, "joint_dim must be positive");
}

namespace {

std::string fmt(double v) { return io::format_double(v); }
std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(value, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != value.size() || value.empty() || value[0] == '-') {
    fail(ErrorKind::kInvalidArgument, "config key '" + key + "' expects a non-negative integer, got '" + value + "'");
  }
  return static_cast<std::size_t>(v);
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    return io::parse_double(value);
  } catch (const Error&) {
    fail(ErrorKind::kInvalidArgument, "config key '" + key + "' expects a number, got '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  fail(ErrorKind::kInvalidArgument, "config key '" + key + "' expects true/false, got '" + value + "'");
}

}  // namespace

std::map<std::string, std::string> TrainConfig::to_map() const {
  return {
      {"k", fmt(net.k)},
      {"num_layers", fmt(net.num_layers)},
      {"width", fmt(net.width)},
      {"attention_dim", fmt(net.attention_dim)},
      {"gamma_hidden", fmt(net.gamma_hidden)},
      {"fused_dim", fmt(net.fused_dim)},
      {"global_dim", fmt(net.global_dim)},
      {"head_hidden", fmt(net.head_hidden)},
      {"embed_dim", fmt(net.embed_dim)},
      {"use_color", fmt(net.use_color)},
      {"recompute_neighbors", fmt(net.recompute_neighbors)},
      {"margin", fmt(margin)},
      {"pair_budget", fmt(pair_budget)},
      {"label_fraction", fmt(label_fraction)},
      {"learning_rate", fmt(learning_rate)},
      {"epochs", fmt(epochs)},
      {"batch_scenes", fmt(batch_scenes)},
      {"seed", std::to_string(seed)},
      {"clip_norm", fmt(clip_norm)},
      {"tau", fmt(tau)},
      {"joint_dim", fmt(joint_dim)},
      {"align_epochs", fmt(align_epochs)},
      {"align_batch", fmt(align_batch)},
      {"align_learning_rate", fmt(align_learning_rate)},
      {"fine_tune_backbone", fmt(fine_tune_backbone)},
  };
}

std::vector<std::string> TrainConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, v] : TrainConfig{}.to_map()) out.push_back(k);
  return out;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "k") net.k = parse_size(key, value);
  else if (key == "num_layers") net.num_layers = parse_size(key, value);
  else if (key == "width") net.width = parse_size(key, value);
  else if (key == "attention_dim") net.attention_dim = parse_size(key, value);
  else if (key == "gamma_hidden") net.gamma_hidden = parse_size(key, value);
  else if (key == "fused_dim") net.fused_dim = parse_size(key, value);
  else if (key == "global_dim") net.global_dim = parse_size(key, value);
  else if (key == "head_hidden") net.head_hidden = parse_size(key, value);
  else if (key == "embed_dim") net.embed_dim = parse_size(key, value);
  else if (key == "use_color") net.use_color = parse_bool(key, value);
  else if (key == "recompute_neighbors") net.recompute_neighbors = parse_bool(key, value);
  else if (key == "margin") margin = parse_real(key, value);
  else if (key == "pair_budget") pair_budget = parse_size(key, value);
  else if (key == "label_fraction") label_fraction = parse_real(key, value);
  else if (key == "learning_rate") learning_rate = parse_real(key, value);
  else if (key == "epochs") epochs = parse_size(key, value);
  else if (key == "batch_scenes") batch_scenes = parse_size(key, value);
  else if (key == "seed") seed = parse_size(key, value);
  else if (key == "clip_norm") clip_norm = parse_real(key, value);
  else if (key == "tau") tau = parse_real(key, value);
  else if (key == "joint_dim") joint_dim = parse_size(key, value);
  else if (key == "align_epochs") align_epochs = parse_size(key, value);
  else if (key == "align_batch") align_batch = parse_size(key, value);
  else if (key == "align_learning_rate") align_learning_rate = parse_real(key, value);
  else if (key == "fine_tune_backbone") fine_tune_backbone = parse_bool(key, value);
  else fail(ErrorKind::kInvalidArgument, "unknown config key '" + key + "'");
}

TrainConfig parse_config(std::string_view text, TrainConfig base) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string{};
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::kParse, "config line " + std::to_string(line_no) + ": expected key = value");
    }
    try {
      base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      fail(ErrorKind::kParse, "config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

TrainConfig load_config(const std::string& path, TrainConfig base) {
  return parse_config(io::read_file(path), std::move(base));
}

std::string format_config(const TrainConfig& config) {
  std::string out;
  for (const auto& [k, v] : config.to_map()) out += k + " = " + v + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'S', 'G', 'V', '3'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u16(std::uint16_t v) { bytes(&v, 2); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void matrix(const nn::Matrix& m) {
    u32(static_cast<std::uint32_t>(m.rows()));
    u32(static_cast<std::uint32_t>(m.cols()));
    for (double v : m.values()) f64(v);
  }
  void mlp(const nn::Mlp& mlp) {
    u32(static_cast<std::uint32_t>(mlp.layers.size()));
    for (const auto& l : mlp.layers) {
      matrix(l.weight);
      for (double b : l.bias) f64(b);
    }
  }
  void section(const char tag[4], const std::string& payload) {
    bytes(tag, 4);
    u64(payload.size());
    out_ += payload;
  }
  std::string& data() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(std::string_view data, std::size_t base) : data_(data), base_(base) {}

  std::size_t offset() const { return base_ + pos_; }
  bool done() const { return pos_ == data_.size(); }

  [[noreturn]] void error(const std::string& what) const {
    fail(ErrorKind::kParse, "checkpoint offset " + std::to_string(offset()) + ": " + what);
  }

  void bytes(void* p, std::size_t n) {
    if (data_.size() - pos_ < n) error("unexpected end of data");
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
  std::uint16_t u16() { std::uint16_t v; bytes(&v, 2); return v; }
  std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
  double f64() { double v; bytes(&v, 8); return v; }
  std::string str() {
    const std::uint32_t n = u32();
    if (data_.size() - pos_ < n) error("string runs past the end");
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::size_t count(std::size_t element_bytes) {
    const std::uint32_t n = u32();
    if (element_bytes > 0 && n > (data_.size() - pos_) / element_bytes) error("count runs past the end");
    return n;
  }
  nn::Matrix matrix() {
    const std::uint32_t rows = u32();
    const std::uint32_t cols = u32();
    const std::uint64_t n = static_cast<std::uint64_t>(rows) * cols;
    if (n > (data_.size() - pos_) / 8) error("matrix runs past the end");
    std::vector<double> values(n);
    for (double& v : values) v = f64();
    return nn::Matrix(rows, cols, std::move(values));
  }
  nn::Mlp mlp() {
    nn::Mlp out;
    const std::size_t layers = count(8);
    for (std::size_t l = 0; l < layers; ++l) {
      nn::Dense d;
      d.weight = matrix();
      if (d.weight.rows() > (data_.size() - pos_) / 8) error("bias runs past the end");
      d.bias.resize(d.weight.rows());
      for (double& b : d.bias) b = f64();
      out.layers.push_back(std::move(d));
    }
    return out;
  }

 private:
  std::string_view data_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

std::vector<const nn::Mlp*> mlps_of(const segnet::SegNetParams& p) {
  std::vector<const nn::Mlp*> out{&p.input_proj};
  for (const auto& l : p.layers) {
    out.push_back(&l.phi);
    out.push_back(&l.psi);
    out.push_back(&l.gamma);
  }
  for (const auto* m : {&p.fusion_mlp, &p.global_mlp, &p.fuse_mlp, &p.embed_mlp}) out.push_back(m);
  return out;
}

std::string history_payload(const std::vector<MetricRecord>& history) {
  Writer w;
  w.u32(static_cast<std::uint32_t>(history.size()));
  for (const auto& r : history) {
    w.u64(r.step);
    w.f64(r.loss);
    w.u8(r.ari ? 1 : 0);
    w.f64(r.ari.value_or(0.0));
  }
  return w.data();
}

std::vector<MetricRecord> read_history(Reader& r) {
  std::vector<MetricRecord> out(r.count(25));
  for (auto& rec : out) {
    rec.step = r.u64();
    rec.loss = r.f64();
    const std::uint8_t has = r.u8();
    const double ari = r.f64();
    if (has > 1) r.error("bad flag in history");
    if (has) rec.ari = ari;
  }
  return out;
}

bool same_shape(const nn::Mlp& a, const nn::Mlp& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (a.layers[i].weight.rows() != b.layers[i].weight.rows() ||
        a.layers[i].weight.cols() != b.layers[i].weight.cols())
      return false;
  }
  return true;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u16(kCheckpointVersion);
  const std::uint32_t sections = ckpt.joint ? 5 : 4;
  w.u32(sections);

  w.section("CONF", format_config(ckpt.config));

  Writer seg;
  const auto mlps = mlps_of(ckpt.segnet);
  seg.u32(static_cast<std::uint32_t>(mlps.size()));
  for (const auto* m : mlps) seg.mlp(*m);
  w.section("SEGN", seg.data());

  if (ckpt.joint) {
    const auto& j = *ckpt.joint;
    Writer js;
    js.f64(j.tau);
    js.matrix(j.w3d);
    js.matrix(j.wtxt);
    js.u32(static_cast<std::uint32_t>(j.table.dim()));
    js.u32(static_cast<std::uint32_t>(j.table.size()));
    for (const auto& [phrase, v] : j.table.entries()) {
      js.str(phrase);
      for (double x : v) js.f64(x);
    }
    w.section("JOIN", js.data());
  }
  w.section("HIST", history_payload(ckpt.history));
  w.section("AHIS", history_payload(ckpt.align_history));
  w.u64(fnv1a64(w.data()));
  return w.data();
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  Reader head(bytes, 0);
  char magic[4];
  head.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) head.error("bad magic");
  const std::uint16_t version = head.u16();
  if (version != kCheckpointVersion) {
    fail(ErrorKind::kUnsupportedVersion, "checkpoint version " + std::to_string(version) + " (supported: " +
                                             std::to_string(kCheckpointVersion) + ")");
  }
  if (bytes.size() < 14) head.error("file too short");
  const std::size_t body_end = bytes.size() - 8;
  {
    Reader tail(bytes.substr(body_end), body_end);
    if (tail.u64() != fnv1a64(bytes.substr(0, body_end))) tail.error("checksum mismatch");
  }
  Reader r(bytes.substr(0, body_end), 0);
  r.bytes(magic, 4);
  r.u16();
  const std::uint32_t sections = r.u32();

  Checkpoint ckpt;
  bool have_conf = false;
  bool have_seg = false;
  std::vector<nn::Mlp> mlps;
  for (std::uint32_t s = 0; s < sections; ++s) {
    char tag[4];
    r.bytes(tag, 4);
    const std::uint64_t length = r.u64();
    const std::size_t start = r.offset();
    if (length > body_end - start) r.error("section length runs past the end");
    std::string payload(length, '\0');
    r.bytes(payload.data(), length);
    Reader sr(payload, start);
    const std::string_view name(tag, 4);
    if (name == "CONF") {
      try {
        ckpt.config = parse_config(payload);
      } catch (const Error& e) {
        sr.error(std::string("bad config: ") + e.what());
      }
      have_conf = true;
      continue;
    } else if (name == "SEGN") {
      const std::size_t n = sr.count(4);
      for (std::size_t i = 0; i < n; ++i) mlps.push_back(sr.mlp());
      have_seg = true;
    } else if (name == "JOIN") {
      multimodal::JointSpaceModel j;
      j.tau = sr.f64();
      j.w3d = sr.matrix();
      j.wtxt = sr.matrix();
      const std::size_t dim = sr.u32();
      const std::size_t count = sr.count(4);
      j.table = multimodal::TextEmbeddingTable(dim);
      for (std::size_t e = 0; e < count; ++e) {
        const std::string phrase = sr.str();
        std::vector<double> v(dim);
        for (double& x : v) x = sr.f64();
        try {
          j.table.add(phrase, std::move(v));
        } catch (const Error& err) {
          sr.error(err.what());
        }
      }
      try {
        j.validate();
      } catch (const Error& err) {
        sr.error(err.what());
      }
      ckpt.joint = std::move(j);
    } else if (name == "HIST") {
      ckpt.history = read_history(sr);
    } else if (name == "AHIS") {
      ckpt.align_history = read_history(sr);
    } else {
      sr.error("unknown section '" + std::string(name) + "'");
    }
    if (!sr.done()) sr.error("trailing bytes in section");
  }
  if (!r.done()) r.error("trailing bytes after sections");
  if (!have_conf || !have_seg) r.error("missing CONF or SEGN section");

  // Shapes must match what the stored config builds.
  segnet::SegNetParams expected = segnet::init_segnet(ckpt.config.net, 0);
  const auto slots = mlps_of(expected);
  if (mlps.size() != slots.size()) r.error("network layout does not match the config");
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (!same_shape(*slots[i], mlps[i])) r.error("parameter shape mismatch in MLP " + std::to_string(i));
  }
  std::size_t next = 0;
  auto take = [&mlps, &next]() { return std::move(mlps[next++]); };
  ckpt.segnet.config = ckpt.config.net;
  ckpt.segnet.input_proj = take();
  ckpt.segnet.layers.resize(ckpt.config.net.num_layers);
  for (auto& l : ckpt.segnet.layers) {
    l.phi = take();
    l.psi = take();
    l.gamma = take();
  }
  ckpt.segnet.fusion_mlp = take();
  ckpt.segnet.global_mlp = take();
  ckpt.segnet.fuse_mlp = take();
  ckpt.segnet.embed_mlp = take();
  if (ckpt.joint && ckpt.joint->w3d.cols() != ckpt.config.net.fused_dim) {
    r.error("3D projection does not match the fused feature width");
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  io::write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(io::read_file(path)); }

std::string history_csv(std::span<const MetricRecord> history) {
  const bool with_ari = std::any_of(history.begin(), history.end(), [](const MetricRecord& r) { return r.ari; });
  std::string out = with_ari ? "step,loss,ari\n" : "step,loss\n";
  for (const auto& r : history) {
    out += std::to_string(r.step) + "," + io::format_double(r.loss);
    if (with_ari) out += "," + (r.ari ? io::format_double(*r.ari) : std::string{});
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Phase 1

Checkpoint train_segnet(const TrainConfig& config, std::span<const geometry::PointCloud> scenes,
                        const StepCallback& on_step) {
  config.validate();
  require(!scenes.empty(), ErrorKind::kInvalidArgument, "no training scenes");
  std::vector<std::vector<int>> weak(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto& scene = scenes[s];
    require(scene.has_labels(), ErrorKind::kInvalidArgument, "training scene without instance labels");
    std::set<int> ids(scene.instance_labels->begin(), scene.instance_labels->end());
    ids.erase(-1);
    require(ids.size() >= 2, ErrorKind::kDegenerateSupervision, "training scene with fewer than two instances");
    weak[s] = losses::subsample_labels(*scene.instance_labels, config.label_fraction, mix_seed(config.seed, 1000 + s));
  }

  Checkpoint ckpt;
  ckpt.config = config;
  ckpt.segnet = segnet::init_segnet(config.net, mix_seed(config.seed, 1));
  nn::ParamList params = ckpt.segnet.parameters();
  nn::OptimizerState optimizer = nn::make_optimizer(params, nn::AdamConfig{config.learning_rate});

  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng(mix_seed(config.seed, 2));
  std::size_t step = 0;
  segnet::ForwardCache cache;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[shuffle_rng.index(i + 1)]);
    for (std::size_t start = 0; start < order.size(); start += config.batch_scenes) {
      const std::size_t end = std::min(order.size(), start + config.batch_scenes);
      segnet::SegNetParams total = segnet::zeros_like(ckpt.segnet);
      nn::ParamList total_list = total.parameters();
      double loss = 0.0;
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t s = order[b];
        const auto fwd = segnet::forward_full(scenes[s], ckpt.segnet, &cache);
        const auto pairs = losses::sample_pairs(weak[s], config.pair_budget, mix_seed(config.seed, 1u << 20 | step << 8 | (b - start)),
                                                config.margin);
        const auto result = losses::contrastive_loss(fwd.embeddings, pairs);
        loss += result.mean;
        auto grads = segnet::backward_full(ckpt.segnet, cache, result.gradient);
        auto g = grads.parameters();
        for (std::size_t p = 0; p < g.size(); ++p)
          for (std::size_t e = 0; e < g[p].size(); ++e) total_list[p][e] += g[p][e];
      }
      const double batch = static_cast<double>(end - start);
      loss /= batch;
      for (auto span : total_list)
        for (double& v : span) v /= batch;
      const double norm = nn::global_norm(total_list);
      if (!std::isfinite(loss) || !std::isfinite(norm)) {
        throw TrainingDiverged("non-finite loss at step " + std::to_string(step),
                               std::make_shared<Checkpoint>(ckpt));
      }
      nn::clip_global_norm(total_list, config.clip_norm);
      nn::adam_step(params, total_list, optimizer);
      MetricRecord record{step, loss, std::nullopt};
      ckpt.history.push_back(record);
      if (on_step) on_step(record);
      ++step;
    }
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Phase 2

namespace {

struct AlignItem {
  std::size_t scene;
  std::vector<std::size_t> members;
  std::string phrase;
  std::vector<double> text;  // unit-norm frozen text vector
};

// H and z stay fixed while fine-tuning the fuse head, so they are cached per scene.
struct SceneFeatures {
  nn::Matrix fused;
  std::vector<double> global;
  nn::Matrix features;
};

nn::Matrix gather_rows(const nn::Matrix& m, std::span<const std::size_t> rows) {
  nn::Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = m.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace

Checkpoint train_alignment(const TrainConfig& config, const Checkpoint& base,
                           std::span<const geometry::PointCloud> scenes, const multimodal::TextEmbeddingTable& table,
                           const StepCallback& on_step) {
  config.validate();
  require(table.size() > 0, ErrorKind::kInvalidArgument, "text table is empty");
  require(config.net == base.config.net, ErrorKind::kInvalidArgument,
          "alignment config network does not match the checkpoint");

  Checkpoint ckpt = base;
  ckpt.config = config;
  ckpt.align_history.clear();

  std::vector<SceneFeatures> features;
  std::vector<AlignItem> items;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto& scene = scenes[s];
    require(scene.has_labels() && !scene.category_names.empty(), ErrorKind::kInvalidArgument,
            "alignment scenes need instance labels and category names");
    auto fwd = segnet::forward_full(scene, ckpt.segnet);
    std::map<int, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < scene.size(); ++i) {
      const int id = (*scene.instance_labels)[i];
      if (id >= 0) members[id].push_back(i);
    }
    for (auto& [id, list] : members) {
      auto cat = scene.category_names.find(id);
      if (cat == scene.category_names.end() || table.find(cat->second) == nullptr) continue;
      items.push_back({s, std::move(list), multimodal::normalize_phrase(cat->second),
                       multimodal::encode_text(cat->second, table)});
    }
    features.push_back({std::move(fwd.features.fused), std::move(fwd.features.global),
                        std::move(fwd.features.features)});
  }
  std::set<std::string> distinct;
  for (const auto& it : items) distinct.insert(it.phrase);
  if (distinct.size() < 2) {
    fail(ErrorKind::kInsufficientPairing, "need instances of at least two table categories to form a batch");
  }

  multimodal::JointSpaceModel joint = multimodal::init_joint_model(config.net.fused_dim, table.dim(),
                                                                   config.joint_dim, config.tau,
                                                                   mix_seed(config.seed, 3));
  joint.table = table;

  nn::ParamList params{joint.w3d.values(), joint.wtxt.values()};
  nn::Mlp fuse_grad = nn::zeros_like(ckpt.segnet.fuse_mlp);
  nn::Matrix gw3d(joint.w3d.rows(), joint.w3d.cols());
  nn::Matrix gwtxt(joint.wtxt.rows(), joint.wtxt.cols());
  nn::ParamList grads{gw3d.values(), gwtxt.values()};
  if (config.fine_tune_backbone) {
    nn::append_params(ckpt.segnet.fuse_mlp, params);
    nn::append_params(fuse_grad, grads);
  }
  nn::OptimizerState optimizer = nn::make_optimizer(params, nn::AdamConfig{config.align_learning_rate});

  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(config.seed, 4));
  std::size_t step = 0;
  const std::size_t d_f = config.net.fused_dim;

  for (std::size_t epoch = 0; epoch < config.align_epochs; ++epoch) {
    for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[rng.index(i + 1)]);

    // Greedy batches with pairwise distinct categories.
    std::vector<std::vector<std::size_t>> batches;
    std::vector<bool> used(order.size(), false);
    for (std::size_t a = 0; a < order.size(); ++a) {
      if (used[a]) continue;
      std::vector<std::size_t> batch{order[a]};
      std::set<std::string> cats{items[order[a]].phrase};
      used[a] = true;
      for (std::size_t b = a + 1; b < order.size() && batch.size() < config.align_batch; ++b) {
        if (used[b] || cats.count(items[order[b]].phrase)) continue;
        cats.insert(items[order[b]].phrase);
        batch.push_back(order[b]);
        used[b] = true;
      }
      if (batch.size() >= 2) batches.push_back(std::move(batch));
    }

    for (const auto& batch : batches) {
      const std::size_t bsz = batch.size();
      nn::Matrix shapes_u(bsz, d_f);
      nn::Matrix texts(bsz, table.dim());
      std::vector<nn::MlpCache> caches(bsz);
      std::vector<double> mean_norms(bsz);
      for (std::size_t r = 0; r < bsz; ++r) {
        const AlignItem& item = items[batch[r]];
        const SceneFeatures& sf = features[item.scene];
        nn::Matrix member_features;
        if (config.fine_tune_backbone) {
          member_features = segnet::global_fuse(gather_rows(sf.fused, item.members), sf.global,
                                                ckpt.segnet.fuse_mlp, &caches[r]);
        } else {
          member_features = gather_rows(sf.features, item.members);
        }
        std::vector<std::size_t> all(item.members.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        const auto desc = multimodal::pool_instance(member_features, all);
        std::vector<double> mean(d_f, 0.0);
        for (std::size_t m = 0; m < member_features.rows(); ++m)
          for (std::size_t c = 0; c < d_f; ++c) mean[c] += member_features(m, c);
        mean_norms[r] = nn::norm2(mean) / static_cast<double>(member_features.rows());
        std::copy(desc.u.begin(), desc.u.end(), shapes_u.row(r).begin());
        std::copy(item.text.begin(), item.text.end(), texts.row(r).begin());
      }
      nn::Matrix v3d(bsz, config.joint_dim);
      nn::Matrix vtxt(bsz, config.joint_dim);
      for (std::size_t r = 0; r < bsz; ++r) {
        for (std::size_t c = 0; c < config.joint_dim; ++c) {
          v3d(r, c) = nn::dot(joint.w3d.row(c), shapes_u.row(r));
          vtxt(r, c) = nn::dot(joint.wtxt.row(c), texts.row(r));
        }
      }
      const auto result = multimodal::infonce_loss(v3d, vtxt, config.tau);
      if (!std::isfinite(result.loss)) {
        throw TrainingDiverged("non-finite alignment loss at step " + std::to_string(step),
                               std::make_shared<Checkpoint>(ckpt));
      }

      for (auto g : grads) std::fill(g.begin(), g.end(), 0.0);
      for (std::size_t r = 0; r < bsz; ++r) {
        for (std::size_t c = 0; c < config.joint_dim; ++c) {
          const double gx = result.grad_3d(r, c);
          const double gt = result.grad_text(r, c);
          for (std::size_t e = 0; e < d_f; ++e) gw3d(c, e) += gx * shapes_u(r, e);
          for (std::size_t e = 0; e < table.dim(); ++e) gwtxt(c, e) += gt * texts(r, e);
        }
      }
      if (config.fine_tune_backbone) {
        for (std::size_t r = 0; r < bsz; ++r) {
          // du -> d(mean) through the normalization, then spread evenly over members.
          std::vector<double> du(d_f, 0.0);
          for (std::size_t c = 0; c < config.joint_dim; ++c)
            for (std::size_t e = 0; e < d_f; ++e) du[e] += result.grad_3d(r, c) * joint.w3d(c, e);
          const auto u = shapes_u.row(r);
          const double proj = nn::dot(u, du);
          const std::size_t count = items[batch[r]].members.size();
          nn::Matrix d_member(count, d_f);
          for (std::size_t e = 0; e < d_f; ++e) {
            const double g = (du[e] - u[e] * proj) / mean_norms[r] / static_cast<double>(count);
            for (std::size_t m = 0; m < count; ++m) d_member(m, e) = g;
          }
          nn::mlp_backward(ckpt.segnet.fuse_mlp, caches[r], d_member, fuse_grad);
        }
      }
      nn::clip_global_norm(grads, config.clip_norm);
      nn::adam_step(params, grads, optimizer);
      if (config.fine_tune_backbone) {
        nn::set_zero(fuse_grad);
      }
      MetricRecord record{step, result.loss, std::nullopt};
      ckpt.align_history.push_back(record);
      if (on_step) on_step(record);
      ++step;
    }
  }
  if (step == 0) fail(ErrorKind::kInsufficientPairing, "no batch reached two distinct categories");
  ckpt.joint = std::move(joint);
  return ckpt;
}

// ---------------------------------------------------------------------------
// Inference helpers

clustering::InstanceSegmentation cluster_embeddings(const nn::Matrix& embeddings, const ClusterOptions& options,
                                                    double margin) {
  const double half = 0.5 * margin;
  switch (options.kind) {
    case Clusterer::kDbscan:
      return clustering::dbscan(embeddings, options.eps > 0.0 ? options.eps : half, options.min_pts);
    case Clusterer::kMeanShift:
      return clustering::mean_shift(embeddings, options.bandwidth > 0.0 ? options.bandwidth : half);
    case Clusterer::kRadius:
    default:
      return clustering::radius_linkage(embeddings, options.radius > 0.0 ? options.radius : half);
  }
}

SegmentedScene segment_scene(const Checkpoint& ckpt, const geometry::PointCloud& cloud, const ClusterOptions& options,
                             const std::string& scene_name) {
  SegmentedScene out;
  out.forward = segnet::forward_full(cloud, ckpt.segnet);
  out.segmentation = cluster_embeddings(out.forward.embeddings, options, ckpt.config.margin);
  std::vector<std::vector<std::size_t>> members(out.segmentation.num_instances);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const int id = out.segmentation.labels[i];
    if (id >= 0) members[static_cast<std::size_t>(id)].push_back(i);
  }
  for (std::size_t id = 0; id < members.size(); ++id) {
    try {
      out.instances.push_back(multimodal::pool_instance(out.forward.features.features, members[id], scene_name));
      out.instance_ids.push_back(static_cast<int>(id));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kDegenerateInstance) throw;
    }
  }
  return out;
}

EmbeddingSeparation embedding_separation(const nn::Matrix& embeddings, std::span<const int> truth) {
  require(truth.size() == embeddings.rows(), ErrorKind::kInvalidArgument, "truth length mismatch");
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (truth[i] >= 0) groups[truth[i]].push_back(i);
  const std::size_t d = embeddings.cols();
  std::vector<std::vector<double>> centroids;
  EmbeddingSeparation out;
  std::size_t intra_groups = 0;
  for (const auto& [id, members] : groups) {
    std::vector<double> c(d, 0.0);
    for (std::size_t m : members)
      for (std::size_t e = 0; e < d; ++e) c[e] += embeddings(m, e);
    for (double& v : c) v /= static_cast<double>(members.size());
    centroids.push_back(std::move(c));
    if (members.size() < 2) continue;
    double sum = 0.0;
    for (std::size_t a = 0; a < members.size(); ++a)
      for (std::size_t b = a + 1; b < members.size(); ++b)
        sum += std::sqrt(geometry::squared_distance(embeddings.row(members[a]), embeddings.row(members[b])));
    out.mean_intra += sum / (0.5 * static_cast<double>(members.size() * (members.size() - 1)));
    ++intra_groups;
  }
  if (intra_groups > 0) out.mean_intra /= static_cast<double>(intra_groups);
  if (centroids.size() >= 2) {
    for (std::size_t a = 0; a < centroids.size(); ++a) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t b = 0; b < centroids.size(); ++b)
        if (a != b) best = std::min(best, std::sqrt(geometry::squared_distance(centroids[a], centroids[b])));
      out.mean_nearest_inter += best;
    }
    out.mean_nearest_inter /= static_cast<double>(centroids.size());
  }
  return out;
}

std::vector<int> majority_truth(const SegmentedScene& scene, std::span<const int> truth) {
  std::vector<int> out;
  for (const auto& desc : scene.instances) {
    std::map<int, std::size_t> votes;
    for (std::size_t m : desc.members) votes[truth[m]] += 1;
    int best = -1;
    std::size_t best_count = 0;
    for (const auto& [label, count] : votes) {
      if (count > best_count) {
        best = label;
        best_count = count;
      }
    }
    out.push_back(best);
  }
  return out;
}

AlignmentEval evaluate_alignment(const Checkpoint& ckpt, std::span<const geometry::PointCloud> scenes,
                                 std::span<const SegmentedScene> segmented, std::size_t trials, std::uint64_t seed) {
  require(ckpt.joint.has_value(), ErrorKind::kInvalidArgument, "checkpoint has no alignment model");
  require(scenes.size() == segmented.size(), ErrorKind::kInvalidArgument, "scene/segmentation count mismatch");
  const auto& model = *ckpt.joint;
  const std::vector<std::string> phrases = model.table.phrases();

  struct Candidate {
    std::size_t scene;
    std::size_t instance;
    std::string category;
  };
  std::vector<Candidate> pool;
  std::vector<std::vector<std::string>> majority_category(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    require(scenes[s].has_labels(), ErrorKind::kInvalidArgument, "evaluation scene without instance labels");
    const auto truth = majority_truth(segmented[s], *scenes[s].instance_labels);
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const auto it = scenes[s].category_names.find(truth[i]);
      std::string cat = it == scenes[s].category_names.end() ? std::string{} : multimodal::normalize_phrase(it->second);
      majority_category[s].push_back(cat);
      if (!cat.empty() && model.table.find(cat) != nullptr) pool.push_back({s, i, cat});
    }
  }
  AlignmentEval out;
  if (pool.empty()) return out;

  std::vector<std::size_t> picks;
  if (trials == 0) {
    picks.resize(pool.size());
    std::iota(picks.begin(), picks.end(), std::size_t{0});
  } else {
    Rng rng(seed);
    for (std::size_t t = 0; t < trials; ++t) picks.push_back(rng.index(pool.size()));
  }
  for (std::size_t pick : picks) {
    const Candidate& c = pool[pick];
    const auto& instances = segmented[c.scene].instances;
    const auto label = multimodal::zero_shot_label(instances[c.instance], phrases, model);
    out.label_trials += 1;
    out.label_correct += label.phrase == c.category ? 1 : 0;
    const auto ranked = multimodal::retrieve(c.category, instances, model);
    out.retrieval_trials += 1;
    out.retrieval_correct += !ranked.empty() && majority_category[c.scene][ranked.front().index] == c.category ? 1 : 0;
  }
  return out;
}

}  // namespace segvec3d::train
