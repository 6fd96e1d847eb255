#include "hashsdf/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "hashsdf/error.hpp"

extern char** environ;

namespace hashsdf {

RunConfig::RunConfig() {
  // Desk-scale encoding and sampler; full-scale values live in the key table.
  training.field.encoding = {8, 16, 128, 4, 1u << 16};
  training.sampler = {24, 12, 2};
  training.schedule.learning_rate = 1e-2;
  training.schedule.iterations = 5000;
  training.schedule.activation_interval = 500;
  training.schedule.warmup = 500;
  training.schedule.milestone_1 = 3000;
  training.schedule.milestone_2 = 4000;
  training.schedule.initial_levels = 4;
  ablate_modes = {GradientMode::Analytical, GradientMode::Numerical, GradientMode::NumericalProgressive};
}

TrainingConfig RunConfig::training_config() const {
  TrainingConfig out = training;
  out.seed = seed;
  return out;
}

DatasetConfig RunConfig::dataset_config() const {
  DatasetConfig out = dataset;
  out.seed = seed;
  return out;
}

void RunConfig::validate() const {
  try {
    parse_scene_kind(scene);
    dataset_config().validate();
    training_config().validate();
    mesh.validate();
  } catch (const Error& e) {
    fail(ErrorCode::Config, e.what());
  }
  if (dataset_dir.empty() || run_dir.empty()) fail(ErrorCode::Config, "dataset and run paths must be non-empty");
  if (checkpoint_every < 0) fail(ErrorCode::Config, "checkpoint_every must be non-negative");
  if (log_every < 1) fail(ErrorCode::Config, "log_every must be positive");
  if (eval_points < 1) fail(ErrorCode::Config, "eval.points must be positive");
  if (!(f1_threshold > 0.0)) fail(ErrorCode::Config, "eval.f1_threshold must be positive");
  if (ablate_modes.empty()) fail(ErrorCode::Config, "ablate.modes must name at least one mode");
}

// ------------------------------------------------------------ value codecs

namespace {

[[noreturn]] void bad_value(std::string_view key, std::string_view text, std::string_view expected) {
  fail(ErrorCode::Config, "key '" + std::string(key) + "': cannot parse '" + std::string(text) + "' as " +
                              std::string(expected));
}

template <class Int>
Int parse_integer(std::string_view key, std::string_view text) {
  Int v{};
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size()) bad_value(key, text, "an integer");
  return v;
}

double parse_double(std::string_view key, std::string_view text) {
  double v{};
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size() || !std::isfinite(v)) bad_value(key, text, "a finite number");
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  bad_value(key, text, "true or false");
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<GradientMode> parse_modes(std::string_view text) {
  std::vector<GradientMode> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto piece = text.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    out.push_back(parse_mode(std::string(piece)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string format_modes(const std::vector<GradientMode>& modes) {
  std::string out;
  for (std::size_t i = 0; i < modes.size(); ++i) out += (i ? "," : "") + mode_name(modes[i]);
  return out;
}

struct KeyCodec {
  ConfigKey doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

// Accessors take a mutable config; the getter casts constness away but only reads.
template <class Access>
KeyCodec entry(std::string name, std::string full_scale, std::string description, Access access) {
  using V = std::remove_reference_t<decltype(access(std::declval<RunConfig&>()))>;
  KeyCodec k;
  k.doc = {name, std::move(full_scale), std::move(description)};
  k.get = [access](const RunConfig& c) -> std::string {
    const V& v = access(const_cast<RunConfig&>(c));
    if constexpr (std::is_same_v<V, bool>) return v ? "true" : "false";
    else if constexpr (std::is_same_v<V, double>) return format_double(v);
    else if constexpr (std::is_same_v<V, std::string>) return v;
    else if constexpr (std::is_same_v<V, GradientMode>) return mode_name(v);
    else if constexpr (std::is_same_v<V, Rig>) return rig_name(v);
    else if constexpr (std::is_same_v<V, MeshFormat>) return v == MeshFormat::Obj ? "obj" : "ply";
    else if constexpr (std::is_same_v<V, std::vector<GradientMode>>) return format_modes(v);
    else return std::to_string(v);
  };
  k.set = [access, name](RunConfig& c, std::string_view text) {
    V& v = access(c);
    if constexpr (std::is_same_v<V, bool>) v = parse_bool(name, text);
    else if constexpr (std::is_same_v<V, double>) v = parse_double(name, text);
    else if constexpr (std::is_same_v<V, std::string>) v = std::string(text);
    else if constexpr (std::is_same_v<V, GradientMode>) v = parse_mode(std::string(text));
    else if constexpr (std::is_same_v<V, Rig>) v = parse_rig(std::string(text));
    else if constexpr (std::is_same_v<V, MeshFormat>) v = parse_mesh_format(std::string(text));
    else if constexpr (std::is_same_v<V, std::vector<GradientMode>>) v = parse_modes(text);
    else v = parse_integer<V>(name, text);
  };
  return k;
}

const std::vector<KeyCodec>& codecs() {
  static const std::vector<KeyCodec> table = [] {
    std::vector<KeyCodec> t;
    auto add = [&t](auto&&... args) { t.push_back(entry(std::forward<decltype(args)>(args)...)); };
    add("seed", "", "master seed for data generation, initialization and sampling",
        [](RunConfig& c) -> auto& { return c.seed; });
    // dataset
    add("scene", "", "SPHERE, BOX, TORUS or CSG-DIFF", [](RunConfig& c) -> auto& { return c.scene; });
    add("dataset", "", "dataset directory", [](RunConfig& c) -> auto& { return c.dataset_dir; });
    add("rig", "", "orbit or hemisphere", [](RunConfig& c) -> auto& { return c.dataset.rig.rig; });
    add("views", "49 or 64", "training views", [](RunConfig& c) -> auto& { return c.dataset.rig.views; });
    add("test_views", "", "held-out views", [](RunConfig& c) -> auto& { return c.dataset.test_views; });
    add("image_size", "", "image width and height in pixels", [](RunConfig& c) -> auto& { return c.dataset.rig.image_size; });
    add("camera_distance", "", "camera distance from the origin", [](RunConfig& c) -> auto& { return c.dataset.rig.distance; });
    add("elevation_deg", "", "orbit elevation", [](RunConfig& c) -> auto& { return c.dataset.rig.elevation_deg; });
    add("fov_deg", "", "vertical field of view", [](RunConfig& c) -> auto& { return c.dataset.rig.fov_deg; });
    add("exposure", "", "random per-image exposure gains", [](RunConfig& c) -> auto& { return c.dataset.exposure; });
    add("gt_points", "", "ground-truth surface points", [](RunConfig& c) -> auto& { return c.dataset.gt_points; });
    // encoding and networks
    add("encoding.levels", "16", "hash grid levels L", [](RunConfig& c) -> auto& { return c.training.field.encoding.levels; });
    add("encoding.min_resolution", "32", "coarsest grid resolution", [](RunConfig& c) -> auto& { return c.training.field.encoding.min_resolution; });
    add("encoding.max_resolution", "2048", "finest grid resolution", [](RunConfig& c) -> auto& { return c.training.field.encoding.max_resolution; });
    add("encoding.channels", "8", "features per level", [](RunConfig& c) -> auto& { return c.training.field.encoding.channels; });
    add("encoding.table_size", "4194304", "hash table rows per level (power of two)", [](RunConfig& c) -> auto& { return c.training.field.encoding.table_size; });
    add("sdf.hidden", "", "SDF MLP hidden width (one hidden layer)", [](RunConfig& c) -> auto& { return c.training.field.sdf_hidden; });
    add("sdf.features", "", "geometric features passed to the color MLP", [](RunConfig& c) -> auto& { return c.training.field.geometric_features; });
    add("sdf.softplus_beta", "", "softplus sharpness", [](RunConfig& c) -> auto& { return c.training.field.softplus_beta; });
    add("color.hidden", "", "color MLP width", [](RunConfig& c) -> auto& { return c.training.field.color_hidden; });
    add("color.layers", "4", "color MLP hidden layers", [](RunConfig& c) -> auto& { return c.training.field.color_layers; });
    add("appearance", "", "per-image appearance embeddings", [](RunConfig& c) -> auto& { return c.training.field.appearance; });
    add("appearance.dim", "", "embedding width", [](RunConfig& c) -> auto& { return c.training.field.appearance_dim; });
    add("init.sharpness", "", "initial logistic sharpness s", [](RunConfig& c) -> auto& { return c.training.field.init_sharpness; });
    add("init.radius", "", "radius of the initial sphere", [](RunConfig& c) -> auto& { return c.training.init_radius; });
    // rendering
    add("sampler.uniform", "", "stratified samples per ray", [](RunConfig& c) -> auto& { return c.training.sampler.n_uniform; });
    add("sampler.importance", "", "importance samples per round", [](RunConfig& c) -> auto& { return c.training.sampler.n_importance; });
    add("sampler.rounds", "", "importance rounds", [](RunConfig& c) -> auto& { return c.training.sampler.rounds; });
    add("bound_radius", "1", "radius of the sampled region", [](RunConfig& c) -> auto& { return c.training.bound_radius; });
    // schedule and loss
    add("mode", "NG+P", "AG, AG+P, NG or NG+P", [](RunConfig& c) -> auto& { return c.training.schedule.mode; });
    add("iterations", "500000", "training iterations", [](RunConfig& c) -> auto& { return c.training.schedule.iterations; });
    add("activation_interval", "5000", "iterations between step-size decreases", [](RunConfig& c) -> auto& { return c.training.schedule.activation_interval; });
    add("initial_levels", "", "levels active at iteration 0", [](RunConfig& c) -> auto& { return c.training.schedule.initial_levels; });
    add("warmup", "5000", "learning-rate and curvature warmup", [](RunConfig& c) -> auto& { return c.training.schedule.warmup; });
    add("milestone_1", "300000", "first learning-rate decay", [](RunConfig& c) -> auto& { return c.training.schedule.milestone_1; });
    add("milestone_2", "400000", "second learning-rate decay", [](RunConfig& c) -> auto& { return c.training.schedule.milestone_2; });
    add("learning_rate", "0.001", "peak learning rate", [](RunConfig& c) -> auto& { return c.training.schedule.learning_rate; });
    add("eikonal_weight", "0.1", "w_eik", [](RunConfig& c) -> auto& { return c.training.schedule.eikonal_weight; });
    add("curvature_weight", "0.0005", "peak w_curv", [](RunConfig& c) -> auto& { return c.training.schedule.curvature_weight; });
    add("curvature_warmup", "true", "ramp w_curv over the warmup", [](RunConfig& c) -> auto& { return c.training.schedule.curvature_warmup; });
    add("rays_per_step", "", "rays per iteration", [](RunConfig& c) -> auto& { return c.training.rays_per_step; });
    add("images_per_step", "1", "images rays are drawn from per step, 0 for all", [](RunConfig& c) -> auto& { return c.training.images_per_step; });
    // optimizer
    add("adam.beta1", "", "first moment decay", [](RunConfig& c) -> auto& { return c.training.adam.beta1; });
    add("adam.beta2", "", "second moment decay", [](RunConfig& c) -> auto& { return c.training.adam.beta2; });
    add("adam.epsilon", "", "denominator floor", [](RunConfig& c) -> auto& { return c.training.adam.epsilon; });
    add("adam.weight_decay", "0.01", "decoupled weight decay", [](RunConfig& c) -> auto& { return c.training.adam.weight_decay; });
    add("adam.max_skips", "", "consecutive non-finite steps before aborting", [](RunConfig& c) -> auto& { return c.training.adam.max_consecutive_skips; });
    // run outputs
    add("run", "", "run directory", [](RunConfig& c) -> auto& { return c.run_dir; });
    add("checkpoint_every", "", "checkpoint interval, 0 for final only", [](RunConfig& c) -> auto& { return c.checkpoint_every; });
    add("log_every", "", "metrics record interval", [](RunConfig& c) -> auto& { return c.log_every; });
    add("mesh.resolution", "512", "marching cubes cells per axis", [](RunConfig& c) -> auto& { return c.mesh.resolution; });
    add("mesh.refine", "false", "refine edge crossings on the field", [](RunConfig& c) -> auto& { return c.mesh.refine; });
    add("mesh.slab_cells", "", "lattice slab thickness per evaluation chunk", [](RunConfig& c) -> auto& { return c.mesh.slab_cells; });
    add("mesh.format", "", "ply or obj", [](RunConfig& c) -> auto& { return c.mesh_format; });
    add("eval.points", "", "points sampled on the mesh for Chamfer and F1", [](RunConfig& c) -> auto& { return c.eval_points; });
    add("eval.f1_threshold", "", "F1 distance threshold", [](RunConfig& c) -> auto& { return c.f1_threshold; });
    add("ablate.modes", "AG,AG+P,NG,NG+P", "modes trained by ablate", [](RunConfig& c) -> auto& { return c.ablate_modes; });
    return t;
  }();
  return table;
}

const KeyCodec& codec(std::string_view key) {
  for (const auto& k : codecs())
    if (k.doc.name == key) return k;
  fail(ErrorCode::Config, "unknown config key '" + std::string(key) + "'");
}

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& k : codecs()) out.push_back(k.doc);
    return out;
  }();
  return keys;
}

std::string environment_name(std::string_view key) {
  std::string out = "HASHSDF_";
  for (char ch : key) out += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return out;
}

std::string get_config_value(const RunConfig& config, std::string_view key) { return codec(key).get(config); }

void set_config_value(RunConfig& config, std::string_view key, std::string_view value) {
  try {
    codec(key).set(config, trim(value));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Config) throw;
    fail(ErrorCode::Config, "key '" + std::string(key) + "': " + e.what());
  }
}

RunConfig parse_config(std::string_view text) {
  RunConfig config;
  std::set<std::string, std::less<>> seen;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      fail(ErrorCode::Config, "line " + std::to_string(line_no) + ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    if (!seen.insert(std::string(key)).second)
      fail(ErrorCode::Config, "line " + std::to_string(line_no) + ": key '" + std::string(key) + "' repeated");
    try {
      set_config_value(config, key, line.substr(eq + 1));
    } catch (const Error& e) {
      fail(ErrorCode::Config, "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  config.validate();
  return config;
}

std::string serialize_config(const RunConfig& config, bool annotate) {
  std::ostringstream out;
  for (const auto& k : codecs()) {
    out << k.doc.name << " = " << k.get(config);
    if (annotate) {
      out << "  # " << k.doc.description;
      if (!k.doc.full_scale.empty()) out << "; full scale: " << k.doc.full_scale;
    }
    out << '\n';
  }
  return out.str();
}

std::uint64_t config_hash(const RunConfig& config) {
  // Paths are left out so a run directory can be moved and still resume.
  std::string text;
  for (const auto& k : codecs()) {
    if (k.doc.name == "dataset" || k.doc.name == "run") continue;
    text += k.doc.name + " = " + k.get(config) + "\n";
  }
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string format_hash(std::uint64_t hash) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

void apply_environment(RunConfig& config, const std::vector<std::string>& environment) {
  std::map<std::string, std::string> by_name;
  for (const auto& k : codecs()) by_name[environment_name(k.doc.name)] = k.doc.name;
  for (const auto& entry : environment) {
    const auto eq = entry.find('=');
    const std::string name = entry.substr(0, eq);
    if (name.rfind("HASHSDF_", 0) != 0) continue;
    const auto it = by_name.find(name);
    if (it == by_name.end()) fail(ErrorCode::Config, "unknown environment override " + name);
    set_config_value(config, it->second, eq == std::string::npos ? "" : entry.substr(eq + 1));
  }
  config.validate();
}

std::vector<std::string> process_environment() {
  std::vector<std::string> out;
  for (char** e = environ; e && *e; ++e) out.emplace_back(*e);
  return out;
}

RunConfig load_config(const std::filesystem::path& path) {
  RunConfig config;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::Io, "cannot read config " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    config = parse_config(text.str());
  }
  apply_environment(config, process_environment());
  return config;
}

}  // namespace hashsdf
