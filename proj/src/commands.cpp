#include "hashsdf/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "hashsdf/binary_io.hpp"
#include "hashsdf/error.hpp"
#include "hashsdf/eval.hpp"

namespace hashsdf {

namespace fs = std::filesystem;

int exit_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidInput: return 2;
    case ErrorCode::Io: return 3;
    case ErrorCode::NonFinite: return 4;
    case ErrorCode::Config: return 5;
    case ErrorCode::Checkpoint: return 6;
    case ErrorCode::Locked: return 7;
  }
  return 1;
}

RunLock::RunLock(const fs::path& dir) : path_(dir / "run.lock") {
  fs::create_directories(dir);
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f) {
    if (fs::exists(path_))
      fail(ErrorCode::Locked, "run directory " + dir.string() + " is in use (remove " + path_.string() +
                                  " if no process owns it)");
    fail(ErrorCode::Io, "cannot create " + path_.string());
  }
  std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
  std::fclose(f);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---------------------------------------------------------------- metrics

std::string metrics_record(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["version"] = kMetricsVersion;
  j["iteration"] = m.iteration;
  j["loss_rgb"] = m.parts.rgb;
  j["loss_eikonal"] = m.parts.eikonal;
  j["loss_curvature"] = m.parts.curvature;
  j["loss_total"] = m.total;
  j["epsilon"] = m.epsilon;
  j["active_levels"] = m.active_levels;
  j["learning_rate"] = m.learning_rate;
  j["curvature_weight"] = m.curvature_weight;
  j["sharpness"] = m.sharpness;
  j["skipped"] = m.skipped;
  return j.dump();
}

void truncate_metrics(const fs::path& log, int iteration) {
  std::vector<std::string> keep;
  if (std::ifstream in(log); in) {
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception&) {
        break;  // a torn final line from an interrupted write
      }
      if (j.at("iteration").get<int>() >= iteration) break;
      keep.push_back(line);
    }
  }
  std::ofstream out(log, std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot write metrics log " + log.string());
  for (const auto& line : keep) out << line << '\n';
}

// --------------------------------------------------------------- generate

void cmd_generate(const RunConfig& config, const fs::path& out) {
  config.validate();
  make_dataset(make_scene(parse_scene_kind(config.scene)), config.dataset_config(), out);
}

// ------------------------------------------------------------------ train

fs::path resolve_checkpoint(const fs::path& path) {
  if (fs::is_directory(path)) return path / "checkpoint.bin";
  return path;
}

namespace {

void save_both(const fs::path& run_dir, const Checkpoint& c) {
  char name[32];
  std::snprintf(name, sizeof name, "%06d.bin", c.schedule.iteration);
  save_checkpoint(run_dir / "checkpoints" / name, c);
  save_checkpoint(run_dir / "checkpoint.bin", c);
}

}  // namespace

TrainResult cmd_train(const RunConfig& config, const TrainOptions& options) {
  config.validate();
  const fs::path run_dir = options.run_dir.empty() ? fs::path(config.run_dir) : options.run_dir;
  fs::create_directories(run_dir / "checkpoints");
  RunLock lock(run_dir);

  std::optional<Checkpoint> resume;
  if (options.resume) {
    resume = load_checkpoint(resolve_checkpoint(*options.resume));
    if (resume->config_hash != config_hash(config))
      fail(ErrorCode::Checkpoint, "config hash " + format_hash(config_hash(config)) +
                                      " differs from the checkpoint's " + format_hash(resume->config_hash));
  }

  const SceneDataset dataset = load_dataset(config.dataset_dir);
  auto views = training_views(dataset);
  TrainingConfig tc = config.training_config();
  tc.background = dataset.background;
  tc.field.image_count = static_cast<int>(views.size());
  Trainer trainer(tc, std::move(views));

  const fs::path log = run_dir / "metrics.jsonl";
  if (resume) {
    restore_trainer(trainer, *resume);
    truncate_metrics(log, trainer.iteration());
  } else {
    std::ofstream cfg(run_dir / "config.txt", std::ios::trunc);
    cfg << serialize_config(config, true);
    if (!cfg) fail(ErrorCode::Io, "cannot write " + (run_dir / "config.txt").string());
    truncate_metrics(log, 0);
    save_both(run_dir, make_checkpoint(config, trainer));
  }

  std::ofstream metrics(log, std::ios::app);
  if (!metrics) fail(ErrorCode::Io, "cannot append to " + log.string());
  const int total = config.training.schedule.iterations;
  const int stop = options.stop_at >= 0 ? std::min(options.stop_at, total) : total;
  const int report = std::max(1, total / 20);
  TrainResult result;
  bool saved = !resume.has_value() && trainer.iteration() == stop;
  while (trainer.iteration() < stop) {
    const StepMetrics m = trainer.step();
    result.last = m;
    if (m.iteration % config.log_every == 0 || m.iteration == total - 1) {
      metrics << metrics_record(m) << '\n';
      metrics.flush();
    }
    if (options.progress && (m.iteration % report == 0 || m.iteration == total - 1)) {
      char line[200];
      std::snprintf(line, sizeof line, "iter %d/%d  rgb %.5f  eik %.5f  curv %.4f  eps %.4g  levels %d  s %.1f\n",
                    m.iteration, total, m.parts.rgb, m.parts.eikonal, m.parts.curvature, m.epsilon,
                    m.active_levels, m.sharpness);
      *options.progress << line << std::flush;
    }
    saved = false;
    if (config.checkpoint_every > 0 && trainer.iteration() % config.checkpoint_every == 0) {
      save_both(run_dir, make_checkpoint(config, trainer));
      saved = true;
    }
  }
  if (!metrics) fail(ErrorCode::Io, "failed writing " + log.string());
  if (!saved) save_both(run_dir, make_checkpoint(config, trainer));
  result.iteration = trainer.iteration();
  result.checkpoint = run_dir / "checkpoint.bin";
  return result;
}

// -------------------------------------------------------- extract, render

FieldView LoadedField::view() const {
  return FieldView(field, config.training.schedule.mode, checkpoint.schedule.epsilon,
                   checkpoint.schedule.active_levels);
}

LoadedField load_field(const fs::path& path) {
  Checkpoint c = load_checkpoint(resolve_checkpoint(path));
  RunConfig config = c.config();
  NeuralField<float> field = restore_field(c);
  return {std::move(c), std::move(config), std::move(field)};
}

TriangleMesh cmd_extract(const fs::path& checkpoint, int resolution, const fs::path& out, MeshFormat format) {
  const LoadedField loaded = load_field(checkpoint);
  MarchingCubesConfig mc = loaded.config.mesh;
  if (resolution > 0) mc.resolution = resolution;
  TriangleMesh mesh = marching_cubes(loaded.view(), mc);
  mesh.normals = vertex_normals(mesh);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  export_mesh(mesh, out, format);
  return mesh;
}

void write_float_map(const fs::path& path, int width, int height, int channels, std::span<const float> values) {
  require(width > 0 && height > 0 && channels > 0, "map dimensions must be positive");
  require(values.size() == static_cast<std::size_t>(width) * height * channels, "map size does not match dimensions");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot write map " + path.string());
  out.write("HSDFMAP1", 8);
  io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(width));
  io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(height));
  io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(channels));
  io::write_array<float>(out, values);
  if (!out) fail(ErrorCode::Io, "failed writing map " + path.string());
}

FloatMap read_float_map(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot read map " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string_view(magic, 8) != "HSDFMAP1") fail(ErrorCode::Io, path.string() + " is not a float map");
  FloatMap m;
  m.width = static_cast<int>(io::read_pod<std::uint32_t>(in));
  m.height = static_cast<int>(io::read_pod<std::uint32_t>(in));
  m.channels = static_cast<int>(io::read_pod<std::uint32_t>(in));
  if (m.width <= 0 || m.height <= 0 || m.channels <= 0 || m.channels > 4)
    fail(ErrorCode::Io, path.string() + " has bad dimensions");
  m.values.resize(static_cast<std::size_t>(m.width) * m.height * m.channels);
  io::read_array<float>(in, m.values);
  return m;
}

namespace {

RenderConfig render_config(const LoadedField& loaded, const SceneDataset& dataset) {
  RenderConfig rc;
  rc.sampler = loaded.config.training.sampler;
  rc.background = dataset.background;
  rc.bound_radius = loaded.config.training.bound_radius;
  rc.sharpness = static_cast<double>(loaded.field.sharpness());
  rc.normal_step = loaded.checkpoint.schedule.epsilon;
  return rc;
}

Image to_image(const RenderedImage& r) {
  Image img(r.width, r.height, 3);
  img.data = r.rgb;
  return img;
}

}  // namespace

std::vector<fs::path> cmd_render(const fs::path& checkpoint, const fs::path& dataset_dir, const fs::path& out,
                                 const RenderOptions& options) {
  const LoadedField loaded = load_field(checkpoint);
  const SceneDataset dataset = load_dataset(dataset_dir);
  const RenderConfig rc = render_config(loaded, dataset);
  const FieldView view = loaded.view();
  fs::create_directories(out);
  std::vector<fs::path> written;
  for (std::size_t i = 0; i < dataset.views.size(); ++i) {
    const auto& dv = dataset.views[i];
    if (options.test_only && dv.train) continue;
    const RenderedImage r = render_image(dv.camera, view, rc, loaded.config.seed, i);
    char stem[16];
    std::snprintf(stem, sizeof stem, "%03zu", i);
    const fs::path png = out / (std::string(stem) + ".png");
    write_png(png, to_image(r));
    written.push_back(png);
    if (options.depth) write_float_map(out / (std::string(stem) + "_depth.map"), r.width, r.height, 1, r.depth);
    if (options.normals) write_float_map(out / (std::string(stem) + "_normal.map"), r.width, r.height, 3, r.normal);
  }
  return written;
}

// ------------------------------------------------------------------- eval

namespace {

std::string number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

std::string EvalReport::format() const {
  std::ostringstream out;
  out << "hashsdf-eval-report 1\n"
      << "config_hash " << config_hash << '\n'
      << "iteration " << iteration << '\n'
      << "metric chamfer " << number(chamfer) << " scene_units\n"
      << "metric f1 " << number(f1.f1) << " fraction\n"
      << "metric precision " << number(f1.precision) << " fraction\n"
      << "metric recall " << number(f1.recall) << " fraction\n"
      << "metric f1_threshold " << number(f1_threshold) << " scene_units\n"
      << "metric psnr_masked " << number(psnr_masked) << " dB\n"
      << "metric psnr " << number(psnr_full) << " dB\n"
      << "metric test_views " << views << " count\n"
      << "metric triangles " << triangles << " count\n"
      << "metric watertight " << (watertight ? 1 : 0) << " flag\n";
  return out.str();
}

EvalReport cmd_eval(const fs::path& checkpoint, const fs::path& dataset_dir) {
  const LoadedField loaded = load_field(checkpoint);
  const SceneDataset dataset = load_dataset(dataset_dir);
  const auto gt = read_points(fs::path(dataset_dir) / "gt_points.bin");
  const FieldView view = loaded.view();

  EvalReport report;
  report.config_hash = format_hash(loaded.checkpoint.config_hash);
  report.iteration = loaded.checkpoint.schedule.iteration;
  report.f1_threshold = loaded.config.f1_threshold;

  const TriangleMesh mesh = marching_cubes(view, loaded.config.mesh);
  report.triangles = mesh.triangles.size();
  if (mesh.empty()) {
    report.chamfer = std::numeric_limits<double>::infinity();
  } else {
    report.watertight = edge_report(mesh).watertight();
    Rng rng = make_stream(loaded.config.seed, {0x6576616cULL});
    const auto pred = sample_mesh_points(mesh, loaded.config.eval_points, rng);
    report.chamfer = chamfer(pred, gt);
    report.f1 = f1_score(pred, gt, loaded.config.f1_threshold);
  }

  const RenderConfig rc = render_config(loaded, dataset);
  double masked = 0.0, full = 0.0;
  for (std::size_t i = 0; i < dataset.views.size(); ++i) {
    const auto& dv = dataset.views[i];
    if (dv.train) continue;
    const Image img = to_image(render_image(dv.camera, view, rc, loaded.config.seed, i));
    masked += psnr(img, dv.rgb, dv.mask.data.empty() ? nullptr : &dv.mask);
    full += psnr(img, dv.rgb);
    ++report.views;
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  report.psnr_masked = report.views ? masked / report.views : nan;
  report.psnr_full = report.views ? full / report.views : nan;
  return report;
}

// ----------------------------------------------------------------- ablate

std::vector<std::size_t> AblationReport::ranking() const {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].ok) order.push_back(i);
  std::stable_sort(order.begin(), order.end(),
                   [this](std::size_t a, std::size_t b) { return rows[a].report.chamfer < rows[b].report.chamfer; });
  return order;
}

bool AblationReport::complete() const {
  return std::all_of(rows.begin(), rows.end(), [](const AblationRow& r) { return r.ok; });
}

std::string AblationReport::format() const {
  std::ostringstream out;
  out << "hashsdf-ablation-report 1\n"
      << "config_hash " << config_hash << '\n'
      << "rank\tmode\tchamfer\tf1\tpsnr_masked\tfinal_rgb\tstatus\n";
  int rank = 1;
  for (std::size_t i : ranking()) {
    const auto& r = rows[i];
    out << rank++ << '\t' << mode_name(r.mode) << '\t' << number(r.report.chamfer) << '\t' << number(r.report.f1.f1)
        << '\t' << number(r.report.psnr_masked) << '\t' << number(r.final_rgb) << "\tok\n";
  }
  for (const auto& r : rows)
    if (!r.ok) out << "-\t" << mode_name(r.mode) << "\t-\t-\t-\t-\tfailed: " << r.failure << '\n';
  return out.str();
}

AblationReport cmd_ablate(const RunConfig& config, const std::vector<GradientMode>& modes, const fs::path& out,
                          std::ostream* progress) {
  require(!modes.empty(), "ablation needs at least one mode");
  config.validate();
  AblationReport report;
  report.config_hash = format_hash(config_hash(config));
  fs::create_directories(out);
  for (std::size_t i = 0; i < modes.size(); ++i) {
    AblationRow row;
    row.mode = modes[i];
    std::string label = mode_name(modes[i]);
    std::replace(label.begin(), label.end(), '+', 'P');
    char dir[64];
    std::snprintf(dir, sizeof dir, "%02zu_%s", i, label.c_str());
    RunConfig run = config;
    run.training.schedule.mode = modes[i];
    run.run_dir = (out / dir).string();
    if (progress) *progress << "ablate: training " << mode_name(modes[i]) << " in " << run.run_dir << '\n';
    try {
      TrainOptions opts;
      opts.run_dir = run.run_dir;
      opts.progress = progress;
      const TrainResult trained = cmd_train(run, opts);
      row.final_rgb = trained.last ? trained.last->parts.rgb : 0.0;
      row.report = cmd_eval(trained.checkpoint, run.dataset_dir);
      row.ok = true;
    } catch (const Error& e) {
      row.failure = std::string(error_code_name(e.code())) + ": " + e.what();
      row.failure_code = e.code();
    }
    report.rows.push_back(std::move(row));
  }
  std::ofstream file(out / "ablation.txt", std::ios::trunc);
  file << report.format();
  if (!file) fail(ErrorCode::Io, "cannot write " + (out / "ablation.txt").string());
  return report;
}

}  // namespace hashsdf
