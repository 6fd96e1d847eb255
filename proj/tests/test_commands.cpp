#include <doctest.h>

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "hashsdf/commands.hpp"
#include "hashsdf/error.hpp"
#include "hashsdf/eval.hpp"
#include "tiny_run.hpp"

using namespace hashsdf;
using namespace hashsdf::testing;
namespace fs = std::filesystem;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// Symmetric mean distance between mesh samples and the sphere |x| = r.
double sphere_chamfer(const TriangleMesh& mesh, double r) {
  Rng rng = make_stream(3, {});
  const auto pred = sample_mesh_points(mesh, 20000, rng);
  std::vector<Vec3> gt;
  for (int i = 0; i < 20000; ++i) {
    Vec3 d(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    if (d.norm() < 1e-3) continue;
    gt.push_back(r * d.normalized());
  }
  return chamfer(pred, gt);
}

}  // namespace

TEST_CASE("exit statuses are distinct per error code") {
  CHECK(exit_status(ErrorCode::InvalidInput) == 2);
  std::set<int> seen;
  for (auto c : {ErrorCode::InvalidInput, ErrorCode::Io, ErrorCode::NonFinite, ErrorCode::Config,
                 ErrorCode::Checkpoint, ErrorCode::Locked})
    CHECK(seen.insert(exit_status(c)).second);
  CHECK(seen.count(0) == 0);
}

TEST_CASE("generate is byte-reproducible") {
  TempDir tmp("cmd_generate");
  RunConfig config = tiny_run(tmp.path);
  cmd_generate(config, tmp.path / "a");
  cmd_generate(config, tmp.path / "b");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(tmp.path / "a")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const fs::path twin = tmp.path / "b" / fs::relative(e.path(), tmp.path / "a");
    CHECK(read_text(e.path()) == read_text(twin));
  }
  CHECK(files > 4);
}

TEST_CASE("zero-iteration run leaves the initial checkpoint, which meshes as a sphere") {
  TempDir tmp("cmd_zero");
  RunConfig config = tiny_run(tmp.path);
  set_config_value(config, "iterations", "0");
  set_config_value(config, "milestone_1", "0");
  set_config_value(config, "milestone_2", "0");
  set_config_value(config, "warmup", "0");
  cmd_generate(config, config.dataset_dir);
  const TrainResult r = cmd_train(config, {config.run_dir, std::nullopt, -1, nullptr});
  CHECK(r.iteration == 0);
  CHECK(fs::exists(fs::path(config.run_dir) / "checkpoint.bin"));
  CHECK(fs::exists(fs::path(config.run_dir) / "config.txt"));
  CHECK(!fs::exists(fs::path(config.run_dir) / "run.lock"));

  const auto mesh = cmd_extract(config.run_dir, 48, tmp.path / "init.ply", MeshFormat::Ply);
  const double radius = std::stod(get_config_value(config, "init.radius"));
  const double d = sphere_chamfer(mesh, radius);
  MESSAGE("init sphere chamfer " << d);
  CHECK(d < 0.05);
  CHECK(edge_report(mesh).watertight());

  const auto coarse = cmd_extract(config.run_dir, 8, tmp.path / "coarse.obj", MeshFormat::Obj);
  CHECK(!coarse.triangles.empty());
  CHECK(import_mesh(tmp.path / "coarse.obj", MeshFormat::Obj).triangles.size() == coarse.triangles.size());
}

TEST_CASE("a field positive everywhere extracts an empty mesh") {
  TempDir tmp("cmd_positive");
  RunConfig config = tiny_run(tmp.path);
  set_config_value(config, "iterations", "0");
  set_config_value(config, "milestone_1", "0");
  set_config_value(config, "milestone_2", "0");
  set_config_value(config, "warmup", "0");
  cmd_generate(config, config.dataset_dir);
  cmd_train(config, {config.run_dir, std::nullopt, -1, nullptr});
  Checkpoint c = load_checkpoint(fs::path(config.run_dir) / "checkpoint.bin");
  for (const auto& s : c.segments)
    if (s.name == "sdf.b2") c.parameters[s.offset] += 50.0f;  // first output is the distance
  const fs::path stub = tmp.path / "stub.bin";
  save_checkpoint(stub, c);
  const auto mesh = cmd_extract(stub, 16, tmp.path / "empty.ply", MeshFormat::Ply);
  CHECK(mesh.triangles.empty());
  CHECK(fs::exists(tmp.path / "empty.ply"));
  CHECK(import_mesh(tmp.path / "empty.ply", MeshFormat::Ply).triangles.empty());
}

TEST_CASE("resume replays the metrics log exactly") {
  TempDir tmp("cmd_resume");
  RunConfig config = tiny_run(tmp.path);
  cmd_generate(config, config.dataset_dir);

  const fs::path whole = tmp.path / "whole", split = tmp.path / "split";
  cmd_train(config, {whole, std::nullopt, -1, nullptr});
  const TrainResult first = cmd_train(config, {split, std::nullopt, 10, nullptr});
  CHECK(first.iteration == 10);
  // Resume from the iteration-8 checkpoint: records 8 and 9 are rewritten.
  const TrainResult second = cmd_train(config, {split, split / "checkpoints" / "000008.bin", -1, nullptr});
  CHECK(second.iteration == 24);

  const auto a = lines(read_text(whole / "metrics.jsonl"));
  const auto b = lines(read_text(split / "metrics.jsonl"));
  CHECK(a.size() == 24);
  CHECK(a == b);
  CHECK(read_text(whole / "checkpoint.bin") == read_text(split / "checkpoint.bin"));

  const auto rec = nlohmann::json::parse(a.front());
  CHECK(rec["version"] == kMetricsVersion);
  CHECK(rec["iteration"] == 0);
  for (const char* key : {"loss_rgb", "loss_eikonal", "loss_curvature", "loss_total", "epsilon", "active_levels"})
    CHECK(rec.contains(key));

  // A changed setting refuses to resume.
  RunConfig other = config;
  other.seed = 99;
  try {
    cmd_train(other, {split, split / "checkpoint.bin", -1, nullptr});
    FAIL("resume accepted a different config");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Checkpoint);
  }
}

TEST_CASE("a locked run directory is refused") {
  TempDir tmp("cmd_lock");
  RunConfig config = tiny_run(tmp.path);
  cmd_generate(config, config.dataset_dir);
  RunLock held(config.run_dir);
  try {
    cmd_train(config, {config.run_dir, std::nullopt, -1, nullptr});
    FAIL("train ignored the lock");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Locked);
  }
}

TEST_CASE("float maps round trip") {
  TempDir tmp("cmd_map");
  const std::vector<float> v{0.f, 1.5f, -2.f, 3.25f, 4.f, 5.f};
  write_float_map(tmp.path / "m.map", 3, 1, 2, v);
  const FloatMap m = read_float_map(tmp.path / "m.map");
  CHECK(m.width == 3);
  CHECK(m.height == 1);
  CHECK(m.channels == 2);
  CHECK(m.values == v);
  CHECK_THROWS_AS(read_float_map(tmp.path / "missing.map"), Error);
}

TEST_CASE("render and eval on a short run") {
  TempDir tmp("cmd_eval");
  RunConfig config = tiny_run(tmp.path);
  cmd_generate(config, config.dataset_dir);
  cmd_train(config, {config.run_dir, std::nullopt, -1, nullptr});

  const auto written = cmd_render(config.run_dir, config.dataset_dir, tmp.path / "renders", {true, true, true});
  REQUIRE(written.size() == 2);
  // Files are named after the dataset frame index.
  const std::string stem = written[0].stem().string();
  CHECK(fs::exists(tmp.path / "renders" / (stem + "_depth.map")));
  const FloatMap normals = read_float_map(tmp.path / "renders" / (stem + "_normal.map"));
  CHECK(normals.channels == 3);
  CHECK(normals.width == 16);

  const EvalReport r = cmd_eval(config.run_dir, config.dataset_dir);
  CHECK(r.iteration == 24);
  CHECK(r.views == 2);
  CHECK(r.config_hash == format_hash(config_hash(config)));
  CHECK(std::isfinite(r.chamfer));
  const auto text = lines(r.format());
  CHECK(text.front() == "hashsdf-eval-report 1");
  CHECK(text.size() > 5);
  CHECK(text[1] == "config_hash " + r.config_hash);
}

TEST_CASE("ablation rows") {
  TempDir tmp("cmd_ablate");
  RunConfig config = tiny_run(tmp.path);
  set_config_value(config, "iterations", "8");
  set_config_value(config, "milestone_1", "6");
  set_config_value(config, "milestone_2", "7");
  cmd_generate(config, config.dataset_dir);

  SUBCASE("a single mode gives a single row") {
    const auto report = cmd_ablate(config, {GradientMode::NumericalProgressive}, tmp.path / "one");
    REQUIRE(report.rows.size() == 1);
    CHECK(report.rows[0].ok);
    CHECK(report.complete());
    CHECK(fs::exists(tmp.path / "one" / "ablation.txt"));
  }
  SUBCASE("a repeated mode gives identical rows") {
    const auto report = cmd_ablate(config, {GradientMode::Numerical, GradientMode::Numerical}, tmp.path / "two");
    REQUIRE(report.rows.size() == 2);
    CHECK(report.rows[0].report.chamfer == report.rows[1].report.chamfer);
    CHECK(report.rows[0].report.psnr_masked == report.rows[1].report.psnr_masked);
    CHECK(report.rows[0].final_rgb == report.rows[1].final_rgb);
    CHECK(report.ranking() == std::vector<std::size_t>{0, 1});
  }
  SUBCASE("a failing run is reported and the rest continue") {
    // Hold the lock of the first run directory.
    fs::create_directories(tmp.path / "part" / "00_AG");
    RunLock held(tmp.path / "part" / "00_AG");
    const auto report = cmd_ablate(config, {GradientMode::Analytical, GradientMode::Numerical}, tmp.path / "part");
    REQUIRE(report.rows.size() == 2);
    CHECK(!report.rows[0].ok);
    CHECK(report.rows[0].failure_code == ErrorCode::Locked);
    CHECK(report.rows[1].ok);
    CHECK(!report.complete());
    CHECK(report.ranking() == std::vector<std::size_t>{1});
    CHECK(report.format().find("failed") != std::string::npos);
  }
}
