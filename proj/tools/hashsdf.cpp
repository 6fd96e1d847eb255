// Command-line frontend: generate, train, extract, render, eval, ablate.

#include <malloc.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hashsdf/commands.hpp"
#include "hashsdf/error.hpp"

using namespace hashsdf;
namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::vector<std::string> sets;  // key=value
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "config file (key = value lines)");
  cmd->add_option("--seed", f.seed, "override the seed key");
  cmd->add_option("--mode", f.mode, "override the mode key: AG, AG+P, NG or NG+P");
  cmd->add_option("--set", f.sets, "override any key, repeatable: --set key=value");
}

// Base config (file or defaults, else `fallback`), then environment, then flags.
RunConfig resolve_config(const CommonFlags& f, const RunConfig* fallback = nullptr) {
  RunConfig config = !f.config.empty() || !fallback ? load_config(f.config) : *fallback;
  if (f.config.empty() && fallback) apply_environment(config, process_environment());
  for (const auto& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) fail(ErrorCode::Config, "--set expects key=value, got '" + kv + "'");
    set_config_value(config, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (f.seed) config.seed = *f.seed;
  if (f.mode) config.training.schedule.mode = parse_mode(*f.mode);
  config.validate();
  return config;
}

void print_error(const std::string& code, const std::string& message) {
  std::string line = message;
  for (char& ch : line)
    if (ch == '\n') ch = ' ';
  std::cerr << "error: " << code << ": " << line << std::endl;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
}

}  // namespace

int main(int argc, char** argv) {
  // Training reallocates the same large activation buffers every step; keep
  // them on the heap instead of fresh page-faulting mappings.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Neural SDF surface reconstruction with hash-grid encodings"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every command");

  CommonFlags common;
  std::string out, checkpoint, dataset, format, modes;
  std::optional<std::string> resume;
  int resolution = 0, until = -1;
  bool all_views = false, depth = false, normals = false, quiet = false, annotate = false;

  auto* generate = app.add_subcommand("generate", "write a synthetic dataset");
  add_common(generate, common);
  generate->add_option("--out", out, "dataset directory (default: dataset key)");

  auto* train = app.add_subcommand("train", "train a field on a dataset");
  add_common(train, common);
  train->add_option("--out", out, "run directory (default: run key)");
  train->add_option("--dataset", dataset, "dataset directory (default: dataset key)");
  train->add_option("--resume", resume, "continue from a checkpoint file or run directory");
  train->add_option("--until", until, "stop after this many iterations (checkpointed)");
  train->add_flag("--quiet", quiet, "no progress lines");

  auto* extract = app.add_subcommand("extract", "marching cubes mesh from a checkpoint");
  add_common(extract, common);
  extract->add_option("--checkpoint", checkpoint, "checkpoint file or run directory")->required();
  extract->add_option("--out", out, "mesh file (.ply or .obj)")->required();
  extract->add_option("--resolution", resolution, "cells per axis (default: mesh.resolution key)");
  extract->add_option("--format", format, "ply or obj (default: from the extension)");

  auto* render = app.add_subcommand("render", "render dataset views from a checkpoint");
  add_common(render, common);
  render->add_option("--checkpoint", checkpoint, "checkpoint file or run directory")->required();
  render->add_option("--dataset", dataset, "dataset directory (default: the run's dataset)");
  render->add_option("--out", out, "output directory")->required();
  render->add_flag("--all", all_views, "render training views too");
  render->add_flag("--depth", depth, "write NNN_depth.map float maps");
  render->add_flag("--normals", normals, "write NNN_normal.map float maps");

  auto* eval = app.add_subcommand("eval", "Chamfer, F1 and PSNR of a checkpoint");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file or run directory")->required();
  eval->add_option("--dataset", dataset, "dataset directory (default: the run's dataset)");
  eval->add_option("--out", out, "also write the report here");

  auto* ablate = app.add_subcommand("ablate", "train and compare gradient modes");
  add_common(ablate, common);
  ablate->add_option("--out", out, "ablation directory")->required();
  ablate->add_option("--dataset", dataset, "dataset directory (default: dataset key)");
  ablate->add_option("--modes", modes, "comma-separated modes (default: ablate.modes key)");
  ablate->add_flag("--quiet", quiet, "no progress lines");

  auto* config_cmd = app.add_subcommand("config", "print the resolved configuration");
  add_common(config_cmd, common);
  config_cmd->add_flag("--annotate", annotate, "append descriptions and full-scale values");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error(std::string(error_code_name(ErrorCode::InvalidInput)), e.what());
    return exit_status(ErrorCode::InvalidInput);
  }

  try {
    if (generate->parsed()) {
      RunConfig config = resolve_config(common);
      if (!out.empty()) config.dataset_dir = out;
      cmd_generate(config, config.dataset_dir);
      std::cout << "dataset written to " << config.dataset_dir << '\n';
    } else if (train->parsed()) {
      std::optional<RunConfig> stored;
      if (resume) stored = load_checkpoint(resolve_checkpoint(*resume)).config();
      RunConfig config = resolve_config(common, stored ? &*stored : nullptr);
      if (!out.empty()) config.run_dir = out;
      if (!dataset.empty()) config.dataset_dir = dataset;
      TrainOptions opts;
      opts.run_dir = config.run_dir;
      if (resume) opts.resume = *resume;
      opts.stop_at = until;
      opts.progress = quiet ? nullptr : &std::cout;
      const auto result = cmd_train(config, opts);
      std::cout << "trained to iteration " << result.iteration << "; checkpoint " << result.checkpoint.string()
                << '\n';
    } else if (extract->parsed()) {
      const MeshFormat fmt = format.empty() ? mesh_format_for(out) : parse_mesh_format(format);
      const auto mesh = cmd_extract(checkpoint, resolution, out, fmt);
      std::cout << "mesh with " << mesh.vertices.size() << " vertices and " << mesh.triangles.size()
                << " triangles written to " << out << '\n';
    } else if (render->parsed()) {
      const fs::path data = dataset.empty() ? fs::path(load_field(checkpoint).config.dataset_dir) : fs::path(dataset);
      RenderOptions opts;
      opts.test_only = !all_views;
      opts.depth = depth;
      opts.normals = normals;
      const auto written = cmd_render(checkpoint, data, out, opts);
      std::cout << written.size() << " images written to " << out << '\n';
    } else if (eval->parsed()) {
      const fs::path data = dataset.empty() ? fs::path(load_field(checkpoint).config.dataset_dir) : fs::path(dataset);
      const auto report = cmd_eval(checkpoint, data).format();
      std::cout << report;
      if (!out.empty()) write_text(out, report);
    } else if (ablate->parsed()) {
      RunConfig config = resolve_config(common);
      if (!dataset.empty()) config.dataset_dir = dataset;
      if (!modes.empty()) set_config_value(config, "ablate.modes", modes);
      const auto report = cmd_ablate(config, config.ablate_modes, out, quiet ? nullptr : &std::cout);
      std::cout << report.format();
      if (!report.complete()) {
        const auto& failed = *std::find_if(report.rows.begin(), report.rows.end(), [](auto& r) { return !r.ok; });
        print_error(std::string(error_code_name(failed.failure_code)),
                    "ablation incomplete; " + mode_name(failed.mode) + " failed: " + failed.failure);
        return exit_status(failed.failure_code);
      }
    } else if (config_cmd->parsed()) {
      std::cout << serialize_config(resolve_config(common), annotate);
    }
  } catch (const Error& e) {
    print_error(std::string(error_code_name(e.code())), e.what());
    return exit_status(e.code());
  } catch (const fs::filesystem_error& e) {
    print_error(std::string(error_code_name(ErrorCode::Io)), e.what());
    return exit_status(ErrorCode::Io);
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
  return 0;
}
