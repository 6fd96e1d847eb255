#include <doctest.h>

#include <fstream>
#include <iterator>

#include "hashsdf/checkpoint.hpp"
#include "hashsdf/commands.hpp"
#include "hashsdf/error.hpp"
#include "hashsdf/pipeline.hpp"
#include "tiny_run.hpp"

using namespace hashsdf;
using namespace hashsdf::testing;
namespace fs = std::filesystem;

namespace {

Trainer make_trainer(const RunConfig& config) {
  const SceneDataset data = load_dataset(config.dataset_dir);
  auto views = training_views(data);
  TrainingConfig tc = config.training_config();
  tc.background = data.background;
  tc.field.image_count = static_cast<int>(views.size());
  return Trainer(tc, std::move(views));
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

ErrorCode load_error(const fs::path& p) {
  try {
    load_checkpoint(p);
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::InvalidInput;
}

}  // namespace

TEST_CASE("checkpoint round trip resumes bit-exactly") {
  TempDir tmp("ckpt_roundtrip");
  const RunConfig config = tiny_run(tmp.path);
  cmd_generate(config, config.dataset_dir);

  Trainer a = make_trainer(config);
  for (int i = 0; i < 7; ++i) a.step();
  const fs::path file = tmp.path / "c.bin";
  save_checkpoint(file, make_checkpoint(config, a));

  const Checkpoint c = load_checkpoint(file);
  CHECK(c.schedule.iteration == 7);
  CHECK(c.config_hash == config_hash(config));
  CHECK(serialize_config(c.config()) == serialize_config(config));
  CHECK(c.adam.steps == a.optimizer().steps);

  Trainer b = make_trainer(config);
  restore_trainer(b, c);
  CHECK(b.iteration() == 7);
  for (int i = 0; i < 5; ++i) {
    const StepMetrics ma = a.step();
    const StepMetrics mb = b.step();
    CHECK(ma.total == mb.total);
    CHECK(ma.parts.rgb == mb.parts.rgb);
    CHECK(ma.epsilon == mb.epsilon);
  }
  CHECK(std::equal(a.field().parameters().begin(), a.field().parameters().end(), b.field().parameters().begin()));

  const NeuralField<float> restored = restore_field(c);
  CHECK(restored.parameters().size() == c.parameters.size());
}

TEST_CASE("damaged checkpoints are rejected") {
  TempDir tmp("ckpt_damage");
  const RunConfig config = tiny_run(tmp.path);
  cmd_generate(config, config.dataset_dir);
  Trainer t = make_trainer(config);
  const fs::path good = tmp.path / "good.bin";
  save_checkpoint(good, make_checkpoint(config, t));
  const std::string bytes = read_bytes(good);
  const fs::path bad = tmp.path / "bad.bin";

  SUBCASE("flipped payload byte") {
    std::string b = bytes;
    b[b.size() / 2] ^= 0x40;
    write_bytes(bad, b);
    CHECK(load_error(bad) == ErrorCode::Checkpoint);
  }
  SUBCASE("truncated") {
    write_bytes(bad, bytes.substr(0, bytes.size() - 13));
    CHECK(load_error(bad) == ErrorCode::Checkpoint);
  }
  SUBCASE("wrong magic") {
    std::string b = bytes;
    b[0] = 'X';
    write_bytes(bad, b);
    CHECK(load_error(bad) == ErrorCode::Checkpoint);
  }
  SUBCASE("future version") {
    std::string b = bytes;
    b[8] = 9;
    write_bytes(bad, b);
    CHECK(load_error(bad) == ErrorCode::Checkpoint);
  }
  SUBCASE("missing file") { CHECK(load_error(tmp.path / "absent.bin") == ErrorCode::Io); }
}

TEST_CASE("restoring into a different layout fails") {
  TempDir tmp("ckpt_layout");
  RunConfig config = tiny_run(tmp.path);
  cmd_generate(config, config.dataset_dir);
  Trainer t = make_trainer(config);
  const Checkpoint c = make_checkpoint(config, t);
  RunConfig wider = config;
  wider.training.field.sdf_hidden = 24;
  Trainer other = make_trainer(wider);
  CHECK_THROWS_AS(restore_trainer(other, c), Error);
}
