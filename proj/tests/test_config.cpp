#include <doctest.h>

#include <map>
#include <set>

#include "hashsdf/config.hpp"
#include "hashsdf/error.hpp"

using namespace hashsdf;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error raised");
  return ErrorCode::InvalidInput;
}

}  // namespace

TEST_CASE("defaults validate and carry the desk budget") {
  const RunConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.training.schedule.iterations == 5000);
  CHECK(c.training.schedule.activation_interval == 500);
  CHECK(c.dataset.rig.views == 16);
  CHECK(c.dataset.rig.image_size == 64);
  CHECK(c.training.schedule.mode == GradientMode::NumericalProgressive);
  CHECK(c.ablate_modes.size() >= 2);
}

TEST_CASE("full-scale values annotate the documented keys") {
  std::map<std::string, std::string> full;
  std::set<std::string> names;
  for (const auto& k : config_keys()) {
    CHECK(names.insert(k.name).second);
    CHECK(!k.description.empty());
    full[k.name] = k.full_scale;
  }
  CHECK(full["encoding.levels"] == "16");
  CHECK(full["encoding.min_resolution"] == "32");
  CHECK(full["encoding.max_resolution"] == "2048");
  CHECK(full["encoding.channels"] == "8");
  CHECK(full["encoding.table_size"] == "4194304");
  CHECK(full["eikonal_weight"] == "0.1");
  CHECK(full["iterations"] == "500000");
  CHECK(full["mesh.resolution"] == "512");
  CHECK(full["mode"] == "NG+P");
}

TEST_CASE("serialize and parse round trip") {
  RunConfig c;
  c.seed = 77;
  set_config_value(c, "mode", "AG+P");
  set_config_value(c, "learning_rate", "0.0031");
  set_config_value(c, "scene", "TORUS");
  set_config_value(c, "ablate.modes", "NG,AG");
  set_config_value(c, "mesh.format", "obj");
  set_config_value(c, "exposure", "true");
  const std::string text = serialize_config(c);
  const RunConfig back = parse_config(text);
  CHECK(serialize_config(back) == text);
  CHECK(config_hash(back) == config_hash(c));
  CHECK(back.training.schedule.mode == GradientMode::AnalyticalProgressive);
  CHECK(back.training.schedule.learning_rate == 0.0031);
  CHECK(back.ablate_modes == std::vector<GradientMode>{GradientMode::Numerical, GradientMode::Analytical});

  // Annotations are comments and leave the result unchanged.
  CHECK(serialize_config(parse_config(serialize_config(c, true))) == text);

  // Doubles survive exactly.
  set_config_value(c, "init.radius", "0.1");
  c.training.schedule.learning_rate = 1.0 / 3.0;
  CHECK(parse_config(serialize_config(c)).training.schedule.learning_rate == 1.0 / 3.0);
}

TEST_CASE("parse rejects unknown, repeated and malformed keys") {
  CHECK(code_of([] { parse_config("no_such_key = 1\n"); }) == ErrorCode::Config);
  CHECK(code_of([] { parse_config("seed = 1\nseed = 2\n"); }) == ErrorCode::Config);
  CHECK(code_of([] { parse_config("seed = banana\n"); }) == ErrorCode::Config);
  CHECK(code_of([] { parse_config("seed\n"); }) == ErrorCode::Config);
  CHECK(code_of([] { parse_config("mode = XG\n"); }) == ErrorCode::Config);
  CHECK(code_of([] { parse_config("iterations = -5\n"); }) == ErrorCode::Config);
  CHECK(code_of([] { parse_config("curvature_warmup = maybe\n"); }) == ErrorCode::Config);
  const RunConfig c = parse_config("# comment\n\n  seed = 9   # trailing\nmode=NG\n");
  CHECK(c.seed == 9);
  CHECK(c.training.schedule.mode == GradientMode::Numerical);
}

TEST_CASE("the run seed reaches dataset and training") {
  RunConfig c;
  c.seed = 1234;
  CHECK(c.training_config().seed == 1234);
  CHECK(c.dataset_config().seed == 1234);
}

TEST_CASE("environment overrides use the documented prefix") {
  CHECK(environment_name("encoding.table_size") == "HASHSDF_ENCODING_TABLE_SIZE");
  CHECK(environment_name("seed") == "HASHSDF_SEED");
  RunConfig c;
  apply_environment(c, {"PATH=/usr/bin", "HASHSDF_SEED=5", "HASHSDF_MODE=AG", "HASHSDF_ENCODING_LEVELS=6"});
  CHECK(c.seed == 5);
  CHECK(c.training.schedule.mode == GradientMode::Analytical);
  CHECK(c.training.field.encoding.levels == 6);
  CHECK(code_of([&] { apply_environment(c, {"HASHSDF_BOGUS=1"}); }) == ErrorCode::Config);
}

TEST_CASE("hash depends on settings but not on paths") {
  RunConfig a, b;
  CHECK(config_hash(a) == config_hash(b));
  b.run_dir = "elsewhere";
  b.dataset_dir = "other";
  CHECK(config_hash(a) == config_hash(b));
  b.seed = 1;
  CHECK(config_hash(a) != config_hash(b));
  CHECK(format_hash(0x1234) == "0000000000001234");
}

TEST_CASE("validation names the offending setting") {
  RunConfig c;
  c.training.schedule.milestone_1 = 10;
  c.training.schedule.milestone_2 = 5;
  CHECK(code_of([&] { c.validate(); }) == ErrorCode::Config);
  RunConfig d;
  d.ablate_modes.clear();
  CHECK(code_of([&] { d.validate(); }) == ErrorCode::Config);
}
