#include "hashsdf/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "hashsdf/binary_io.hpp"
#include "hashsdf/error.hpp"

// Layout: "HSDFCKPT", u32 version, u64 config hash, u32 section count, then
// per section: 4-byte tag, u64 payload length, payload, u64 FNV-1a of the
// payload. Sections: CONF, SCHD, GRID, PARM, ADAM.

namespace hashsdf {

namespace {

constexpr std::array<char, 8> kMagic{'H', 'S', 'D', 'F', 'C', 'K', 'P', 'T'};

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

[[noreturn]] void corrupt(const std::string& what) { fail(ErrorCode::Checkpoint, "checkpoint: " + what); }

// Reads a payload written by the matching writer; truncation is corruption.
template <class Fn>
void parse_section(const std::string& payload, const char* tag, Fn&& fn) {
  std::istringstream in(payload);
  try {
    fn(in);
  } catch (const Error&) {
    corrupt(std::string("section ") + tag + " is truncated");
  }
  if (in.peek() != std::char_traits<char>::eof()) corrupt(std::string("section ") + tag + " has trailing bytes");
}

void write_floats(std::ostream& out, const std::vector<float>& v) {
  io::write_pod<std::uint64_t>(out, v.size());
  io::write_array<float>(out, v);
}

std::vector<float> read_floats(std::istream& in, std::uint64_t limit) {
  const auto n = io::read_pod<std::uint64_t>(in);
  if (n > limit) corrupt("array length exceeds the file size");
  std::vector<float> v(n);
  io::read_array<float>(in, v);
  return v;
}

}  // namespace

RunConfig Checkpoint::config() const {
  try {
    return parse_config(config_text);
  } catch (const Error& e) {
    corrupt(std::string("stored config is invalid: ") + e.what());
  }
}

Checkpoint make_checkpoint(const RunConfig& config, const Trainer& trainer) {
  Checkpoint c;
  c.config_text = serialize_config(config);
  c.config_hash = config_hash(config);
  c.schedule = trainer.schedule();
  c.encoding = trainer.field().config().encoding;
  c.image_count = trainer.field().config().image_count;
  c.segments = trainer.field().segments();
  const auto params = trainer.field().parameters();
  c.parameters.assign(params.begin(), params.end());
  c.adam = trainer.optimizer();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  std::vector<std::pair<std::string, std::string>> sections;
  {
    std::ostringstream s;
    io::write_string(s, c.config_text);
    sections.emplace_back("CONF", s.str());
  }
  {
    std::ostringstream s;
    io::write_pod<std::int32_t>(s, c.schedule.iteration);
    io::write_pod<double>(s, c.schedule.epsilon);
    io::write_pod<std::int32_t>(s, c.schedule.active_levels);
    io::write_pod<double>(s, c.schedule.learning_rate);
    io::write_pod<double>(s, c.schedule.curvature_weight);
    io::write_pod<std::int32_t>(s, c.schedule.decay_count);
    sections.emplace_back("SCHD", s.str());
  }
  {
    std::ostringstream s;
    io::write_pod<std::int32_t>(s, c.encoding.levels);
    io::write_pod<std::int32_t>(s, c.encoding.min_resolution);
    io::write_pod<std::int32_t>(s, c.encoding.max_resolution);
    io::write_pod<std::int32_t>(s, c.encoding.channels);
    io::write_pod<std::uint32_t>(s, c.encoding.table_size);
    sections.emplace_back("GRID", s.str());
  }
  {
    std::ostringstream s;
    io::write_pod<std::int32_t>(s, c.image_count);
    io::write_pod<std::uint32_t>(s, static_cast<std::uint32_t>(c.segments.size()));
    for (const auto& seg : c.segments) {
      io::write_string(s, seg.name);
      io::write_pod<std::uint64_t>(s, seg.offset);
      io::write_pod<std::uint64_t>(s, seg.size);
      io::write_pod<std::int32_t>(s, seg.rows);
      io::write_pod<std::int32_t>(s, seg.cols);
    }
    write_floats(s, c.parameters);
    sections.emplace_back("PARM", s.str());
  }
  {
    std::ostringstream s;
    io::write_pod<std::int64_t>(s, c.adam.steps);
    io::write_pod<std::int32_t>(s, c.adam.consecutive_skips);
    io::write_pod<std::int64_t>(s, c.adam.skipped);
    write_floats(s, c.adam.m);
    write_floats(s, c.adam.v);
    sections.emplace_back("ADAM", s.str());
  }

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot write checkpoint " + tmp.string());
    out.write(kMagic.data(), kMagic.size());
    io::write_pod<std::uint32_t>(out, kCheckpointVersion);
    io::write_pod<std::uint64_t>(out, c.config_hash);
    io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(sections.size()));
    for (const auto& [tag, payload] : sections) {
      out.write(tag.data(), 4);
      io::write_pod<std::uint64_t>(out, payload.size());
      out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
      io::write_pod<std::uint64_t>(out, fnv1a(payload));
    }
    out.flush();
    if (!out) fail(ErrorCode::Io, "failed writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::Io, "cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot read checkpoint " + path.string());
  std::error_code ec;
  const auto file_size = std::filesystem::file_size(path, ec);
  if (ec) fail(ErrorCode::Io, "cannot stat checkpoint " + path.string());

  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) corrupt(path.string() + " is not a checkpoint (bad magic)");
  Checkpoint c;
  std::map<std::string, std::string> sections;
  try {
    const auto version = io::read_pod<std::uint32_t>(in);
    if (version != kCheckpointVersion) corrupt("unsupported version " + std::to_string(version));
    c.config_hash = io::read_pod<std::uint64_t>(in);
    const auto count = io::read_pod<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < count; ++i) {
      std::string tag(4, '\0');
      in.read(tag.data(), 4);
      const auto length = io::read_pod<std::uint64_t>(in);
      if (length > file_size) corrupt("section " + tag + " is longer than the file");
      std::string payload(length, '\0');
      in.read(payload.data(), static_cast<std::streamsize>(length));
      if (!in) corrupt("section " + tag + " is truncated");
      if (io::read_pod<std::uint64_t>(in) != fnv1a(payload)) corrupt("section " + tag + " fails its checksum");
      sections[tag] = std::move(payload);
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Checkpoint) throw;
    corrupt("file is truncated");
  }
  for (const char* tag : {"CONF", "SCHD", "GRID", "PARM", "ADAM"})
    if (!sections.count(tag)) corrupt(std::string("missing section ") + tag);

  parse_section(sections["CONF"], "CONF", [&](std::istream& s) { c.config_text = io::read_string(s); });
  parse_section(sections["SCHD"], "SCHD", [&](std::istream& s) {
    c.schedule.iteration = io::read_pod<std::int32_t>(s);
    c.schedule.epsilon = io::read_pod<double>(s);
    c.schedule.active_levels = io::read_pod<std::int32_t>(s);
    c.schedule.learning_rate = io::read_pod<double>(s);
    c.schedule.curvature_weight = io::read_pod<double>(s);
    c.schedule.decay_count = io::read_pod<std::int32_t>(s);
  });
  parse_section(sections["GRID"], "GRID", [&](std::istream& s) {
    c.encoding.levels = io::read_pod<std::int32_t>(s);
    c.encoding.min_resolution = io::read_pod<std::int32_t>(s);
    c.encoding.max_resolution = io::read_pod<std::int32_t>(s);
    c.encoding.channels = io::read_pod<std::int32_t>(s);
    c.encoding.table_size = io::read_pod<std::uint32_t>(s);
  });
  parse_section(sections["PARM"], "PARM", [&](std::istream& s) {
    c.image_count = io::read_pod<std::int32_t>(s);
    const auto n = io::read_pod<std::uint32_t>(s);
    if (n > file_size) corrupt("segment count exceeds the file size");
    for (std::uint32_t i = 0; i < n; ++i) {
      ParamSegment seg;
      seg.name = io::read_string(s);
      seg.offset = io::read_pod<std::uint64_t>(s);
      seg.size = io::read_pod<std::uint64_t>(s);
      seg.rows = io::read_pod<std::int32_t>(s);
      seg.cols = io::read_pod<std::int32_t>(s);
      c.segments.push_back(std::move(seg));
    }
    c.parameters = read_floats(s, file_size);
  });
  parse_section(sections["ADAM"], "ADAM", [&](std::istream& s) {
    c.adam.steps = io::read_pod<std::int64_t>(s);
    c.adam.consecutive_skips = io::read_pod<std::int32_t>(s);
    c.adam.skipped = io::read_pod<std::int64_t>(s);
    c.adam.m = read_floats(s, file_size);
    c.adam.v = read_floats(s, file_size);
  });

  const RunConfig config = c.config();
  if (config_hash(config) != c.config_hash) corrupt("stored config does not match the header hash");
  if (config.training.field.encoding.levels != c.encoding.levels ||
      config.training.field.encoding.table_size != c.encoding.table_size ||
      config.training.field.encoding.channels != c.encoding.channels ||
      config.training.field.encoding.min_resolution != c.encoding.min_resolution ||
      config.training.field.encoding.max_resolution != c.encoding.max_resolution)
    corrupt("grid section disagrees with the stored config");
  std::size_t expected = 0;
  for (const auto& seg : c.segments) {
    if (seg.offset != expected) corrupt("parameter segments are not contiguous");
    expected += seg.size;
  }
  if (expected != c.parameters.size()) corrupt("parameter segments do not cover the parameter vector");
  if (!c.adam.m.empty() && (c.adam.m.size() != c.parameters.size() || c.adam.v.size() != c.parameters.size()))
    corrupt("optimizer moments do not match the parameter count");
  return c;
}

namespace {

void check_layout(const NeuralField<float>& field, const Checkpoint& c) {
  const auto& have = field.segments();
  bool same = have.size() == c.segments.size() && field.parameters().size() == c.parameters.size();
  for (std::size_t i = 0; same && i < have.size(); ++i)
    same = have[i].name == c.segments[i].name && have[i].offset == c.segments[i].offset &&
           have[i].size == c.segments[i].size && have[i].rows == c.segments[i].rows &&
           have[i].cols == c.segments[i].cols;
  if (!same) corrupt("parameter layout does not match the field described by the config");
}

}  // namespace

NeuralField<float> restore_field(const Checkpoint& c) {
  FieldConfig fc = c.config().training.field;
  fc.image_count = c.image_count;
  NeuralField<float> field(fc);
  check_layout(field, c);
  std::copy(c.parameters.begin(), c.parameters.end(), field.parameters().begin());
  return field;
}

void restore_trainer(Trainer& trainer, const Checkpoint& c) {
  if (trainer.field().config().image_count != c.image_count)
    corrupt("checkpoint was trained on a different number of images");
  check_layout(trainer.field(), c);
  std::copy(c.parameters.begin(), c.parameters.end(), trainer.field().parameters().begin());
  trainer.optimizer() = c.adam;
  trainer.set_iteration(c.schedule.iteration);
}

}  // namespace hashsdf
