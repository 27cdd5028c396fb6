#include "affect/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

#include "affect/binio.hpp"
#include "affect/error.hpp"
#include "affect/objectives.hpp"
#include "affect/random.hpp"

namespace affect::data {

namespace fs = std::filesystem;

std::string to_string(Task task) {
  switch (task) {
    case Task::kVa: return "va";
    case Task::kExpr: return "expr";
    case Task::kAu: return "au";
    case Task::kAll: return "all";
  }
  return "?";
}

Task parse_task(const std::string& name) {
  if (name == "va") return Task::kVa;
  if (name == "expr") return Task::kExpr;
  if (name == "au") return Task::kAu;
  if (name == "all") return Task::kAll;
  throw ConfigError("unknown task '" + name + "' (expected va, expr, au or all)");
}

// ---------------------------------------------------------------- FeatureBank

void FeatureBank::add_stream(const StreamSpec& spec) {
  if (spec.dim == 0) throw ConfigError("stream '" + spec.name + "' has zero dimension");
  if (has_stream(spec.name)) throw ConfigError("duplicate stream '" + spec.name + "'");
  streams_.push_back(spec);
  data_.emplace_back();
}

std::size_t FeatureBank::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < streams_.size(); ++i) {
    if (streams_[i].name == name) return i;
  }
  throw ConfigError("unknown feature stream '" + name + "'");
}

bool FeatureBank::has_stream(const std::string& name) const {
  return std::any_of(streams_.begin(), streams_.end(), [&](const StreamSpec& s) { return s.name == name; });
}

const StreamSpec& FeatureBank::stream(const std::string& name) const { return streams_[index_of(name)]; }

void FeatureBank::add_frame(const std::string& stream, FrameId id, std::vector<double> values) {
  const std::size_t i = index_of(stream);
  if (values.size() != streams_[i].dim) {
    throw DataError(stream, 0, fmt::format("frame {} has {} values, stream dimension is {}", id, values.size(), streams_[i].dim));
  }
  if (!data_[i].emplace(id, std::move(values)).second) {
    throw DataError(stream, 0, fmt::format("duplicate frame id {}", id));
  }
}

const std::map<FrameId, std::vector<double>>& FeatureBank::frames(const std::string& stream) const {
  return data_[index_of(stream)];
}

const std::vector<double>& FeatureBank::features(const std::string& stream, FrameId id) const {
  const auto& f = frames(stream);
  auto it = f.find(id);
  if (it == f.end()) throw DataError(stream, 0, fmt::format("no features for frame {}", id));
  return it->second;
}

std::vector<FrameId> FeatureBank::aligned_frames() const {
  std::vector<std::string> names;
  for (const auto& s : streams_) names.push_back(s.name);
  return aligned_frames(names);
}

std::vector<FrameId> FeatureBank::aligned_frames(std::span<const std::string> subset) const {
  if (subset.empty()) return {};
  std::vector<const std::map<FrameId, std::vector<double>>*> maps;
  for (const auto& name : subset) maps.push_back(&frames(name));
  // Iterate the smallest stream; result is sorted because std::map is.
  std::sort(maps.begin(), maps.end(), [](auto* a, auto* b) { return a->size() < b->size(); });
  std::vector<FrameId> out;
  for (const auto& [id, _] : *maps.front()) {
    if (std::all_of(maps.begin() + 1, maps.end(), [id = id](auto* m) { return m->count(id) > 0; })) out.push_back(id);
  }
  return out;
}

std::map<std::string, std::size_t> FeatureBank::frame_counts() const {
  std::map<std::string, std::size_t> out;
  for (std::size_t i = 0; i < streams_.size(); ++i) out[streams_[i].name] = data_[i].size();
  return out;
}

// ---------------------------------------------------------------- LabelSet

const FrameLabels& LabelSet::at(FrameId id) const {
  static const FrameLabels kEmpty{};
  auto it = labels_.find(id);
  return it == labels_.end() ? kEmpty : it->second;
}

void LabelSet::merge(const LabelSet& other, Task task) {
  for (const auto& [id, src] : other.labels_) {
    FrameLabels& dst = labels_[id];
    if (task == Task::kVa || task == Task::kAll) dst.va = src.va;
    if (task == Task::kExpr || task == Task::kAll) dst.expr = src.expr;
    if (task == Task::kAu || task == Task::kAll) {
      dst.au = src.au;
      dst.au_valid = src.au_valid;
    }
  }
}

// ---------------------------------------------------------------- text parsing

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    auto field = line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) field.remove_suffix(1);
    out.push_back(field);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

bool blank(std::string_view line) {
  return line.find_first_not_of(" \t\r") == std::string_view::npos || line.front() == '#';
}

struct LineReader {
  std::ifstream in;
  std::string file;
  std::size_t line_no = 0;

  explicit LineReader(const fs::path& path) : in(path), file(path.string()) {
    if (!in) throw DataError(file, 0, "cannot open file");
  }

  bool next(std::string& line) {
    while (std::getline(in, line)) {
      ++line_no;
      if (!blank(line)) return true;
    }
    return false;
  }

  [[noreturn]] void fail(const std::string& what) const { throw DataError(file, line_no, what); }
};

FeatureFormat parse_format(const std::string& s, const std::string& file) {
  if (s == "text") return FeatureFormat::kText;
  if (s == "binary") return FeatureFormat::kBinary;
  throw DataError(file, 0, "unknown feature format '" + s + "'");
}

constexpr char kFeatureMagic[8] = {'A', 'F', 'F', 'F', 'E', 'A', 'T', '\0'};
constexpr std::uint32_t kFeatureVersion = 1;

}  // namespace

// ---------------------------------------------------------------- manifest

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string(), 0, "cannot open manifest");
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const auto end = text.begin() + static_cast<std::ptrdiff_t>(std::min(e.byte, text.size()));
    const auto line = static_cast<std::size_t>(std::count(text.begin(), end, '\n')) + 1;
    throw DataError(path.string(), line, std::string("malformed manifest: ") + e.what());
  }
  const fs::path base = path.parent_path();
  Manifest m;
  try {
    for (const auto& s : j.at("streams")) {
      ManifestStream ms;
      ms.spec.name = s.at("name").get<std::string>();
      ms.spec.dim = s.at("dim").get<std::size_t>();
      ms.path = base / s.at("path").get<std::string>();
      ms.format = parse_format(s.value("format", std::string("text")), path.string());
      if (ms.spec.dim == 0) throw DataError(path.string(), 0, "stream '" + ms.spec.name + "' has zero dimension");
      m.streams.push_back(std::move(ms));
    }
    if (j.contains("labels")) {
      for (const auto& [task, p] : j.at("labels").items()) m.labels[parse_task(task)] = base / p.get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string(), 0, std::string("invalid manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(path.string(), 0, e.what());
  }
  if (m.streams.empty()) throw DataError(path.string(), 0, "manifest lists no streams");
  return m;
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
  const fs::path base = path.parent_path();
  nlohmann::json j;
  j["streams"] = nlohmann::json::array();
  for (const auto& s : manifest.streams) {
    j["streams"].push_back({{"name", s.spec.name},
                            {"dim", s.spec.dim},
                            {"path", fs::relative(s.path, base.empty() ? fs::path(".") : base).generic_string()},
                            {"format", s.format == FeatureFormat::kText ? "text" : "binary"}});
  }
  j["labels"] = nlohmann::json::object();
  for (const auto& [task, p] : manifest.labels) {
    j["labels"][to_string(task)] = fs::relative(p, base.empty() ? fs::path(".") : base).generic_string();
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------- features

void read_features(const fs::path& path, FeatureFormat format, const std::string& stream, FeatureBank& bank) {
  const std::size_t dim = bank.stream(stream).dim;
  if (format == FeatureFormat::kBinary) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path.string(), 0, "cannot open file");
    binio::Reader r(in, path.string());
    if (r.bytes(sizeof kFeatureMagic) != std::string(kFeatureMagic, sizeof kFeatureMagic)) r.fail("bad magic");
    if (const auto v = r.u32(); v != kFeatureVersion) r.fail(fmt::format("unsupported version {}", v));
    if (const auto d = r.u32(); d != dim) r.fail(fmt::format("file dimension {} does not match manifest {}", d, dim));
    const auto count = r.u64();
    for (std::uint64_t f = 0; f < count; ++f) {
      const FrameId id = r.u64();
      std::vector<double> values(dim);
      for (auto& v : values) {
        v = r.f64();
        if (!std::isfinite(v)) r.fail(fmt::format("non-finite value in frame {}", id));
      }
      try {
        bank.add_frame(stream, id, std::move(values));
      } catch (const DataError& e) {
        r.fail(e.what());
      }
    }
    if (!r.at_end()) r.fail("trailing bytes after last frame");
    return;
  }

  LineReader reader(path);
  std::string line;
  while (reader.next(line)) {
    const auto fields = split_fields(line);
    FrameId id = 0;
    if (!parse_number(fields[0], id)) reader.fail("unparseable frame id '" + std::string(fields[0]) + "'");
    if (fields.size() - 1 != dim) {
      reader.fail(fmt::format("row has {} values, stream '{}' has dimension {}", fields.size() - 1, stream, dim));
    }
    std::vector<double> values(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      if (!parse_number(fields[i + 1], values[i]) || !std::isfinite(values[i])) {
        reader.fail(fmt::format("unparseable value '{}' in column {}", fields[i + 1], i + 1));
      }
    }
    if (bank.frames(stream).count(id)) reader.fail(fmt::format("duplicate frame id {}", id));
    bank.add_frame(stream, id, std::move(values));
  }
}

void write_features(const fs::path& path, FeatureFormat format, const FeatureBank& bank, const std::string& stream) {
  const auto& frames = bank.frames(stream);
  if (format == FeatureFormat::kBinary) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(kFeatureMagic, sizeof kFeatureMagic);
    binio::put_u32(out, kFeatureVersion);
    binio::put_u32(out, static_cast<std::uint32_t>(bank.stream(stream).dim));
    binio::put_u64(out, frames.size());
    for (const auto& [id, values] : frames) {
      binio::put_u64(out, id);
      for (double v : values) binio::put_f64(out, v);
    }
    return;
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  fmt::memory_buffer buf;
  for (const auto& [id, values] : frames) {
    fmt::format_to(std::back_inserter(buf), "{}", id);
    // Shortest round-trip representation: parsing gives back the same bits.
    for (double v : values) fmt::format_to(std::back_inserter(buf), ",{}", v);
    buf.push_back('\n');
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

FeatureBank load_bank(const fs::path& manifest_path) {
  const Manifest m = read_manifest(manifest_path);
  FeatureBank bank;
  for (const auto& s : m.streams) {
    bank.add_stream(s.spec);
    read_features(s.path, s.format, s.spec.name, bank);
  }
  return bank;
}

// ---------------------------------------------------------------- labels

LabelSet load_labels(const fs::path& path, Task task) {
  if (task == Task::kAll) throw ConfigError("load_labels: task must be va, expr or au");
  const std::size_t expected = task == Task::kVa ? 2 : task == Task::kExpr ? 1 : kAuUnits;
  LabelSet labels;
  LineReader reader(path);
  std::string line;
  bool first = true;
  while (reader.next(line)) {
    const auto fields = split_fields(line);
    FrameId id = 0;
    if (!parse_number(fields[0], id)) {
      if (first) {  // header row
        first = false;
        continue;
      }
      reader.fail("unparseable frame id '" + std::string(fields[0]) + "'");
    }
    first = false;
    if (fields.size() - 1 != expected) {
      reader.fail(fmt::format("{} label row has {} values, expected {}", to_string(task), fields.size() - 1, expected));
    }
    if (labels.all().count(id)) reader.fail(fmt::format("duplicate frame id {}", id));
    FrameLabels& fl = labels.entry(id);
    if (task == Task::kVa) {
      double v[2];
      for (int i = 0; i < 2; ++i) {
        if (!parse_number(fields[1 + i], v[i])) reader.fail("unparseable value '" + std::string(fields[1 + i]) + "'");
      }
      if (v[0] == -5.0 || v[1] == -5.0) continue;
      for (double x : v) {
        if (!(x >= -1.0 && x <= 1.0)) reader.fail(fmt::format("valence/arousal {} outside [-1, 1]", x));
      }
      fl.va = std::array<double, 2>{v[0], v[1]};
    } else if (task == Task::kExpr) {
      int c = 0;
      if (!parse_number(fields[1], c)) reader.fail("unparseable class '" + std::string(fields[1]) + "'");
      if (c == -1) continue;
      if (c < 0 || c >= static_cast<int>(model::kExprClasses)) reader.fail(fmt::format("expression class {} outside 0..7", c));
      fl.expr = c;
    } else {
      for (std::size_t i = 0; i < kAuUnits; ++i) {
        int v = 0;
        if (!parse_number(fields[1 + i], v)) reader.fail("unparseable AU value '" + std::string(fields[1 + i]) + "'");
        if (v == -1) continue;
        if (v != 0 && v != 1) reader.fail(fmt::format("{} value {} is not 0, 1 or -1", obj::au_names()[i], v));
        fl.au[i] = static_cast<std::uint8_t>(v);
        fl.au_valid[i] = 1;
      }
    }
  }
  return labels;
}

LabelSet load_manifest_labels(const fs::path& manifest_path) {
  const Manifest m = read_manifest(manifest_path);
  LabelSet all;
  for (const auto& [task, path] : m.labels) all.merge(load_labels(path, task), task);
  return all;
}

void write_labels(const fs::path& path, Task task, const LabelSet& labels, std::span<const FrameId> frames) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  fmt::memory_buffer buf;
  auto it = std::back_inserter(buf);
  switch (task) {
    case Task::kVa: fmt::format_to(it, "frame_id,valence,arousal\n"); break;
    case Task::kExpr: fmt::format_to(it, "frame_id,expr\n"); break;
    case Task::kAu: fmt::format_to(it, "frame_id,{}\n", fmt::join(obj::au_names(), ",")); break;
    case Task::kAll: throw ConfigError("write_labels: task must be va, expr or au");
  }
  for (FrameId id : frames) {
    const FrameLabels& fl = labels.at(id);
    fmt::format_to(it, "{}", id);
    if (task == Task::kVa) {
      if (fl.va) {
        fmt::format_to(it, ",{},{}", (*fl.va)[0], (*fl.va)[1]);
      } else {
        fmt::format_to(it, ",-5,-5");
      }
    } else if (task == Task::kExpr) {
      fmt::format_to(it, ",{}", fl.expr ? *fl.expr : -1);
    } else {
      for (std::size_t i = 0; i < kAuUnits; ++i) fmt::format_to(it, ",{}", fl.au_valid[i] ? static_cast<int>(fl.au[i]) : -1);
    }
    buf.push_back('\n');
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

// ---------------------------------------------------------------- windows

std::vector<Window> windows(const FeatureBank& bank, const LabelSet& labels, std::size_t length, std::size_t stride) {
  const auto frames = bank.aligned_frames();
  return windows(frames, labels, length, stride);
}

std::vector<Window> windows(std::span<const FrameId> frames, const LabelSet& labels, std::size_t length,
                            std::size_t stride, const std::string& source) {
  if (length == 0 || stride == 0) throw ConfigError("windows: length and stride must be >= 1");
  if (frames.empty()) throw DataError(source, 0, "empty dataset: no frames are present in every stream");
  std::vector<Window> out;
  for (std::size_t start = 0; start < frames.size(); start += stride) {
    Window w;
    w.source = source;
    w.start_frame = frames[start];
    for (std::size_t t = 0; t < length; ++t) {
      const std::size_t i = std::min(start + t, frames.size() - 1);
      w.frame_ids.push_back(frames[i]);
      w.real.push_back(start + t < frames.size() ? 1 : 0);
      w.labels.push_back(labels.at(frames[i]));
    }
    out.push_back(std::move(w));
    if (start + length >= frames.size()) break;
  }
  return out;
}

Minibatch make_minibatch(const FeatureBank& bank, std::span<const StreamSpec> streams, std::span<const Window> windows) {
  if (windows.empty()) throw ConfigError("make_minibatch: no windows");
  Minibatch mb;
  mb.batch = windows.size();
  mb.length = windows[0].frame_ids.size();
  const std::size_t n = mb.batch * mb.length;
  for (const auto& s : streams) {
    const auto& src = bank.frames(s.name);
    if (bank.stream(s.name).dim != s.dim) {
      throw ConfigError(fmt::format("stream '{}' has dimension {} in the bank, {} in the model", s.name,
                                    bank.stream(s.name).dim, s.dim));
    }
    std::vector<double> values;
    values.reserve(n * s.dim);
    for (const auto& w : windows) {
      if (w.frame_ids.size() != mb.length) throw ShapeError("make_minibatch: windows differ in length");
      for (FrameId id : w.frame_ids) {
        auto it = src.find(id);
        if (it == src.end()) throw DataError(s.name, 0, fmt::format("no features for frame {}", id));
        values.insert(values.end(), it->second.begin(), it->second.end());
      }
    }
    mb.streams.push_back(num::Tensor::from({mb.batch, mb.length, s.dim}, std::move(values)));
  }
  mb.va.assign(2 * n, 0.0);
  mb.va_mask.assign(n, 0);
  mb.expr.assign(n, 0);
  mb.expr_mask.assign(n, 0);
  mb.au.assign(n * kAuUnits, 0);
  mb.au_mask.assign(n * kAuUnits, 0);
  mb.real.assign(n, 0);
  std::size_t row = 0;
  for (const auto& w : windows) {
    for (std::size_t t = 0; t < mb.length; ++t, ++row) {
      const bool real = w.real[t] != 0;
      const FrameLabels& fl = w.labels[t];
      mb.real[row] = real;
      if (real && fl.va) {
        mb.va[2 * row] = (*fl.va)[0];
        mb.va[2 * row + 1] = (*fl.va)[1];
        mb.va_mask[row] = 1;
      }
      if (real && fl.expr) {
        mb.expr[row] = *fl.expr;
        mb.expr_mask[row] = 1;
      }
      for (std::size_t i = 0; i < kAuUnits; ++i) {
        if (real && fl.au_valid[i]) {
          mb.au[row * kAuUnits + i] = fl.au[i];
          mb.au_mask[row * kAuUnits + i] = 1;
        }
      }
    }
  }
  return mb;
}

// ---------------------------------------------------------------- synthetic data

SynthData synth_generate(const SynthSpec& spec) {
  if (spec.frames == 0) throw ConfigError("synth: frames must be >= 1");
  if (spec.latent_dim < model::kExprClasses) throw ConfigError("synth: latent_dim must be >= 8");
  if (spec.streams.empty()) throw ConfigError("synth: at least one stream is required");
  if (spec.noise < 0.0) throw ConfigError("synth: noise must be >= 0");
  if (spec.expr_margin < 0.0 || spec.expr_margin >= 1.0) throw ConfigError("synth: expr_margin must lie in [0, 1)");

  const std::size_t L = spec.latent_dim;
  Rng rng(spec.seed);

  // Label functions of z.
  auto unit_l1 = [&] {
    std::vector<double> a(L);
    double l1 = 0.0;
    for (auto& x : a) {
      x = normal(rng);
      l1 += std::abs(x);
    }
    for (auto& x : a) x /= l1;
    return a;
  };
  const auto a_val = unit_l1();
  const auto a_aro = unit_l1();
  std::vector<std::vector<double>> au_dirs(kAuUnits, std::vector<double>(L));
  for (auto& b : au_dirs) {
    for (auto& x : b) x = normal(rng);
  }

  // Embeddings: signal features have unit variance (z_j ~ U(-1, 1) has variance 1/3).
  struct Embed {
    std::vector<double> matrix;  // dim x L
  };
  std::vector<Embed> embeds;
  const double scale = std::sqrt(3.0 / static_cast<double>(L));
  for (const auto& s : spec.streams) {
    Embed e;
    e.matrix.resize(s.spec.dim * L);
    for (auto& x : e.matrix) x = normal(rng) * scale;
    embeds.push_back(std::move(e));
  }

  SynthData out;
  for (const auto& s : spec.streams) out.bank.add_stream(s.spec);
  out.latent.resize(spec.frames * L);

  std::vector<double> z(L), nuisance(L);
  for (std::size_t f = 0; f < spec.frames; ++f) {
    // Expression block: the planted class leads the other seven by at least the margin.
    const std::size_t cls = static_cast<std::size_t>(below(rng, model::kExprClasses));
    double runner_up = -1.0;
    for (std::size_t k = 0; k < model::kExprClasses; ++k) {
      if (k == cls) continue;
      z[k] = uniform(rng, -1.0, 1.0 - spec.expr_margin);
      runner_up = std::max(runner_up, z[k]);
    }
    z[cls] = uniform(rng, runner_up + spec.expr_margin, 1.0);
    for (std::size_t k = model::kExprClasses; k < L; ++k) z[k] = uniform(rng, -1.0, 1.0);
    std::copy(z.begin(), z.end(), out.latent.begin() + static_cast<std::ptrdiff_t>(f * L));

    FrameLabels& fl = out.labels.entry(f);
    double v = 0.0, a = 0.0;
    for (std::size_t j = 0; j < L; ++j) {
      v += a_val[j] * z[j];
      a += a_aro[j] * z[j];
    }
    fl.va = std::array<double, 2>{v, a};
    fl.expr = static_cast<int>(cls);
    for (std::size_t i = 0; i < kAuUnits; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < L; ++j) s += au_dirs[i][j] * z[j];
      fl.au[i] = s > 0.0 ? 1 : 0;
      fl.au_valid[i] = 1;
    }

    for (std::size_t si = 0; si < spec.streams.size(); ++si) {
      const auto& s = spec.streams[si];
      const double* source = z.data();
      if (!s.carries_signal) {
        for (auto& x : nuisance) x = uniform(rng, -1.0, 1.0);
        source = nuisance.data();
      }
      std::vector<double> values(s.spec.dim);
      for (std::size_t r = 0; r < s.spec.dim; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < L; ++j) acc += embeds[si].matrix[r * L + j] * source[j];
        values[r] = acc + spec.noise * normal(rng);
      }
      out.bank.add_frame(s.spec.name, f, std::move(values));
    }
  }
  return out;
}

std::vector<fs::path> write_dataset(const fs::path& dir, const FeatureBank& bank, const LabelSet& labels,
                                    FeatureFormat format, bool force) {
  Manifest m;
  const char* ext = format == FeatureFormat::kText ? ".csv" : ".bin";
  for (const auto& s : bank.streams()) m.streams.push_back({s, dir / (s.name + ext), format});
  m.labels[Task::kVa] = dir / "va.csv";
  m.labels[Task::kExpr] = dir / "expr.csv";
  m.labels[Task::kAu] = dir / "au.csv";

  std::vector<fs::path> paths{dir / "manifest.json"};
  for (const auto& s : m.streams) paths.push_back(s.path);
  for (const auto& [_, p] : m.labels) paths.push_back(p);
  if (!force) {
    for (const auto& p : paths) {
      if (fs::exists(p)) throw ConfigError(p.string() + " already exists (use --force to overwrite)");
    }
  }
  fs::create_directories(dir);
  write_manifest(paths[0], m);
  for (const auto& s : m.streams) write_features(s.path, format, bank, s.spec.name);
  std::vector<FrameId> ids;
  for (const auto& [id, _] : labels.all()) ids.push_back(id);
  for (const auto& [task, p] : m.labels) write_labels(p, task, labels, ids);
  return paths;
}

LabelSet shuffle_labels(const LabelSet& labels, std::uint64_t seed) {
  std::vector<FrameId> ids;
  std::vector<FrameLabels> values;
  for (const auto& [id, fl] : labels.all()) {
    ids.push_back(id);
    values.push_back(fl);
  }
  Rng rng(seed);
  LabelSet out;
  for (Task task : {Task::kVa, Task::kExpr, Task::kAu}) {
    std::vector<std::size_t> perm(ids.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    shuffle(perm, rng);
    LabelSet part;
    for (std::size_t i = 0; i < ids.size(); ++i) part.entry(ids[i]) = values[perm[i]];
    out.merge(part, task);
  }
  return out;
}

}  // namespace affect::data
