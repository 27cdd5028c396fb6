#include "affect/model.hpp"

#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "affect/binio.hpp"
#include "affect/error.hpp"
#include "affect/ops.hpp"

namespace affect::model {

using num::Shape;
using num::Tensor;

std::vector<StreamSpec> default_streams() {
  return {{"fau", 17}, {"resnet18", 512}, {"poster", 768}, {"poster2", 768}, {"eac", 2048}};
}

void ModelConfig::validate() const {
  if (streams.empty()) throw ConfigError("model: at least one feature stream is required");
  for (std::size_t i = 0; i < streams.size(); ++i) {
    if (streams[i].name.empty()) throw ConfigError("model: stream names must be non-empty");
    if (streams[i].dim == 0) throw ConfigError("model: stream '" + streams[i].name + "' has zero dimension");
    for (std::size_t j = 0; j < i; ++j) {
      if (streams[j].name == streams[i].name) throw ConfigError("model: duplicate stream '" + streams[i].name + "'");
    }
  }
  if (d_model == 0 || d_model % 2 != 0) throw ConfigError(fmt::format("model: d_model {} must be even and positive", d_model));
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError(fmt::format("model: d_model {} is not divisible by n_heads {}", d_model, n_heads));
  }
  if (d_ff == 0) throw ConfigError("model: d_ff must be positive");
  if (window == 0) throw ConfigError("model: window must be >= 1");
  if (max_len < window) throw ConfigError(fmt::format("model: max_len {} is below window {}", max_len, window));
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError(fmt::format("model: dropout {} outside [0, 1)", dropout));
  if (!(layernorm_eps > 0.0)) throw ConfigError("model: layernorm_eps must be positive");
}

void to_json(nlohmann::json& j, const StreamSpec& s) { j = nlohmann::json{{"name", s.name}, {"dim", s.dim}}; }

void from_json(const nlohmann::json& j, StreamSpec& s) {
  j.at("name").get_to(s.name);
  j.at("dim").get_to(s.dim);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"streams", c.streams},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"n_layers", c.n_layers},
                     {"d_ff", c.d_ff},
                     {"dropout", c.dropout},
                     {"window", c.window},
                     {"max_len", c.max_len},
                     {"layernorm_eps", c.layernorm_eps},
                     {"positional_encoding", c.positional_encoding},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  const nlohmann::json known = d;
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("model config: unknown key '" + key + "'");
  }
  c.streams = j.value("streams", d.streams);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.dropout = j.value("dropout", d.dropout);
  c.window = j.value("window", d.window);
  c.max_len = j.value("max_len", d.max_len);
  c.layernorm_eps = j.value("layernorm_eps", d.layernorm_eps);
  c.positional_encoding = j.value("positional_encoding", d.positional_encoding);
  c.seed = j.value("seed", d.seed);
}

PositionalTable positional_encoding(std::size_t max_len, std::size_t d_model) {
  if (d_model == 0 || d_model % 2 != 0) {
    throw ConfigError(fmt::format("positional encoding needs an even d_model, got {}", d_model));
  }
  if (max_len == 0) throw ConfigError("positional encoding needs max_len >= 1");
  std::vector<double> v(max_len * d_model);
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < d_model; i += 2) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d_model));
      v[pos * d_model + i] = std::sin(angle);
      v[pos * d_model + i + 1] = std::cos(angle);
    }
  }
  return {Tensor::from({max_len, d_model}, std::move(v)), max_len, d_model};
}

FusionModel::FusionModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  build();
}

FusionModel::FusionModel(const FusionModel& other) : FusionModel(other.config_) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto src = other.params_[i].tensor.data();
    std::copy(src.begin(), src.end(), params_[i].tensor.mutable_data().begin());
  }
}

FusionModel& FusionModel::operator=(const FusionModel& other) {
  if (this != &other) *this = FusionModel(other);
  return *this;
}

Tensor FusionModel::add_param(std::string name, Shape shape) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  index_.emplace(name, params_.size());
  params_.push_back({std::move(name), t});
  return t;
}

void FusionModel::build() {
  const std::size_t d = config_.d_model;
  if (config_.positional_encoding) {
    pe_ = positional_encoding(config_.max_len, d);
  } else {
    pe_ = {Tensor::zeros({config_.max_len, d}), config_.max_len, d};
  }

  auto linear = [&](const std::string& prefix, std::size_t out, std::size_t in, const char* wname = "w",
                    const char* bname = "b") {
    return Linear{add_param(prefix + "." + wname, {out, in}), add_param(prefix + "." + bname, {out})};
  };

  for (const auto& s : config_.streams) affine_.push_back(linear("affine." + s.name, d, s.dim, "K", "c"));
  fuse_proj_ = add_param("fuse_proj", {d, config_.streams.size() * d});
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = fmt::format("encoder.{}", l);
    Layer layer;
    layer.ln1_gain = add_param(p + ".ln1.gain", {d});
    layer.ln1_bias = add_param(p + ".ln1.bias", {d});
    layer.q = linear(p + ".attn.q", d, d);
    // No key bias: it shifts every score of a query equally, which softmax cancels.
    layer.k = Linear{add_param(p + ".attn.k.w", {d, d}), Tensor()};
    layer.v = linear(p + ".attn.v", d, d);
    layer.o = linear(p + ".attn.o", d, d);
    layer.ln2_gain = add_param(p + ".ln2.gain", {d});
    layer.ln2_bias = add_param(p + ".ln2.bias", {d});
    layer.ff1 = linear(p + ".ffn.1", config_.d_ff, d);
    layer.ff2 = linear(p + ".ffn.2", d, config_.d_ff);
    layers_.push_back(std::move(layer));
  }
  head_va_ = linear("head.va", kVaOutputs, d);
  head_expr_ = linear("head.expr", kExprClasses, d);
  head_au_ = linear("head.au", kAuUnits, d);

  Rng rng(config_.seed);
  for (auto& p : params_) {
    auto v = p.tensor.mutable_data();
    const auto& shape = p.tensor.shape();
    if (shape.size() == 2) {
      const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      for (auto& x : v) x = uniform(rng, -limit, limit);
    } else if (p.name.ends_with(".gain")) {
      std::fill(v.begin(), v.end(), 1.0);
    }
  }
}

Tensor& FusionModel::parameter(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  return params_[it->second].tensor;
}

const Tensor& FusionModel::parameter(std::string_view name) const {
  return const_cast<FusionModel*>(this)->parameter(name);
}

std::size_t FusionModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

std::size_t FusionModel::stream_index(std::string_view name) const {
  for (std::size_t i = 0; i < config_.streams.size(); ++i) {
    if (config_.streams[i].name == name) return i;
  }
  throw ConfigError("unknown feature stream '" + std::string(name) + "'");
}

Tensor FusionModel::apply(const Linear& l, const Tensor& x) const {
  Tensor y = num::matmul(x, num::transpose(l.w));
  return l.b.defined() ? num::add(y, l.b) : y;
}

Tensor FusionModel::sublayer_dropout(const Tensor& x, const ForwardOptions& options) const {
  if (!options.training || config_.dropout == 0.0) return x;
  if (options.rng == nullptr) throw std::logic_error("training forward pass needs an rng for dropout");
  return num::dropout(x, config_.dropout, *options.rng);
}

Tensor FusionModel::align(const Tensor& features, std::size_t stream) const {
  if (stream >= affine_.size()) throw ConfigError(fmt::format("unknown stream id {}", stream));
  const auto& spec = config_.streams[stream];
  if (features.rank() < 2 || features.shape().back() != spec.dim) {
    throw ShapeError(fmt::format("stream '{}' expects [.. x T x {}] features, got {}", spec.name, spec.dim,
                                 num::to_string(features.shape())));
  }
  const std::size_t t = features.dim(features.rank() - 2);
  if (t > config_.max_len) throw ShapeError(fmt::format("sequence length {} exceeds max_len {}", t, config_.max_len));
  Tensor projected = apply(affine_[stream], features);
  return num::add(projected, num::narrow(pe_.table, 0, 0, t));
}

Tensor FusionModel::fuse(std::span<const Tensor> aligned) const {
  if (aligned.size() != config_.streams.size()) {
    throw ConfigError(fmt::format("fuse: expected {} streams, got {}", config_.streams.size(), aligned.size()));
  }
  for (const auto& a : aligned) {
    if (a.shape() != aligned[0].shape() || a.shape().back() != config_.d_model) {
      throw ShapeError("fuse: aligned streams must share shape [.. x T x d_model]");
    }
  }
  Tensor joined = aligned.size() == 1 ? aligned[0] : num::concat(aligned, aligned[0].rank() - 1);
  return num::matmul(joined, num::transpose(fuse_proj_));
}

Tensor FusionModel::attention(const Tensor& x, std::size_t layer, AttentionTrace* trace) const {
  const Layer& l = layers_.at(layer);
  const std::size_t last = x.rank() - 1;
  const std::size_t head_dim = config_.d_model / config_.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Tensor q = apply(l.q, x);
  Tensor k = apply(l.k, x);
  Tensor v = apply(l.v, x);
  std::vector<Tensor> heads;
  heads.reserve(config_.n_heads);
  for (std::size_t h = 0; h < config_.n_heads; ++h) {
    Tensor qh = num::narrow(q, last, h * head_dim, head_dim);
    Tensor kh = num::narrow(k, last, h * head_dim, head_dim);
    Tensor vh = num::narrow(v, last, h * head_dim, head_dim);
    Tensor scores = num::scale(num::matmul(qh, num::transpose(kh)), scale);
    Tensor weights = num::softmax(scores, last);
    if (trace) trace->weights.push_back(weights);
    heads.push_back(num::matmul(weights, vh));
  }
  Tensor merged = heads.size() == 1 ? heads[0] : num::concat(heads, last);
  return apply(l.o, merged);
}

Tensor FusionModel::encode(const Tensor& x, const ForwardOptions& options, AttentionTrace* trace) const {
  if (x.rank() < 2 || x.shape().back() != config_.d_model) {
    throw ShapeError(fmt::format("encode: expected [.. x T x {}], got {}", config_.d_model, num::to_string(x.shape())));
  }
  const std::size_t t = x.dim(x.rank() - 2);
  if (t > config_.max_len) throw ShapeError(fmt::format("encode: sequence length {} exceeds max_len {}", t, config_.max_len));
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    Tensor attn = attention(num::layernorm(h, l.ln1_gain, l.ln1_bias, config_.layernorm_eps), i, trace);
    h = num::add(h, sublayer_dropout(attn, options));
    Tensor ff = apply(l.ff2, num::relu(apply(l.ff1, num::layernorm(h, l.ln2_gain, l.ln2_bias, config_.layernorm_eps))));
    h = num::add(h, sublayer_dropout(ff, options));
  }
  return h;
}

HeadOutputs FusionModel::heads(const Tensor& encoded) const {
  return {num::tanh(apply(head_va_, encoded)), apply(head_expr_, encoded), apply(head_au_, encoded)};
}

HeadOutputs FusionModel::forward(std::span<const Tensor> streams, const ForwardOptions& options) const {
  if (streams.size() != config_.streams.size()) {
    throw ConfigError(fmt::format("forward: expected {} streams, got {}", config_.streams.size(), streams.size()));
  }
  std::vector<Tensor> aligned;
  aligned.reserve(streams.size());
  for (std::size_t i = 0; i < streams.size(); ++i) aligned.push_back(align(streams[i], i));
  return heads(encode(fuse(aligned), options));
}

namespace {

constexpr char kMagic[8] = {'A', 'F', 'F', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const FusionModel& model, const nlohmann::json& extra) {
  nlohmann::json meta = extra;
  meta["model"] = model.config();
  const std::string meta_text = meta.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  binio::put_u32(out, kVersion);
  binio::put_u64(out, meta_text.size());
  out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
  const auto params = model.parameters();
  binio::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    binio::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    binio::put_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto e : p.tensor.shape()) binio::put_u64(out, e);
    for (double v : p.tensor.data()) binio::put_f64(out, v);
  }
  out.flush();
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string(), 0, "cannot open checkpoint");
  binio::Reader r(in, path.string());
  if (r.bytes(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) r.fail("not a checkpoint (bad magic)");
  if (const auto v = r.u32(); v != kVersion) r.fail(fmt::format("unsupported checkpoint version {}", v));
  const auto meta_len = r.u64();
  if (meta_len > (std::uint64_t{1} << 32)) r.fail("implausible metadata length");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.bytes(meta_len));
  } catch (const nlohmann::json::exception& e) {
    r.fail(std::string("bad metadata: ") + e.what());
  }
  FusionModel model(meta.at("model").get<ModelConfig>());
  const auto count = r.u32();
  if (count != model.parameters().size()) {
    r.fail(fmt::format("checkpoint has {} parameters, config implies {}", count, model.parameters().size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.bytes(r.u32());
    const auto rank = r.u32();
    if (rank == 0 || rank > num::kMaxRank) r.fail(fmt::format("parameter '{}' has rank {}", name, rank));
    Shape shape(rank);
    for (auto& e : shape) e = r.u64();
    Tensor& t = model.parameter(name);
    if (t.shape() != shape) {
      r.fail(fmt::format("parameter '{}' has shape {}, expected {}", name, num::to_string(shape), num::to_string(t.shape())));
    }
    for (auto& v : t.mutable_data()) v = r.f64();
  }
  meta.erase("model");
  return {std::move(model), std::move(meta)};
}

}  // namespace affect::model
