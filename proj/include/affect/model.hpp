#pragma once

// Multi-stream fusion model: per-stream affine alignment plus sinusoidal
// positional encoding, channel concatenation with a learned projection back to
// d_model, a pre-norm transformer encoder, and three task heads.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "affect/random.hpp"
#include "affect/tensor.hpp"

namespace affect::model {

inline constexpr std::size_t kVaOutputs = 2;
inline constexpr std::size_t kExprClasses = 8;
inline constexpr std::size_t kAuUnits = 12;

struct StreamSpec {
  std::string name;
  std::size_t dim = 0;

  bool operator==(const StreamSpec&) const = default;
};

/// Extractor output widths: FAU (OpenFace) 17, ResNet18 512, POSTER/POSTER2 768, EAC 2048.
std::vector<StreamSpec> default_streams();

struct ModelConfig {
  std::vector<StreamSpec> streams = default_streams();
  std::size_t d_model = 256;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t d_ff = 1024;
  double dropout = 0.1;
  std::size_t window = 1;     // frames per sequence fed to the encoder
  std::size_t max_len = 512;  // rows in the positional table
  double layernorm_eps = 1e-5;
  bool positional_encoding = true;  // false zeroes PE (test hook)
  std::uint64_t seed = 0;

  /// Throws ConfigError on any violated invariant.
  void validate() const;
};

void to_json(nlohmann::json& j, const StreamSpec& s);
void from_json(const nlohmann::json& j, StreamSpec& s);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct PositionalTable {
  num::Tensor table;  // [max_len x d_model], no gradient
  std::size_t max_len = 0;
  std::size_t d_model = 0;

  double at(std::size_t pos, std::size_t i) const { return table.data()[pos * d_model + i]; }
};

/// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(pos / 10000^(2i/d)).
/// Rejects odd d_model.
PositionalTable positional_encoding(std::size_t max_len, std::size_t d_model);

struct HeadOutputs {
  num::Tensor va;           // tanh-bounded valence/arousal, [.. x 2]
  num::Tensor expr_logits;  // [.. x 8]
  num::Tensor au_logits;    // [.. x 12]
};

struct ForwardOptions {
  bool training = false;  // enables dropout; requires rng
  Rng* rng = nullptr;
};

/// Attention weights captured during encode(), one [.. x T x T] tensor per layer and head.
struct AttentionTrace {
  std::vector<num::Tensor> weights;
};

class FusionModel {
 public:
  /// Builds and initializes all parameters from config.seed: matrices uniform in
  /// +-sqrt(6 / (fan_in + fan_out)), biases zero, layernorm gains one.
  explicit FusionModel(ModelConfig config);

  FusionModel(const FusionModel& other);
  FusionModel& operator=(const FusionModel& other);
  FusionModel(FusionModel&&) noexcept = default;
  FusionModel& operator=(FusionModel&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  const PositionalTable& positional_table() const { return pe_; }

  std::span<num::NamedTensor> parameters() { return params_; }
  std::span<const num::NamedTensor> parameters() const { return params_; }
  num::Tensor& parameter(std::string_view name);
  const num::Tensor& parameter(std::string_view name) const;
  std::size_t parameter_count() const;

  std::size_t stream_index(std::string_view name) const;

  /// Maps [T x d_in] or [B x T x d_in] features of one stream to d_model: K f + c + PE.
  num::Tensor align(const num::Tensor& features, std::size_t stream) const;

  /// Concatenates aligned streams on the channel axis and projects to d_model.
  num::Tensor fuse(std::span<const num::Tensor> aligned) const;

  /// Pre-norm encoder: x + MHA(LN(x)), then + FFN(LN(.)), per layer.
  num::Tensor encode(const num::Tensor& x, const ForwardOptions& options = {}, AttentionTrace* trace = nullptr) const;

  /// Multi-head self-attention sublayer of `layer` applied to an already normalized input.
  num::Tensor attention(const num::Tensor& x, std::size_t layer, AttentionTrace* trace = nullptr) const;

  HeadOutputs heads(const num::Tensor& encoded) const;

  /// align -> fuse -> encode -> heads. `streams` follows config().streams order.
  HeadOutputs forward(std::span<const num::Tensor> streams, const ForwardOptions& options = {}) const;

 private:
  struct Linear {
    num::Tensor w;  // [out x in]
    num::Tensor b;  // [out]; undefined for the key projection
  };
  struct Layer {
    num::Tensor ln1_gain, ln1_bias;
    Linear q, k, v, o;
    num::Tensor ln2_gain, ln2_bias;
    Linear ff1, ff2;
  };

  void build();
  num::Tensor add_param(std::string name, num::Shape shape);
  num::Tensor apply(const Linear& l, const num::Tensor& x) const;
  num::Tensor sublayer_dropout(const num::Tensor& x, const ForwardOptions& options) const;

  ModelConfig config_;
  PositionalTable pe_;
  std::vector<num::NamedTensor> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<Linear> affine_;  // w is K [d_model x d_in], b is c
  num::Tensor fuse_proj_;       // [d_model x n * d_model]
  std::vector<Layer> layers_;
  Linear head_va_, head_expr_, head_au_;
};

/// Checkpoint layout (all integers little-endian):
///   8 bytes   magic "AFFCKPT\0"
///   u32       version (1)
///   u64       metadata length L, then L bytes of UTF-8 JSON ({"model": ModelConfig, ...})
///   u32       parameter count P, then P records of
///             u32 name length, name bytes, u32 rank, rank x u64 extents,
///             numel x IEEE-754 binary64
void save_checkpoint(const std::filesystem::path& path, const FusionModel& model,
                     const nlohmann::json& extra = nlohmann::json::object());

struct Checkpoint {
  FusionModel model;
  nlohmann::json metadata;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace affect::model
