#pragma once

// Feature banks, label sets, windowing and the synthetic planted-signal generator.
//
// On-disk formats (all documented in README.md):
//   manifest   JSON: {"streams": [{"name", "dim", "path", "format": "text"|"binary"}],
//                     "labels": {"va": path, "expr": path, "au": path}}  (paths relative to the manifest)
//   features   text: one frame per line "frame_id,v0,...,v_{d-1}"
//              binary: "AFFFEAT\0", u32 version, u32 dim, u64 frames, then per frame u64 id + dim f64 (LE)
//   labels     text with optional header: "frame_id,valence,arousal" | "frame_id,expr" |
//              "frame_id,AU1,AU2,AU4,AU6,AU7,AU10,AU12,AU15,AU23,AU24,AU25,AU26"
//              sentinels: valence/arousal -5, expr -1, AU -1

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "affect/model.hpp"
#include "affect/tensor.hpp"

namespace affect::data {

using FrameId = std::uint64_t;
using model::kAuUnits;
using model::StreamSpec;

enum class Task { kVa, kExpr, kAu, kAll };

std::string to_string(Task task);
Task parse_task(const std::string& name);

enum class FeatureFormat { kText, kBinary };

class FeatureBank {
 public:
  FeatureBank() = default;

  /// Adds an empty stream; throws ConfigError on duplicates or zero dimension.
  void add_stream(const StreamSpec& spec);
  /// Throws DataError on wrong length or duplicate frame id.
  void add_frame(const std::string& stream, FrameId id, std::vector<double> values);

  const std::vector<StreamSpec>& streams() const { return streams_; }
  const StreamSpec& stream(const std::string& name) const;
  bool has_stream(const std::string& name) const;
  const std::map<FrameId, std::vector<double>>& frames(const std::string& stream) const;
  const std::vector<double>& features(const std::string& stream, FrameId id) const;

  /// Sorted frame ids present in every stream (or in the listed subset).
  std::vector<FrameId> aligned_frames() const;
  std::vector<FrameId> aligned_frames(std::span<const std::string> subset) const;

  /// "name: count" per stream.
  std::map<std::string, std::size_t> frame_counts() const;

 private:
  std::size_t index_of(const std::string& name) const;

  std::vector<StreamSpec> streams_;
  std::vector<std::map<FrameId, std::vector<double>>> data_;
};

struct FrameLabels {
  std::optional<std::array<double, 2>> va;
  std::optional<int> expr;
  std::array<std::uint8_t, kAuUnits> au{};        // 0/1 values
  std::array<std::uint8_t, kAuUnits> au_valid{};  // 1 where the unit is labeled
};

class LabelSet {
 public:
  /// Labels for `id`, default (all invalid) when absent.
  const FrameLabels& at(FrameId id) const;
  FrameLabels& entry(FrameId id) { return labels_[id]; }
  const std::map<FrameId, FrameLabels>& all() const { return labels_; }
  std::size_t size() const { return labels_.size(); }

  /// Copies the task's annotations from `other`, replacing existing ones for that task.
  void merge(const LabelSet& other, Task task);

 private:
  std::map<FrameId, FrameLabels> labels_;
};

struct ManifestStream {
  StreamSpec spec;
  std::filesystem::path path;  // resolved against the manifest directory
  FeatureFormat format = FeatureFormat::kText;
};

struct Manifest {
  std::vector<ManifestStream> streams;
  std::map<Task, std::filesystem::path> labels;
};

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

void read_features(const std::filesystem::path& path, FeatureFormat format, const std::string& stream, FeatureBank& bank);
void write_features(const std::filesystem::path& path, FeatureFormat format, const FeatureBank& bank,
                    const std::string& stream);

/// Loads every stream listed in the manifest, validating dimensions.
FeatureBank load_bank(const std::filesystem::path& manifest_path);

/// Loads one task's label file; sentinel values become invalid entries.
LabelSet load_labels(const std::filesystem::path& path, Task task);
/// Loads every label file the manifest lists.
LabelSet load_manifest_labels(const std::filesystem::path& manifest_path);
void write_labels(const std::filesystem::path& path, Task task, const LabelSet& labels, std::span<const FrameId> frames);

/// T consecutive frames plus labels; frames past the end repeat the last real frame.
struct Window {
  std::string source;
  FrameId start_frame = 0;
  std::vector<FrameId> frame_ids;
  std::vector<std::uint8_t> real;  // 0 for padding
  std::vector<FrameLabels> labels;
};

/// Windows over the bank's aligned frames. Starts advance by `stride` until a
/// window reaches the last frame; the final window is padded when short.
/// Throws DataError when no frames are aligned.
std::vector<Window> windows(const FeatureBank& bank, const LabelSet& labels, std::size_t length, std::size_t stride);
std::vector<Window> windows(std::span<const FrameId> frames, const LabelSet& labels, std::size_t length,
                            std::size_t stride, const std::string& source = "bank");

/// Stacked model inputs and flattened targets for a group of windows (N = B * T rows).
struct Minibatch {
  std::vector<num::Tensor> streams;  // [B x T x d_s] each, in the requested stream order
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<double> va;                 // N x 2
  std::vector<std::uint8_t> va_mask;      // N
  std::vector<int> expr;                  // N
  std::vector<std::uint8_t> expr_mask;    // N
  std::vector<std::uint8_t> au;           // N x 12
  std::vector<std::uint8_t> au_mask;      // N x 12
  std::vector<std::uint8_t> real;         // N
};

Minibatch make_minibatch(const FeatureBank& bank, std::span<const StreamSpec> streams, std::span<const Window> windows);

/// Planted-signal dataset: a latent z in [-1, 1]^L per frame drives every label,
/// and each signal-carrying stream embeds z linearly plus Gaussian noise.
struct SynthStream {
  StreamSpec spec;
  bool carries_signal = true;  // false: features are independent of z
};

struct SynthSpec {
  std::uint64_t seed = 0;
  std::size_t frames = 2000;
  std::vector<SynthStream> streams;
  std::size_t latent_dim = 12;  // must be >= 8: expression = argmax of z[0..7]
  double noise = 0.1;           // Gaussian noise sd; signal features have unit variance
  double expr_margin = 0.2;     // lead of the winning expression coordinate over the rest
};

struct SynthData {
  FeatureBank bank;
  LabelSet labels;
  /// Per frame latent vectors (row-major, frames x latent_dim), for oracles.
  std::vector<double> latent;
};

SynthData synth_generate(const SynthSpec& spec);

/// Writes manifest.json, one feature file per stream and va/expr/au label files.
/// Refuses to overwrite existing files unless `force`. Returns the written paths.
std::vector<std::filesystem::path> write_dataset(const std::filesystem::path& dir, const FeatureBank& bank,
                                                 const LabelSet& labels, FeatureFormat format, bool force);

/// Copy of `labels` with each task's annotations permuted across frames (negative control).
LabelSet shuffle_labels(const LabelSet& labels, std::uint64_t seed);

}  // namespace affect::data
