#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "affect/data.hpp"
#include "affect/model.hpp"
#include "affect/objectives.hpp"

namespace affect::train {

struct TrainConfig {
  data::Task task = data::Task::kVa;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 32;  // windows per step
  std::size_t epochs = 20;
  std::uint64_t seed = 0;  // shuffling and dropout
  double lambda = 0.5;     // MSE share of the VA loss
  std::size_t eval_every = 1;
  std::size_t stride = 0;  // training window stride; 0 means the window length
  double val_fraction = 0.2;
  double au_threshold = 0.5;
  double min_loss_drop = 0.5;  // convergence: final loss <= (1 - drop) * initial loss
  bool gradcheck_guard = false;
  std::string checkpoint_path;  // best checkpoint, rewritten on every improvement
  std::string runlog_path;      // line-delimited JSON, appended after every epoch

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient. A parameter without a gradient is treated as having a zero one.
/// Throws NumericError naming the parameter on a non-finite gradient.
void adam_step(std::span<num::NamedTensor> params, AdamState& state, const TrainConfig& config);

struct Dataset {
  const data::FeatureBank* bank = nullptr;
  std::vector<data::Window> windows;
};

struct Split {
  Dataset train;
  Dataset val;
};

/// Splits the frames aligned across `streams` into a leading training part and a
/// trailing validation part. Validation windows never overlap (stride = window).
Split split_dataset(const data::FeatureBank& bank, const data::LabelSet& labels, std::span<const std::string> streams,
                    std::size_t window, std::size_t stride, double val_fraction);

/// Whole-dataset evaluation, all four metrics. A task without enough valid
/// labels (two for CCC, one otherwise) scores 0 for its columns.
obj::EvalReport evaluate(const model::FusionModel& model, const Dataset& dataset, double au_threshold = 0.5,
                         std::size_t batch_size = 64);

/// The part of the challenge score a task is trained for: (V + A) / 2, FER, AU or the full score.
double selection_score(const obj::EvalReport& report, data::Task task);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<obj::EvalReport> eval;
  double selection = 0.0;
  bool improved = false;
  double wall_seconds = 0.0;  // written to the timing sidecar, not the run log
};

struct RunLog {
  std::uint64_t seed = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  obj::EvalReport best_report;
  bool converged = false;

  /// Line-delimited JSON: one "run" header line, one "epoch" line per epoch, one "done" line.
  std::string header_line(const nlohmann::json& config) const;
  static std::string epoch_line(const EpochLog& e);
  std::string done_line() const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  model::FusionModel best;
  RunLog log;
};

/// Scalar training loss for a minibatch's head outputs, or an undefined tensor
/// when the batch has no usable labels for the task.
num::Tensor task_loss(const model::HeadOutputs& out, const data::Minibatch& mb, data::Task task, double lambda,
                      const obj::AuWeights* au_weights);

/// Trains from `init`, keeping the checkpoint with the best validation selection
/// score (ties keep the earlier epoch). Throws TrainingDiverged on a non-finite
/// loss or gradient; the last written checkpoint stays on disk.
TrainResult train(const model::FusionModel& init, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& config);

struct AblationRow {
  std::string name;
  std::vector<std::string> streams;
  obj::EvalReport report;
};

/// Trains and evaluates one model per stream subset under the same configuration
/// and data split, returning rows sorted by challenge score (descending; ties keep input order).
std::vector<AblationRow> ablation_run(const data::FeatureBank& bank, const data::LabelSet& labels,
                                      const std::vector<std::vector<std::string>>& subsets,
                                      const model::ModelConfig& base, const TrainConfig& config);

/// Fixed-width table with columns Features | Valence | Arousal | FER | AU | score.
std::string render_table(std::span<const AblationRow> rows);

}  // namespace affect::train
