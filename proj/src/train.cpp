#include "affect/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "affect/error.hpp"
#include "affect/ops.hpp"
#include "affect/random.hpp"
#include "affect/suite.hpp"

namespace affect::train {

using data::Task;
using model::kAuUnits;
using model::kExprClasses;
using num::Tensor;

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("train: lr must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("train: eps must be positive");
  if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
  if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
  if (lambda < 0.0 || lambda > 1.0) throw ConfigError("train: lambda must lie in [0, 1]");
  if (eval_every == 0) throw ConfigError("train: eval_every must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("train: val_fraction must lie in (0, 1)");
  if (!(au_threshold > 0.0 && au_threshold < 1.0)) throw ConfigError("train: au_threshold must lie in (0, 1)");
  if (min_loss_drop < 0.0 || min_loss_drop >= 1.0) throw ConfigError("train: min_loss_drop must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"task", data::to_string(c.task)},
                     {"lr", c.lr},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"lambda", c.lambda},
                     {"eval_every", c.eval_every},
                     {"stride", c.stride},
                     {"val_fraction", c.val_fraction},
                     {"au_threshold", c.au_threshold},
                     {"min_loss_drop", c.min_loss_drop},
                     {"gradcheck_guard", c.gradcheck_guard},
                     {"checkpoint_path", c.checkpoint_path},
                     {"runlog_path", c.runlog_path}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  const nlohmann::json known = d;
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("train config: unknown key '" + key + "'");
  }
  c.task = data::parse_task(j.value("task", data::to_string(d.task)));
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  c.lambda = j.value("lambda", d.lambda);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.stride = j.value("stride", d.stride);
  c.val_fraction = j.value("val_fraction", d.val_fraction);
  c.au_threshold = j.value("au_threshold", d.au_threshold);
  c.min_loss_drop = j.value("min_loss_drop", d.min_loss_drop);
  c.gradcheck_guard = j.value("gradcheck_guard", d.gradcheck_guard);
  c.checkpoint_path = j.value("checkpoint_path", d.checkpoint_path);
  c.runlog_path = j.value("runlog_path", d.runlog_path);
}

void adam_step(std::span<num::NamedTensor> params, AdamState& state, const TrainConfig& config) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].tensor.numel()) {
      throw ShapeError("adam_step: optimizer state shape differs for '" + params[i].name + "'");
    }
    for (double g : params[i].tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in '" + params[i].name + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].tensor.mutable_data();
    auto grad = params[i].tensor.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double g = grad.empty() ? 0.0 : grad[k];
      m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g;
      v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g * g;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      values[k] -= config.lr * mhat / (std::sqrt(vhat) + config.eps);
    }
  }
}

Split split_dataset(const data::FeatureBank& bank, const data::LabelSet& labels, std::span<const std::string> streams,
                    std::size_t window, std::size_t stride, double val_fraction) {
  const auto frames = bank.aligned_frames(streams);
  if (frames.size() < 2) throw DataError("bank", 0, "empty dataset: need at least two aligned frames to split");
  auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(frames.size())));
  n_val = std::clamp<std::size_t>(n_val, 1, frames.size() - 1);
  const std::span<const data::FrameId> all(frames);
  Split s;
  s.train.bank = &bank;
  s.val.bank = &bank;
  s.train.windows = data::windows(all.first(frames.size() - n_val), labels, window, stride == 0 ? window : stride, "train");
  s.val.windows = data::windows(all.last(n_val), labels, window, window, "val");
  return s;
}

namespace {

struct Collected {
  std::vector<double> va_pred, va_label;
  std::vector<std::uint8_t> va_mask;
  std::vector<int> expr_pred, expr_label;
  std::vector<std::uint8_t> expr_mask;
  std::vector<std::uint8_t> au_pred, au_label, au_mask;
};

std::size_t count(std::span<const std::uint8_t> mask) {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
}

// Keeps only the mask-selected column of an interleaved [N x 2] array.
std::vector<double> column(const std::vector<double>& pairs, std::size_t c) {
  std::vector<double> out(pairs.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pairs[2 * i + c];
  return out;
}

}  // namespace

obj::EvalReport evaluate(const model::FusionModel& model, const Dataset& dataset, double au_threshold,
                         std::size_t batch_size) {
  if (dataset.bank == nullptr || dataset.windows.empty()) throw DataError("eval", 0, "empty evaluation dataset");
  const auto& streams = model.config().streams;
  Collected c;
  const std::span<const data::Window> all(dataset.windows);
  // sigmoid(z) >= threshold  <=>  z >= logit(threshold)
  const double logit_threshold = std::log(au_threshold / (1.0 - au_threshold));
  for (std::size_t start = 0; start < all.size(); start += batch_size) {
    const auto chunk = all.subspan(start, std::min(batch_size, all.size() - start));
    const data::Minibatch mb = data::make_minibatch(*dataset.bank, streams, chunk);
    const model::HeadOutputs out = model.forward(mb.streams);
    const std::size_t n = mb.batch * mb.length;
    auto va = out.va.data();
    auto ex = out.expr_logits.data();
    auto au = out.au_logits.data();
    for (std::size_t r = 0; r < n; ++r) {
      if (!mb.real[r]) continue;
      c.va_pred.insert(c.va_pred.end(), {va[2 * r], va[2 * r + 1]});
      c.va_label.insert(c.va_label.end(), {mb.va[2 * r], mb.va[2 * r + 1]});
      c.va_mask.push_back(mb.va_mask[r]);
      const double* row = ex.data() + r * kExprClasses;
      c.expr_pred.push_back(static_cast<int>(std::max_element(row, row + kExprClasses) - row));
      c.expr_label.push_back(mb.expr[r]);
      c.expr_mask.push_back(mb.expr_mask[r]);
      for (std::size_t i = 0; i < kAuUnits; ++i) {
        c.au_pred.push_back(au[r * kAuUnits + i] >= logit_threshold ? 1 : 0);
        c.au_label.push_back(mb.au[r * kAuUnits + i]);
        c.au_mask.push_back(mb.au_mask[r * kAuUnits + i]);
      }
    }
  }
  obj::EvalReport report;
  if (count(c.va_mask) >= 2) {
    report.ccc_v = obj::ccc(column(c.va_pred, 0), column(c.va_label, 0), c.va_mask);
    report.ccc_a = obj::ccc(column(c.va_pred, 1), column(c.va_label, 1), c.va_mask);
  }
  if (count(c.expr_mask) >= 1) {
    report.f1_expr = obj::macro_f1(c.expr_pred, c.expr_label, static_cast<int>(kExprClasses), c.expr_mask);
  }
  if (count(c.au_mask) >= 1) report.f1_au = obj::au_macro_f1(c.au_pred, c.au_label, c.au_mask, kAuUnits);
  return report;
}

double selection_score(const obj::EvalReport& report, Task task) {
  switch (task) {
    case Task::kVa: return (report.ccc_v + report.ccc_a) / 2.0;
    case Task::kExpr: return report.f1_expr;
    case Task::kAu: return report.f1_au;
    case Task::kAll: return report.score();
  }
  return report.score();
}

namespace {

nlohmann::json report_json(const obj::EvalReport& r) {
  return {{"valence", r.ccc_v}, {"arousal", r.ccc_a}, {"fer", r.f1_expr}, {"au", r.f1_au}, {"score", r.score()}};
}

}  // namespace

std::string RunLog::header_line(const nlohmann::json& config) const {
  return nlohmann::json{{"type", "run"}, {"seed", seed}, {"config", config}, {"initial_loss", initial_loss}}.dump();
}

std::string RunLog::epoch_line(const EpochLog& e) {
  nlohmann::json j{{"type", "epoch"}, {"epoch", e.epoch}, {"train_loss", e.train_loss}};
  if (e.eval) {
    j["eval"] = report_json(*e.eval);
    j["selection"] = e.selection;
    j["improved"] = e.improved;
  }
  return j.dump();
}

std::string RunLog::done_line() const {
  return nlohmann::json{{"type", "done"},
                        {"best_epoch", best_epoch},
                        {"best", report_json(best_report)},
                        {"final_loss", final_loss},
                        {"converged", converged}}
      .dump();
}

Tensor task_loss(const model::HeadOutputs& out, const data::Minibatch& mb, Task task, double lambda,
                 const obj::AuWeights* au_weights) {
  const std::size_t n = mb.batch * mb.length;
  Tensor total;
  auto accumulate = [&total](const Tensor& t) { total = total.defined() ? num::add(total, t) : t; };
  if (task == Task::kVa || task == Task::kAll) {
    const std::size_t valid = count(mb.va_mask);
    // The CCC term needs two valid frames; fall back to pure MSE on a single one.
    if (valid >= 2 || (valid == 1 && lambda == 1.0)) {
      accumulate(obj::va_loss(num::reshape(out.va, {n, 2}), mb.va, mb.va_mask, lambda));
    } else if (valid == 1) {
      accumulate(obj::va_loss(num::reshape(out.va, {n, 2}), mb.va, mb.va_mask, 1.0));
    }
  }
  if ((task == Task::kExpr || task == Task::kAll) && count(mb.expr_mask) > 0) {
    accumulate(obj::ce_loss(num::reshape(out.expr_logits, {n, kExprClasses}), mb.expr, mb.expr_mask));
  }
  if ((task == Task::kAu || task == Task::kAll) && count(mb.au_mask) > 0) {
    if (au_weights == nullptr) throw std::logic_error("task_loss: AU loss needs weights");
    accumulate(obj::au_loss(num::reshape(out.au_logits, {n, kAuUnits}), mb.au, mb.au_mask, *au_weights));
  }
  return total;
}

namespace {

obj::AuWeights weights_from(const Dataset& ds) {
  std::vector<std::uint8_t> labels, mask;
  for (const auto& w : ds.windows) {
    for (std::size_t t = 0; t < w.frame_ids.size(); ++t) {
      if (!w.real[t]) continue;
      labels.insert(labels.end(), w.labels[t].au.begin(), w.labels[t].au.end());
      mask.insert(mask.end(), w.labels[t].au_valid.begin(), w.labels[t].au_valid.end());
    }
  }
  return obj::au_weights(labels, mask, kAuUnits);
}

// Frame-weighted mean loss over the whole set, inference mode.
double dataset_loss(const model::FusionModel& model, const Dataset& ds, const TrainConfig& config,
                    const obj::AuWeights* aw) {
  double total = 0.0;
  double frames = 0.0;
  const std::span<const data::Window> all(ds.windows);
  for (std::size_t start = 0; start < all.size(); start += config.batch_size) {
    const auto chunk = all.subspan(start, std::min(config.batch_size, all.size() - start));
    const auto mb = data::make_minibatch(*ds.bank, model.config().streams, chunk);
    const Tensor loss = task_loss(model.forward(mb.streams), mb, config.task, config.lambda, aw);
    if (!loss.defined()) continue;
    const double w = static_cast<double>(count(mb.real));
    total += loss.item() * w;
    frames += w;
  }
  if (frames == 0.0) throw DataError(ds.windows.front().source, 0, "no labels for task " + data::to_string(config.task));
  return total / frames;
}

}  // namespace

TrainResult train(const model::FusionModel& init, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& config) {
  config.validate();
  if (train_set.bank == nullptr || train_set.windows.empty()) throw DataError("train", 0, "empty training set");
  if (val_set.bank == nullptr || val_set.windows.empty()) throw DataError("val", 0, "empty validation set");
  if (config.gradcheck_guard) {
    verify::SuiteOptions quick;
    quick.seeds = 3;
    for (const auto& r : verify::run_gradcheck_suite(quick)) {
      if (!r.passed) throw NumericError("gradcheck guard failed for " + r.op + "; refusing to train");
    }
  }

  model::FusionModel model = init;
  std::optional<obj::AuWeights> aw;
  if (config.task == Task::kAu || config.task == Task::kAll) aw = weights_from(train_set);
  const obj::AuWeights* awp = aw ? &*aw : nullptr;

  // Output locations are left out so identical runs write identical bytes wherever they land.
  nlohmann::json recorded = config;
  recorded.erase("checkpoint_path");
  recorded.erase("runlog_path");
  const nlohmann::json provenance{{"train", recorded}, {"model", model.config()}};
  TrainResult result{model, {}};
  RunLog& log = result.log;
  log.seed = config.seed;
  try {
    log.initial_loss = dataset_loss(model, train_set, config, awp);
  } catch (const NumericError& e) {
    throw TrainingDiverged(std::string("initial loss evaluation failed: ") + e.what());
  }

  std::ofstream runlog;
  std::ofstream timing;
  if (!config.runlog_path.empty()) {
    runlog.open(config.runlog_path, std::ios::trunc);
    timing.open(config.runlog_path + ".timing", std::ios::trunc);
    if (!runlog || !timing) throw std::runtime_error("cannot write run log " + config.runlog_path);
    runlog << log.header_line(provenance) << '\n' << std::flush;
  }

  Rng rng(config.seed);
  AdamState adam;
  std::vector<std::size_t> order(train_set.windows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double best_selection = -std::numeric_limits<double>::infinity();
  std::vector<data::Window> chunk;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle(order, rng);
    double loss_sum = 0.0;
    double loss_frames = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      chunk.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
        chunk.push_back(train_set.windows[order[i]]);
      }
      const auto mb = data::make_minibatch(*train_set.bank, model.config().streams, chunk);
      Tensor loss;
      try {
        const auto out = model.forward(mb.streams, {.training = true, .rng = &rng});
        loss = task_loss(out, mb, config.task, config.lambda, awp);
        if (!loss.defined()) continue;
        for (auto& p : model.parameters()) p.tensor.zero_grad();
        loss.backward();
        adam_step(model.parameters(), adam, config);
      } catch (const NumericError& e) {
        throw TrainingDiverged(fmt::format("diverged in epoch {}: {}", epoch, e.what()));
      }
      const double w = static_cast<double>(count(mb.real));
      loss_sum += loss.item() * w;
      loss_frames += w;
    }

    EpochLog e;
    e.epoch = epoch;
    e.train_loss = loss_frames > 0.0 ? loss_sum / loss_frames : 0.0;
    if (epoch % config.eval_every == 0 || epoch == config.epochs) {
      e.eval = evaluate(model, val_set, config.au_threshold);
      e.selection = selection_score(*e.eval, config.task);
      if (e.selection > best_selection) {
        best_selection = e.selection;
        e.improved = true;
        result.best = model;
        log.best_epoch = epoch;
        log.best_report = *e.eval;
        if (!config.checkpoint_path.empty()) {
          model::save_checkpoint(config.checkpoint_path, model,
                                 {{"train", recorded}, {"best_epoch", epoch}, {"report", report_json(*e.eval)}});
        }
      }
    }
    e.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(e);
    if (runlog.is_open()) {
      runlog << RunLog::epoch_line(e) << '\n' << std::flush;
      timing << fmt::format("{{\"epoch\":{},\"wall_seconds\":{}}}\n", epoch, e.wall_seconds) << std::flush;
    }
  }

  try {
    log.final_loss = dataset_loss(model, train_set, config, awp);
  } catch (const NumericError& e) {
    throw TrainingDiverged(std::string("final loss evaluation failed: ") + e.what());
  }
  log.converged = log.final_loss <= (1.0 - config.min_loss_drop) * log.initial_loss;
  if (runlog.is_open()) runlog << log.done_line() << '\n' << std::flush;
  return result;
}

std::vector<AblationRow> ablation_run(const data::FeatureBank& bank, const data::LabelSet& labels,
                                      const std::vector<std::vector<std::string>>& subsets,
                                      const model::ModelConfig& base, const TrainConfig& config) {
  if (subsets.empty()) throw ConfigError("ablation: no feature subsets given");
  std::vector<std::string> union_streams;
  for (const auto& subset : subsets) {
    if (subset.empty()) throw ConfigError("ablation: empty feature subset");
    for (const auto& name : subset) {
      if (!bank.has_stream(name)) throw ConfigError("ablation: unknown stream '" + name + "'");
      if (std::find(union_streams.begin(), union_streams.end(), name) == union_streams.end()) union_streams.push_back(name);
    }
  }
  // Every row trains and evaluates on the same frames.
  const Split split = split_dataset(bank, labels, union_streams, base.window, config.stride, config.val_fraction);

  std::vector<AblationRow> rows;
  for (const auto& subset : subsets) {
    model::ModelConfig mc = base;
    mc.streams.clear();
    for (const auto& name : subset) mc.streams.push_back(bank.stream(name));
    TrainConfig tc = config;
    tc.checkpoint_path.clear();
    tc.runlog_path.clear();
    const TrainResult r = train(model::FusionModel(mc), split.train, split.val, tc);
    rows.push_back({fmt::format("{}", fmt::join(subset, "+")), subset, r.log.best_report});
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const AblationRow& a, const AblationRow& b) { return a.report.score() > b.report.score(); });
  return rows;
}

std::string render_table(std::span<const AblationRow> rows) {
  std::size_t width = std::string("Features").size();
  for (const auto& r : rows) width = std::max(width, r.name.size());
  std::string out = fmt::format("{:<{}} | {:>12} | {:>12} | {:>12} | {:>12} | {:>12}\n", "Features", width, "Valence",
                                "Arousal", "FER", "AU", "score");
  out += std::string(width, '-') + std::string(5 * 15, '-') + "\n";
  for (const auto& r : rows) {
    out += fmt::format("{:<{}} | {:>12} | {:>12} | {:>12} | {:>12} | {:>12}\n", r.name, width,
                       obj::format_metric(r.report.ccc_v), obj::format_metric(r.report.ccc_a),
                       obj::format_metric(r.report.f1_expr), obj::format_metric(r.report.f1_au),
                       obj::format_metric(r.report.score()));
  }
  return out;
}

}  // namespace affect::train
