#pragma once

// Training losses and challenge metrics.
//
// Masks are one byte per entry: nonzero means the entry carries a valid label.
// Every reduction walks valid entries in index order and never reads a masked
// entry, so inserting masked entries anywhere leaves results bit-identical.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "affect/tensor.hpp"

namespace affect::obj {

using Mask = std::span<const std::uint8_t>;

inline constexpr double kProbEpsilon = 1e-7;

/// AU names in label-column order.
const std::vector<std::string>& au_names();

/// Mean squared error over valid entries; pred is flattened row-major.
num::Tensor mse_loss(const num::Tensor& pred, std::span<const double> label, Mask mask);

/// Concordance correlation coefficient with population moments.
/// Both sequences constant: 1 if their means agree, 0 otherwise.
double ccc(std::span<const double> x, std::span<const double> y, Mask mask);

/// 1 - ccc(pred, label), differentiable in pred.
num::Tensor ccc_loss(const num::Tensor& pred, std::span<const double> label, Mask mask);

/// lambda * mean(MSE_V, MSE_A) + (1 - lambda) * mean(1 - CCC_V, 1 - CCC_A).
/// pred is [N x 2]; label holds N (valence, arousal) pairs; mask is per frame.
num::Tensor va_loss(const num::Tensor& pred, std::span<const double> label, Mask mask, double lambda = 0.5);

enum class Reduction { kMean, kSum };

/// Cross-entropy of [N x C] logits against class ids, via log-sum-exp.
num::Tensor ce_loss(const num::Tensor& logits, std::span<const int> label, Mask mask,
                    Reduction reduction = Reduction::kMean);

struct AuWeights {
  std::vector<double> w;
};

/// Inverse occurrence-rate weights normalized to mean 1. `label` and `mask` are [N x units].
/// Throws DataError naming any unit with no valid label or no positive occurrence.
AuWeights au_weights(std::span<const std::uint8_t> label, Mask mask, std::size_t units);

/// Weighted asymmetric AU loss over [N x units] logits:
///   -(1/N) sum_frames sum_i w_i [p log q + (1 - p) q log(1 - q)],  q = clamp(sigmoid(z), eps, 1 - eps)
/// N counts frames with at least one valid unit. With asymmetric == false the
/// negative term drops its q factor (weighted binary cross-entropy).
num::Tensor au_loss(const num::Tensor& logits, std::span<const std::uint8_t> label, Mask mask, const AuWeights& weights,
                    bool asymmetric = true);

struct ClassCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

/// F1 = 2tp / (2tp + fp + fn); 0 when the class is absent from predictions and labels.
double f1(const ClassCounts& c);

/// Unweighted mean of per-class F1 over n_classes classes.
double macro_f1(std::span<const int> pred, std::span<const int> label, int n_classes, Mask mask);

/// Mean over units of the positive-class F1; arrays are [N x units] with per-entry masks.
double au_macro_f1(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label, Mask mask,
                   std::size_t units);

/// (valence + arousal) / 2 + fer + au
double challenge_score(double valence, double arousal, double fer, double au);

struct EvalReport {
  double ccc_v = 0.0;
  double ccc_a = 0.0;
  double f1_expr = 0.0;
  double f1_au = 0.0;

  double score() const { return challenge_score(ccc_v, ccc_a, f1_expr, f1_au); }

  /// "valence=... arousal=... fer=... au=... score=..." on one line.
  std::string to_line() const;
  /// One "key=value" per line: valence, arousal, fer, au, score.
  std::string to_kv() const;
  /// Parses to_kv()/to_line() output; score is recomputed, not read.
  static EvalReport parse_kv(const std::string& text);

  bool operator==(const EvalReport&) const = default;
};

/// Fixed-point formatting shared by every human- and machine-readable report.
std::string format_metric(double v);

}  // namespace affect::obj
