#include "affect/objectives.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <memory>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "affect/error.hpp"
#include "affect/ops.hpp"

namespace affect::obj {

using num::Tensor;

const std::vector<std::string>& au_names() {
  static const std::vector<std::string> names{"AU1",  "AU2",  "AU4",  "AU6",  "AU7",  "AU10",
                                              "AU12", "AU15", "AU23", "AU24", "AU25", "AU26"};
  return names;
}

namespace {

void check_sizes(const char* op, std::size_t n, std::size_t labels, std::size_t mask) {
  if (labels != n || mask != n) {
    throw ShapeError(fmt::format("{}: {} predictions, {} labels, {} mask entries", op, n, labels, mask));
  }
}

std::size_t count_valid(Mask mask) {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
}

struct Moments {
  std::size_t n = 0;
  double mean_x = 0.0, mean_y = 0.0;
  double var_x = 0.0, var_y = 0.0, cov = 0.0;
};

Moments moments(std::span<const double> x, std::span<const double> y, Mask mask) {
  Moments m;
  double sx = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!mask[i]) continue;
    sx += x[i];
    sy += y[i];
    ++m.n;
  }
  if (m.n < 2) throw std::invalid_argument(fmt::format("ccc: needs at least 2 valid entries, got {}", m.n));
  const double n = static_cast<double>(m.n);
  m.mean_x = sx / n;
  m.mean_y = sy / n;
  double vx = 0.0, vy = 0.0, cxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!mask[i]) continue;
    const double dx = x[i] - m.mean_x;
    const double dy = y[i] - m.mean_y;
    vx += dx * dx;
    vy += dy * dy;
    cxy += dx * dy;
  }
  m.var_x = vx / n;
  m.var_y = vy / n;
  m.cov = cxy / n;
  return m;
}

double ccc_from(const Moments& m) {
  const double diff = m.mean_x - m.mean_y;
  const double denom = m.var_x + m.var_y + diff * diff;
  if (denom == 0.0) return 1.0;  // both constant with equal means
  return 2.0 * m.cov / denom;
}

double clamped_sigmoid(double z, double* q_out, bool* clamped) {
  const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  double q = s;
  *clamped = false;
  if (q < kProbEpsilon) {
    q = kProbEpsilon;
    *clamped = true;
  } else if (q > 1.0 - kProbEpsilon) {
    q = 1.0 - kProbEpsilon;
    *clamped = true;
  }
  *q_out = q;
  return s;
}

}  // namespace

Tensor mse_loss(const Tensor& pred, std::span<const double> label, Mask mask) {
  check_sizes("mse_loss", pred.numel(), label.size(), mask.size());
  const std::size_t n = count_valid(mask);
  if (n == 0) throw std::invalid_argument("mse_loss: mask has no valid entries");
  auto pv = pred.data();
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (mask[i]) total += (pv[i] - label[i]) * (pv[i] - label[i]);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> lab(label.begin(), label.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return Tensor::record("mse_loss", {1}, {total * inv_n}, {pred},
                        [pred, lab = std::move(lab), msk = std::move(msk), inv_n](const num::BackwardContext& ctx) {
                          auto pv = pred.data();
                          auto& g = ctx.input_grads[0];
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            if (msk[i]) g[i] += ctx.grad[0] * 2.0 * (pv[i] - lab[i]) * inv_n;
                          }
                        });
}

double ccc(std::span<const double> x, std::span<const double> y, Mask mask) {
  check_sizes("ccc", x.size(), y.size(), mask.size());
  return ccc_from(moments(x, y, mask));
}

Tensor ccc_loss(const Tensor& pred, std::span<const double> label, Mask mask) {
  check_sizes("ccc_loss", pred.numel(), label.size(), mask.size());
  const Moments m = moments(pred.data(), label, mask);
  const double value = ccc_from(m);
  std::vector<double> lab(label.begin(), label.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return Tensor::record(
      "ccc_loss", {1}, {1.0 - value}, {pred},
      [pred, lab = std::move(lab), msk = std::move(msk), m](const num::BackwardContext& ctx) {
        const double diff = m.mean_x - m.mean_y;
        const double denom = m.var_x + m.var_y + diff * diff;
        if (denom == 0.0) return;
        const double n = static_cast<double>(m.n);
        auto pv = pred.data();
        auto& g = ctx.input_grads[0];
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!msk[i]) continue;
          // d ccc / d x_i for ccc = 2 cov / (var_x + var_y + (mx - my)^2)
          const double dcov = (lab[i] - m.mean_y) / n;
          const double ddenom = 2.0 * (pv[i] - m.mean_x) / n + 2.0 * diff / n;
          const double dccc = (2.0 * dcov * denom - 2.0 * m.cov * ddenom) / (denom * denom);
          g[i] -= ctx.grad[0] * dccc;
        }
      });
}

Tensor va_loss(const Tensor& pred, std::span<const double> label, Mask mask, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument(fmt::format("va_loss: lambda {} outside [0, 1]", lambda));
  if (pred.rank() != 2 || pred.dim(1) != 2) {
    throw ShapeError("va_loss: predictions must be [N x 2], got " + num::to_string(pred.shape()));
  }
  const std::size_t n = pred.dim(0);
  check_sizes("va_loss", 2 * n, label.size(), 2 * mask.size());
  std::vector<double> val(n), aro(n);
  for (std::size_t i = 0; i < n; ++i) {
    val[i] = label[2 * i];
    aro[i] = label[2 * i + 1];
  }
  Tensor pv = num::narrow(pred, 1, 0, 1);
  Tensor pa = num::narrow(pred, 1, 1, 1);
  Tensor total;
  if (lambda > 0.0) {
    Tensor mse = num::scale(num::add(mse_loss(pv, val, mask), mse_loss(pa, aro, mask)), 0.5);
    total = num::scale(mse, lambda);
  }
  if (lambda < 1.0) {
    Tensor cl = num::scale(num::add(ccc_loss(pv, val, mask), ccc_loss(pa, aro, mask)), 0.5);
    cl = num::scale(cl, 1.0 - lambda);
    total = total.defined() ? num::add(total, cl) : cl;
  }
  return total;
}

Tensor ce_loss(const Tensor& logits, std::span<const int> label, Mask mask, Reduction reduction) {
  if (logits.rank() != 2) throw ShapeError("ce_loss: logits must be [N x C], got " + num::to_string(logits.shape()));
  const std::size_t n = logits.dim(0);
  const std::size_t c = logits.dim(1);
  check_sizes("ce_loss", n, label.size(), mask.size());
  const std::size_t valid = count_valid(mask);
  if (valid == 0) throw std::invalid_argument("ce_loss: mask has no valid entries");
  auto z = logits.data();
  auto probs = std::make_shared<std::vector<double>>(n * c, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    if (label[i] < 0 || static_cast<std::size_t>(label[i]) >= c) {
      throw std::out_of_range(fmt::format("ce_loss: class {} at row {} outside [0, {})", label[i], i, c));
    }
    const double* row = z.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    total += lse - row[label[i]];
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(row[j] - lse);
  }
  const double factor = reduction == Reduction::kMean ? 1.0 / static_cast<double>(valid) : 1.0;
  std::vector<int> lab(label.begin(), label.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return Tensor::record("ce_loss", {1}, {total * factor}, {logits},
                        [probs, lab = std::move(lab), msk = std::move(msk), c, factor](const num::BackwardContext& ctx) {
                          auto& g = ctx.input_grads[0];
                          const double scale = ctx.grad[0] * factor;
                          for (std::size_t i = 0; i < msk.size(); ++i) {
                            if (!msk[i]) continue;
                            for (std::size_t j = 0; j < c; ++j) {
                              const double target = static_cast<int>(j) == lab[i] ? 1.0 : 0.0;
                              g[i * c + j] += scale * ((*probs)[i * c + j] - target);
                            }
                          }
                        });
}

AuWeights au_weights(std::span<const std::uint8_t> label, Mask mask, std::size_t units) {
  if (units == 0 || label.size() % units != 0) throw ShapeError("au_weights: label array is not [N x units]");
  check_sizes("au_weights", label.size(), label.size(), mask.size());
  const std::size_t n = label.size() / units;
  std::vector<double> pos(units, 0.0), valid(units, 0.0);
  for (std::size_t f = 0; f < n; ++f) {
    for (std::size_t i = 0; i < units; ++i) {
      const std::size_t idx = f * units + i;
      if (!mask[idx]) continue;
      valid[i] += 1.0;
      if (label[idx]) pos[i] += 1.0;
    }
  }
  auto unit_name = [&](std::size_t i) {
    return units == au_names().size() ? au_names()[i] : fmt::format("unit {}", i);
  };
  std::vector<std::string> bad;
  for (std::size_t i = 0; i < units; ++i) {
    if (valid[i] == 0.0 || pos[i] == 0.0) bad.push_back(unit_name(i));
  }
  if (!bad.empty()) {
    throw DataError("au labels", 0, fmt::format("no positive occurrences for {}", fmt::join(bad, ", ")));
  }
  AuWeights w;
  w.w.resize(units);
  double total = 0.0;
  for (std::size_t i = 0; i < units; ++i) {
    w.w[i] = valid[i] / pos[i];
    total += w.w[i];
  }
  const double mean_w = total / static_cast<double>(units);
  for (auto& v : w.w) v /= mean_w;
  return w;
}

Tensor au_loss(const Tensor& logits, std::span<const std::uint8_t> label, Mask mask, const AuWeights& weights,
               bool asymmetric) {
  if (logits.rank() != 2) throw ShapeError("au_loss: logits must be [N x units], got " + num::to_string(logits.shape()));
  const std::size_t n = logits.dim(0);
  const std::size_t units = logits.dim(1);
  if (weights.w.size() != units) {
    throw ShapeError(fmt::format("au_loss: {} weights for {} units", weights.w.size(), units));
  }
  check_sizes("au_loss", n * units, label.size(), mask.size());
  std::size_t frames = 0;
  for (std::size_t f = 0; f < n; ++f) {
    if (std::any_of(mask.begin() + static_cast<std::ptrdiff_t>(f * units),
                    mask.begin() + static_cast<std::ptrdiff_t>((f + 1) * units), [](std::uint8_t m) { return m != 0; })) {
      ++frames;
    }
  }
  if (frames == 0) throw std::invalid_argument("au_loss: mask has no valid entries");

  auto z = logits.data();
  double total = 0.0;
  for (std::size_t idx = 0; idx < z.size(); ++idx) {
    if (!mask[idx]) continue;
    double q = 0.0;
    bool clamped = false;
    clamped_sigmoid(z[idx], &q, &clamped);
    const double p = label[idx] ? 1.0 : 0.0;
    const double neg = asymmetric ? q * std::log(1.0 - q) : std::log(1.0 - q);
    total += weights.w[idx % units] * (p * std::log(q) + (1.0 - p) * neg);
  }
  const double inv_frames = 1.0 / static_cast<double>(frames);
  std::vector<std::uint8_t> lab(label.begin(), label.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return Tensor::record(
      "au_loss", {1}, {-total * inv_frames}, {logits},
      [logits, lab = std::move(lab), msk = std::move(msk), w = weights.w, units, inv_frames,
       asymmetric](const num::BackwardContext& ctx) {
        auto z = logits.data();
        auto& g = ctx.input_grads[0];
        for (std::size_t idx = 0; idx < g.size(); ++idx) {
          if (!msk[idx]) continue;
          double q = 0.0;
          bool clamped = false;
          const double s = clamped_sigmoid(z[idx], &q, &clamped);
          if (clamped) continue;
          const double p = lab[idx] ? 1.0 : 0.0;
          const double dneg = asymmetric ? std::log(1.0 - q) - q / (1.0 - q) : -1.0 / (1.0 - q);
          const double dterm_dq = p / q + (1.0 - p) * dneg;
          g[idx] -= ctx.grad[0] * inv_frames * w[idx % units] * dterm_dq * s * (1.0 - s);
        }
      });
}

double f1(const ClassCounts& c) {
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 0.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

double macro_f1(std::span<const int> pred, std::span<const int> label, int n_classes, Mask mask) {
  check_sizes("macro_f1", pred.size(), label.size(), mask.size());
  if (n_classes <= 0) throw std::invalid_argument("macro_f1: n_classes must be positive");
  if (count_valid(mask) == 0) throw std::invalid_argument("macro_f1: mask has no valid entries");
  std::vector<ClassCounts> counts(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask[i]) continue;
    const int p = pred[i];
    const int y = label[i];
    if (p < 0 || p >= n_classes || y < 0 || y >= n_classes) {
      throw std::out_of_range(fmt::format("macro_f1: class pair ({}, {}) at {} outside [0, {})", p, y, i, n_classes));
    }
    if (p == y) {
      ++counts[p].tp;
    } else {
      ++counts[p].fp;
      ++counts[y].fn;
    }
  }
  double total = 0.0;
  for (const auto& c : counts) total += f1(c);
  return total / n_classes;
}

double au_macro_f1(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label, Mask mask,
                   std::size_t units) {
  check_sizes("au_macro_f1", pred.size(), label.size(), mask.size());
  if (units == 0 || pred.size() % units != 0) throw ShapeError("au_macro_f1: arrays are not [N x units]");
  if (count_valid(mask) == 0) throw std::invalid_argument("au_macro_f1: mask has no valid entries");
  std::vector<ClassCounts> counts(units);
  for (std::size_t idx = 0; idx < pred.size(); ++idx) {
    if (!mask[idx]) continue;
    auto& c = counts[idx % units];
    const bool p = pred[idx] != 0;
    const bool y = label[idx] != 0;
    if (p && y) ++c.tp;
    if (p && !y) ++c.fp;
    if (!p && y) ++c.fn;
  }
  double total = 0.0;
  for (const auto& c : counts) total += f1(c);
  return total / static_cast<double>(units);
}

double challenge_score(double valence, double arousal, double fer, double au) {
  return (valence + arousal) / 2.0 + fer + au;
}

std::string format_metric(double v) { return fmt::format("{:.9f}", v); }

std::string EvalReport::to_line() const {
  return fmt::format("valence={} arousal={} fer={} au={} score={}", format_metric(ccc_v), format_metric(ccc_a),
                     format_metric(f1_expr), format_metric(f1_au), format_metric(score()));
}

std::string EvalReport::to_kv() const {
  return fmt::format("valence={}\narousal={}\nfer={}\nau={}\nscore={}\n", format_metric(ccc_v), format_metric(ccc_a),
                     format_metric(f1_expr), format_metric(f1_au), format_metric(score()));
}

EvalReport EvalReport::parse_kv(const std::string& text) {
  EvalReport r;
  std::istringstream in(text);
  std::string token;
  int seen = 0;
  while (in >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("report: expected key=value, got '" + token + "'");
    const std::string key = token.substr(0, eq);
    double value = 0.0;
    const std::string text_value = token.substr(eq + 1);
    const auto [end, ec] = std::from_chars(text_value.data(), text_value.data() + text_value.size(), value);
    if (ec != std::errc() || end != text_value.data() + text_value.size()) {
      throw std::invalid_argument("report: bad number in '" + token + "'");
    }
    if (key == "valence") {
      r.ccc_v = value;
    } else if (key == "arousal") {
      r.ccc_a = value;
    } else if (key == "fer") {
      r.f1_expr = value;
    } else if (key == "au") {
      r.f1_au = value;
    } else if (key == "score") {
      continue;
    } else {
      throw std::invalid_argument("report: unknown key '" + key + "'");
    }
    ++seen;
  }
  if (seen != 4) throw std::invalid_argument("report: expected valence, arousal, fer and au");
  return r;
}

}  // namespace affect::obj
