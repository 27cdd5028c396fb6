#include "affect/ops.hpp"

#include <cmath>
#include <memory>
#include <numeric>

#include <fmt/format.h>

#include "affect/error.hpp"

namespace affect::num {

namespace {

// Row-major C[m x n] += A[m x k] . B[k x n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// dA[m x k] += dC[m x n] . B^T
void gemm_grad_a(const double* dc, const double* b, double* da, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* dcrow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
      da[i * k + p] += acc;
    }
  }
}

// dB[k x n] += A^T . dC
void gemm_grad_b(const double* a, const double* dc, double* db, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* dcrow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      double* dbrow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * dcrow[j];
    }
  }
}

enum class Broadcast { kSame, kScalar, kSuffix };

Broadcast classify(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.numel() == 1) return Broadcast::kScalar;
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() < as.size() && std::equal(bs.begin(), bs.end(), as.end() - static_cast<std::ptrdiff_t>(bs.size()))) {
    return Broadcast::kSuffix;
  }
  throw ShapeError(fmt::format("{}: shapes {} and {} are not broadcast-compatible", op, to_string(as), to_string(bs)));
}

std::size_t b_index(Broadcast mode, std::size_t i, std::size_t bn) {
  switch (mode) {
    case Broadcast::kSame: return i;
    case Broadcast::kScalar: return 0;
    case Broadcast::kSuffix: return i % bn;
  }
  return 0;
}

template <class Fwd, class Bwd>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  const Broadcast mode = classify(op, a, b);
  const std::size_t n = a.numel();
  const std::size_t bn = b.numel();
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[b_index(mode, i, bn)]);
  return Tensor::record(op, a.shape(), std::move(out), {a, b}, [a, b, mode, bn, bwd](const BackwardContext& ctx) {
    auto av = a.data();
    auto bv = b.data();
    auto& ga = ctx.input_grads[0];
    auto& gb = ctx.input_grads[1];
    for (std::size_t i = 0; i < ctx.grad.size(); ++i) {
      const std::size_t j = b_index(mode, i, bn);
      const auto [da, db] = bwd(av[i], bv[j], ctx.grad[i]);
      if (!ga.empty()) ga[i] += da;
      if (!gb.empty()) gb[j] += db;
    }
  });
}

template <class Fwd, class Bwd>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Bwd bwd) {
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return Tensor::record(op, a.shape(), std::move(out), {a}, [a, bwd](const BackwardContext& ctx) {
    auto& ga = ctx.input_grads[0];
    if (ga.empty()) return;
    auto av = a.data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += bwd(av[i], ctx.value[i]) * ctx.grad[i];
  });
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.extent = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

void check_axis(const char* op, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError(fmt::format("{}: axis {} out of range for shape {}", op, axis, to_string(x.shape())));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2 || (as.size() == 2 && bs.size() == 3)) {
    throw ShapeError(fmt::format("matmul: unsupported operand ranks {} . {}", to_string(as), to_string(bs)));
  }
  const std::size_t batch = as.size() == 3 ? as[0] : 1;
  const bool batched_b = bs.size() == 3;
  if (batched_b && bs[0] != batch) {
    throw ShapeError(fmt::format("matmul: batch extents differ, {} . {}", to_string(as), to_string(bs)));
  }
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as.back();
  const std::size_t kb = bs[bs.size() - 2];
  const std::size_t n = bs.back();
  if (k != kb) {
    throw ShapeError(fmt::format("matmul: inner extents differ, {} . {} ({} vs {})", to_string(as), to_string(bs), k, kb));
  }

  Shape out_shape = as.size() == 3 ? Shape{batch, m, n} : Shape{m, n};
  std::vector<double> out(batch * m * n, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  const std::size_t b_stride = batched_b ? k * n : 0;
  if (!batched_b) {
    gemm_acc(ad, bd, out.data(), batch * m, k, n);
  } else {
    for (std::size_t s = 0; s < batch; ++s) gemm_acc(ad + s * m * k, bd + s * b_stride, out.data() + s * m * n, m, k, n);
  }

  return Tensor::record("matmul", std::move(out_shape), std::move(out), {a, b},
                        [a, b, batch, batched_b, m, k, n](const BackwardContext& ctx) {
                          const double* ad = a.data().data();
                          const double* bd = b.data().data();
                          const double* dc = ctx.grad.data();
                          auto& ga = ctx.input_grads[0];
                          auto& gb = ctx.input_grads[1];
                          if (!batched_b) {
                            if (!ga.empty()) gemm_grad_a(dc, bd, ga.data(), batch * m, k, n);
                            if (!gb.empty()) gemm_grad_b(ad, dc, gb.data(), batch * m, k, n);
                            return;
                          }
                          for (std::size_t s = 0; s < batch; ++s) {
                            if (!ga.empty()) gemm_grad_a(dc + s * m * n, bd + s * k * n, ga.data() + s * m * k, m, k, n);
                            if (!gb.empty()) gemm_grad_b(ad + s * m * k, dc + s * m * n, gb.data() + s * k * n, m, k, n);
                          }
                        });
}

Tensor transpose(const Tensor& a) {
  const auto& as = a.shape();
  if (as.size() < 2) throw ShapeError("transpose: needs rank 2 or 3, got " + to_string(as));
  const std::size_t batch = as.size() == 3 ? as[0] : 1;
  const std::size_t r = as[as.size() - 2];
  const std::size_t c = as.back();
  Shape out_shape = as;
  std::swap(out_shape[out_shape.size() - 2], out_shape.back());
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t s = 0; s < batch; ++s) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[s * r * c + j * r + i] = av[s * r * c + i * c + j];
    }
  }
  return Tensor::record("transpose", std::move(out_shape), std::move(out), {a},
                        [batch, r, c](const BackwardContext& ctx) {
                          auto& ga = ctx.input_grads[0];
                          for (std::size_t s = 0; s < batch; ++s) {
                            for (std::size_t i = 0; i < r; ++i) {
                              for (std::size_t j = 0; j < c; ++j) ga[s * r * c + i * c + j] += ctx.grad[s * r * c + j * r + i];
                            }
                          }
                        });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return std::pair{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return std::pair{g, -g}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g) { return std::pair{g * y, g * x}; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  check_axis("softmax", x, axis);
  const AxisSplit s = split_axis(x.shape(), axis);
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < s.extent; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const double e = std::exp(xv[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] /= total;
    }
  }
  return Tensor::record("softmax", x.shape(), std::move(out), {x}, [s](const BackwardContext& ctx) {
    auto& gx = ctx.input_grads[0];
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.extent; ++j) dot += ctx.grad[base + j * s.inner] * ctx.value[base + j * s.inner];
        for (std::size_t j = 0; j < s.extent; ++j) {
          const std::size_t idx = base + j * s.inner;
          gx[idx] += ctx.value[idx] * (ctx.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("layernorm: eps must be positive");
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    throw ShapeError(fmt::format("layernorm: gain {} and bias {} must be [{}] for input {}", to_string(gain.shape()),
                                 to_string(bias.shape()), d, to_string(x.shape())));
  }
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();

  struct Saved {
    std::vector<double> xhat;
    std::vector<double> inv_std;
  };
  auto saved = std::make_shared<Saved>();
  saved->xhat.resize(xv.size());
  saved->inv_std.resize(rows);
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    saved->inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mu) * inv;
      saved->xhat[r * d + j] = xh;
      out[r * d + j] = gv[j] * xh + bv[j];
    }
  }

  return Tensor::record("layernorm", x.shape(), std::move(out), {x, gain, bias},
                        [gain, saved, rows, d](const BackwardContext& ctx) {
                          auto gv = gain.data();
                          auto& gx = ctx.input_grads[0];
                          auto& ggain = ctx.input_grads[1];
                          auto& gbias = ctx.input_grads[2];
                          const double dd = static_cast<double>(d);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const double* g = ctx.grad.data() + r * d;
                            const double* xh = saved->xhat.data() + r * d;
                            if (!ggain.empty() || !gbias.empty()) {
                              for (std::size_t j = 0; j < d; ++j) {
                                if (!ggain.empty()) ggain[j] += g[j] * xh[j];
                                if (!gbias.empty()) gbias[j] += g[j];
                              }
                            }
                            if (gx.empty()) continue;
                            double sum_dxh = 0.0;
                            double sum_dxh_xh = 0.0;
                            for (std::size_t j = 0; j < d; ++j) {
                              const double dxh = g[j] * gv[j];
                              sum_dxh += dxh;
                              sum_dxh_xh += dxh * xh[j];
                            }
                            const double inv = saved->inv_std[r];
                            for (std::size_t j = 0; j < d; ++j) {
                              const double dxh = g[j] * gv[j];
                              gx[r * d + j] += inv / dd * (dd * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                            }
                          }
                        });
}

Tensor concat(std::span<const Tensor> xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  check_axis("concat", xs[0], axis);
  const Shape& ref = xs[0].shape();
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
    if (!ok) {
      throw ShapeError(fmt::format("concat: shape {} does not match {} off axis {}", to_string(s), to_string(ref), axis));
    }
    extents.push_back(s[axis]);
    total += s[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const AxisSplit s = split_axis(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    auto v = xs[t].data();
    const std::size_t block = extents[t] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(v.data() + o * block, block, out.data() + o * total * s.inner + offset * s.inner);
    }
    offset += extents[t];
  }
  std::vector<Tensor> inputs(xs.begin(), xs.end());
  return Tensor::record("concat", std::move(out_shape), std::move(out), std::move(inputs),
                        [extents, s, total](const BackwardContext& ctx) {
                          std::size_t offset = 0;
                          for (std::size_t t = 0; t < extents.size(); ++t) {
                            const std::size_t block = extents[t] * s.inner;
                            auto& g = ctx.input_grads[t];
                            if (!g.empty()) {
                              for (std::size_t o = 0; o < s.outer; ++o) {
                                const double* src = ctx.grad.data() + o * total * s.inner + offset * s.inner;
                                for (std::size_t i = 0; i < block; ++i) g[o * block + i] += src[i];
                              }
                            }
                            offset += extents[t];
                          }
                        });
}

Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  check_axis("narrow", x, axis);
  if (length == 0 || start + length > x.dim(axis)) {
    throw ShapeError(fmt::format("narrow: range [{}, {}) outside extent {} of {}", start, start + length, x.dim(axis),
                                 to_string(x.shape())));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  auto xv = x.data();
  const std::size_t block = length * s.inner;
  std::vector<double> out(s.outer * block);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xv.data() + o * s.extent * s.inner + start * s.inner, block, out.data() + o * block);
  }
  return Tensor::record("narrow", std::move(out_shape), std::move(out), {x}, [s, start, block](const BackwardContext& ctx) {
    auto& gx = ctx.input_grads[0];
    for (std::size_t o = 0; o < s.outer; ++o) {
      double* dst = gx.data() + o * s.extent * s.inner + start * s.inner;
      for (std::size_t i = 0; i < block; ++i) dst[i] += ctx.grad[o * block + i];
    }
  });
}

std::vector<Tensor> split(const Tensor& x, std::size_t axis, std::span<const std::size_t> sizes) {
  check_axis("split", x, axis);
  if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != x.dim(axis)) {
    throw ShapeError(fmt::format("split: sizes do not sum to extent {} of {}", x.dim(axis), to_string(x.shape())));
  }
  std::vector<Tensor> parts;
  std::size_t start = 0;
  for (auto n : sizes) {
    parts.push_back(narrow(x, axis, start, n));
    start += n;
  }
  return parts;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError(fmt::format("reshape: cannot view {} as {}", to_string(x.shape()), to_string(shape)));
  }
  auto xv = x.data();
  return Tensor::record("reshape", std::move(shape), std::vector<double>(xv.begin(), xv.end()), {x},
                        [](const BackwardContext& ctx) {
                          auto& gx = ctx.input_grads[0];
                          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += ctx.grad[i];
                        });
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument(fmt::format("dropout: rate {} outside [0, 1)", rate));
  if (rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    // 53-bit uniform from the raw engine output; fixed across standard libraries.
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    (*mask)[i] = u < rate ? 0.0 : keep_scale;
    out[i] = xv[i] * (*mask)[i];
  }
  return Tensor::record("dropout", x.shape(), std::move(out), {x}, [mask](const BackwardContext& ctx) {
    auto& gx = ctx.input_grads[0];
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += ctx.grad[i] * (*mask)[i];
  });
}

Tensor sum(const Tensor& x) {
  auto xv = x.data();
  double total = 0.0;
  for (double v : xv) total += v;
  return Tensor::record("sum", {1}, {total}, {x}, [](const BackwardContext& ctx) {
    auto& gx = ctx.input_grads[0];
    for (auto& g : gx) g += ctx.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

}  // namespace affect::num
