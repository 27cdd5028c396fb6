#include "affect/suite.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>

#include "affect/error.hpp"
#include "affect/gradcheck.hpp"
#include "affect/model.hpp"
#include "affect/objectives.hpp"
#include "affect/ops.hpp"
#include "affect/random.hpp"

namespace affect::verify {

using num::NamedTensor;
using num::Shape;
using num::Tensor;

namespace {

// One randomized instance: the scalar function and the leaves it is checked against.
struct Instance {
  std::function<Tensor()> f;
  std::vector<NamedTensor> params;
  std::size_t coords_per_param = 0;  // 0: all
};

using Builder = std::function<Instance(Rng&)>;

std::size_t extent(Rng& rng, std::size_t lo, std::size_t hi) { return lo + below(rng, hi - lo + 1); }

Tensor random_leaf(Rng& rng, Shape shape, double sd = 1.0) {
  std::vector<double> v(num::numel(shape));
  for (auto& x : v) x = sd * normal(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Values bounded away from zero, so kinks and poles stay farther than the FD step.
Tensor away_from_zero(Rng& rng, Shape shape) {
  std::vector<double> v(num::numel(shape));
  for (auto& x : v) {
    const double u = uniform(rng, 0.1, 1.5);
    x = uniform01(rng) < 0.5 ? -u : u;
  }
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Contracts a non-scalar output with fixed random weights.
std::function<Tensor()> project(Rng& rng, std::function<Tensor()> g) {
  const Shape shape = g().shape();
  std::vector<double> w(num::numel(shape));
  for (auto& x : w) x = normal(rng);
  const Tensor weights = Tensor::from(shape, std::move(w));
  return [g = std::move(g), weights] { return num::sum(num::mul(g(), weights)); };
}

Instance unary(Rng& rng, std::function<Tensor(const Tensor&)> op, bool avoid_zero = false) {
  const Shape shape{extent(rng, 1, 3), extent(rng, 1, 4), extent(rng, 1, 5)};
  Tensor x = avoid_zero ? away_from_zero(rng, shape) : random_leaf(rng, shape);
  return {project(rng, [x, op] { return op(x); }), {{"x", x}}};
}

Instance binary(Rng& rng, std::function<Tensor(const Tensor&, const Tensor&)> op) {
  const Shape shape{extent(rng, 1, 3), extent(rng, 1, 4), extent(rng, 1, 5)};
  Shape bshape;
  switch (below(rng, 3)) {
    case 0: bshape = shape; break;
    case 1: bshape = {1}; break;
    default: bshape = Shape(shape.begin() + 1 + static_cast<std::ptrdiff_t>(below(rng, 2)), shape.end()); break;
  }
  Tensor a = random_leaf(rng, shape);
  Tensor b = random_leaf(rng, bshape);
  return {project(rng, [a, b, op] { return op(a, b); }), {{"a", a}, {"b", b}}};
}

Instance matmul_case(Rng& rng) {
  const std::size_t m = extent(rng, 1, 4), k = extent(rng, 1, 4), n = extent(rng, 1, 4), batch = extent(rng, 1, 3);
  Tensor a, b;
  switch (below(rng, 3)) {
    case 0: a = random_leaf(rng, {m, k}), b = random_leaf(rng, {k, n}); break;
    case 1: a = random_leaf(rng, {batch, m, k}), b = random_leaf(rng, {k, n}); break;
    default: a = random_leaf(rng, {batch, m, k}), b = random_leaf(rng, {batch, k, n}); break;
  }
  return {project(rng, [a, b] { return num::matmul(a, b); }), {{"a", a}, {"b", b}}};
}

Instance layernorm_case(Rng& rng) {
  const std::size_t d = extent(rng, 2, 8);
  Tensor x = random_leaf(rng, {extent(rng, 1, 3), extent(rng, 1, 4), d});
  Tensor gain = random_leaf(rng, {d});
  Tensor bias = random_leaf(rng, {d});
  return {project(rng, [x, gain, bias] { return num::layernorm(x, gain, bias); }),
          {{"x", x}, {"gain", gain}, {"bias", bias}}};
}

Instance concat_case(Rng& rng) {
  const std::size_t axis = below(rng, 3);
  Shape shape{extent(rng, 1, 3), extent(rng, 1, 3), extent(rng, 1, 3)};
  std::vector<NamedTensor> params;
  std::vector<Tensor> parts;
  const std::size_t count = extent(rng, 1, 3);
  for (std::size_t i = 0; i < count; ++i) {
    Shape s = shape;
    s[axis] = extent(rng, 1, 3);
    parts.push_back(random_leaf(rng, s));
    params.push_back({"x" + std::to_string(i), parts.back()});
  }
  return {project(rng, [parts, axis] { return num::concat(parts, axis); }), params};
}

Instance narrow_case(Rng& rng) {
  const std::size_t axis = below(rng, 3);
  Shape shape{extent(rng, 1, 4), extent(rng, 1, 4), extent(rng, 1, 4)};
  const std::size_t start = below(rng, shape[axis]);
  const std::size_t length = extent(rng, 1, shape[axis] - start);
  Tensor x = random_leaf(rng, shape);
  return {project(rng, [x, axis, start, length] { return num::narrow(x, axis, start, length); }), {{"x", x}}};
}

Instance split_case(Rng& rng) {
  const std::size_t axis = below(rng, 3);
  Shape shape{extent(rng, 1, 3), extent(rng, 1, 3), extent(rng, 1, 3)};
  std::vector<std::size_t> sizes(extent(rng, 1, 3));
  shape[axis] = 0;
  for (auto& s : sizes) shape[axis] += (s = extent(rng, 1, 3));
  Tensor x = random_leaf(rng, shape);
  // Each piece gets its own weights so every output slot reaches the loss.
  std::vector<std::function<Tensor()>> pieces;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    pieces.push_back(project(rng, [x, axis, sizes, i] { return num::split(x, axis, sizes)[i]; }));
  }
  return {[pieces] {
            Tensor total = pieces[0]();
            for (std::size_t i = 1; i < pieces.size(); ++i) total = num::add(total, pieces[i]());
            return total;
          },
          {{"x", x}}};
}

Instance reshape_case(Rng& rng) {
  const std::size_t a = extent(rng, 1, 3), b = extent(rng, 1, 3), c = extent(rng, 1, 3);
  Tensor x = random_leaf(rng, {a, b, c});
  return {project(rng, [x, a, b, c] { return num::reshape(x, {a * b, c}); }), {{"x", x}}};
}

Instance dropout_case(Rng& rng) {
  const double rate = uniform(rng, 0.1, 0.6);
  const std::uint64_t mask_seed = rng();
  Tensor x = random_leaf(rng, {extent(rng, 1, 3), extent(rng, 1, 4), extent(rng, 1, 5)});
  // Same mask on every call.
  return {project(rng,
                  [x, rate, mask_seed] {
                    Rng r(mask_seed);
                    return num::dropout(x, rate, r);
                  }),
          {{"x", x}}};
}

std::vector<std::uint8_t> random_mask(Rng& rng, std::size_t n, std::size_t min_valid) {
  std::vector<std::uint8_t> m(n);
  for (auto& x : m) x = uniform01(rng) < 0.8 ? 1 : 0;
  for (std::size_t i = 0; i < std::min(min_valid, n); ++i) m[i] = 1;
  return m;
}

Instance mse_case(Rng& rng) {
  const std::size_t n = extent(rng, 1, 10);
  Tensor p = random_leaf(rng, {n});
  std::vector<double> label(n);
  for (auto& y : label) y = normal(rng);
  const auto mask = random_mask(rng, n, 1);
  return {[p, label, mask] { return obj::mse_loss(p, label, mask); }, {{"pred", p}}};
}

Instance ccc_case(Rng& rng) {
  const std::size_t n = extent(rng, 3, 10);
  Tensor p = random_leaf(rng, {n});
  std::vector<double> label(n);
  for (auto& y : label) y = normal(rng);
  const auto mask = random_mask(rng, n, 3);
  return {[p, label, mask] { return obj::ccc_loss(p, label, mask); }, {{"pred", p}}};
}

Instance va_case(Rng& rng) {
  const std::size_t n = extent(rng, 3, 10);
  Tensor p = random_leaf(rng, {n, 2}, 0.5);
  std::vector<double> label(2 * n);
  for (auto& y : label) y = uniform(rng, -1.0, 1.0);
  const auto mask = random_mask(rng, n, 3);
  const double lambda = uniform01(rng);
  return {[p, label, mask, lambda] { return obj::va_loss(p, label, mask, lambda); }, {{"pred", p}}};
}

Instance ce_case(Rng& rng) {
  const std::size_t n = extent(rng, 1, 6);
  Tensor logits = random_leaf(rng, {n, model::kExprClasses}, 2.0);
  std::vector<int> label(n);
  for (auto& y : label) y = static_cast<int>(below(rng, model::kExprClasses));
  const auto mask = random_mask(rng, n, 1);
  const auto reduction = below(rng, 2) == 0 ? obj::Reduction::kMean : obj::Reduction::kSum;
  return {[logits, label, mask, reduction] { return obj::ce_loss(logits, label, mask, reduction); },
          {{"logits", logits}}};
}

Instance au_case(Rng& rng) {
  const std::size_t n = extent(rng, 1, 6);
  const std::size_t units = model::kAuUnits;
  // Logits within +-4 keep sigmoid well inside the probability clamp.
  std::vector<double> z(n * units);
  for (auto& x : z) x = uniform(rng, -4.0, 4.0);
  Tensor logits = Tensor::from({n, units}, std::move(z), true);
  std::vector<std::uint8_t> label(n * units);
  for (auto& y : label) y = below(rng, 2) == 0 ? 0 : 1;
  const auto mask = random_mask(rng, n * units, 1);
  obj::AuWeights w;
  for (std::size_t i = 0; i < units; ++i) w.w.push_back(uniform(rng, 0.2, 3.0));
  const bool asymmetric = below(rng, 4) != 0;
  return {[logits, label, mask, w, asymmetric] { return obj::au_loss(logits, label, mask, w, asymmetric); },
          {{"logits", logits}}};
}

// 2-frame, 2-stream toy model; parameters are jittered off their structured init.
struct Toy {
  std::shared_ptr<model::FusionModel> model;
  std::vector<Tensor> inputs;
  std::vector<NamedTensor> params;
};

Toy toy_model(Rng& rng, std::size_t frames, std::size_t layers) {
  model::ModelConfig c;
  c.streams = {{"a", 3}, {"b", 5}};
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = layers;
  c.d_ff = 12;
  c.dropout = 0.0;
  c.window = frames;
  c.max_len = 8;
  c.seed = rng();
  Toy toy{std::make_shared<model::FusionModel>(c), {}, {}};
  for (auto& p : toy.model->parameters()) {
    for (auto& v : p.tensor.mutable_data()) v += 0.1 * normal(rng);
    toy.params.push_back(p);
  }
  for (const auto& s : c.streams) {
    toy.inputs.push_back(random_leaf(rng, {1, frames, s.dim}));
    toy.params.push_back({"input." + s.name, toy.inputs.back()});
  }
  return toy;
}

Instance fuse_case(Rng& rng) {
  Toy toy = toy_model(rng, 2, 1);
  auto f = project(rng, [toy] {
    std::vector<Tensor> aligned;
    for (std::size_t s = 0; s < toy.inputs.size(); ++s) aligned.push_back(toy.model->align(toy.inputs[s], s));
    return toy.model->fuse(aligned);
  });
  return {f, toy.params};
}

Instance encoder_case(Rng& rng) {
  model::ModelConfig c;
  c.streams = {{"a", 3}};
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 16;
  c.dropout = 0.0;
  c.window = 4;
  c.max_len = 8;
  c.seed = rng();
  auto m = std::make_shared<model::FusionModel>(c);
  std::vector<NamedTensor> params;
  for (auto& p : m->parameters()) {
    if (p.name.starts_with("encoder.")) {
      for (auto& v : p.tensor.mutable_data()) v += 0.1 * normal(rng);
      params.push_back(p);
    }
  }
  Tensor x = random_leaf(rng, {1, 4, 16});
  params.push_back({"x", x});
  return {project(rng, [m, x] { return m->encode(x); }), params, 8};
}

enum class Head { kVa, kExpr, kAu };

Instance end_to_end(Rng& rng, Head head) {
  constexpr std::size_t frames = 2;
  Toy toy = toy_model(rng, frames, 2);
  std::vector<double> va(2 * frames);
  for (auto& y : va) y = uniform(rng, -1.0, 1.0);
  std::vector<int> expr(frames);
  for (auto& y : expr) y = static_cast<int>(below(rng, model::kExprClasses));
  std::vector<std::uint8_t> au(frames * model::kAuUnits);
  for (auto& y : au) y = below(rng, 2) == 0 ? 0 : 1;
  obj::AuWeights w;
  for (std::size_t i = 0; i < model::kAuUnits; ++i) w.w.push_back(uniform(rng, 0.5, 2.0));
  const std::vector<std::uint8_t> frame_mask(frames, 1);
  const std::vector<std::uint8_t> au_mask(frames * model::kAuUnits, 1);
  auto f = [toy, head, va, expr, au, w, frame_mask, au_mask] {
    const auto out = toy.model->forward(toy.inputs);
    switch (head) {
      case Head::kVa: return obj::va_loss(num::reshape(out.va, {frames, 2}), va, frame_mask, 0.5);
      case Head::kExpr:
        return obj::ce_loss(num::reshape(out.expr_logits, {frames, model::kExprClasses}), expr, frame_mask);
      case Head::kAu: break;
    }
    return obj::au_loss(num::reshape(out.au_logits, {frames, model::kAuUnits}), au, au_mask, w);
  };
  return {f, toy.params};
}

const std::vector<std::pair<std::string, Builder>>& cases() {
  static const std::vector<std::pair<std::string, Builder>> all = {
      {"matmul", matmul_case},
      {"transpose", [](Rng& r) { return unary(r, [](const Tensor& x) { return num::transpose(x); }); }},
      {"add", [](Rng& r) { return binary(r, [](const Tensor& a, const Tensor& b) { return num::add(a, b); }); }},
      {"sub", [](Rng& r) { return binary(r, [](const Tensor& a, const Tensor& b) { return num::sub(a, b); }); }},
      {"mul", [](Rng& r) { return binary(r, [](const Tensor& a, const Tensor& b) { return num::mul(a, b); }); }},
      {"scale", [](Rng& r) {
         const double k = uniform(r, -2.0, 2.0);
         return unary(r, [k](const Tensor& x) { return num::scale(x, k); });
       }},
      {"tanh", [](Rng& r) { return unary(r, [](const Tensor& x) { return num::tanh(x); }); }},
      {"sigmoid", [](Rng& r) { return unary(r, [](const Tensor& x) { return num::sigmoid(x); }); }},
      {"relu", [](Rng& r) { return unary(r, [](const Tensor& x) { return num::relu(x); }, true); }},
      {"softmax", [](Rng& r) {
         const std::size_t axis = below(r, 3);
         return unary(r, [axis](const Tensor& x) { return num::softmax(x, axis); });
       }},
      {"layernorm", layernorm_case},
      {"concat", concat_case},
      {"narrow", narrow_case},
      {"split", split_case},
      {"reshape", reshape_case},
      {"dropout", dropout_case},
      {"sum", [](Rng& r) { return unary(r, [](const Tensor& x) { return num::sum(x); }); }},
      {"mean", [](Rng& r) { return unary(r, [](const Tensor& x) { return num::mean(x); }); }},
      {"mse_loss", mse_case},
      {"ccc_loss", ccc_case},
      {"va_loss", va_case},
      {"ce_loss", ce_case},
      {"au_loss", au_case},
      {"fuse", fuse_case},
      {"encoder", encoder_case},
      {"model_va", [](Rng& r) { return end_to_end(r, Head::kVa); }},
      {"model_expr", [](Rng& r) { return end_to_end(r, Head::kExpr); }},
      {"model_au", [](Rng& r) { return end_to_end(r, Head::kAu); }},
  };
  return all;
}

}  // namespace

const std::vector<std::string>& suite_ops() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& c : cases()) n.push_back(c.first);
    return n;
  }();
  return names;
}

std::vector<SuiteResult> run_gradcheck_suite(const SuiteOptions& options) {
  if (options.seeds == 0) throw ConfigError("gradcheck: seeds must be >= 1");
  if (!(options.step >= 1e-6 && options.step <= 1e-3)) throw ConfigError("gradcheck: step must lie in [1e-6, 1e-3]");
  if (!(options.tol > 0.0)) throw ConfigError("gradcheck: tol must be positive");
  for (const auto& op : options.ops) {
    const auto& names = suite_ops();
    if (std::find(names.begin(), names.end(), op) == names.end()) throw ConfigError("gradcheck: unknown op '" + op + "'");
  }
  num::GradcheckOptions go;
  go.step = options.step;
  go.tol = options.tol;

  std::vector<SuiteResult> results;
  for (std::size_t c = 0; c < cases().size(); ++c) {
    const auto& [name, build] = cases()[c];
    if (!options.ops.empty() && std::find(options.ops.begin(), options.ops.end(), name) == options.ops.end()) continue;
    SuiteResult r;
    r.op = name;
    for (std::size_t i = 0; i < options.seeds; ++i) {
      const std::uint64_t seed = options.base_seed + i;
      // Each case owns a distinct stream so restricting the suite changes nothing.
      Rng rng(seed * 1000003ULL + c);
      Instance inst = build(rng);
      go.max_coords_per_param = inst.coords_per_param;
      go.sample_seed = seed;
      const auto report = num::gradcheck(inst.f, inst.params, go);
      ++r.seeds_run;
      if (!report.passed()) ++r.seeds_failed;
      for (const auto& p : report.params) {
        if (p.max_rel_error > r.max_rel_error || (r.worst_param.empty() && p.coords_checked > 0)) {
          r.max_rel_error = std::max(r.max_rel_error, p.max_rel_error);
          r.worst_seed = seed;
          r.worst_param = p.name;
          r.worst_analytic = p.analytic_at_worst;
          r.worst_numeric = p.numeric_at_worst;
        }
      }
    }
    r.passed = r.seeds_failed == 0;
    results.push_back(r);
  }
  return results;
}

}  // namespace affect::verify
