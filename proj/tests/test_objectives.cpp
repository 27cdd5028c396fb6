#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "affect/error.hpp"
#include "affect/gradcheck.hpp"
#include "affect/objectives.hpp"
#include "affect/random.hpp"

using namespace affect;
using namespace affect::obj;
using num::Tensor;

namespace {

std::vector<std::uint8_t> ones(std::size_t n) { return std::vector<std::uint8_t>(n, 1); }

// Reference concordance in long double, straight from the moment definitions.
double ccc_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const long double n = static_cast<long double>(x.size());
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n, my /= n;
  long double vx = 0, vy = 0, c = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
    c += (x[i] - mx) * (y[i] - my);
  }
  vx /= n, vy /= n, c /= n;
  return static_cast<double>(2 * c / (vx + vy + (mx - my) * (mx - my)));
}

std::vector<double> randv(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = normal(rng);
  return v;
}

}  // namespace

TEST(Mse, Examples) {
  EXPECT_DOUBLE_EQ(mse_loss(Tensor::from({2}, {1, 1}), std::vector<double>{0, 1}, ones(2)).item(), 0.5);
  const auto p = randv(9, 1);
  EXPECT_EQ(mse_loss(Tensor::from({9}, p), p, ones(9)).item(), 0.0);
}

TEST(Mse, MaskedEntryMatchesDroppingIt) {
  const std::vector<double> pred{0.1, 5.0, -0.3}, label{0.2, -7.0, 0.4};
  const std::vector<std::uint8_t> mask{1, 0, 1};
  const double masked = mse_loss(Tensor::from({3}, pred), label, mask).item();
  const double dropped = mse_loss(Tensor::from({2}, {0.1, -0.3}), std::vector<double>{0.2, 0.4}, ones(2)).item();
  EXPECT_EQ(masked, dropped);
}

TEST(Mse, EmptyMaskIsAnError) {
  const std::vector<std::uint8_t> none{0, 0};
  EXPECT_THROW(mse_loss(Tensor::from({2}, {1, 2}), std::vector<double>{1, 2}, none), std::invalid_argument);
}

TEST(Ccc, Examples) {
  const std::vector<double> x{-1, 0, 1}, y{-0.5, 0, 0.5};
  EXPECT_NEAR(ccc(x, y, ones(3)), 0.8, 1e-15);
  EXPECT_NEAR(ccc(x, x, ones(3)), 1.0, 1e-15);
  EXPECT_EQ(ccc(x, std::vector<double>{2, 2, 2}, ones(3)), 0.0);
  EXPECT_NEAR(ccc_loss(Tensor::from({3}, x), y, ones(3)).item(), 0.2, 1e-15);
}

TEST(Ccc, ConstantConventions) {
  const std::vector<double> a{0.3, 0.3, 0.3}, b{0.3, 0.3, 0.3}, c{0.1, 0.1, 0.1};
  EXPECT_EQ(ccc(a, b, ones(3)), 1.0);
  EXPECT_EQ(ccc(a, c, ones(3)), 0.0);
  EXPECT_THROW(ccc(std::vector<double>{1}, std::vector<double>{1}, ones(1)), std::invalid_argument);
}

TEST(Ccc, MatchesOracleAndIsSymmetric) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto x = randv(20, 2 * s), y = randv(20, 2 * s + 1);
    EXPECT_NEAR(ccc(x, y, ones(20)), ccc_oracle(x, y), 1e-12);
    EXPECT_EQ(ccc(x, y, ones(20)), ccc(y, x, ones(20)));
    EXPECT_NEAR(ccc(x, x, ones(20)), 1.0, 1e-12);
    const double v = ccc(x, y, ones(20));
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(VaLoss, LambdaEndpoints) {
  const auto p = randv(10, 3), l = randv(10, 4);
  const Tensor pred = Tensor::from({5, 2}, p);
  const auto m = ones(5);
  std::vector<double> pv, pa, lv, la;
  for (std::size_t i = 0; i < 5; ++i) {
    pv.push_back(p[2 * i]), pa.push_back(p[2 * i + 1]);
    lv.push_back(l[2 * i]), la.push_back(l[2 * i + 1]);
  }
  double sq = 0;
  for (std::size_t i = 0; i < 10; ++i) sq += (p[i] - l[i]) * (p[i] - l[i]);
  EXPECT_NEAR(va_loss(pred, l, m, 1.0).item(), sq / 10, 1e-14);
  const double pure = 1.0 - 0.5 * (ccc_oracle(pv, lv) + ccc_oracle(pa, la));
  EXPECT_NEAR(va_loss(pred, l, m, 0.0).item(), pure, 1e-12);
  EXPECT_NEAR(va_loss(pred, l, m).item(), 0.5 * sq / 10 + 0.5 * pure, 1e-12);
  EXPECT_NEAR(va_loss(Tensor::from({5, 2}, l), l, m).item(), 0.0, 1e-15);
  EXPECT_THROW(va_loss(pred, l, m, 1.5), std::invalid_argument);
}

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(ce_loss(Tensor::zeros({1, 8}), std::vector<int>{5}, ones(1)).item(), 2.079442, 1e-6);
  std::vector<double> confident(8, 0.0);
  confident[2] = 60.0;
  EXPECT_LT(ce_loss(Tensor::from({1, 8}, confident), std::vector<int>{2}, ones(1)).item(), 1e-20);
  EXPECT_THROW(ce_loss(Tensor::zeros({1, 8}), std::vector<int>{8}, ones(1)), std::out_of_range);
}

TEST(CrossEntropy, SummedTwoFrameCase) {
  const std::vector<double> z{1, 2, 0, 0, 0, 0, 0, -1, 0.5, 0, 0, 3, 0, 0, 0, 0};
  const std::vector<int> y{1, 3};
  // -sum_i sum_c y_ic log softmax(z_i)_c expanded by hand.
  double expected = 0;
  for (int i = 0; i < 2; ++i) {
    double den = 0;
    for (int c = 0; c < 8; ++c) den += std::exp(z[i * 8 + c]);
    expected -= std::log(std::exp(z[i * 8 + y[i]]) / den);
  }
  const Tensor logits = Tensor::from({2, 8}, z);
  EXPECT_NEAR(ce_loss(logits, y, ones(2), Reduction::kSum).item(), expected, 1e-14);
  EXPECT_NEAR(ce_loss(logits, y, ones(2)).item(), expected / 2, 1e-14);
}

TEST(CrossEntropy, ShiftInvariantAndOverflowSafe) {
  const auto z = randv(24, 5);
  const std::vector<int> y{0, 7, 4};
  const double base = ce_loss(Tensor::from({3, 8}, z), y, ones(3)).item();
  for (double shift : {-500.0, 3.0, 1000.0}) {
    std::vector<double> s = z;
    for (auto& v : s) v += shift;
    EXPECT_NEAR(ce_loss(Tensor::from({3, 8}, s), y, ones(3)).item(), base, 1e-11);
  }
}

TEST(AuLoss, UnitCases) {
  const AuWeights w{{1.0}};
  const std::vector<std::uint8_t> pos{1}, neg{0};
  EXPECT_NEAR(au_loss(Tensor::from({1, 1}, {0.0}), neg, ones(1), w).item(), -0.5 * std::log(0.5), 1e-15);
  EXPECT_NEAR(au_loss(Tensor::from({1, 1}, {0.0}), neg, ones(1), w).item(), 0.346574, 1e-6);
  EXPECT_LT(au_loss(Tensor::from({1, 1}, {40.0}), pos, ones(1), w).item(), 1e-6);
  EXPECT_LT(au_loss(Tensor::from({1, 1}, {-40.0}), neg, ones(1), w).item(), 1e-6);
}

TEST(AuLoss, HandExpandedTwoFrameCase) {
  const std::vector<double> z{0.3, -1.2, 2.0, 0.7};
  const std::vector<std::uint8_t> p{1, 0, 0, 1};
  const AuWeights w{{0.5, 1.5}};
  auto q = [&](std::size_t k) { return 1.0 / (1.0 + std::exp(-z[k])); };
  // Frame 1: unit 0 positive, unit 1 negative. Frame 2: unit 0 negative, unit 1 positive.
  const double bce = -(0.5 * std::log(q(0)) + 1.5 * std::log(1 - q(1)) + 0.5 * std::log(1 - q(2)) +
                       1.5 * std::log(q(3))) / 2;
  const double asym = -(0.5 * std::log(q(0)) + 1.5 * q(1) * std::log(1 - q(1)) + 0.5 * q(2) * std::log(1 - q(2)) +
                        1.5 * std::log(q(3))) / 2;
  const Tensor logits = Tensor::from({2, 2}, z);
  EXPECT_NEAR(au_loss(logits, p, ones(4), w, false).item(), bce, 1e-14);
  EXPECT_NEAR(au_loss(logits, p, ones(4), w).item(), asym, 1e-14);
}

TEST(AuLoss, FramesWithoutValidUnitsDoNotCount) {
  const AuWeights w{{1.0, 1.0}};
  const std::vector<std::uint8_t> p{1, 0, 1, 1};
  const std::vector<std::uint8_t> m{1, 1, 0, 0};
  const double two = au_loss(Tensor::from({2, 2}, {0.2, 0.4, 9.0, 9.0}), p, m, w).item();
  const double one = au_loss(Tensor::from({1, 2}, {0.2, 0.4}), std::vector<std::uint8_t>{1, 0}, ones(2), w).item();
  EXPECT_EQ(two, one);
}

TEST(AuWeights, Examples) {
  // Unit 0 rate 0.5, unit 1 rate 0.25.
  const std::vector<std::uint8_t> label{1, 1, 0, 0, 1, 0, 0, 0};
  const auto w = au_weights(label, ones(8), 2);
  EXPECT_NEAR(w.w[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(w.w[1], 4.0 / 3.0, 1e-15);

  std::vector<std::uint8_t> doubled = label;
  doubled.insert(doubled.end(), label.begin(), label.end());
  const auto w2 = au_weights(doubled, ones(16), 2);
  EXPECT_DOUBLE_EQ(w2.w[0], w.w[0]);
  EXPECT_DOUBLE_EQ(w2.w[1], w.w[1]);

  const std::vector<std::uint8_t> equal{1, 1, 0, 0};
  for (double x : au_weights(equal, ones(4), 2).w) EXPECT_DOUBLE_EQ(x, 1.0);
}

TEST(AuWeights, ZeroOccurrenceNamesTheUnit) {
  const std::vector<std::uint8_t> label{1, 0, 1, 0};
  std::vector<std::uint8_t> full(24, 0);
  full[0] = 1;
  try {
    au_weights(full, ones(24), 12);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(au_names()[1]), std::string::npos) << e.what();
  }
  try {
    au_weights(label, ones(4), 2);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("unit 1"), std::string::npos) << e.what();
  }
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto l = randv(12, 100 + s);
    std::vector<num::NamedTensor> p{{"pred", Tensor::from({6, 2}, randv(12, 200 + s), true)}};
    const auto m = ones(6);
    EXPECT_LT(num::gradcheck([&] { return va_loss(p[0].tensor, l, m); }, p).max_rel_error(), 1e-4);

    std::vector<num::NamedTensor> q{{"logits", Tensor::from({3, 8}, randv(24, 300 + s), true)}};
    const std::vector<int> y{1, 5, 2};
    EXPECT_LT(num::gradcheck([&] { return ce_loss(q[0].tensor, y, ones(3)); }, q).max_rel_error(), 1e-4);

    std::vector<num::NamedTensor> r{{"logits", Tensor::from({3, 2}, randv(6, 400 + s), true)}};
    const std::vector<std::uint8_t> a{1, 0, 0, 1, 1, 1};
    const AuWeights w{{0.7, 1.3}};
    EXPECT_LT(num::gradcheck([&] { return au_loss(r[0].tensor, a, ones(6), w); }, r).max_rel_error(), 1e-4);
  }
}

TEST(MacroF1, Examples) {
  const std::vector<int> pred{1, 1, 0, 0}, label{1, 0, 1, 0};
  EXPECT_DOUBLE_EQ(macro_f1(pred, label, 2, ones(4)), 0.5);
  EXPECT_DOUBLE_EQ(macro_f1(label, label, 2, ones(4)), 1.0);
  // Class 2 never appears: contributes 0.
  EXPECT_DOUBLE_EQ(macro_f1(label, label, 3, ones(4)), 2.0 / 3.0);
  EXPECT_EQ(f1({0, 0, 0}), 0.0);
  EXPECT_DOUBLE_EQ(f1({1, 1, 1}), 0.5);
}

TEST(MacroF1, AuIsMeanOfBinaryF1s) {
  Rng rng(6);
  std::vector<std::uint8_t> pred(12 * 30), label(12 * 30);
  for (auto& x : pred) x = static_cast<std::uint8_t>(below(rng, 2));
  for (auto& x : label) x = static_cast<std::uint8_t>(below(rng, 2));
  double mean = 0;
  for (std::size_t u = 0; u < 12; ++u) {
    std::vector<int> pu, lu;
    for (std::size_t n = 0; n < 30; ++n) pu.push_back(pred[n * 12 + u]), lu.push_back(label[n * 12 + u]);
    ClassCounts c;
    for (std::size_t n = 0; n < 30; ++n) {
      c.tp += pu[n] && lu[n];
      c.fp += pu[n] && !lu[n];
      c.fn += !pu[n] && lu[n];
    }
    mean += f1(c) / 12;
  }
  EXPECT_NEAR(au_macro_f1(pred, label, ones(12 * 30), 12), mean, 1e-15);
}

TEST(ChallengeScore, TableRows) {
  EXPECT_NEAR(challenge_score(0.414, 0.425, 0.249, 0.433), 1.1015, 5e-4);
  EXPECT_NEAR(challenge_score(0.503, 0.432, 0.319, 0.493), 1.2795, 5e-4);
  EXPECT_NEAR(challenge_score(0.439, 0.347, 0.247, 0.423), 1.0630, 5e-4);
}

TEST(EvalReport, KvRoundTrip) {
  const EvalReport r{0.123456, -0.5, 0.75, 0.0};
  const auto kv = r.to_kv();
  const auto back = EvalReport::parse_kv(kv);
  EXPECT_EQ(back.to_kv(), kv);
  EXPECT_EQ(EvalReport::parse_kv(r.to_line()).to_kv(), kv);
  EXPECT_NE(kv.find("score=" + format_metric(r.score())), std::string::npos);
  EXPECT_THROW(EvalReport::parse_kv("valence=x"), std::invalid_argument);
}
