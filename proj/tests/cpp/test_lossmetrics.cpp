#include <doctest.h>

#include <random>

#include "factorizer/losses.hpp"
#include "factorizer/metrics.hpp"
#include "testutil.hpp"

using namespace factorizer;
using namespace factorizer::testutil;

namespace {

Mask mask_from(const Shape& shape, std::initializer_list<int> values) {
  Mask m(shape);
  auto p = m.mutable_data();
  size_t i = 0;
  for (int v : values) p[i++] = static_cast<uint8_t>(v);
  return m;
}

Mask random_mask(const Shape& shape, std::mt19937_64& rng, double density) {
  Mask m(shape);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : m.mutable_data()) v = u(rng) < density ? 1 : 0;
  return m;
}

// Test-local oracle: exhaustive all-pairs surface distances.
double hd95_brute(const Mask& g, const Mask& y, std::array<double, 3> spacing) {
  auto surface = [](const Mask& m) {
    std::vector<std::array<int64_t, 3>> out;
    const int64_t h = m.shape()[0], w = m.shape()[1], d = m.shape()[2];
    auto at = [&](int64_t i, int64_t j, int64_t k) {
      if (i < 0 || i >= h || j < 0 || j >= w || k < 0 || k >= d) return false;
      return m.data()[(i * w + j) * d + k] != 0;
    };
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j)
        for (int64_t k = 0; k < d; ++k)
          if (at(i, j, k) && (!at(i - 1, j, k) || !at(i + 1, j, k) || !at(i, j - 1, k) ||
                              !at(i, j + 1, k) || !at(i, j, k - 1) || !at(i, j, k + 1)))
            out.push_back({i, j, k});
    return out;
  };
  auto q95 = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const double rank = 0.95 * static_cast<double>(v.size() - 1);
    const size_t lo = static_cast<size_t>(rank);
    const size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (rank - lo) * (v[hi] - v[lo]);
  };
  auto directed = [&](const auto& from, const auto& to) {
    std::vector<double> d;
    for (const auto& a : from) {
      double best = 1e300;
      for (const auto& b : to) {
        const double dx = (a[0] - b[0]) * spacing[0];
        const double dy = (a[1] - b[1]) * spacing[1];
        const double dz = (a[2] - b[2]) * spacing[2];
        best = std::min(best, dx * dx + dy * dy + dz * dz);
      }
      d.push_back(std::sqrt(best));
    }
    return d;
  };
  auto sg = surface(g);
  auto sy = surface(y);
  return std::max(q95(directed(sg, sy)), q95(directed(sy, sg)));
}

}  // namespace

TEST_CASE("soft dice loss values") {
  // perfect binary match: only the epsilon slack remains
  Var<double> g(Tensor<double>({2, 4}, {1, 0, 1, 0, 0, 1, 0, 0}));
  CHECK(soft_dice_loss(g, g).value().item() == doctest::Approx(0.0).epsilon(1e-5));

  // all-zero target and prediction: epsilon forces exactly zero
  Var<double> z(Tensor<double>::zeros({1, 4}));
  CHECK(soft_dice_loss(z, z).value().item() == 0.0);

  // hand-computed value
  Var<double> gt(Tensor<double>({1, 2}, {1, 0}));
  Var<double> p(Tensor<double>({1, 2}, {0.5, 0.5}));
  const double eps = 1e-5;
  const double expected = 1.0 - (2 * 0.5 + eps) / (1.0 + 0.5 + eps);
  CHECK(soft_dice_loss(gt, p).value().item() == doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(0.3333).epsilon(1e-3));
}

TEST_CASE("soft dice loss gradient matches finite differences") {
  std::mt19937_64 rng(1);
  Tensor<double> g0 = random_tensor({2, 6}, rng, 0.0, 1.0);
  for (auto& v : g0.mutable_data()) v = v > 0.5 ? 1.0 : 0.0;
  Tensor<double> p0 = random_tensor({2, 6}, rng, 0.05, 0.95);
  const double err = grad_check(p0, [&](const Var<double>& p) {
    return soft_dice_loss(Var<double>(g0), p);
  });
  CHECK(err < 1e-6);
}

TEST_CASE("cross entropy values") {
  Var<double> g(Tensor<double>({1, 1}, {1.0}));
  Var<double> p(Tensor<double>({1, 1}, {0.5}));
  CHECK(cross_entropy_loss(g, p).value().item() == doctest::Approx(std::log(2.0)));

  // exact match is zero after clamping
  Var<double> gb(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  CHECK(cross_entropy_loss(gb, gb).value().item() == doctest::Approx(0.0));

  // naive loop oracle on a random instance
  std::mt19937_64 rng(2);
  Tensor<double> g0 = random_tensor({3, 5}, rng, 0.0, 1.0);
  for (auto& v : g0.mutable_data()) v = v > 0.6 ? 1.0 : 0.0;
  Tensor<double> p0 = random_tensor({3, 5}, rng, 0.05, 0.95);
  double naive = 0.0;
  for (int64_t i = 0; i < 15; ++i) naive -= g0.data()[i] * std::log(p0.data()[i]);
  naive /= 5.0;
  CHECK(cross_entropy_loss(Var<double>(g0), Var<double>(p0)).value().item() ==
        doctest::Approx(naive).epsilon(1e-12));
}

TEST_CASE("one-hot targets and max-pool pyramid") {
  Tensor<float> label({2, 2, 2}, {0, 1, 2, 0, 0, 0, 1, 0});
  Tensor<float> with_bg = one_hot(label, 3, 0);
  CHECK(with_bg.shape() == Shape{3, 2, 2, 2});
  CHECK(with_bg.at({0, 0, 0, 0}) == 1.0f);  // background row
  CHECK(with_bg.at({1, 0, 0, 1}) == 1.0f);
  CHECK(with_bg.at({2, 0, 1, 0}) == 1.0f);

  Tensor<float> fg_only = one_hot(label, 2, 1);
  CHECK(fg_only.shape() == Shape{2, 2, 2, 2});
  CHECK(fg_only.at({0, 0, 0, 1}) == 1.0f);
  CHECK(fg_only.at({1, 0, 1, 0}) == 1.0f);

  // a class survives pooling if present anywhere in the cell
  Tensor<float> pooled = maxpool_downsample_onehot(with_bg, 2);
  CHECK(pooled.shape() == Shape{3, 1, 1, 1});
  CHECK(pooled.at({0, 0, 0, 0}) == 1.0f);
  CHECK(pooled.at({1, 0, 0, 0}) == 1.0f);
  CHECK(pooled.at({2, 0, 0, 0}) == 1.0f);
}

TEST_CASE("total loss applies the deep-supervision weights") {
  std::mt19937_64 rng(3);
  Tensor<float> logits = random_tensor_f({1, 3, 4, 4, 4}, rng);
  Tensor<float> label({4, 4, 4});
  std::uniform_int_distribution<int> cls(0, 2);
  for (auto& v : label.mutable_data()) v = static_cast<float>(cls(rng));
  Tensor<float> target = one_hot(label, 3, 0);
  Tensor<float> target5 = target.reshape({1, 3, 4, 4, 4});

  NoGradGuard ng;
  NetworkOutput<float> out;
  out.logits = Var<float>(logits);
  const double full = segmentation_loss(out.logits, target5, Activation::kSoftmax)
                          .value()
                          .item();

  // identical outputs at every scale: total = (1 + 0.5 + 0.25) * loss
  out.aux = {Var<float>(logits), Var<float>(logits)};
  const double total =
      total_loss(out, {target5, target5, target5}, Activation::kSoftmax).value().item();
  CHECK(total == doctest::Approx(1.75 * full).epsilon(1e-6));

  // no aux outputs: total equals the full-resolution loss
  out.aux.clear();
  CHECK(total_loss(out, {target5}, Activation::kSoftmax).value().item() ==
        doctest::Approx(full).epsilon(1e-12));

  CHECK_THROWS_AS(total_loss(out, {target5, target5}, Activation::kSoftmax), UsageError);
}

TEST_CASE("dice score") {
  Mask a = mask_from({4}, {1, 1, 0, 0});
  Mask b = mask_from({4}, {1, 0, 1, 0});
  CHECK(dice_score(a, b) == doctest::Approx(0.5));
  CHECK(dice_score(a, a) == 1.0);

  Mask empty1({4});
  Mask empty2({4});
  CHECK(dice_score(empty1, empty2) == 1.0);

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Mask g = random_mask({3, 3, 3}, rng, 0.4);
    Mask y = random_mask({3, 3, 3}, rng, 0.4);
    const double d = dice_score(g, y);
    CHECK(d == dice_score(y, g));
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    bool equal = true;
    for (int64_t i = 0; i < 27; ++i)
      equal = equal && ((g.data()[i] != 0) == (y.data()[i] != 0));
    if (d == 1.0) CHECK(equal);
    if (equal) CHECK(d == 1.0);
  }
}

TEST_CASE("percentile definition is linear interpolation between order statistics") {
  std::vector<double> v;
  for (int i = 0; i < 100; ++i) v.push_back(static_cast<double>(i));
  CHECK(percentile_linear(v, 0.95) == doctest::Approx(94.05));
  CHECK(percentile_linear({5.0}, 0.95) == 5.0);
  CHECK(percentile_linear({1.0, 2.0}, 0.5) == doctest::Approx(1.5));
  CHECK(percentile_linear({3.0, 1.0, 2.0}, 1.0) == 3.0);
}

TEST_CASE("hd95 basics") {
  Mask a({5, 5, 5});
  a.at({2, 2, 2}) = 1;
  Hd95Result same = hd95(a, a, {1, 1, 1});
  CHECK(same.defined);
  CHECK(same.value == 0.0);

  // two single voxels three spacing-units apart
  Mask b({5, 5, 5});
  b.at({2, 2, 2}) = 0;
  Mask c({5, 5, 5});
  Mask d({5, 5, 5});
  c.at({1, 1, 1}) = 1;
  d.at({4, 1, 1}) = 1;
  Hd95Result r = hd95(c, d, {1, 1, 1});
  CHECK(r.defined);
  CHECK(r.value == doctest::Approx(3.0));

  // empty mask: undefined sentinel
  Mask empty({5, 5, 5});
  CHECK(!hd95(c, empty, {1, 1, 1}).defined);
  CHECK(!hd95(empty, empty, {1, 1, 1}).defined);
}

TEST_CASE("hd95 matches the exhaustive oracle") {
  std::mt19937_64 rng(5);
  int checked = 0;
  while (checked < 50) {
    Mask g = random_mask({8, 8, 8}, rng, 0.15);
    Mask y = random_mask({8, 8, 8}, rng, 0.15);
    bool ge = true, ye = true;
    for (auto v : g.data()) ge = ge && v == 0;
    for (auto v : y.data()) ye = ye && v == 0;
    if (ge || ye) continue;
    std::array<double, 3> spacing = {1.0, 0.5, 2.0};
    Hd95Result r = hd95(g, y, spacing);
    REQUIRE(r.defined);
    CHECK(r.value == hd95_brute(g, y, spacing));
    // symmetry
    CHECK(hd95(y, g, spacing).value == r.value);
    ++checked;
  }
}

TEST_CASE("hd95 is bounded by the max-of-min Hausdorff distance") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    Mask g = random_mask({6, 6, 6}, rng, 0.25);
    Mask y = random_mask({6, 6, 6}, rng, 0.25);
    auto sg = surface_voxels(g);
    auto sy = surface_voxels(y);
    if (sg.empty() || sy.empty()) continue;
    auto directed_max = [](const auto& from, const auto& to) {
      double worst = 0.0;
      for (const auto& a : from) {
        double best = 1e300;
        for (const auto& b : to) {
          const double d0 = a[0] - b[0], d1 = a[1] - b[1], d2 = a[2] - b[2];
          best = std::min(best, d0 * d0 + d1 * d1 + d2 * d2);
        }
        worst = std::max(worst, std::sqrt(best));
      }
      return worst;
    };
    const double hd_max = std::max(directed_max(sg, sy), directed_max(sy, sg));
    CHECK(hd95(g, y, {1, 1, 1}).value <= hd_max + 1e-12);
  }
}

TEST_CASE("metrics report layout") {
  std::vector<CaseClassMetrics> rows = {
      {"case_a", 1, 0.9, {1.5, true}},
      {"case_a", 2, 0.8, {0.0, false}},
      {"case_b", 1, 1.0, {0.0, true}},
  };
  const std::string report = metrics_report(rows);
  CHECK(report.find("case\tclass\tdice\thd95\n") == 0);
  CHECK(report.find("case_a\t2\t0.800000\tundefined") != std::string::npos);
  CHECK(report.find("# summary") != std::string::npos);
  CHECK(report.find("# mean_dice_all\t0.900000") != std::string::npos);
}
