#include <doctest.h>

#include <random>

#include "factorizer/matricize.hpp"
#include "testutil.hpp"

using namespace factorizer;
using namespace factorizer::testutil;

namespace {

MatricizeConfig cfg_of(MatricizeMode mode, int64_t e, int64_t p) {
  MatricizeConfig c;
  c.mode = mode;
  c.head_dim = e;
  c.patch = p;
  return c;
}

}  // namespace

TEST_CASE("matricize shapes") {
  std::mt19937_64 rng(1);
  Var<double> x(random_tensor({1, 8, 4, 4, 4}, rng));

  CHECK(matricize(x, cfg_of(MatricizeMode::kGlobal, 4, 0)).matrices.shape() ==
        Shape{2, 4, 64});
  CHECK(matricize(x, cfg_of(MatricizeMode::kLocal, 4, 2)).matrices.shape() ==
        Shape{16, 4, 8});
  CHECK(matricize(x, cfg_of(MatricizeMode::kSW, 4, 2)).matrices.shape() == Shape{32, 4, 8});
}

TEST_CASE("voxel count conservation") {
  std::mt19937_64 rng(2);
  Var<double> x(random_tensor({2, 4, 4, 8, 4}, rng));
  const int64_t voxels = 2 * 4 * 4 * 8 * 4;
  auto count = [](const MatricizedBatch<double>& m) {
    return m.matrices.shape()[0] * m.matrices.shape()[1] * m.matrices.shape()[2];
  };
  CHECK(count(matricize(x, cfg_of(MatricizeMode::kGlobal, 2, 0))) == voxels);
  CHECK(count(matricize(x, cfg_of(MatricizeMode::kLocal, 2, 4))) == voxels);
  CHECK(count(matricize(x, cfg_of(MatricizeMode::kSW, 2, 4))) == 2 * voxels);
}

TEST_CASE("round trip is exact for all modes") {
  std::mt19937_64 rng(3);
  const std::vector<std::tuple<Shape, int64_t, int64_t>> cases = {
      {{1, 8, 4, 4, 4}, 4, 2}, {{2, 4, 8, 4, 4}, 2, 4}, {{1, 6, 6, 6, 6}, 3, 2},
      {{3, 4, 2, 2, 2}, 4, 2}, {{1, 16, 8, 8, 8}, 8, 4}};
  for (const auto& [shape, e, p] : cases) {
    Var<double> x(random_tensor(shape, rng));
    for (MatricizeMode mode :
         {MatricizeMode::kGlobal, MatricizeMode::kLocal, MatricizeMode::kSW}) {
      MatricizedBatch<double> m = matricize(x, cfg_of(mode, e, p));
      Tensor<double> back = dematricize(m).value();
      CHECK(bitwise_equal(back, x.value()));
    }
  }
}

TEST_CASE("single patch covering the whole volume flattens it") {
  std::mt19937_64 rng(4);
  Tensor<double> x0 = random_tensor({1, 3, 2, 2, 2}, rng);
  MatricizedBatch<double> m = matricize(Var<double>(x0), cfg_of(MatricizeMode::kLocal, 3, 2));
  CHECK(m.matrices.shape() == Shape{1, 3, 8});
  CHECK(bitwise_equal(m.matrices.value(), x0.reshape({1, 3, 8})));
}

TEST_CASE("shifted-window halves recombine as the mean of both reconstructions") {
  std::mt19937_64 rng(5);
  Tensor<double> u = random_tensor({4, 2, 8}, rng);
  Tensor<double> v = random_tensor({4, 2, 8}, rng);
  const Shape orig = {1, 4, 4, 2, 2};
  MatricizeConfig cfg = cfg_of(MatricizeMode::kSW, 2, 2);

  MatricizedBatch<double> joined;
  Tensor<double> halves[] = {u, v};
  joined.matrices = Var<double>(Tensor<double>::concat(halves, 0));
  joined.original_shape = orig;
  joined.config = cfg;
  Tensor<double> combined = dematricize(joined).value();

  // direct composition oracle: reconstruct each half independently
  MatricizedBatch<double> mu_half{Var<double>(u), orig, cfg_of(MatricizeMode::kLocal, 2, 2)};
  MatricizedBatch<double> mv_half{Var<double>(v), orig, cfg_of(MatricizeMode::kLocal, 2, 2)};
  Tensor<double> ur = dematricize(mu_half).value();
  Tensor<double> vr = dematricize(mv_half).value().roll({2, 3, 4}, {-1, -1, -1});
  Tensor<double> expected = broadcast_binary(ur, vr, [](double a, double b) {
    return (a + b) * 0.5;
  });
  CHECK(bitwise_equal(combined, expected));
}

TEST_CASE("divisibility violations name the offending axis") {
  Var<double> x(Tensor<double>::zeros({1, 8, 4, 6, 4}));
  CHECK_THROWS_WITH_AS(matricize(x, cfg_of(MatricizeMode::kLocal, 4, 4)),
                       doctest::Contains("W"), ConfigError);
  CHECK_THROWS_WITH_AS(matricize(x, cfg_of(MatricizeMode::kGlobal, 3, 0)),
                       doctest::Contains("head_dim"), ConfigError);
  CHECK_THROWS_AS(matricize(x, cfg_of(MatricizeMode::kSW, 4, 3)), ConfigError);
}

TEST_CASE("gradients flow through matricize and dematricize") {
  std::mt19937_64 rng(6);
  Tensor<double> x0 = random_tensor({1, 4, 4, 4, 4}, rng);
  Tensor<double> w0 = random_tensor({1, 4, 4, 4, 4}, rng);
  for (MatricizeMode mode :
       {MatricizeMode::kGlobal, MatricizeMode::kLocal, MatricizeMode::kSW}) {
    const double err = grad_check(x0, [&](const Var<double>& v) {
      MatricizedBatch<double> m = matricize(v, cfg_of(mode, 2, 2));
      m.matrices = mul(m.matrices, m.matrices);
      return sum(mul(dematricize(m), Var<double>(w0)));
    });
    CHECK(err < 1e-6);
  }
}
