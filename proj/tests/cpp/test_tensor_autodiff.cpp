#include <doctest.h>

#include <cstdio>
#include <random>

#include "factorizer/conv.hpp"
#include "factorizer/io.hpp"
#include "factorizer/ops.hpp"
#include "testutil.hpp"

using namespace factorizer;
using namespace factorizer::testutil;

TEST_CASE("matmul identity and hand values") {
  Var<double> eye(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  Var<double> a(Tensor<double>({2, 2}, {1, 2, 3, 4}));
  Tensor<double> out = matmul(eye, a).value();
  CHECK(bitwise_equal(out, a.value()));

  Var<double> row(Tensor<double>({1, 2}, {1, 2}));
  Var<double> col(Tensor<double>({2, 1}, {3, 4}));
  CHECK(matmul(row, col).value().item() == doctest::Approx(11.0));
}

TEST_CASE("matmul shape mismatch reports both shapes") {
  Var<double> a(Tensor<double>({2, 3}));
  Var<double> b(Tensor<double>({2, 3}));
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("(2, 3)"), ShapeError);
}

TEST_CASE("matmul gradient vs finite differences") {
  std::mt19937_64 rng(1);
  Tensor<double> a0 = random_tensor({3, 4}, rng);
  Tensor<double> b0 = random_tensor({4, 5}, rng);
  // d sum(A B) / dA == ones * B^T
  Var<double> a(a0, true);
  Var<double> b(b0);
  Var<double> s = sum(matmul(a, b));
  s.backward();
  Tensor<double> expected = batched_gemm(Tensor<double>::ones({3, 5}), b0, false, true);
  CHECK(max_abs_diff(a.grad(), expected) < 1e-12);

  const double err =
      grad_check(a0, [&](const Var<double>& x) { return sum(matmul(x, Var<double>(b0))); });
  CHECK(err < 1e-6);
}

TEST_CASE("batched matmul broadcasts leading axes") {
  std::mt19937_64 rng(2);
  Tensor<double> a0 = random_tensor({2, 3, 4}, rng);
  Tensor<double> w0 = random_tensor({5, 3}, rng);
  Tensor<double> out = batched_gemm(w0, a0, false, false);
  CHECK(out.shape() == Shape{2, 5, 4});
  // against per-batch products
  for (int64_t b = 0; b < 2; ++b) {
    Tensor<double> ab = a0.slice(0, b, 1).reshape({3, 4});
    Tensor<double> ob = batched_gemm(w0, ab, false, false);
    CHECK(max_abs_diff(out.slice(0, b, 1).reshape({5, 4}), ob) == 0.0);
  }
}

TEST_CASE("elementwise examples") {
  Var<double> x(Tensor<double>({3}, {-1, 0, 2}));
  Tensor<double> r = relu(x).value();
  CHECK(r.data()[0] == 0.0);
  CHECK(r.data()[1] == 0.0);
  CHECK(r.data()[2] == 2.0);

  CHECK(gelu(Var<double>(Tensor<double>::scalar(0.0))).value().item() == 0.0);

  const double err = grad_check(Tensor<double>::scalar(0.5),
                                [](const Var<double>& v) { return sum(gelu(v)); });
  CHECK(err < 1e-6);
}

TEST_CASE("elementwise gradients vs finite differences") {
  std::mt19937_64 rng(3);
  Tensor<double> x0 = random_tensor({2, 3}, rng, 0.2, 2.0);
  Tensor<double> y0 = random_tensor({2, 3}, rng, 0.5, 1.5);

  auto check = [&](auto f) {
    const double err = grad_check(x0, f);
    CHECK(err < 1e-6);
  };
  check([&](const Var<double>& v) { return sum(add(v, Var<double>(y0))); });
  check([&](const Var<double>& v) { return sum(sub(v, Var<double>(y0))); });
  check([&](const Var<double>& v) { return sum(mul(v, Var<double>(y0))); });
  check([&](const Var<double>& v) { return sum(div(v, Var<double>(y0))); });
  check([&](const Var<double>& v) { return sum(div(Var<double>(y0), v)); });
  check([&](const Var<double>& v) { return sum(relu(v)); });
  check([&](const Var<double>& v) { return sum(gelu(v)); });
  check([&](const Var<double>& v) { return sum(exp(v)); });
  check([&](const Var<double>& v) { return sum(log(v)); });
  check([&](const Var<double>& v) { return sum(sigmoid(v)); });
  check([&](const Var<double>& v) { return sum(max_with_scalar(v, 0.7)); });
  check([&](const Var<double>& v) { return sum(mul(softmax(v, 1), Var<double>(y0))); });
  check([&](const Var<double>& v) { return sum(mul(softmax(v, 0), Var<double>(y0))); });
}

TEST_CASE("broadcast binary ops and gradient reduction") {
  std::mt19937_64 rng(4);
  Tensor<double> x0 = random_tensor({2, 3, 4}, rng);
  Tensor<double> bias0 = random_tensor({3, 1}, rng);
  Var<double> x(x0, true);
  Var<double> bias(bias0, true);
  Var<double> y = sum(mul(add(x, bias), add(x, bias)));
  y.backward();
  CHECK(bias.grad().shape() == Shape{3, 1});
  const double err = grad_check(
      bias0, [&](const Var<double>& b) { return sum(mul(add(Var<double>(x0), b), add(Var<double>(x0), b))); });
  CHECK(err < 1e-6);
}

TEST_CASE("conv3d trivial kernels") {
  // all-ones 2x2x2 input, 2x2x2 kernel of ones, stride 2 -> single value 8
  Var<float> x(Tensor<float>::ones({1, 1, 2, 2, 2}));
  Var<float> w(Tensor<float>::ones({1, 1, 2, 2, 2}));
  Var<float> b(Tensor<float>::zeros({1}));
  Tensor<float> y = conv3d(x, w, b, 2, 0).value();
  CHECK(y.shape() == Shape{1, 1, 1, 1, 1});
  CHECK(y.item() == 8.0f);

  // kernel 3, stride 1, padding 1 preserves spatial shape
  std::mt19937_64 rng(5);
  Var<float> x8(random_tensor_f({1, 2, 8, 8, 8}, rng));
  Var<float> w3(random_tensor_f({3, 2, 3, 3, 3}, rng));
  Var<float> b3(random_tensor_f({3}, rng));
  CHECK(conv3d(x8, w3, b3, 1, 1).value().shape() == Shape{1, 3, 8, 8, 8});
}

TEST_CASE("pointwise conv equals per-voxel linear map") {
  std::mt19937_64 rng(6);
  Tensor<double> x0 = random_tensor({2, 3, 4, 4, 4}, rng);
  Tensor<double> w0 = random_tensor({5, 3, 1, 1, 1}, rng);
  Tensor<double> b0 = random_tensor({5}, rng);
  Tensor<double> conv_out = conv3d(Var<double>(x0), Var<double>(w0), Var<double>(b0), 1, 0).value();

  // matmul oracle on flattened voxels
  Tensor<double> flat = x0.reshape({2, 3, 64});
  Tensor<double> w2 = w0.reshape({5, 3});
  Tensor<double> ref = batched_gemm(w2, flat, false, false);
  Tensor<double> expect(conv_out.shape());
  auto pr = ref.data();
  auto pb = b0.data();
  auto pe = expect.mutable_data();
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t c = 0; c < 5; ++c)
      for (int64_t n = 0; n < 64; ++n)
        pe[(b * 5 + c) * 64 + n] = pr[(b * 5 + c) * 64 + n] + pb[c];
  CHECK(max_abs_diff(conv_out.reshape({2, 5, 4, 4, 4}), expect.reshape({2, 5, 4, 4, 4})) < 1e-12);
}

TEST_CASE("transposed conv geometry and zero input") {
  std::mt19937_64 rng(7);
  Var<float> x(random_tensor_f({1, 4, 4, 4, 4}, rng));
  Var<float> w(random_tensor_f({4, 2, 2, 2, 2}, rng));
  Var<float> b(random_tensor_f({2}, rng));
  CHECK(conv3d_transposed(x, w, b, 2, 0).value().shape() == Shape{1, 2, 8, 8, 8});

  Var<float> zero(Tensor<float>::zeros({1, 4, 4, 4, 4}));
  Tensor<float> y = conv3d_transposed(zero, w, b, 2, 0).value();
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t n = 0; n < 512; ++n)
      CHECK(y.data()[c * 512 + n] == b.value().data()[c]);
}

TEST_CASE("transposed conv is the adjoint of conv") {
  std::mt19937_64 rng(8);
  for (auto [stride, pad, kernel] : {std::tuple<int64_t, int64_t, int64_t>{2, 0, 2},
                                     {1, 1, 3},
                                     {2, 1, 3}}) {
    Tensor<double> w0 = random_tensor({3, 2, kernel, kernel, kernel}, rng);
    // extents chosen so (in + 2*pad - kernel) is divisible by the stride
    const int64_t ext = (8 + 2 * pad - kernel) % stride == 0 ? 8 : 9;
    Tensor<double> x0 = random_tensor({2, 2, ext, ext, ext}, rng);
    Var<double> nob;
    Tensor<double> cx = conv3d(Var<double>(x0), Var<double>(w0), nob,
                               Extent3{stride, stride, stride}, Extent3{pad, pad, pad})
                            .value();
    Tensor<double> y0 = random_tensor(cx.shape(), rng);
    Tensor<double> cty = conv3d_transposed(Var<double>(y0), Var<double>(w0), nob,
                                           Extent3{stride, stride, stride},
                                           Extent3{pad, pad, pad})
                             .value();
    double lhs = 0.0, rhs = 0.0;
    for (int64_t i = 0; i < cx.numel(); ++i) lhs += cx.data()[i] * y0.data()[i];
    for (int64_t i = 0; i < x0.numel(); ++i) rhs += x0.data()[i] * cty.data()[i];
    CHECK(std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-12}) < 1e-6);
  }
}

TEST_CASE("conv gradients vs finite differences") {
  std::mt19937_64 rng(9);
  Tensor<double> x0 = random_tensor({1, 2, 4, 4, 4}, rng);
  Tensor<double> w0 = random_tensor({3, 2, 2, 2, 2}, rng);
  Tensor<double> b0 = random_tensor({3}, rng);

  CHECK(grad_check(x0, [&](const Var<double>& v) {
          return sum(conv3d(v, Var<double>(w0), Var<double>(b0), 2, 0));
        }) < 1e-6);
  CHECK(grad_check(w0, [&](const Var<double>& v) {
          return sum(mul(conv3d(Var<double>(x0), v, Var<double>(b0), 2, 0),
                         conv3d(Var<double>(x0), v, Var<double>(b0), 2, 0)));
        }) < 1e-6);

  Tensor<double> xt = random_tensor({1, 3, 2, 2, 2}, rng);
  Tensor<double> bt = random_tensor({2}, rng);
  CHECK(grad_check(xt, [&](const Var<double>& v) {
          return sum(conv3d_transposed(v, Var<double>(w0), Var<double>(bt), 2, 0));
        }) < 1e-6);
  CHECK(grad_check(w0, [&](const Var<double>& v) {
          return sum(mul(conv3d_transposed(Var<double>(xt), v, Var<double>(bt), 2, 0),
                         conv3d_transposed(Var<double>(xt), v, Var<double>(bt), 2, 0)));
        }) < 1e-6);
}

TEST_CASE("conv channel mismatch raises a dimension error") {
  Var<float> x(Tensor<float>::ones({1, 3, 4, 4, 4}));
  Var<float> w(Tensor<float>::ones({2, 2, 1, 1, 1}));
  Var<float> b;
  CHECK_THROWS_AS(conv3d(x, w, b, 1, 0), ShapeError);
}

TEST_CASE("layer_norm basics") {
  // constant channel vector -> zeros before affine
  Tensor<double> x0({1, 4, 1, 1, 2});
  for (auto& v : x0.mutable_data()) v = 3.25;
  Var<double> gain(Tensor<double>::ones({4}));
  Var<double> offset(Tensor<double>::zeros({4}));
  Tensor<double> y = layer_norm(Var<double>(x0), 1, gain, offset, 1e-5).value();
  for (double v : y.data()) CHECK(std::abs(v) < 1e-9);

  std::mt19937_64 rng(10);
  Tensor<double> x1 = random_tensor({1, 6, 2, 1, 2}, rng);
  Tensor<double> g1 = random_tensor({6}, rng, 0.5, 1.5);
  Tensor<double> o1 = random_tensor({6}, rng);
  CHECK(grad_check(x1, [&](const Var<double>& v) {
          return sum(mul(layer_norm(v, 1, Var<double>(g1), Var<double>(o1), 1e-5),
                         layer_norm(v, 1, Var<double>(g1), Var<double>(o1), 1e-5)));
        }, 1e-6) < 1e-5);
  CHECK(grad_check(g1, [&](const Var<double>& v) {
          return sum(mul(layer_norm(Var<double>(x1), 1, v, Var<double>(o1), 1e-5),
                         layer_norm(Var<double>(x1), 1, v, Var<double>(o1), 1e-5)));
        }, 1e-6) < 1e-5);
}

TEST_CASE("layer_norm zero-offset output has zero mean per position") {
  std::mt19937_64 rng(11);
  Tensor<double> x0 = random_tensor({1, 8, 2, 2, 2}, rng);
  Tensor<double> y = layer_norm(Var<double>(x0), 1, Var<double>(Tensor<double>::ones({8})),
                                Var<double>(Tensor<double>::zeros({8})), 1e-8)
                         .value();
  for (int64_t n = 0; n < 8; ++n) {
    double m = 0.0;
    for (int64_t c = 0; c < 8; ++c) m += y.data()[c * 8 + n];
    CHECK(std::abs(m / 8.0) < 1e-6);
  }
}

TEST_CASE("structural ops round-trip") {
  std::mt19937_64 rng(12);
  Tensor<double> x = random_tensor({2, 3, 4, 5}, rng);

  Tensor<double> p = x.permute({2, 0, 3, 1});
  Tensor<double> back = p.permute({1, 3, 0, 2});
  CHECK(bitwise_equal(back, x));

  CHECK(bitwise_equal(x.reshape({6, 20}).reshape({2, 3, 4, 5}), x));

  Tensor<double> r = x.roll({1, 2}, {2, -1});
  Tensor<double> rb = r.roll({1, 2}, {-2, 1});
  CHECK(bitwise_equal(rb, x));

  Tensor<double> v({4}, {1, 2, 3, 4});
  Tensor<double> rolled = v.roll({0}, {2});
  CHECK(rolled.data()[0] == 3.0);
  CHECK(rolled.data()[1] == 4.0);
  CHECK(rolled.data()[2] == 1.0);
  CHECK(rolled.data()[3] == 2.0);

  Tensor<double> a = random_tensor({2, 3}, rng), b = random_tensor({4, 3}, rng);
  Tensor<double> parts[] = {a, b};
  Tensor<double> cat = Tensor<double>::concat(parts, 0);
  CHECK(cat.shape() == Shape{6, 3});
  CHECK(bitwise_equal(cat.slice(0, 0, 2), a));
  CHECK(bitwise_equal(cat.slice(0, 2, 4), b));

  CHECK_THROWS_AS(x.reshape({7}), ShapeError);
}

TEST_CASE("structural ops are differentiable") {
  std::mt19937_64 rng(13);
  Tensor<double> x0 = random_tensor({2, 3, 4}, rng);
  Tensor<double> w0 = random_tensor({2, 3, 4}, rng);
  auto weighted = [&](const Var<double>& t) { return sum(mul(t, Var<double>(w0.reshape(t.shape())))); };

  CHECK(grad_check(x0, [&](const Var<double>& v) { return weighted(reshape(v, {4, 6})); }) < 1e-8);
  CHECK(grad_check(x0, [&](const Var<double>& v) { return weighted(permute(v, {2, 0, 1})); }) < 1e-8);
  CHECK(grad_check(x0, [&](const Var<double>& v) { return weighted(roll(v, {1}, {2})); }) < 1e-8);
  CHECK(grad_check(x0, [&](const Var<double>& v) {
          return sum(mul(slice(v, 1, 1, 2), Var<double>(w0.slice(1, 1, 2))));
        }) < 1e-8);
  CHECK(grad_check(x0, [&](const Var<double>& v) {
          std::vector<Var<double>> parts = {v, v};
          Var<double> c = concat(parts, 0);
          return sum(mul(c, c));
        }) < 1e-8);
}

TEST_CASE("backward basics") {
  // loss = sum(x) -> gradient of ones
  Tensor<double> x0({3}, {1, 2, 3});
  Var<double> x(x0, true);
  sum(x).backward();
  CHECK(bitwise_equal(x.grad(), Tensor<double>::ones({3})));

  // loss = sum(relu(x)) at [-1, 2] -> [0, 1]
  Var<double> x2(Tensor<double>({2}, {-1, 2}), true);
  sum(relu(x2)).backward();
  CHECK(x2.grad().data()[0] == 0.0);
  CHECK(x2.grad().data()[1] == 1.0);

  // fan-out accumulates
  Var<double> x3(Tensor<double>({2}, {1.0, 2.0}), true);
  Var<double> y = add(mul(x3, x3), x3);
  sum(y).backward();
  CHECK(x3.grad().data()[0] == doctest::Approx(3.0));
  CHECK(x3.grad().data()[1] == doctest::Approx(5.0));

  // backward on a non-scalar is a usage error
  Var<double> x4(Tensor<double>({2}, {1, 2}), true);
  CHECK_THROWS_AS(mul(x4, x4).backward(), UsageError);
}

TEST_CASE("two identical forward+backward passes produce bitwise-identical gradients") {
  auto run = [](uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor<double> x0 = random_tensor({4, 8}, rng);
    Tensor<double> w0 = random_tensor({8, 4}, rng);
    Var<double> x(x0, true);
    Var<double> w(w0, true);
    Var<double> y = sum(gelu(matmul(x, w)));
    y.backward();
    return std::pair{x.grad().clone(), w.grad().clone()};
  };
  auto [g1x, g1w] = run(42);
  auto [g2x, g2w] = run(42);
  CHECK(bitwise_equal(g1x, g2x));
  CHECK(bitwise_equal(g1w, g2w));
}

TEST_CASE("FTensor round-trip is bit-exact") {
  std::mt19937_64 rng(14);
  Tensor<double> t = random_tensor({3, 5, 2}, rng);
  const std::string path = "ftensor_roundtrip_test.ft";
  save_ftensor_file(path, t);
  Tensor<double> back = load_ftensor_file<double>(path);
  CHECK(bitwise_equal(back, t));
  CHECK(peek_ftensor_dtype(path) == 1);

  Tensor<float> tf = random_tensor_f({7}, rng);
  save_ftensor_file(path, tf);
  CHECK(bitwise_equal(load_ftensor_file<float>(path), tf));
  CHECK(peek_ftensor_dtype(path) == 0);
  CHECK_THROWS_AS(load_ftensor_file<double>(path), IoError);
  std::remove(path.c_str());
}
