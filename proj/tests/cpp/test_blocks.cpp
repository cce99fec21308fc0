#include <doctest.h>

#include <random>

#include "factorizer/blocks.hpp"
#include "testutil.hpp"

using namespace factorizer;
using namespace factorizer::testutil;

namespace {

template <typename T>
PointwiseConv<T> identity_pointwise(int64_t c) {
  Tensor<T> w({c, c});
  for (int64_t i = 0; i < c; ++i) w.mutable_data()[i * c + i] = T(1);
  return {Var<T>(w, true), Var<T>(Tensor<T>::zeros({c}), true)};
}

template <typename T>
WrappedNmf<T> make_wnmf(int64_t c, MatricizeMode mode, int64_t e, int64_t p,
                        std::mt19937_64& rng) {
  WrappedNmf<T> w;
  w.in_proj = make_pointwise<T>(c, c, rng);
  w.out_proj = make_pointwise<T>(c, c, rng);
  w.matricize_cfg = {mode, e, p};
  w.nmf_cfg.rank = 1;
  w.nmf_cfg.iterations = 5;
  return w;
}

}  // namespace

TEST_CASE("wrapped nmf preserves shape") {
  std::mt19937_64 rng(1);
  WrappedNmf<float> w = make_wnmf<float>(32, MatricizeMode::kGlobal, 8, 0, rng);
  Var<float> x(random_tensor_f({1, 32, 8, 8, 8}, rng));
  NoGradGuard ng;
  CHECK(w.forward(x, NmfRuntime{}).value().shape() == Shape{1, 32, 8, 8, 8});
}

TEST_CASE("identity projections on rank-one nonnegative heads reconstruct the input") {
  std::mt19937_64 rng(2);
  const int64_t c = 4, e = 2, hwd = 4 * 4 * 4;
  WrappedNmf<double> w;
  w.in_proj = identity_pointwise<double>(c);
  w.out_proj = identity_pointwise<double>(c);
  w.matricize_cfg = {MatricizeMode::kGlobal, e, 0};
  w.nmf_cfg.rank = 1;
  w.nmf_cfg.iterations = 5;

  // each head (e channels x spatial) is an exact nonnegative rank-one matrix
  Tensor<double> x({1, c, 4, 4, 4});
  std::uniform_real_distribution<double> u(0.2, 1.0);
  for (int64_t head = 0; head < c / e; ++head) {
    std::vector<double> row(e), col(hwd);
    for (auto& v : row) v = u(rng);
    for (auto& v : col) v = u(rng);
    for (int64_t i = 0; i < e; ++i)
      for (int64_t n = 0; n < hwd; ++n)
        x.mutable_data()[(head * e + i) * hwd + n] = row[i] * col[n];
  }
  NoGradGuard ng;
  Tensor<double> y = w.forward(Var<double>(x), NmfRuntime{}).value();
  double num = 0.0, den = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    num += (y.data()[i] - x.data()[i]) * (y.data()[i] - x.data()[i]);
    den += x.data()[i] * x.data()[i];
  }
  CHECK(std::sqrt(num / den) < 1e-2);
}

TEST_CASE("wrapped nmf gradient vs finite differences (shifted window, T=5)") {
  std::mt19937_64 rng(3);
  WrappedNmf<double> w = make_wnmf<double>(4, MatricizeMode::kSW, 4, 2, rng);
  Tensor<double> x0 = random_tensor({1, 4, 4, 4, 4}, rng);
  const double err = grad_check(x0, [&](const Var<double>& v) {
    return sum(w.forward(v, NmfRuntime{}));
  });
  CHECK(err < 1e-4);
  // parameter gradients too
  Tensor<double> w0 = w.in_proj.weight.value();
  const double werr = grad_check(w0, [&](const Var<double>& v) {
    WrappedNmf<double> w2 = w;
    w2.in_proj.weight = v;
    return sum(w2.forward(Var<double>(x0), NmfRuntime{}));
  });
  CHECK(werr < 1e-4);
}

TEST_CASE("factorizer block short-circuits reduce to the identity") {
  std::mt19937_64 rng(4);
  FactorizerBlock<float> b = make_factorizer_block<float>(
      8, MatricizeConfig{MatricizeMode::kLocal, 4, 2}, NmfConfig{}, true, true, rng);
  Tensor<float> x0 = random_tensor_f({1, 8, 4, 4, 4}, rng);
  NoGradGuard ng;

  // disable NMF at run time and zero the MLP weights: pure residual
  FactorizerBlock<float> zeroed = b;
  zeroed.mlp_in.weight = Var<float>(Tensor<float>::zeros(b.mlp_in.weight.shape()));
  zeroed.mlp_in.bias = Var<float>(Tensor<float>::zeros(b.mlp_in.bias.shape()));
  zeroed.mlp_out.weight = Var<float>(Tensor<float>::zeros(b.mlp_out.weight.shape()));
  zeroed.mlp_out.bias = Var<float>(Tensor<float>::zeros(b.mlp_out.bias.shape()));
  NmfRuntime off;
  off.enabled = false;
  CHECK(bitwise_equal(zeroed.forward(Var<float>(x0), off).value(), x0));

  // block built without either subblock is exactly the identity
  FactorizerBlock<float> none = make_factorizer_block<float>(
      8, MatricizeConfig{MatricizeMode::kLocal, 4, 2}, NmfConfig{}, false, false, rng);
  CHECK(bitwise_equal(none.forward(Var<float>(x0), NmfRuntime{}).value(), x0));

  // zero MLP weights leave the residual y unchanged through the MLP subblock
  Var<float> x(x0);
  NmfRuntime on;
  Tensor<float> y_with = zeroed.forward(x, on).value();
  FactorizerBlock<float> nmf_only = zeroed;
  nmf_only.has_mlp = false;
  CHECK(bitwise_equal(y_with, nmf_only.forward(x, on).value()));
}

TEST_CASE("full factorizer block gradient vs finite differences") {
  std::mt19937_64 rng(5);
  FactorizerBlock<double> b = make_factorizer_block<double>(
      4, MatricizeConfig{MatricizeMode::kSW, 2, 2}, NmfConfig{}, true, true, rng);
  Tensor<double> x0 = random_tensor({1, 4, 4, 4, 4}, rng);
  const double err = grad_check(x0, [&](const Var<double>& v) {
    return sum(b.forward(v, NmfRuntime{}));
  });
  CHECK(err < 1e-4);
}

TEST_CASE("positional embedding add") {
  std::mt19937_64 rng(6);
  Tensor<double> x0 = random_tensor({2, 3, 2, 2, 2}, rng);
  Var<double> zero_pe(Tensor<double>::zeros({3, 2, 2, 2}), true);
  CHECK(bitwise_equal(add_positional_embedding(Var<double>(x0), zero_pe).value(), x0));

  Var<double> pe(random_tensor({3, 2, 2, 2}, rng), true);
  Var<double> loss = sum(add_positional_embedding(Var<double>(x0), pe));
  loss.backward();
  // sum over a batch of 2 gives a gradient of 2 everywhere
  for (double v : pe.grad().data()) CHECK(v == 2.0);

  Var<double> wrong(Tensor<double>::zeros({3, 4, 4, 4}), true);
  CHECK_THROWS_AS(add_positional_embedding(Var<double>(x0), wrong), ConfigError);
}

TEST_CASE("shifted windows smooth cross-patch boundaries") {
  // input constant within each window but discontinuous across the boundary
  const int64_t c = 2, p = 4, h = 8;
  Tensor<double> x({1, c, h, h, h});
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < h; ++j)
        for (int64_t k = 0; k < h; ++k)
          x.mutable_data()[((ch * h + i) * h + j) * h + k] = (i < p) ? 1.0 : 3.0;

  auto boundary_jump = [&](const Tensor<double>& y) {
    double jump = 0.0;
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t j = 0; j < h; ++j)
        for (int64_t k = 0; k < h; ++k) {
          const double a = y.data()[((ch * h + (p - 1)) * h + j) * h + k];
          const double b = y.data()[((ch * h + p) * h + j) * h + k];
          jump = std::max(jump, std::abs(a - b));
        }
    return jump;
  };

  NoGradGuard ng;
  WrappedNmf<double> local;
  local.in_proj = identity_pointwise<double>(c);
  local.out_proj = identity_pointwise<double>(c);
  local.matricize_cfg = {MatricizeMode::kLocal, c, p};
  local.nmf_cfg.iterations = 5;
  WrappedNmf<double> sw = local;
  sw.matricize_cfg.mode = MatricizeMode::kSW;

  const double local_jump = boundary_jump(local.forward(Var<double>(x), NmfRuntime{}).value());
  const double sw_jump = boundary_jump(sw.forward(Var<double>(x), NmfRuntime{}).value());
  CHECK(sw_jump <= local_jump);
}
