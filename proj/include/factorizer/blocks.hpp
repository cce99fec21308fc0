#pragma once

#include <optional>
#include <random>

#include "factorizer/conv.hpp"
#include "factorizer/matricize.hpp"
#include "factorizer/nmf.hpp"

namespace factorizer {

template <typename T>
struct LayerNormParams {
  Var<T> gain;    // (C)
  Var<T> offset;  // (C)
};

/// Per-voxel linear map, stored as a (Cout, Cin) matrix plus bias.
template <typename T>
struct PointwiseConv {
  Var<T> weight;  // (Cout, Cin)
  Var<T> bias;    // (Cout)

  Var<T> forward(const Var<T>& x) const {
    const Shape& s = x.shape();
    const int64_t cout = weight.shape()[0];
    Var<T> flat = reshape(x, {s[0], s[1], s[2] * s[3] * s[4]});
    Var<T> y = matmul(weight, flat);  // (Cout, Cin) x (B, Cin, N) -> (B, Cout, N)
    y = add(y, reshape(bias, {cout, int64_t(1)}));
    return reshape(y, {s[0], cout, s[2], s[3], s[4]});
  }
};

template <typename T>
Var<T> make_param(Tensor<T> t) {
  return Var<T>(std::move(t), true);
}

template <typename T>
Tensor<T> fan_in_uniform(Shape shape, int64_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (T& v : t.mutable_data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> gaussian_init(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (T& v : t.mutable_data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
PointwiseConv<T> make_pointwise(int64_t cin, int64_t cout, std::mt19937_64& rng) {
  return {make_param(fan_in_uniform<T>({cout, cin}, cin, rng)),
          make_param(Tensor<T>::zeros({cout}))};
}

template <typename T>
LayerNormParams<T> make_layer_norm(int64_t c) {
  return {make_param(Tensor<T>::ones({c})), make_param(Tensor<T>::zeros({c}))};
}

/// Runtime knobs resolved by the caller per forward pass.
struct NmfRuntime {
  uint64_t seed = 0;
  bool enabled = true;
  std::optional<int64_t> iterations_override;
  std::optional<int64_t> rank_override;
  std::optional<NmfSolver> solver_override;
};

/// Pointwise projection -> matricize -> ReLU -> NMF reconstruction ->
/// dematricize -> pointwise projection. Output shape equals input shape.
template <typename T>
struct WrappedNmf {
  PointwiseConv<T> in_proj, out_proj;  // both C -> C
  MatricizeConfig matricize_cfg;
  NmfConfig nmf_cfg;

  NmfConfig resolve(const Shape& x_shape, const NmfRuntime& rt) const {
    NmfConfig cfg = nmf_cfg;
    cfg.init_seed = rt.seed;
    if (rt.iterations_override) cfg.iterations = *rt.iterations_override;
    if (rt.solver_override) cfg.solver = *rt.solver_override;
    if (rt.rank_override) {
      const int64_t n = matricize_cfg.mode == MatricizeMode::kGlobal
                            ? x_shape[2] * x_shape[3] * x_shape[4]
                            : matricize_cfg.patch * matricize_cfg.patch * matricize_cfg.patch;
      // Runtime sweeps clamp to the feasible rank instead of failing.
      cfg.rank = std::min(*rt.rank_override, std::min(matricize_cfg.head_dim, n));
    }
    return cfg;
  }

  Var<T> forward(const Var<T>& x, const NmfRuntime& rt, FactorPair<T>* captured = nullptr,
                 MatricizedBatch<T>* captured_meta = nullptr) const {
    Var<T> projected = in_proj.forward(x);
    MatricizedBatch<T> mb = matricize(projected, matricize_cfg);
    mb.matrices = relu(mb.matrices);
    mb.matrices = nmf_forward(mb.matrices, resolve(x.shape(), rt), captured);
    if (captured_meta) *captured_meta = mb;
    Var<T> back = dematricize(mb);
    return out_proj.forward(back);
  }
};

/// Residual pair of subblocks: y = WrappedNMF(LN(x)) + x, z = MLP(LN(y)) + y.
/// Either subblock can be absent (build-time ablation) or disabled at run
/// time; the residual identity carries through a skipped subblock.
template <typename T>
struct FactorizerBlock {
  LayerNormParams<T> norm1, norm2;
  WrappedNmf<T> wnmf;
  PointwiseConv<T> mlp_in, mlp_out;  // C -> 2C -> C
  bool has_nmf = true;
  bool has_mlp = true;
  T ln_eps = static_cast<T>(1e-5);

  Var<T> forward(const Var<T>& x, const NmfRuntime& rt, FactorPair<T>* captured = nullptr,
                 MatricizedBatch<T>* captured_meta = nullptr) const {
    Var<T> y = x;
    if (has_nmf && rt.enabled) {
      Var<T> normed = layer_norm(x, 1, norm1.gain, norm1.offset, ln_eps);
      y = add(wnmf.forward(normed, rt, captured, captured_meta), x);
    }
    Var<T> z = y;
    if (has_mlp) {
      Var<T> normed = layer_norm(y, 1, norm2.gain, norm2.offset, ln_eps);
      Var<T> hidden = gelu(mlp_in.forward(normed));
      z = add(mlp_out.forward(hidden), y);
    }
    return z;
  }
};

template <typename T>
FactorizerBlock<T> make_factorizer_block(int64_t channels, MatricizeConfig mcfg, NmfConfig ncfg,
                                         bool has_nmf, bool has_mlp, std::mt19937_64& rng) {
  FactorizerBlock<T> b;
  b.has_nmf = has_nmf;
  b.has_mlp = has_mlp;
  b.norm1 = make_layer_norm<T>(channels);
  b.norm2 = make_layer_norm<T>(channels);
  b.wnmf.in_proj = make_pointwise<T>(channels, channels, rng);
  b.wnmf.out_proj = make_pointwise<T>(channels, channels, rng);
  b.wnmf.matricize_cfg = mcfg;
  b.wnmf.nmf_cfg = ncfg;
  b.mlp_in = make_pointwise<T>(channels, 2 * channels, rng);
  b.mlp_out = make_pointwise<T>(2 * channels, channels, rng);
  return b;
}

/// Learnable embedding added at the bridge resolution, broadcast over batch.
template <typename T>
Var<T> add_positional_embedding(const Var<T>& x, const Var<T>& pe) {
  const Shape& xs = x.shape();
  const Shape& ps = pe.shape();
  if (ps.size() != 4 || xs.size() != 5 || xs[1] != ps[0] || xs[2] != ps[1] || xs[3] != ps[2] ||
      xs[4] != ps[3])
    throw ConfigError("positional embedding extents " + shape_str(ps) +
                      " do not match input " + shape_str(xs));
  return add(x, reshape(pe, {1, ps[0], ps[1], ps[2], ps[3]}));
}

}  // namespace factorizer
