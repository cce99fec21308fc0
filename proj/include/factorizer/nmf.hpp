#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "factorizer/ops.hpp"
#include "factorizer/rng.hpp"

namespace factorizer {

enum class NmfSolver { kMU, kHALS };

inline const char* to_string(NmfSolver s) {
  return s == NmfSolver::kMU ? "mu" : "hals";
}

inline NmfSolver nmf_solver_from_string(const std::string& s) {
  if (s == "mu") return NmfSolver::kMU;
  if (s == "hals") return NmfSolver::kHALS;
  throw ConfigError("unknown nmf solver '" + s + "' (expected mu|hals)");
}

struct NmfConfig {
  int64_t rank = 1;
  int64_t iterations = 5;
  NmfSolver solver = NmfSolver::kHALS;
  double eps = 1e-8;       // guard added to every division denominator
  uint64_t init_seed = 0;  // factor initialization stream
};

template <typename T>
struct FactorPair {
  Var<T> f;  // (B', M, R), entries >= 0
  Var<T> g;  // (B', N, R), entries >= 0
};

/// Factors drawn i.i.d. uniform on (0, 1) from a counter-based stream, so
/// initialization is a pure function of (seed, element index).
template <typename T>
FactorPair<T> init_factors(int64_t batch, int64_t m, int64_t n, int64_t rank, uint64_t seed) {
  CounterRng rng(seed);
  Tensor<T> f({batch, m, rank}), g({batch, n, rank});
  auto pf = f.mutable_data();
  for (size_t i = 0; i < pf.size(); ++i) pf[i] = static_cast<T>(rng.uniform01(i));
  auto pg = g.mutable_data();
  const uint64_t offset = pf.size();
  for (size_t i = 0; i < pg.size(); ++i) pg[i] = static_cast<T>(rng.uniform01(offset + i));
  return {Var<T>(std::move(f)), Var<T>(std::move(g))};
}

namespace detail {

/// Rank-one update core with the input transpose precomputed by the caller.
template <typename T>
FactorPair<T> rank_one_step_xt(const Var<T>& x, const Var<T>& xt, const Var<T>& f,
                               const Var<T>& g, T eps) {
  Var<T> gg = add_scalar(sum_axes(mul(g, g), {1}), eps);
  Var<T> f_new = div(matmul(x, g), gg);
  Var<T> ff = add_scalar(sum_axes(mul(f_new, f_new), {1}), eps);
  Var<T> g_new = div(matmul(xt, f_new), ff);
  return {f_new, g_new};
}

}  // namespace detail

/// Rank-one update shared by both solvers: f <- Xg / (|g|^2 + eps),
/// g <- X^T f / (|f|^2 + eps).
template <typename T>
FactorPair<T> rank_one_step(const Var<T>& x, const Var<T>& f, const Var<T>& g, T eps) {
  return detail::rank_one_step_xt(x, transpose_last2(x), f, g, eps);
}

namespace detail {

template <typename T>
FactorPair<T> mu_step_xt(const Var<T>& x, const Var<T>& xt, const Var<T>& f, const Var<T>& g,
                         T eps) {
  if (f.shape().back() == 1) return rank_one_step_xt(x, xt, f, g, eps);
  Var<T> gtg = matmul(transpose_last2(g), g);
  Var<T> f_new = mul(f, div(matmul(x, g), add_scalar(matmul(f, gtg), eps)));
  Var<T> ftf = matmul(transpose_last2(f_new), f_new);
  Var<T> g_new = mul(g, div(matmul(xt, f_new), add_scalar(matmul(g, ftf), eps)));
  return {f_new, g_new};
}

}  // namespace detail

/// Multiplicative update: F <- F . (XG)/(F G^T G), then G with the updated F.
template <typename T>
FactorPair<T> mu_step(const Var<T>& x, const Var<T>& f, const Var<T>& g, T eps) {
  return detail::mu_step_xt(x, transpose_last2(x), f, g, eps);
}

/// Snapshots after each column update (test instrumentation).
template <typename T>
using HalsTrace = std::vector<std::pair<Tensor<T>, Tensor<T>>>;

namespace detail {
template <typename T>
FactorPair<T> hals_step_xt(const Var<T>& x, const Var<T>& xt, const Var<T>& f, const Var<T>& g,
                           T eps, HalsTrace<T>* trace);
}

/// Hierarchical alternating least squares: a 2R-block sweep updating all
/// columns of F, then all columns of G, each by its closed-form
/// nonnegative least-squares solution.
template <typename T>
FactorPair<T> hals_step(const Var<T>& x, const Var<T>& f, const Var<T>& g, T eps,
                        HalsTrace<T>* trace = nullptr) {
  return detail::hals_step_xt(x, transpose_last2(x), f, g, eps, trace);
}

namespace detail {

template <typename T>
FactorPair<T> hals_step_xt(const Var<T>& x, const Var<T>& xt, const Var<T>& f, const Var<T>& g,
                           T eps, HalsTrace<T>* trace) {
  const int64_t rank = f.shape().back();
  if (rank == 1) {
    FactorPair<T> out = rank_one_step_xt(x, xt, f, g, eps);
    if (trace) {
      trace->emplace_back(out.f.value(), g.value());
      trace->emplace_back(out.f.value(), out.g.value());
    }
    return out;
  }

  // F block: A = XG, B = G^T G fixed for the sweep; columns use the latest F.
  Var<T> a = matmul(x, g);
  Var<T> bm = matmul(transpose_last2(g), g);
  std::vector<Var<T>> fcols(rank);
  for (int64_t r = 0; r < rank; ++r) fcols[r] = slice(f, 2, r, 1);
  for (int64_t r = 0; r < rank; ++r) {
    Var<T> numer = slice(a, 2, r, 1);
    for (int64_t l = 0; l < rank; ++l) {
      if (l == r) continue;
      numer = sub(numer, mul(slice(slice(bm, 1, l, 1), 2, r, 1), fcols[l]));
    }
    Var<T> norm = add_scalar(slice(slice(bm, 1, r, 1), 2, r, 1), eps);
    fcols[r] = max_with_scalar(div(numer, norm), T(0));
    if (trace) trace->emplace_back(concat(fcols, 2).value(), g.value());
  }
  Var<T> f_new = concat(fcols, 2);

  // G block with the updated F.
  Var<T> a2 = matmul(xt, f_new);
  Var<T> bm2 = matmul(transpose_last2(f_new), f_new);
  std::vector<Var<T>> gcols(rank);
  for (int64_t r = 0; r < rank; ++r) gcols[r] = slice(g, 2, r, 1);
  for (int64_t r = 0; r < rank; ++r) {
    Var<T> numer = slice(a2, 2, r, 1);
    for (int64_t l = 0; l < rank; ++l) {
      if (l == r) continue;
      numer = sub(numer, mul(slice(slice(bm2, 1, l, 1), 2, r, 1), gcols[l]));
    }
    Var<T> norm = add_scalar(slice(slice(bm2, 1, r, 1), 2, r, 1), eps);
    gcols[r] = max_with_scalar(div(numer, norm), T(0));
    if (trace) trace->emplace_back(f_new.value(), concat(gcols, 2).value());
  }
  Var<T> g_new = concat(gcols, 2);
  return {f_new, g_new};
}

}  // namespace detail

/// Squared reconstruction error |X - F G^T|^2, summed over the batch.
template <typename T>
Var<T> nmf_objective(const Var<T>& x, const Var<T>& f, const Var<T>& g) {
  Var<T> resid = sub(x, matmul(f, transpose_last2(g)));
  return sum(mul(resid, resid));
}

/// Per-instance objective values (plain evaluation).
template <typename T>
Tensor<T> nmf_objective_per_instance(const Tensor<T>& x, const Tensor<T>& f,
                                     const Tensor<T>& g) {
  Tensor<T> recon = batched_gemm(f, g, false, true);
  const int64_t batch = x.shape()[0];
  const int64_t per = x.numel() / batch;
  Tensor<T> out({batch});
  const T* px = x.data().data();
  const T* pr = recon.data().data();
  T* po = out.mutable_data().data();
  for (int64_t b = 0; b < batch; ++b) {
    T acc = 0;
    for (int64_t i = 0; i < per; ++i) {
      T d = px[b * per + i] - pr[b * per + i];
      acc += d * d;
    }
    po[b] = acc;
  }
  return out;
}

/// Differentiable NMF layer: initialize factors from cfg.init_seed, run
/// exactly cfg.iterations unrolled solver iterations (all recorded on the
/// graph), and return the reconstruction F G^T. Input must be nonnegative.
template <typename T>
Var<T> nmf_forward(const Var<T>& x, const NmfConfig& cfg, FactorPair<T>* captured = nullptr) {
  if (x.value().rank() != 3)
    throw ShapeError("nmf_forward expects (B', M, N) matrices, got " + shape_str(x.shape()));
  const int64_t batch = x.shape()[0], m = x.shape()[1], n = x.shape()[2];
  if (cfg.rank < 1 || cfg.rank > std::min(m, n))
    throw ConfigError("nmf rank " + std::to_string(cfg.rank) + " outside [1, min(M, N) = " +
                      std::to_string(std::min(m, n)) + "]");
  if (cfg.iterations < 1) throw ConfigError("nmf iterations must be >= 1");
  if (cfg.eps <= 0) throw ConfigError("nmf eps must be > 0");
  for (T v : x.value().data())
    if (v < T(0))
      throw DomainError("nmf_forward input has negative entries (min " +
                        std::to_string(static_cast<double>(v)) + "); clamp first");

  FactorPair<T> fp = init_factors<T>(batch, m, n, cfg.rank, cfg.init_seed);
  const T eps = static_cast<T>(cfg.eps);
  Var<T> xt = transpose_last2(x);
  for (int64_t t = 0; t < cfg.iterations; ++t) {
    if (cfg.rank == 1)
      fp = detail::rank_one_step_xt(x, xt, fp.f, fp.g, eps);
    else if (cfg.solver == NmfSolver::kMU)
      fp = detail::mu_step_xt(x, xt, fp.f, fp.g, eps);
    else
      fp = detail::hals_step_xt<T>(x, xt, fp.f, fp.g, eps, nullptr);
  }
  if (captured) {
    captured->f = fp.f.detach();
    captured->g = fp.g.detach();
  }
  return matmul(fp.f, transpose_last2(fp.g));
}

}  // namespace factorizer
