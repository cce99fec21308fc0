#pragma once

#include <string>

#include "factorizer/ops.hpp"

namespace factorizer {

enum class MatricizeMode { kGlobal, kLocal, kSW };

inline const char* to_string(MatricizeMode m) {
  switch (m) {
    case MatricizeMode::kGlobal: return "global";
    case MatricizeMode::kLocal: return "local";
    case MatricizeMode::kSW: return "sw";
  }
  return "?";
}

inline MatricizeMode matricize_mode_from_string(const std::string& s) {
  if (s == "global") return MatricizeMode::kGlobal;
  if (s == "local") return MatricizeMode::kLocal;
  if (s == "sw" || s == "swin") return MatricizeMode::kSW;
  throw ConfigError("unknown matricize mode '" + s + "' (expected global|local|sw)");
}

struct MatricizeConfig {
  MatricizeMode mode = MatricizeMode::kGlobal;
  int64_t head_dim = 8;  // channels per matrix (E)
  int64_t patch = 8;     // cubic window edge (P), local/SW only
};

/// A batch of matrices (B', M, N) together with the metadata needed to
/// invert the reshape exactly.
template <typename T>
struct MatricizedBatch {
  Var<T> matrices;
  Shape original_shape;  // (B, C, H, W, D)
  MatricizeConfig config;
};

inline void validate_matricize(const Shape& s, const MatricizeConfig& cfg) {
  if (s.size() != 5)
    throw ConfigError("matricize expects a (B, C, H, W, D) tensor, got " + shape_str(s));
  if (cfg.head_dim < 1 || s[1] % cfg.head_dim != 0)
    throw ConfigError("head_dim " + std::to_string(cfg.head_dim) +
                      " does not divide channel count " + std::to_string(s[1]));
  if (cfg.mode == MatricizeMode::kGlobal) return;
  static const char* axis_names[3] = {"H", "W", "D"};
  for (int d = 0; d < 3; ++d)
    if (cfg.patch < 1 || s[2 + d] % cfg.patch != 0)
      throw ConfigError("patch " + std::to_string(cfg.patch) + " does not divide axis " +
                        axis_names[d] + "=" + std::to_string(s[2 + d]));
  if (cfg.mode == MatricizeMode::kSW && cfg.patch % 2 != 0)
    throw ConfigError("shifted-window patch must be even, got " + std::to_string(cfg.patch));
}

namespace detail {

template <typename T>
Var<T> local_matricize(const Var<T>& x, int64_t e, int64_t p) {
  const Shape& s = x.shape();
  const int64_t b = s[0], gc = s[1] / e, gh = s[2] / p, gw = s[3] / p, gd = s[4] / p;
  Var<T> t = reshape(x, {b, gc, e, gh, p, gw, p, gd, p});
  t = permute(t, {0, 1, 3, 5, 7, 2, 4, 6, 8});
  return reshape(t, {b * gc * gh * gw * gd, e, p * p * p});
}

/// Inverse of local_matricize. The row count M of the matrices may differ
/// from the head dim used to matricize; the output then carries M channels
/// per head (used for dumping per-head factor maps).
template <typename T>
Var<T> local_dematricize(const Var<T>& matrices, const Shape& orig, int64_t e, int64_t p) {
  const int64_t b = orig[0], gc = orig[1] / e, gh = orig[2] / p, gw = orig[3] / p,
                gd = orig[4] / p;
  const int64_t m = matrices.shape()[1];
  Var<T> t = reshape(matrices, {b, gc, gh, gw, gd, m, p, p, p});
  t = permute(t, {0, 1, 5, 2, 6, 3, 7, 4, 8});
  return reshape(t, {b, gc * m, orig[2], orig[3], orig[4]});
}

}  // namespace detail

/// Reshape a batch of multi-channel 3-D images into a batch of matrices.
/// Pure data movement: reshape/permute/roll/concat only.
template <typename T>
MatricizedBatch<T> matricize(const Var<T>& x, const MatricizeConfig& cfg) {
  validate_matricize(x.shape(), cfg);
  const Shape& s = x.shape();
  MatricizedBatch<T> out;
  out.original_shape = s;
  out.config = cfg;
  switch (cfg.mode) {
    case MatricizeMode::kGlobal: {
      const int64_t heads = s[1] / cfg.head_dim;
      out.matrices = reshape(x, {s[0] * heads, cfg.head_dim, s[2] * s[3] * s[4]});
      break;
    }
    case MatricizeMode::kLocal:
      out.matrices = detail::local_matricize(x, cfg.head_dim, cfg.patch);
      break;
    case MatricizeMode::kSW: {
      const int64_t half = cfg.patch / 2;
      Var<T> regular = detail::local_matricize(x, cfg.head_dim, cfg.patch);
      Var<T> shifted = detail::local_matricize(
          roll(x, {2, 3, 4}, {half, half, half}), cfg.head_dim, cfg.patch);
      out.matrices = concat<T>({regular, shifted}, 0);
      break;
    }
  }
  return out;
}

/// Inverse reshape. Global/Local are exact inverses; SW reconstructs the
/// image from the regular and shifted halves independently and returns their
/// mean.
template <typename T>
Var<T> dematricize(const MatricizedBatch<T>& m) {
  const MatricizeConfig& cfg = m.config;
  const Shape& orig = m.original_shape;
  if (orig.size() != 5) throw ShapeError("dematricize: bad original shape " + shape_str(orig));
  switch (cfg.mode) {
    case MatricizeMode::kGlobal: {
      const Shape& ms = m.matrices.shape();
      const int64_t heads = orig[1] / cfg.head_dim;
      if (ms.size() != 3 || ms[0] != orig[0] * heads || ms[2] != orig[2] * orig[3] * orig[4])
        throw ShapeError("dematricize: matrices " + shape_str(ms) +
                         " inconsistent with original " + shape_str(orig));
      return reshape(m.matrices, {orig[0], heads * ms[1], orig[2], orig[3], orig[4]});
    }
    case MatricizeMode::kLocal:
      return detail::local_dematricize(m.matrices, orig, cfg.head_dim, cfg.patch);
    case MatricizeMode::kSW: {
      const int64_t bp = m.matrices.shape()[0];
      if (bp % 2 != 0)
        throw ShapeError("dematricize: shifted-window batch must be even, got " +
                         std::to_string(bp));
      const int64_t half_batch = bp / 2;
      const int64_t half = cfg.patch / 2;
      Var<T> regular = slice(m.matrices, 0, 0, half_batch);
      Var<T> shifted = slice(m.matrices, 0, half_batch, half_batch);
      Var<T> a = detail::local_dematricize(regular, orig, cfg.head_dim, cfg.patch);
      Var<T> b = detail::local_dematricize(shifted, orig, cfg.head_dim, cfg.patch);
      b = roll(b, {2, 3, 4}, {-half, -half, -half});
      return mul_scalar(add(a, b), T(0.5));
    }
  }
  throw ShapeError("dematricize: bad mode");
}

}  // namespace factorizer
