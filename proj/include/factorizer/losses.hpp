#pragma once

#include "factorizer/network.hpp"
#include "factorizer/ops.hpp"

namespace factorizer {

enum class Activation { kSoftmax, kSigmoid };

inline const char* to_string(Activation a) {
  return a == Activation::kSoftmax ? "softmax" : "sigmoid";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "softmax") return Activation::kSoftmax;
  if (s == "sigmoid") return Activation::kSigmoid;
  throw ConfigError("unknown activation '" + s + "' (expected softmax|sigmoid)");
}

/// 1 - (2<G,P> + eps) / (|G|^2 + |P|^2 + eps) over the full (J, N) arrays.
template <typename T>
Var<T> soft_dice_loss(const Var<T>& target, const Var<T>& probs, T eps = static_cast<T>(1e-5)) {
  if (target.shape() != probs.shape())
    throw ShapeError("soft_dice_loss shape mismatch: " + shape_str(target.shape()) + " vs " +
                     shape_str(probs.shape()));
  Var<T> inter = sum(mul(target, probs));
  Var<T> norms = add(sum(mul(target, target)), sum(mul(probs, probs)));
  Var<T> ratio = div(add_scalar(mul_scalar(inter, T(2)), eps), add_scalar(norms, eps));
  return add_scalar(neg(ratio), T(1));
}

/// -(1/N) <G, log P> with P clamped to [guard, 1] before the log;
/// N is the number of voxels (the trailing axis).
template <typename T>
Var<T> cross_entropy_loss(const Var<T>& target, const Var<T>& probs,
                          T guard = static_cast<T>(1e-12)) {
  if (target.shape() != probs.shape())
    throw ShapeError("cross_entropy_loss shape mismatch: " + shape_str(target.shape()) +
                     " vs " + shape_str(probs.shape()));
  const int64_t voxels = probs.shape().back();
  Var<T> logp = log(clamp(probs, guard, T(1)));
  Var<T> total = sum(mul(target, logp));
  return mul_scalar(total, T(-1) / static_cast<T>(voxels));
}

/// One-hot encoding of an integer label map. Row j corresponds to label
/// value j + first_label (first_label = 0 keeps a background row).
template <typename T>
Tensor<T> one_hot(const Tensor<T>& label, int64_t num_rows, int64_t first_label) {
  const int64_t n = label.numel();
  Shape out_shape = {num_rows};
  for (int64_t e : label.shape()) out_shape.push_back(e);
  Tensor<T> out(out_shape);
  const T* pl = label.data().data();
  T* po = out.mutable_data().data();
  for (int64_t i = 0; i < n; ++i) {
    const int64_t v = static_cast<int64_t>(pl[i]) - first_label;
    if (v >= 0 && v < num_rows) po[v * n + i] = T(1);
  }
  return out;
}

/// Downsample a one-hot target by 2^levels per axis; a class survives if it
/// is present anywhere in the pooled cell (max pooling), so small structures
/// are preserved at the auxiliary scales.
template <typename T>
Tensor<T> maxpool_downsample_onehot(const Tensor<T>& onehot, int64_t factor) {
  const Shape& s = onehot.shape();  // (J, H, W, D)
  if (s.size() != 4) throw ShapeError("maxpool_downsample_onehot expects (J, H, W, D)");
  const int64_t j = s[0], h = s[1] / factor, w = s[2] / factor, d = s[3] / factor;
  Tensor<T> out({j, h, w, d});
  const T* pi = onehot.data().data();
  T* po = out.mutable_data().data();
  for (int64_t c = 0; c < j; ++c)
    for (int64_t oh = 0; oh < h; ++oh)
      for (int64_t ow = 0; ow < w; ++ow)
        for (int64_t od = 0; od < d; ++od) {
          T m = 0;
          for (int64_t ih = oh * factor; ih < (oh + 1) * factor; ++ih)
            for (int64_t iw = ow * factor; iw < (ow + 1) * factor; ++iw)
              for (int64_t id = od * factor; id < (od + 1) * factor; ++id)
                m = std::max(m, pi[((c * s[1] + ih) * s[2] + iw) * s[3] + id]);
          po[((c * h + oh) * w + ow) * d + od] = m;
        }
  return out;
}

/// Dice + cross-entropy at one scale. Softmax mode expects the target's row
/// 0 to be background: cross-entropy runs over all rows, dice over the
/// foreground rows only. Sigmoid mode treats every row as a foreground
/// class.
template <typename T>
Var<T> segmentation_loss(const Var<T>& logits, const Tensor<T>& target_onehot, Activation act) {
  const Shape& s = logits.shape();  // (B, C, H, W, D)
  if (s.size() != 5) throw ShapeError("segmentation_loss expects 5-D logits");
  const int64_t batch = s[0], ch = s[1];
  const int64_t voxels = s[2] * s[3] * s[4];
  if (target_onehot.shape() != Shape{batch, ch, s[2], s[3], s[4]})
    throw UsageError("target pyramid level " + shape_str(target_onehot.shape()) +
                     " does not match logits " + shape_str(s));
  Var<T> flat = reshape(logits, {batch, ch, voxels});
  Var<T> probs = act == Activation::kSoftmax ? softmax(flat, 1) : sigmoid(flat);
  Var<T> target = constant(target_onehot.reshape({batch, ch, voxels}));

  Var<T> acc;
  for (int64_t b = 0; b < batch; ++b) {
    Var<T> pb = reshape(slice(probs, 0, b, 1), {ch, voxels});
    Var<T> tb = reshape(slice(target, 0, b, 1), {ch, voxels});
    Var<T> ce = cross_entropy_loss(tb, pb);
    Var<T> dice_p = pb, dice_t = tb;
    if (act == Activation::kSoftmax && ch > 1) {
      dice_p = slice(pb, 0, 1, ch - 1);
      dice_t = slice(tb, 0, 1, ch - 1);
    }
    Var<T> item = add(soft_dice_loss(dice_t, dice_p), ce);
    acc = acc.defined() ? add(acc, item) : item;
  }
  return mul_scalar(acc, T(1) / static_cast<T>(batch));
}

/// Deep-supervision total: weights 1, 0.5, 0.25 at full, 1/2 and 1/4
/// resolution. `targets` must supply one level per available output.
template <typename T>
Var<T> total_loss(const NetworkOutput<T>& out, const std::vector<Tensor<T>>& targets,
                  Activation act) {
  if (targets.size() != 1 + out.aux.size())
    throw UsageError("target pyramid has " + std::to_string(targets.size()) +
                     " levels, outputs have " + std::to_string(1 + out.aux.size()));
  static const T weights[3] = {T(1), T(0.5), T(0.25)};
  Var<T> acc = mul_scalar(segmentation_loss(out.logits, targets[0], act), weights[0]);
  for (size_t i = 0; i < out.aux.size(); ++i)
    acc = add(acc, mul_scalar(segmentation_loss(out.aux[i], targets[i + 1], act),
                              weights[i + 1]));
  return acc;
}

}  // namespace factorizer
