#include "factorizer/infer.hpp"

#include <cmath>

namespace factorizer {

std::vector<int64_t> tile_corners(int64_t extent, int64_t window, double overlap) {
  if (window > extent) throw UsageError("tile window exceeds extent");
  if (overlap < 0.0 || overlap >= 1.0) throw ConfigError("overlap must be in [0, 1)");
  const int64_t stride =
      std::max<int64_t>(1, static_cast<int64_t>(std::llround(window * (1.0 - overlap))));
  std::vector<int64_t> corners;
  for (int64_t c = 0; c + window <= extent; c += stride) corners.push_back(c);
  if (corners.back() != extent - window) corners.push_back(extent - window);
  return corners;
}

Tensor<float> pad_reflect(const Tensor<float>& image, std::array<int64_t, 3> target) {
  const Shape& s = image.shape();  // (C, H, W, D)
  if (s[1] >= target[0] && s[2] >= target[1] && s[3] >= target[2]) return image;
  const int64_t ext[3] = {s[1], s[2], s[3]};
  std::array<int64_t, 3> out_ext;
  for (int d = 0; d < 3; ++d) out_ext[d] = std::max(ext[d], target[d]);
  Tensor<float> out({s[0], out_ext[0], out_ext[1], out_ext[2]});
  const float* pi = image.data().data();
  float* po = out.mutable_data().data();
  auto mirror = [](int64_t i, int64_t n) {
    // Symmetric reflection: n, n+1, ... map back to n-1, n-2, ...
    while (i >= n) {
      i = 2 * n - 1 - i;
      if (i < 0) i = -i - 1;
    }
    return i;
  };
  for (int64_t c = 0; c < s[0]; ++c)
    for (int64_t i = 0; i < out_ext[0]; ++i)
      for (int64_t j = 0; j < out_ext[1]; ++j)
        for (int64_t k = 0; k < out_ext[2]; ++k) {
          const int64_t si = mirror(i, ext[0]), sj = mirror(j, ext[1]), sk = mirror(k, ext[2]);
          po[((c * out_ext[0] + i) * out_ext[1] + j) * out_ext[2] + k] =
              pi[((c * ext[0] + si) * ext[1] + sj) * ext[2] + sk];
        }
  return out;
}

InferenceOutput sliding_window_infer(FactorizerModel<float>& model, const Tensor<float>& image,
                                     const InferConfig& cfg) {
  const Shape& orig_shape = image.shape();
  if (orig_shape.size() != 4) throw UsageError("sliding_window_infer expects (C, H, W, D)");
  const int64_t w = cfg.window;
  Tensor<float> padded = pad_reflect(image, {w, w, w});
  const Shape& s = padded.shape();
  const int64_t ch_out = model.config().out_channels;
  const int64_t ext[3] = {s[1], s[2], s[3]};

  // Accumulate in double so the per-voxel average of equal tile values
  // reproduces the value exactly (overlap counts are small integers).
  Tensor<double> prob_sum({ch_out, ext[0], ext[1], ext[2]});
  Tensor<double> weight({ext[0], ext[1], ext[2]});
  const auto ch_corners = tile_corners(ext[0], w, cfg.overlap);
  const auto cw_corners = tile_corners(ext[1], w, cfg.overlap);
  const auto cd_corners = tile_corners(ext[2], w, cfg.overlap);

  NoGradGuard ng;
  for (int64_t ci : ch_corners)
    for (int64_t cj : cw_corners)
      for (int64_t ck : cd_corners) {
        Tensor<float> tile = padded;
        tile = tile.slice(1, ci, w).slice(2, cj, w).slice(3, ck, w);
        Var<float> x(tile.reshape({1, s[0], w, w, w}));
        NetworkOutput<float> out = model.forward(x, false);
        Var<float> flat = reshape(out.logits, {1, ch_out, w * w * w});
        Var<float> probs = cfg.activation == Activation::kSoftmax ? softmax(flat, 1)
                                                                  : sigmoid(flat);
        const float* pp = probs.value().data().data();
        double* ps = prob_sum.mutable_data().data();
        double* pw = weight.mutable_data().data();
        const int64_t hw = ext[1] * ext[2];
        for (int64_t c = 0; c < ch_out; ++c)
          for (int64_t i = 0; i < w; ++i)
            for (int64_t j = 0; j < w; ++j)
              for (int64_t k = 0; k < w; ++k)
                ps[c * ext[0] * hw + (ci + i) * hw + (cj + j) * ext[2] + (ck + k)] +=
                    pp[((c * w) + i) * w * w + j * w + k];
        for (int64_t i = 0; i < w; ++i)
          for (int64_t j = 0; j < w; ++j)
            for (int64_t k = 0; k < w; ++k)
              pw[(ci + i) * hw + (cj + j) * ext[2] + (ck + k)] += 1.0;
      }

  // Constant-weight average over overlapping tiles.
  {
    double* ps = prob_sum.mutable_data().data();
    const double* pw = weight.data().data();
    const int64_t voxels = ext[0] * ext[1] * ext[2];
    for (int64_t c = 0; c < ch_out; ++c)
      for (int64_t n = 0; n < voxels; ++n) ps[c * voxels + n] /= pw[n];
  }

  // Crop back to the original extents (padding was on the high side only).
  Tensor<float> probs = prob_sum.cast<float>();
  for (int d = 0; d < 3; ++d)
    if (probs.shape()[1 + d] != orig_shape[1 + d])
      probs = probs.slice(1 + d, 0, orig_shape[1 + d]);

  InferenceOutput out;
  out.probabilities = probs;
  const int64_t classes =
      cfg.activation == Activation::kSoftmax ? ch_out - 1 : ch_out;
  const int64_t voxels = orig_shape[1] * orig_shape[2] * orig_shape[3];
  out.label_map = Tensor<float>({orig_shape[1], orig_shape[2], orig_shape[3]});
  out.class_masks.clear();
  for (int64_t k = 0; k < classes; ++k)
    out.class_masks.emplace_back(Shape{orig_shape[1], orig_shape[2], orig_shape[3]});
  const float* pp = probs.data().data();
  float* pl = out.label_map.mutable_data().data();
  const int64_t fg0 = cfg.activation == Activation::kSoftmax ? 1 : 0;
  for (int64_t n = 0; n < voxels; ++n) {
    float best = 0.0f;
    int64_t best_cls = 0;
    for (int64_t k = 0; k < classes; ++k) {
      const float p = pp[(fg0 + k) * voxels + n];
      if (p >= cfg.threshold) {
        out.class_masks[k].mutable_data()[n] = 1;
        if (p > best) {
          best = p;
          best_cls = k + 1;
        }
      }
    }
    pl[n] = static_cast<float>(best_cls);
  }
  return out;
}

Mask label_equals(const Tensor<float>& label, int64_t cls) {
  Mask m(label.shape());
  const float* pl = label.data().data();
  uint8_t* pm = m.mutable_data().data();
  for (int64_t i = 0; i < label.numel(); ++i)
    pm[i] = static_cast<int64_t>(pl[i]) == cls ? 1 : 0;
  return m;
}

std::vector<CaseClassMetrics> evaluate_cases(const std::vector<EvalCase>& cases,
                                             int64_t classes) {
  std::vector<CaseClassMetrics> rows;
  for (const EvalCase& c : cases) {
    for (int64_t k = 1; k <= classes; ++k) {
      CaseClassMetrics row;
      row.case_id = c.case_id;
      row.cls = static_cast<int>(k);
      const Mask truth = label_equals(c.label, k);
      const Mask& pred = c.class_masks.at(k - 1);
      row.dice = dice_score(truth, pred);
      row.hd = hd95(truth, pred, c.spacing);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

}  // namespace factorizer
