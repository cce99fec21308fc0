#pragma once

#include <vector>

#include "factorizer/losses.hpp"
#include "factorizer/metrics.hpp"
#include "factorizer/network.hpp"

namespace factorizer {

struct InferConfig {
  int64_t window = 64;       // sliding-window edge (training patch size)
  double overlap = 0.5;      // fraction of window shared by adjacent tiles
  double threshold = 0.5;    // probability cut for the binary maps
  Activation activation = Activation::kSoftmax;
};

struct InferenceOutput {
  Tensor<float> probabilities;    // (C_out, H, W, D) blended probabilities
  Tensor<float> label_map;        // (H, W, D), 0 = background
  std::vector<Mask> class_masks;  // one per foreground class
};

/// Tile start offsets covering [0, extent): stride window*(1-overlap) with a
/// final tile flush to the boundary.
std::vector<int64_t> tile_corners(int64_t extent, int64_t window, double overlap);

/// Pad spatial extents up to `target` by mirroring content at the high end.
Tensor<float> pad_reflect(const Tensor<float>& image, std::array<int64_t, 3> target);

/// Tiled inference with constant-weight blending in overlaps (weights sum to
/// one at every voxel); volumes smaller than the window are reflect-padded
/// and cropped back.
InferenceOutput sliding_window_infer(FactorizerModel<float>& model, const Tensor<float>& image,
                                     const InferConfig& cfg);

struct EvalCase {
  std::string case_id;
  Tensor<float> label;            // ground truth (H, W, D)
  std::vector<Mask> class_masks;  // predictions per foreground class
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
};

/// Per-case per-class dice and hd95 rows (stable ordering by input order,
/// class ascending).
std::vector<CaseClassMetrics> evaluate_cases(const std::vector<EvalCase>& cases,
                                             int64_t classes);

Mask label_equals(const Tensor<float>& label, int64_t cls);

}  // namespace factorizer
