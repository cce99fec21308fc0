#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "factorizer/tensor.hpp"

namespace factorizer {

using Mask = Tensor<uint8_t>;

/// Voxel-overlap score 2|g&y| / (|g| + |y|); both masks empty scores 1.
double dice_score(const Mask& g, const Mask& y);

struct Hd95Result {
  double value = 0.0;
  bool defined = false;  // false when either mask is empty
};

/// Foreground voxels with at least one background 6-neighbor; the volume
/// border counts as background.
std::vector<std::array<int64_t, 3>> surface_voxels(const Mask& mask);

/// Linear-interpolation percentile: for sorted values v[0..m-1] and quantile
/// q, rank = q*(m-1), result = v[floor] + frac*(v[floor+1] - v[floor]).
double percentile_linear(std::vector<double> values, double q);

/// 95th-percentile symmetric surface distance in mm: the directed distance
/// sets use exact Euclidean distance under the voxel spacing, the 95%
/// quantile is taken per direction, and the maximum of the two directions is
/// returned. Undefined (excluded from averages) when either mask is empty.
Hd95Result hd95(const Mask& g, const Mask& y, std::array<double, 3> spacing);

struct CaseClassMetrics {
  std::string case_id;
  int cls = 0;
  double dice = 0.0;
  Hd95Result hd;
};

/// Tab-separated report: one line per case per class plus a summary block;
/// row order follows the input order.
std::string metrics_report(const std::vector<CaseClassMetrics>& rows);

}  // namespace factorizer
