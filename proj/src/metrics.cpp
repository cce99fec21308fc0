#include "factorizer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace factorizer {

double dice_score(const Mask& g, const Mask& y) {
  if (g.shape() != y.shape())
    throw ShapeError("dice_score shape mismatch: " + shape_str(g.shape()) + " vs " +
                     shape_str(y.shape()));
  int64_t inter = 0, ng = 0, ny = 0;
  auto pg = g.data();
  auto py = y.data();
  for (size_t i = 0; i < pg.size(); ++i) {
    const bool a = pg[i] != 0, b = py[i] != 0;
    inter += (a && b);
    ng += a;
    ny += b;
  }
  if (ng + ny == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(ng + ny);
}

std::vector<std::array<int64_t, 3>> surface_voxels(const Mask& mask) {
  if (mask.rank() != 3) throw ShapeError("surface_voxels expects a 3-D mask");
  const int64_t h = mask.shape()[0], w = mask.shape()[1], d = mask.shape()[2];
  const uint8_t* p = mask.data().data();
  auto at = [&](int64_t i, int64_t j, int64_t k) -> bool {
    if (i < 0 || i >= h || j < 0 || j >= w || k < 0 || k >= d) return false;
    return p[(i * w + j) * d + k] != 0;
  };
  std::vector<std::array<int64_t, 3>> out;
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j)
      for (int64_t k = 0; k < d; ++k) {
        if (!at(i, j, k)) continue;
        if (!at(i - 1, j, k) || !at(i + 1, j, k) || !at(i, j - 1, k) || !at(i, j + 1, k) ||
            !at(i, j, k - 1) || !at(i, j, k + 1))
          out.push_back({i, j, k});
      }
  return out;
}

double percentile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw UsageError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const size_t m = values.size();
  const double rank = q * static_cast<double>(m - 1);
  const size_t lo = static_cast<size_t>(rank);
  const size_t hi = std::min(lo + 1, m - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

namespace {

std::vector<double> directed_distances(const std::vector<std::array<int64_t, 3>>& from,
                                       const std::vector<std::array<int64_t, 3>>& to,
                                       const std::array<double, 3>& spacing) {
  std::vector<double> out;
  out.reserve(from.size());
  const double s0 = spacing[0] * spacing[0];
  const double s1 = spacing[1] * spacing[1];
  const double s2 = spacing[2] * spacing[2];
  for (const auto& a : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : to) {
      const double d0 = static_cast<double>(a[0] - b[0]);
      const double d1 = static_cast<double>(a[1] - b[1]);
      const double d2 = static_cast<double>(a[2] - b[2]);
      const double dist = d0 * d0 * s0 + d1 * d1 * s1 + d2 * d2 * s2;
      best = std::min(best, dist);
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

}  // namespace

Hd95Result hd95(const Mask& g, const Mask& y, std::array<double, 3> spacing) {
  if (g.shape() != y.shape())
    throw ShapeError("hd95 shape mismatch: " + shape_str(g.shape()) + " vs " +
                     shape_str(y.shape()));
  auto sg = surface_voxels(g);
  auto sy = surface_voxels(y);
  if (sg.empty() || sy.empty()) return {0.0, false};
  const double fwd = percentile_linear(directed_distances(sg, sy, spacing), 0.95);
  const double bwd = percentile_linear(directed_distances(sy, sg, spacing), 0.95);
  return {std::max(fwd, bwd), true};
}

std::string metrics_report(const std::vector<CaseClassMetrics>& rows) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "case\tclass\tdice\thd95\n";
  for (const auto& r : rows) {
    os << r.case_id << '\t' << r.cls << '\t' << r.dice << '\t';
    if (r.hd.defined)
      os << r.hd.value;
    else
      os << "undefined";
    os << '\n';
  }
  // Summary block: per-class means, undefined hd95 excluded from the mean.
  std::vector<int> classes;
  for (const auto& r : rows)
    if (std::find(classes.begin(), classes.end(), r.cls) == classes.end())
      classes.push_back(r.cls);
  std::sort(classes.begin(), classes.end());
  os << "# summary\n";
  os << "# class\tmean_dice\tmean_hd95\tcases\thd95_undefined\n";
  double all_dice = 0.0;
  int64_t all_n = 0;
  for (int cls : classes) {
    double dice_sum = 0.0, hd_sum = 0.0;
    int64_t n = 0, hd_n = 0, hd_undef = 0;
    for (const auto& r : rows) {
      if (r.cls != cls) continue;
      dice_sum += r.dice;
      ++n;
      if (r.hd.defined) {
        hd_sum += r.hd.value;
        ++hd_n;
      } else {
        ++hd_undef;
      }
    }
    os << "# " << cls << '\t' << (n ? dice_sum / n : 0.0) << '\t';
    if (hd_n)
      os << hd_sum / hd_n;
    else
      os << "undefined";
    os << '\t' << n << '\t' << hd_undef << '\n';
    all_dice += dice_sum;
    all_n += n;
  }
  os << "# mean_dice_all\t" << (all_n ? all_dice / all_n : 0.0) << '\n';
  return os.str();
}

}  // namespace factorizer
