#include "factorizer/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "factorizer/config.hpp"
#include "factorizer/io.hpp"

namespace fs = std::filesystem;

namespace factorizer {

std::vector<std::vector<double>> default_contrast(int64_t classes, int64_t channels) {
  // Distinct per-class signatures across channels so classes are separable
  // from intensities alone.
  static const std::vector<std::vector<double>> patterns = {
      {1.2, -0.8}, {-0.9, 1.1}, {0.8, 0.8}, {-0.7, -0.7}};
  std::vector<std::vector<double>> out(classes, std::vector<double>(channels));
  for (int64_t k = 0; k < classes; ++k)
    for (int64_t c = 0; c < channels; ++c)
      out[k][c] = patterns[k % patterns.size()][c % patterns[k % patterns.size()].size()];
  return out;
}

namespace {

// Coarse Gaussian grid upsampled trilinearly: a smooth nonzero background.
Tensor<float> low_frequency_texture(int64_t extent, double amplitude, std::mt19937_64& rng) {
  constexpr int64_t kGrid = 5;
  std::normal_distribution<double> dist(0.0, amplitude);
  std::vector<double> coarse(kGrid * kGrid * kGrid);
  for (double& v : coarse) v = dist(rng);
  Tensor<float> out({extent, extent, extent});
  float* po = out.mutable_data().data();
  const double scale = static_cast<double>(kGrid - 1) / static_cast<double>(extent - 1);
  auto cidx = [&](int64_t i, int64_t j, int64_t k) {
    return coarse[(i * kGrid + j) * kGrid + k];
  };
  int64_t n = 0;
  for (int64_t i = 0; i < extent; ++i)
    for (int64_t j = 0; j < extent; ++j)
      for (int64_t k = 0; k < extent; ++k, ++n) {
        const double x = i * scale, y = j * scale, z = k * scale;
        const int64_t x0 = std::min<int64_t>(static_cast<int64_t>(x), kGrid - 2);
        const int64_t y0 = std::min<int64_t>(static_cast<int64_t>(y), kGrid - 2);
        const int64_t z0 = std::min<int64_t>(static_cast<int64_t>(z), kGrid - 2);
        const double fx = x - x0, fy = y - y0, fz = z - z0;
        double v = 0.0;
        for (int dx = 0; dx < 2; ++dx)
          for (int dy = 0; dy < 2; ++dy)
            for (int dz = 0; dz < 2; ++dz)
              v += cidx(x0 + dx, y0 + dy, z0 + dz) * (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) *
                   (dz ? fz : 1 - fz);
        po[n] = static_cast<float>(v);
      }
  return out;
}

struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> semi;
};

}  // namespace

std::vector<VolumeSample> generate(const SyntheticTaskSpec& spec) {
  if (spec.extent < 16 || spec.extent % 16 != 0)
    throw GenerationError("volume extent must be a positive multiple of 16, got " +
                          std::to_string(spec.extent));
  if (spec.channels < 1 || spec.classes < 1 || spec.count < 0)
    throw GenerationError("invalid task spec (channels/classes/count)");
  if (spec.blobs_min < 0 || spec.blobs_max < spec.blobs_min)
    throw GenerationError("invalid blob count range");
  if (spec.radius_min <= 0 || spec.radius_max < spec.radius_min)
    throw GenerationError("invalid blob radius range");
  if (2 * spec.radius_max + 4 > static_cast<double>(spec.extent))
    throw GenerationError("blob radius " + std::to_string(spec.radius_max) +
                          " cannot fit inside extent " + std::to_string(spec.extent));

  auto contrast = spec.contrast.empty() ? default_contrast(spec.classes, spec.channels)
                                        : spec.contrast;
  if (static_cast<int64_t>(contrast.size()) != spec.classes)
    throw GenerationError("contrast table must have one row per class");
  for (const auto& row : contrast)
    if (static_cast<int64_t>(row.size()) != spec.channels)
      throw GenerationError("contrast row length must equal channel count");

  const int64_t e = spec.extent;
  const int64_t voxels = e * e * e;
  constexpr double kEdge = 0.15;        // soft falloff width outside the mask, in rho units
  constexpr int kPlacementAttempts = 100;

  std::vector<VolumeSample> out;
  out.reserve(spec.count);
  for (int64_t s = 0; s < spec.count; ++s) {
    std::mt19937_64 rng(mix_seed(spec.seed, static_cast<uint64_t>(s) + 1));
    VolumeSample sample;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "case_%04lld", static_cast<long long>(s));
    sample.id = idbuf;
    sample.spacing = spec.spacing;
    sample.image = Tensor<float>({spec.channels, e, e, e});
    sample.label = Tensor<float>({e, e, e});

    float* img = sample.image.mutable_data().data();
    float* lab = sample.label.mutable_data().data();
    for (int64_t c = 0; c < spec.channels; ++c) {
      Tensor<float> tex = low_frequency_texture(e, 0.2, rng);
      const float* pt = tex.data().data();
      for (int64_t n = 0; n < voxels; ++n) img[c * voxels + n] = 1.0f + pt[n];
    }

    std::uniform_int_distribution<int64_t> blob_count(spec.blobs_min, spec.blobs_max);
    std::uniform_real_distribution<double> radius(spec.radius_min, spec.radius_max);
    for (int64_t k = 0; k < spec.classes; ++k) {
      const int64_t blobs = blob_count(rng);
      for (int64_t blob = 0; blob < blobs; ++blob) {
        Ellipsoid shape{};
        bool placed = false;
        for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
          for (int d = 0; d < 3; ++d) shape.semi[d] = radius(rng);
          bool fits = true;
          for (int d = 0; d < 3; ++d) {
            const double margin = shape.semi[d] * (1.0 + kEdge) + 1.0;
            if (2.0 * margin >= static_cast<double>(e)) fits = false;
          }
          if (!fits) continue;
          for (int d = 0; d < 3; ++d) {
            const double margin = shape.semi[d] * (1.0 + kEdge) + 1.0;
            std::uniform_real_distribution<double> center(margin,
                                                          static_cast<double>(e) - margin);
            shape.center[d] = center(rng);
          }
          // Reject placements whose mask would overlap an existing lesion.
          placed = true;
          const int64_t lo[3] = {static_cast<int64_t>(shape.center[0] - shape.semi[0] - 1),
                                 static_cast<int64_t>(shape.center[1] - shape.semi[1] - 1),
                                 static_cast<int64_t>(shape.center[2] - shape.semi[2] - 1)};
          const int64_t hi[3] = {static_cast<int64_t>(shape.center[0] + shape.semi[0] + 2),
                                 static_cast<int64_t>(shape.center[1] + shape.semi[1] + 2),
                                 static_cast<int64_t>(shape.center[2] + shape.semi[2] + 2)};
          for (int64_t i = lo[0]; i <= hi[0] && placed; ++i)
            for (int64_t j = lo[1]; j <= hi[1] && placed; ++j)
              for (int64_t l = lo[2]; l <= hi[2] && placed; ++l) {
                if (i < 0 || j < 0 || l < 0 || i >= e || j >= e || l >= e) continue;
                const double r0 = (i - shape.center[0]) / shape.semi[0];
                const double r1 = (j - shape.center[1]) / shape.semi[1];
                const double r2 = (l - shape.center[2]) / shape.semi[2];
                const double rho = std::sqrt(r0 * r0 + r1 * r1 + r2 * r2);
                if (rho <= 1.0 && lab[(i * e + j) * e + l] != 0.0f) placed = false;
              }
        }
        if (!placed)
          throw GenerationError("could not place lesion " + std::to_string(blob + 1) +
                                " of class " + std::to_string(k + 1) +
                                " without overlap; reduce blob count or radius");
        // Full contrast inside the mask, cosine falloff just outside it.
        const int64_t lo[3] = {
            std::max<int64_t>(0, static_cast<int64_t>(shape.center[0] -
                                                      shape.semi[0] * (1 + kEdge) - 1)),
            std::max<int64_t>(0, static_cast<int64_t>(shape.center[1] -
                                                      shape.semi[1] * (1 + kEdge) - 1)),
            std::max<int64_t>(0, static_cast<int64_t>(shape.center[2] -
                                                      shape.semi[2] * (1 + kEdge) - 1))};
        const int64_t hi[3] = {
            std::min<int64_t>(e - 1, static_cast<int64_t>(shape.center[0] +
                                                          shape.semi[0] * (1 + kEdge) + 1)),
            std::min<int64_t>(e - 1, static_cast<int64_t>(shape.center[1] +
                                                          shape.semi[1] * (1 + kEdge) + 1)),
            std::min<int64_t>(e - 1, static_cast<int64_t>(shape.center[2] +
                                                          shape.semi[2] * (1 + kEdge) + 1))};
        for (int64_t i = lo[0]; i <= hi[0]; ++i)
          for (int64_t j = lo[1]; j <= hi[1]; ++j)
            for (int64_t l = lo[2]; l <= hi[2]; ++l) {
              const double r0 = (i - shape.center[0]) / shape.semi[0];
              const double r1 = (j - shape.center[1]) / shape.semi[1];
              const double r2 = (l - shape.center[2]) / shape.semi[2];
              const double rho = std::sqrt(r0 * r0 + r1 * r1 + r2 * r2);
              double w = 0.0;
              if (rho <= 1.0) {
                w = 1.0;
                lab[(i * e + j) * e + l] = static_cast<float>(k + 1);
              } else if (rho < 1.0 + kEdge) {
                w = 0.5 * (1.0 + std::cos(M_PI * (rho - 1.0) / kEdge));
              }
              if (w > 0.0)
                for (int64_t c = 0; c < spec.channels; ++c)
                  img[c * voxels + (i * e + j) * e + l] +=
                      static_cast<float>(contrast[k][c] * w);
            }
      }
    }

    if (spec.noise_sigma > 0.0) {
      std::normal_distribution<double> noise(0.0, spec.noise_sigma);
      for (int64_t n = 0; n < spec.channels * voxels; ++n)
        img[n] += static_cast<float>(noise(rng));
    }
    out.push_back(std::move(sample));
  }
  return out;
}

VolumeSample preprocess(const VolumeSample& sample) {
  const Shape& s = sample.image.shape();  // (C, H, W, D)
  const int64_t ch = s[0];
  const int64_t ext[3] = {s[1], s[2], s[3]};
  const float* img = sample.image.data().data();
  int64_t lo[3] = {ext[0], ext[1], ext[2]};
  int64_t hi[3] = {-1, -1, -1};
  const int64_t voxels = ext[0] * ext[1] * ext[2];
  for (int64_t i = 0; i < ext[0]; ++i)
    for (int64_t j = 0; j < ext[1]; ++j)
      for (int64_t k = 0; k < ext[2]; ++k) {
        bool nonzero = false;
        for (int64_t c = 0; c < ch && !nonzero; ++c)
          nonzero = img[c * voxels + (i * ext[1] + j) * ext[2] + k] != 0.0f;
        if (!nonzero) continue;
        lo[0] = std::min(lo[0], i);
        lo[1] = std::min(lo[1], j);
        lo[2] = std::min(lo[2], k);
        hi[0] = std::max(hi[0], i);
        hi[1] = std::max(hi[1], j);
        hi[2] = std::max(hi[2], k);
      }
  VolumeSample out;
  if (hi[0] < 0) {
    out = sample;  // all-zero image: nothing to crop
  } else {
    out = crop_sample(sample, {lo[0], lo[1], lo[2]},
                      {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1});
  }

  const int64_t n = out.image.numel() / ch;
  float* p = out.image.mutable_data().data();
  for (int64_t c = 0; c < ch; ++c) {
    double mean = 0.0;
    for (int64_t i = 0; i < n; ++i) mean += p[c * n + i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double d = p[c * n + i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double std_guarded = std::max(std::sqrt(var), 1e-8);
    for (int64_t i = 0; i < n; ++i)
      p[c * n + i] = static_cast<float>((p[c * n + i] - mean) / std_guarded);
  }
  return out;
}

namespace {

void gaussian_smooth_channel(float* data, const int64_t ext[3], double sigma) {
  const int64_t radius = std::max<int64_t>(1, static_cast<int64_t>(std::lround(4.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double norm = 0.0;
  for (int64_t i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    norm += kernel[i + radius];
  }
  for (double& k : kernel) k /= norm;

  const int64_t strides[3] = {ext[1] * ext[2], ext[2], 1};
  std::vector<float> tmp(ext[0] * ext[1] * ext[2]);
  for (int axis = 0; axis < 3; ++axis) {
    const int64_t len = ext[axis];
    const int64_t stride = strides[axis];
    const int64_t lines = ext[0] * ext[1] * ext[2] / len;
    for (int64_t line = 0; line < lines; ++line) {
      // Decompose the line index into the two non-axis coordinates.
      int64_t coords[3] = {0, 0, 0};
      int64_t rem = line;
      for (int d = 2; d >= 0; --d) {
        if (d == axis) continue;
        coords[d] = rem % ext[d];
        rem /= ext[d];
      }
      const int64_t base = coords[0] * strides[0] + coords[1] * strides[1] + coords[2];
      for (int64_t i = 0; i < len; ++i) {
        double acc = 0.0;
        for (int64_t t = -radius; t <= radius; ++t) {
          const int64_t j = std::clamp<int64_t>(i + t, 0, len - 1);  // edge replicate
          acc += kernel[t + radius] * data[base + j * stride];
        }
        tmp[base + i * stride] = static_cast<float>(acc);
      }
    }
    std::copy(tmp.begin(), tmp.end(), data);
  }
}

}  // namespace

VolumeSample augment(const VolumeSample& sample, const AugmentPolicy& policy,
                     std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  VolumeSample out = sample;
  out.image = sample.image.clone();
  out.label = sample.label.clone();

  for (int axis = 0; axis < 3; ++axis) {
    if (u01(rng) < policy.p_flip) {
      out.image = out.image.flip(1 + axis);
      out.label = out.label.flip(axis);
    }
  }
  if (u01(rng) < policy.p_noise) {
    std::uniform_real_distribution<double> vd(policy.noise_var_min, policy.noise_var_max);
    const double sigma = std::sqrt(vd(rng));
    std::normal_distribution<double> noise(0.0, sigma);
    for (float& v : out.image.mutable_data()) v += static_cast<float>(noise(rng));
  }
  if (u01(rng) < policy.p_smooth) {
    const Shape& s = out.image.shape();
    const int64_t ext[3] = {s[1], s[2], s[3]};
    const int64_t per = ext[0] * ext[1] * ext[2];
    std::uniform_real_distribution<double> sd(policy.smooth_sigma_min, policy.smooth_sigma_max);
    for (int64_t c = 0; c < s[0]; ++c) {
      const double sigma = sd(rng);  // each channel smoothed independently
      gaussian_smooth_channel(out.image.mutable_data().data() + c * per, ext, sigma);
    }
  }
  if (u01(rng) < policy.p_scale) {
    std::uniform_real_distribution<double> sd(policy.scale_min, policy.scale_max);
    const float s = static_cast<float>(sd(rng));
    for (float& v : out.image.mutable_data()) v *= s;
  }
  if (u01(rng) < policy.p_shift) {
    std::uniform_real_distribution<double> sd(policy.shift_min, policy.shift_max);
    const float o = static_cast<float>(sd(rng));
    for (float& v : out.image.mutable_data()) v += o;
  }
  if (u01(rng) < policy.p_gamma) {
    std::uniform_real_distribution<double> gd(policy.gamma_min, policy.gamma_max);
    const double gamma = gd(rng);
    // Shift to a nonnegative range, apply the power law, shift back.
    float mn = out.image.data()[0], mx = out.image.data()[0];
    for (float v : out.image.data()) {
      mn = std::min(mn, v);
      mx = std::max(mx, v);
    }
    const double span = std::max(static_cast<double>(mx - mn), 1e-8);
    for (float& v : out.image.mutable_data())
      v = static_cast<float>(std::pow((v - mn) / span, gamma) * span + mn);
  }
  return out;
}

VolumeSample crop_sample(const VolumeSample& sample, std::array<int64_t, 3> start,
                         std::array<int64_t, 3> size) {
  VolumeSample out;
  out.id = sample.id;
  out.spacing = sample.spacing;
  Tensor<float> img = sample.image;
  Tensor<float> lab = sample.label;
  for (int d = 0; d < 3; ++d) {
    img = img.slice(1 + d, start[d], size[d]);
    lab = lab.slice(d, start[d], size[d]);
  }
  out.image = img;
  out.label = lab;
  return out;
}

VolumeSample random_patch(const VolumeSample& sample, int64_t patch, std::mt19937_64& rng) {
  const Shape& s = sample.image.shape();
  std::array<int64_t, 3> start{};
  for (int d = 0; d < 3; ++d) {
    const int64_t extent = s[1 + d];
    if (patch > extent)
      throw UsageError("patch " + std::to_string(patch) + " exceeds volume extent " +
                       std::to_string(extent));
    std::uniform_int_distribution<int64_t> corner(0, extent - patch);
    start[d] = corner(rng);
  }
  return crop_sample(sample, start, {patch, patch, patch});
}

void save_dataset(const std::string& dir, const std::vector<VolumeSample>& samples) {
  fs::create_directories(dir);
  for (const VolumeSample& s : samples) {
    const fs::path sub = fs::path(dir) / s.id;
    fs::create_directories(sub);
    save_ftensor_file((sub / "image.ft").string(), s.image);
    save_ftensor_file((sub / "label.ft").string(), s.label);
    std::ofstream meta(sub / "meta");
    if (!meta) throw IoError("cannot write " + (sub / "meta").string());
    meta << "id = " << s.id << "\n";
    meta << "spacing = " << s.spacing[0] << "," << s.spacing[1] << "," << s.spacing[2] << "\n";
  }
}

std::vector<VolumeSample> load_dataset(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory '" + dir + "' does not exist");
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_directory() && fs::exists(entry.path() / "image.ft"))
      ids.push_back(entry.path().filename().string());
  std::sort(ids.begin(), ids.end());
  std::vector<VolumeSample> out;
  out.reserve(ids.size());
  for (const std::string& id : ids) {
    const fs::path sub = fs::path(dir) / id;
    VolumeSample s;
    s.id = id;
    s.image = load_ftensor_file<float>((sub / "image.ft").string());
    s.label = load_ftensor_file<float>((sub / "label.ft").string());
    std::ifstream meta(sub / "meta");
    if (meta) {
      std::ostringstream buf;
      buf << meta.rdbuf();
      KvMap kv = parse_kv_text(buf.str());
      if (kv.count("id")) s.id = kv["id"];
      if (kv.count("spacing")) {
        std::istringstream sp(kv["spacing"]);
        char comma;
        sp >> s.spacing[0] >> comma >> s.spacing[1] >> comma >> s.spacing[2];
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace factorizer
