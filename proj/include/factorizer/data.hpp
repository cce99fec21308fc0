#pragma once

#include <array>
#include <random>
#include <string>
#include <vector>

#include "factorizer/tensor.hpp"

namespace factorizer {

class GenerationError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Multi-channel 3-D image with a voxel-wise integer label map.
struct VolumeSample {
  Tensor<float> image;  // (C, H, W, D)
  Tensor<float> label;  // (H, W, D), values 0..classes
  std::string id;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
};

/// Desk-scale synthetic segmentation task: soft-edged ellipsoidal lesions
/// with class-dependent multi-channel contrast on a textured background.
struct SyntheticTaskSpec {
  int64_t extent = 48;
  int64_t channels = 2;
  int64_t classes = 2;  // foreground classes, labels 1..classes
  int64_t blobs_min = 1, blobs_max = 3;  // lesions per class
  double radius_min = 5.0, radius_max = 9.0;
  std::vector<std::vector<double>> contrast;  // [class][channel]; empty = defaults
  double noise_sigma = 0.1;
  int64_t count = 10;
  uint64_t seed = 0;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
};

std::vector<std::vector<double>> default_contrast(int64_t classes, int64_t channels);

/// Deterministic in `spec.seed`; throws GenerationError when lesions cannot
/// be packed without overlap.
std::vector<VolumeSample> generate(const SyntheticTaskSpec& spec);

/// Crop to the minimal bounding box of nonzero intensities, then z-score
/// normalize per channel (std guarded below 1e-8).
VolumeSample preprocess(const VolumeSample& sample);

struct AugmentPolicy {
  double p_flip = 0.5;  // per spatial axis
  double p_noise = 0.15;
  double noise_var_min = 0.0, noise_var_max = 0.1;
  double p_smooth = 0.15;
  double smooth_sigma_min = 0.5, smooth_sigma_max = 1.5;
  double p_scale = 0.15;
  double scale_min = 0.7, scale_max = 1.3;
  double p_shift = 0.15;
  double shift_min = -0.1, shift_max = 0.1;
  double p_gamma = 0.15;
  double gamma_min = 0.7, gamma_max = 1.5;

  static AugmentPolicy disabled() {
    AugmentPolicy p;
    p.p_flip = p.p_noise = p.p_smooth = p.p_scale = p.p_shift = p.p_gamma = 0.0;
    return p;
  }
};

/// Flips move the label with the image; intensity transforms leave it alone.
VolumeSample augment(const VolumeSample& sample, const AugmentPolicy& policy,
                     std::mt19937_64& rng);

/// Uniformly random cubic crop applied identically to image and label.
VolumeSample random_patch(const VolumeSample& sample, int64_t patch, std::mt19937_64& rng);

VolumeSample crop_sample(const VolumeSample& sample, std::array<int64_t, 3> start,
                         std::array<int64_t, 3> size);

// On-disk layout: one directory per sample holding image.ft, label.ft and a
// line-oriented `meta` file (id, spacing).
void save_dataset(const std::string& dir, const std::vector<VolumeSample>& samples);
std::vector<VolumeSample> load_dataset(const std::string& dir);  // sorted by id

}  // namespace factorizer
