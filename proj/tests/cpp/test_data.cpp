#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "factorizer/data.hpp"
#include "testutil.hpp"

using namespace factorizer;
using namespace factorizer::testutil;

namespace {

SyntheticTaskSpec small_spec() {
  SyntheticTaskSpec spec;
  spec.extent = 32;
  spec.channels = 2;
  spec.classes = 2;
  spec.blobs_min = 1;
  spec.blobs_max = 2;
  spec.radius_min = 3.0;
  spec.radius_max = 5.0;
  spec.noise_sigma = 0.05;
  spec.count = 3;
  spec.seed = 9;
  return spec;
}

}  // namespace

TEST_CASE("generation is bitwise deterministic in the seed") {
  auto a = generate(small_spec());
  auto b = generate(small_spec());
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(bitwise_equal(a[i].image, b[i].image));
    CHECK(bitwise_equal(a[i].label, b[i].label));
    CHECK(a[i].id == b[i].id);
  }
  SyntheticTaskSpec other = small_spec();
  other.seed = 10;
  CHECK(!bitwise_equal(generate(other)[0].image, a[0].image));
}

TEST_CASE("class voxels carry the configured contrast") {
  SyntheticTaskSpec spec = small_spec();
  spec.count = 6;
  spec.noise_sigma = 0.02;
  auto samples = generate(spec);
  auto contrast = default_contrast(spec.classes, spec.channels);

  for (int64_t cls = 1; cls <= spec.classes; ++cls) {
    double fg_sum = 0.0, bg_sum = 0.0;
    int64_t fg_n = 0, bg_n = 0;
    for (const auto& s : samples) {
      const int64_t voxels = s.label.numel();
      for (int64_t i = 0; i < voxels; ++i) {
        const double v = s.image.data()[i];  // channel 0
        if (static_cast<int64_t>(s.label.data()[i]) == cls) {
          fg_sum += v;
          ++fg_n;
        } else if (s.label.data()[i] == 0.0f) {
          bg_sum += v;
          ++bg_n;
        }
      }
    }
    REQUIRE(fg_n > 0);
    const double measured = fg_sum / fg_n - bg_sum / bg_n;
    CHECK(measured == doctest::Approx(contrast[cls - 1][0]).epsilon(0.15));
  }
}

TEST_CASE("zero blobs give an all-background label map") {
  SyntheticTaskSpec spec = small_spec();
  spec.blobs_min = spec.blobs_max = 0;
  for (const auto& s : generate(spec))
    for (float v : s.label.data()) CHECK(v == 0.0f);
}

TEST_CASE("impossible packings raise a generation error") {
  SyntheticTaskSpec spec = small_spec();
  spec.radius_min = spec.radius_max = 14.0;  // one blob nearly fills the volume
  spec.blobs_min = spec.blobs_max = 4;
  CHECK_THROWS_AS(generate(spec), GenerationError);
}

TEST_CASE("preprocess crops the zero margin and normalizes") {
  // embed a nonzero core inside a zero margin
  VolumeSample s;
  s.id = "pad";
  s.image = Tensor<float>({1, 8, 8, 8});
  s.label = Tensor<float>({8, 8, 8});
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0.5, 1.5);
  for (int64_t i = 2; i < 6; ++i)
    for (int64_t j = 1; j < 5; ++j)
      for (int64_t k = 3; k < 7; ++k) s.image.mutable_data()[(i * 8 + j) * 8 + k] = u(rng);

  // brute-force bounding box oracle
  int64_t lo[3] = {8, 8, 8}, hi[3] = {-1, -1, -1};
  for (int64_t i = 0; i < 8; ++i)
    for (int64_t j = 0; j < 8; ++j)
      for (int64_t k = 0; k < 8; ++k)
        if (s.image.data()[(i * 8 + j) * 8 + k] != 0.0f) {
          lo[0] = std::min(lo[0], i);
          hi[0] = std::max(hi[0], i);
          lo[1] = std::min(lo[1], j);
          hi[1] = std::max(hi[1], j);
          lo[2] = std::min(lo[2], k);
          hi[2] = std::max(hi[2], k);
        }
  VolumeSample out = preprocess(s);
  CHECK(out.image.shape() == Shape{1, hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1});

  // per-channel zero mean, unit variance after the z-score
  SyntheticTaskSpec spec = small_spec();
  VolumeSample gen = generate(spec)[0];
  VolumeSample norm = preprocess(gen);
  CHECK(norm.image.shape() == gen.image.shape());  // texture is nonzero everywhere
  const int64_t n = norm.image.numel() / 2;
  for (int64_t c = 0; c < 2; ++c) {
    double mean = 0.0, var = 0.0;
    for (int64_t i = 0; i < n; ++i) mean += norm.image.data()[c * n + i];
    mean /= n;
    for (int64_t i = 0; i < n; ++i) {
      const double d = norm.image.data()[c * n + i] - mean;
      var += d * d;
    }
    var /= n;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-5);
  }
}

TEST_CASE("augmentation identity and flips") {
  VolumeSample s = generate(small_spec())[0];
  std::mt19937_64 rng(2);
  VolumeSample out = augment(s, AugmentPolicy::disabled(), rng);
  CHECK(bitwise_equal(out.image, s.image));
  CHECK(bitwise_equal(out.label, s.label));

  AugmentPolicy flips = AugmentPolicy::disabled();
  flips.p_flip = 1.0;
  VolumeSample once = augment(s, flips, rng);
  CHECK(!bitwise_equal(once.image, s.image));
  VolumeSample twice = augment(once, flips, rng);
  CHECK(bitwise_equal(twice.image, s.image));
  CHECK(bitwise_equal(twice.label, s.label));
}

TEST_CASE("noise augmentation hits the sampled variance") {
  SyntheticTaskSpec spec = small_spec();
  spec.extent = 48;  // > 1e5 voxels
  spec.count = 1;
  VolumeSample s = generate(spec)[0];
  AugmentPolicy p = AugmentPolicy::disabled();
  p.p_noise = 1.0;
  p.noise_var_min = p.noise_var_max = 0.05;
  std::mt19937_64 rng(3);
  VolumeSample out = augment(s, p, rng);
  double var = 0.0;
  const int64_t n = s.image.numel();
  for (int64_t i = 0; i < n; ++i) {
    const double d = out.image.data()[i] - s.image.data()[i];
    var += d * d;
  }
  var /= n;
  CHECK(var == doctest::Approx(0.05).epsilon(0.10));
  CHECK(bitwise_equal(out.label, s.label));
}

TEST_CASE("intensity-only transforms leave the label untouched") {
  VolumeSample s = generate(small_spec())[0];
  AugmentPolicy p = AugmentPolicy::disabled();
  p.p_smooth = p.p_scale = p.p_shift = p.p_gamma = 1.0;
  std::mt19937_64 rng(4);
  VolumeSample out = augment(s, p, rng);
  CHECK(!bitwise_equal(out.image, s.image));
  CHECK(bitwise_equal(out.label, s.label));
}

TEST_CASE("random patches") {
  VolumeSample s = generate(small_spec())[0];
  std::mt19937_64 rng(5);

  VolumeSample whole = random_patch(s, 32, rng);
  CHECK(bitwise_equal(whole.image, s.image));

  CHECK_THROWS_AS(random_patch(s, 33, rng), UsageError);

  // both corners of a two-position axis are drawn roughly evenly
  VolumeSample coords;
  coords.id = "coords";
  coords.image = Tensor<float>({1, 2, 2, 3});
  coords.label = Tensor<float>({2, 2, 3});
  for (int64_t i = 0; i < 12; ++i)
    coords.image.mutable_data()[i] = static_cast<float>(i);  // position-coded content
  int corner_counts[2] = {0, 0};
  for (int i = 0; i < 400; ++i) {
    VolumeSample patch = random_patch(coords, 2, rng);
    const int corner = static_cast<int>(patch.image.data()[0]) % 3;
    REQUIRE(corner <= 1);
    ++corner_counts[corner];
  }
  CHECK(corner_counts[0] > 140);
  CHECK(corner_counts[1] > 140);

  // a fully interior blob survives any valid crop
  SyntheticTaskSpec tiny = small_spec();
  tiny.blobs_min = tiny.blobs_max = 1;
  tiny.classes = 1;
  tiny.radius_min = 3.0;
  tiny.radius_max = 3.5;
  VolumeSample one = generate(tiny)[0];
  int64_t fg = 0;
  for (float v : one.label.data()) fg += v != 0.0f;
  // find the blob's bounding box; patches that contain it keep every voxel
  int64_t blob_lo = 32, blob_hi = -1;
  for (int64_t i = 0; i < 32; ++i)
    for (int64_t j = 0; j < 32; ++j)
      for (int64_t k = 0; k < 32; ++k)
        if (one.label.data()[(i * 32 + j) * 32 + k] != 0.0f) {
          blob_lo = std::min({blob_lo, i, j, k});
          blob_hi = std::max({blob_hi, i, j, k});
        }
  const int64_t patch = 28;
  if (blob_hi < patch && blob_lo >= 32 - patch) {
    for (int trial = 0; trial < 20; ++trial) {
      VolumeSample cropped = random_patch(one, patch, rng);
      int64_t fg2 = 0;
      for (float v : cropped.label.data()) fg2 += v != 0.0f;
      CHECK(fg2 == fg);
    }
  }
}

TEST_CASE("dataset directory round trip") {
  namespace fs = std::filesystem;
  SyntheticTaskSpec spec = small_spec();
  spec.count = 2;
  spec.spacing = {1.0, 0.5, 2.0};
  auto samples = generate(spec);
  const std::string dir = "dataset_roundtrip_test";
  save_dataset(dir, samples);
  auto loaded = load_dataset(dir);
  REQUIRE(loaded.size() == samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    CHECK(loaded[i].id == samples[i].id);
    CHECK(bitwise_equal(loaded[i].image, samples[i].image));
    CHECK(bitwise_equal(loaded[i].label, samples[i].label));
    CHECK(loaded[i].spacing == samples[i].spacing);
  }
  fs::remove_all(dir);
}
