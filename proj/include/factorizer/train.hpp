#pragma once

#include <string>
#include <vector>

#include "factorizer/data.hpp"
#include "factorizer/losses.hpp"
#include "factorizer/network.hpp"
#include "factorizer/optim.hpp"

namespace factorizer {

struct TrainConfig {
  int64_t steps = 3000;
  int64_t batch_size = 1;
  int64_t grad_accumulation = 1;  // micro-batches per optimizer step
  double base_lr = 1e-4;
  double weight_decay = 1e-2;
  int64_t warmup_steps = 200;
  uint64_t seed = 0;
  int64_t patch_size = 32;
  int64_t checkpoint_every = 1000;
  Activation activation = Activation::kSoftmax;
  bool augment_enabled = true;
  AugmentPolicy augment;
};

struct TrainResult {
  double final_loss = 0.0;
  std::string final_checkpoint;
  bool aborted_on_nan = false;
  int64_t steps_run = 0;
};

/// Number of foreground classes present in a dataset (max label value).
int64_t foreground_classes(const std::vector<VolumeSample>& samples);

/// One-hot target rows for a label patch under the given activation:
/// softmax keeps a background row 0, sigmoid encodes foreground rows only.
Tensor<float> encode_target(const Tensor<float>& label, int64_t out_channels, Activation act);

/// Target pyramid (full, 1/2, 1/4) for a batch of label patches.
std::vector<Tensor<float>> build_target_pyramid(const std::vector<Tensor<float>>& labels,
                                                int64_t out_channels, Activation act,
                                                int levels);

/// Trains in place, writing checkpoints and a metric log (step, lr, loss)
/// under out_dir. Deterministic given cfg.seed and the model seed. A
/// non-finite loss aborts, keeping the last good checkpoint.
TrainResult train(FactorizerModel<float>& model, const std::vector<VolumeSample>& train_set,
                  const TrainConfig& cfg, const std::string& out_dir);

}  // namespace factorizer
