#include "factorizer/train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "factorizer/checkpoint.hpp"

namespace fs = std::filesystem;

namespace factorizer {

int64_t foreground_classes(const std::vector<VolumeSample>& samples) {
  float mx = 0.0f;
  for (const VolumeSample& s : samples)
    for (float v : s.label.data()) mx = std::max(mx, v);
  return static_cast<int64_t>(mx);
}

Tensor<float> encode_target(const Tensor<float>& label, int64_t out_channels, Activation act) {
  const int64_t first = act == Activation::kSoftmax ? 0 : 1;
  return one_hot(label, out_channels, first);
}

std::vector<Tensor<float>> build_target_pyramid(const std::vector<Tensor<float>>& labels,
                                                int64_t out_channels, Activation act,
                                                int levels) {
  std::vector<Tensor<float>> out;
  for (int level = 0; level < levels; ++level) {
    const int64_t factor = int64_t(1) << level;
    std::vector<Tensor<float>> per_item;
    per_item.reserve(labels.size());
    for (const Tensor<float>& label : labels) {
      Tensor<float> onehot = encode_target(label, out_channels, act);
      if (factor > 1) onehot = maxpool_downsample_onehot(onehot, factor);
      const Shape& s = onehot.shape();
      per_item.push_back(onehot.reshape({1, s[0], s[1], s[2], s[3]}));
    }
    out.push_back(Tensor<float>::concat(per_item, 0));
  }
  return out;
}

TrainResult train(FactorizerModel<float>& model, const std::vector<VolumeSample>& train_set,
                  const TrainConfig& cfg, const std::string& out_dir) {
  if (train_set.empty()) throw UsageError("training set is empty");
  if (cfg.warmup_steps >= cfg.steps)
    throw ConfigError("warmup_steps must be < steps");
  const int64_t out_channels = model.config().out_channels;
  const int64_t classes = foreground_classes(train_set);
  const int64_t needed =
      cfg.activation == Activation::kSoftmax ? classes + 1 : classes;
  if (out_channels != needed)
    throw ConfigError("model has " + std::to_string(out_channels) + " output channels but the " +
                      std::string(to_string(cfg.activation)) + " task needs " +
                      std::to_string(needed));
  if (cfg.patch_size != model.config().patch_size)
    throw ConfigError("train patch_size " + std::to_string(cfg.patch_size) +
                      " differs from model patch_size " +
                      std::to_string(model.config().patch_size));

  fs::create_directories(out_dir);
  std::ofstream log(fs::path(out_dir) / "metrics.tsv");
  if (!log) throw IoError("cannot write metric log under " + out_dir);
  log << "step\tlr\tloss\n";
  log.precision(8);

  std::vector<VolumeSample> prepared;
  prepared.reserve(train_set.size());
  for (const VolumeSample& s : train_set) prepared.push_back(preprocess(s));

  std::mt19937_64 sample_rng(mix_seed(cfg.seed, 1));
  std::mt19937_64 patch_rng(mix_seed(cfg.seed, 2));
  std::mt19937_64 augment_rng(mix_seed(cfg.seed, 3));
  std::uniform_int_distribution<size_t> pick(0, prepared.size() - 1);

  AdamWConfig opt_cfg;
  opt_cfg.weight_decay = cfg.weight_decay;
  AdamW<float> optimizer(model.parameters(), opt_cfg);

  const int levels = model.config().deep_supervision ? 3 : 1;
  TrainResult result;
  std::string last_checkpoint;

  auto save_at = [&](const std::string& name) {
    const std::string path = (fs::path(out_dir) / name).string();
    save_checkpoint(path, model);
    last_checkpoint = path;
    return path;
  };

  for (int64_t step = 0; step < cfg.steps; ++step) {
    model.set_step(static_cast<uint64_t>(step));
    const double lr = lr_at(cfg.base_lr, step, cfg.warmup_steps, cfg.steps);

    double loss_value = 0.0;
    for (int64_t micro = 0; micro < cfg.grad_accumulation; ++micro) {
      std::vector<Tensor<float>> images, labels;
      for (int64_t b = 0; b < cfg.batch_size; ++b) {
        const VolumeSample& src = prepared[pick(sample_rng)];
        VolumeSample patch = random_patch(src, cfg.patch_size, patch_rng);
        if (cfg.augment_enabled) patch = augment(patch, cfg.augment, augment_rng);
        const Shape& is = patch.image.shape();
        images.push_back(patch.image.reshape({1, is[0], is[1], is[2], is[3]}));
        labels.push_back(patch.label);
      }
      Var<float> x(Tensor<float>::concat(images, 0));
      std::vector<Tensor<float>> targets =
          build_target_pyramid(labels, out_channels, cfg.activation, levels);
      NetworkOutput<float> out = model.forward(x, true);
      Var<float> loss = total_loss(out, targets, cfg.activation);
      if (cfg.grad_accumulation > 1)
        loss = mul_scalar(loss, 1.0f / static_cast<float>(cfg.grad_accumulation));
      loss.backward();
      loss_value += static_cast<double>(loss.value().item());
    }

    if (!std::isfinite(loss_value)) {
      result.aborted_on_nan = true;
      result.steps_run = step;
      result.final_loss = loss_value;
      result.final_checkpoint = last_checkpoint;
      log << step << '\t' << lr << '\t' << loss_value << "\t# aborted: non-finite loss\n";
      return result;
    }

    optimizer.step(lr);
    log << step << '\t' << lr << '\t' << loss_value << '\n';
    result.final_loss = loss_value;

    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
        step + 1 < cfg.steps)
      save_at("ckpt_step" + std::to_string(step + 1) + ".fckp");
  }

  model.set_step(static_cast<uint64_t>(cfg.steps));
  result.steps_run = cfg.steps;
  result.final_checkpoint = save_at("ckpt_final.fckp");
  return result;
}

}  // namespace factorizer
