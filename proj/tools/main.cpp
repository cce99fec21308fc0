#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "factorizer/ablate.hpp"
#include "factorizer/checkpoint.hpp"
#include "factorizer/config.hpp"
#include "factorizer/data.hpp"
#include "factorizer/infer.hpp"
#include "factorizer/io.hpp"
#include "factorizer/train.hpp"

namespace fs = std::filesystem;
using namespace factorizer;

namespace {

uint64_t fnv1a_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  uint64_t h = 1469598103934665603ull;
  char buf[65536];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!is) break;
  }
  return h;
}

KvMap merge_kv(KvMap base, const KvMap& overlay) {
  for (const auto& [k, v] : overlay) base[k] = v;
  return base;
}

KvMap kv_from_sets(const std::vector<std::string>& sets) {
  KvMap out;
  for (const std::string& s : sets) {
    const size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set expects key=value, got '" + s + "'");
    std::string key = s.substr(0, eq);
    std::string value = s.substr(eq + 1);
    auto strip = [](std::string& t) {
      while (!t.empty() && (t.front() == ' ' || t.front() == '\t')) t.erase(t.begin());
      while (!t.empty() && (t.back() == ' ' || t.back() == '\t')) t.pop_back();
    };
    strip(key);
    strip(value);
    out[key] = value;
  }
  return out;
}

KvMap collect_kv(const std::string& config_path, const std::vector<std::string>& sets) {
  KvMap kv;
  if (!config_path.empty()) kv = load_kv_file(config_path);
  return merge_kv(std::move(kv), kv_from_sets(sets));
}

SyntheticTaskSpec task_from_kv(const KvMap& map) {
  KvView v(map);
  SyntheticTaskSpec spec;
  spec.extent = v.get_int("task.extent", spec.extent);
  spec.channels = v.get_int("task.channels", spec.channels);
  spec.classes = v.get_int("task.classes", spec.classes);
  spec.blobs_min = v.get_int("task.blobs_min", spec.blobs_min);
  spec.blobs_max = v.get_int("task.blobs_max", spec.blobs_max);
  spec.radius_min = v.get_double("task.radius_min", spec.radius_min);
  spec.radius_max = v.get_double("task.radius_max", spec.radius_max);
  spec.noise_sigma = v.get_double("task.noise", spec.noise_sigma);
  spec.count = v.get_int("task.count", spec.count);
  spec.seed = static_cast<uint64_t>(v.get_int("task.seed", 0));
  if (v.has("task.contrast")) {
    // rows separated by ';', channel values by ','
    spec.contrast.clear();
    std::istringstream rows(v.get_str("task.contrast", ""));
    std::string row;
    while (std::getline(rows, row, ';')) {
      std::vector<double> values;
      std::istringstream cells(row);
      std::string cell;
      while (std::getline(cells, cell, ',')) values.push_back(std::stod(cell));
      spec.contrast.push_back(std::move(values));
    }
  }
  return spec;
}

TrainConfig train_from_kv(const KvMap& map) {
  KvView v(map);
  TrainConfig cfg;
  cfg.steps = v.get_int("train.steps", cfg.steps);
  cfg.batch_size = v.get_int("train.batch_size", cfg.batch_size);
  cfg.grad_accumulation = v.get_int("train.grad_accumulation", cfg.grad_accumulation);
  cfg.base_lr = v.get_double("train.base_lr", cfg.base_lr);
  cfg.weight_decay = v.get_double("train.weight_decay", cfg.weight_decay);
  cfg.warmup_steps = v.get_int("train.warmup_steps", cfg.warmup_steps);
  cfg.patch_size = v.get_int("train.patch_size", cfg.patch_size);
  cfg.checkpoint_every = v.get_int("train.checkpoint_every", cfg.checkpoint_every);
  cfg.activation = activation_from_string(v.get_str("train.activation", "softmax"));
  cfg.augment_enabled = v.get_bool("train.augment", cfg.augment_enabled);
  return cfg;
}

InferConfig infer_from_kv(const KvMap& map, int64_t default_window) {
  KvView v(map);
  InferConfig cfg;
  cfg.window = v.get_int("infer.window", default_window);
  cfg.overlap = v.get_double("infer.overlap", cfg.overlap);
  cfg.threshold = v.get_double("infer.threshold", cfg.threshold);
  cfg.activation = activation_from_string(v.get_str("infer.activation", "softmax"));
  return cfg;
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::istringstream is(csv);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

int cmd_gen_data(const std::string& out_dir, const std::string& config,
                 const std::vector<std::string>& sets, int64_t count, int64_t seed) {
  KvMap kv = collect_kv(config, sets);
  SyntheticTaskSpec spec = task_from_kv(kv);
  if (count >= 0) spec.count = count;
  if (seed >= 0) spec.seed = static_cast<uint64_t>(seed);
  std::vector<VolumeSample> samples = generate(spec);
  save_dataset(out_dir, samples);
  std::cout << "wrote " << samples.size() << " samples to " << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& out_dir,
              const std::string& config, const std::vector<std::string>& sets, int64_t seed) {
  std::vector<VolumeSample> data = load_dataset(data_dir);
  if (data.empty()) throw UsageError("no samples under " + data_dir);
  KvMap kv = collect_kv(config, sets);
  TrainConfig tcfg = train_from_kv(kv);
  if (seed >= 0) tcfg.seed = static_cast<uint64_t>(seed);

  const int64_t classes = foreground_classes(data);
  KvMap model_defaults;
  model_defaults["model.in_channels"] = std::to_string(data[0].image.shape()[0]);
  model_defaults["model.out_channels"] = std::to_string(
      tcfg.activation == Activation::kSoftmax ? classes + 1 : classes);
  model_defaults["model.patch_size"] = std::to_string(tcfg.patch_size);
  FactorizerConfig mcfg = factorizer_config_from_kv(merge_kv(model_defaults, kv));
  tcfg.patch_size = mcfg.patch_size;

  FactorizerModel<float> model = FactorizerModel<float>::build(mcfg, tcfg.seed);
  std::cout << "model parameters: " << model.parameter_count() << "\n";
  TrainResult result = train(model, data, tcfg, out_dir);
  if (result.aborted_on_nan) {
    std::cerr << "training aborted on non-finite loss at step " << result.steps_run
              << "; last good checkpoint: " << result.final_checkpoint << "\n";
    return 3;
  }
  std::cout << "final loss: " << result.final_loss << "\n";
  std::cout << "checkpoint " << result.final_checkpoint << " fnv1a="
            << std::hex << fnv1a_file(result.final_checkpoint) << std::dec << "\n";
  return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& data_dir, const std::string& out_dir,
              const std::string& config, const std::vector<std::string>& sets, int64_t seed) {
  FactorizerModel<float> model = load_checkpoint(ckpt);
  if (seed >= 0) model.set_seed(static_cast<uint64_t>(seed));
  KvMap kv = collect_kv(config, sets);
  InferConfig icfg = infer_from_kv(kv, model.config().patch_size);
  std::vector<VolumeSample> data = load_dataset(data_dir);
  for (const VolumeSample& raw : data) {
    VolumeSample s = preprocess(raw);
    InferenceOutput out = sliding_window_infer(model, s.image, icfg);
    const fs::path sub = fs::path(out_dir) / raw.id;
    fs::create_directories(sub);
    save_ftensor_file((sub / "probs.ft").string(), out.probabilities);
    save_ftensor_file((sub / "pred.ft").string(), out.label_map);
    std::cout << raw.id << " done\n";
  }
  return 0;
}

int cmd_eval(const std::string& data_dir, const std::string& pred_dir,
             const std::string& out_path) {
  std::vector<VolumeSample> data = load_dataset(data_dir);
  const int64_t classes = foreground_classes(data);
  std::vector<EvalCase> cases;
  for (const VolumeSample& s : data) {
    const fs::path pred_file = fs::path(pred_dir) / s.id / "pred.ft";
    if (!fs::exists(pred_file))
      throw IoError("missing prediction " + pred_file.string());
    Tensor<float> pred = load_ftensor_file<float>(pred_file.string());
    EvalCase c;
    c.case_id = s.id;
    c.label = s.label;
    c.spacing = s.spacing;
    if (pred.rank() == 3) {
      for (int64_t k = 1; k <= classes; ++k) c.class_masks.push_back(label_equals(pred, k));
    } else if (pred.rank() == 4) {
      for (int64_t k = 0; k < pred.shape()[0]; ++k) {
        Tensor<float> row = pred.slice(0, k, 1);
        c.class_masks.push_back(label_equals(
            row.reshape({pred.shape()[1], pred.shape()[2], pred.shape()[3]}), 1));
      }
    } else {
      throw IoError("prediction for " + s.id + " must be a label map or per-class masks");
    }
    cases.push_back(std::move(c));
  }
  const std::string report = metrics_report(evaluate_cases(cases, classes));
  if (out_path.empty()) {
    std::cout << report;
  } else {
    std::ofstream os(out_path);
    os << report;
    std::cout << "wrote " << out_path << "\n";
  }
  return 0;
}

int cmd_ablate(const std::string& ckpt, const std::string& data_dir, const std::string& plan,
               const std::string& out_path, const std::string& config,
               const std::vector<std::string>& sets, int64_t seed) {
  FactorizerModel<float> model = load_checkpoint(ckpt);
  if (seed >= 0) model.set_seed(static_cast<uint64_t>(seed));
  KvMap kv = collect_kv(config, sets);
  InferConfig icfg = infer_from_kv(kv, model.config().patch_size);
  std::vector<VolumeSample> data = load_dataset(data_dir);
  std::vector<AblationRow> rows =
      run_ablations(model, data, ablation_plan_from_string(plan), icfg);
  const int64_t classes = icfg.activation == Activation::kSoftmax
                              ? model.config().out_channels - 1
                              : model.config().out_channels;
  const std::string table = ablation_table(rows, classes);
  if (out_path.empty()) {
    std::cout << table;
  } else {
    std::ofstream os(out_path);
    os << table;
    std::cout << "wrote " << out_path << "\n";
  }
  return 0;
}

int cmd_inspect(const std::string& ckpt, const std::string& data_dir, const std::string& case_id,
                const std::string& layers_csv, const std::string& out_dir, int64_t seed) {
  FactorizerModel<float> model = load_checkpoint(ckpt);
  if (seed >= 0) model.set_seed(static_cast<uint64_t>(seed));
  std::vector<VolumeSample> data = load_dataset(data_dir);
  if (data.empty()) throw UsageError("no samples under " + data_dir);
  const VolumeSample* chosen = &data[0];
  if (!case_id.empty()) {
    chosen = nullptr;
    for (const VolumeSample& s : data)
      if (s.id == case_id) chosen = &s;
    if (!chosen) throw UsageError("case '" + case_id + "' not found");
  }
  VolumeSample s = preprocess(*chosen);
  // Factor maps are captured on one window-sized forward pass: take the
  // centered window of the volume.
  const int64_t w = model.config().patch_size;
  Tensor<float> img = pad_reflect(s.image, {w, w, w});
  std::array<int64_t, 3> start;
  for (int d = 0; d < 3; ++d) start[d] = (img.shape()[1 + d] - w) / 2;
  for (int d = 0; d < 3; ++d) img = img.slice(1 + d, start[d], w);

  std::vector<int> layers = parse_int_list(layers_csv);
  const Shape& is = img.shape();
  Var<float> x(img.reshape({1, is[0], is[1], is[2], is[3]}));
  auto captures = model.capture_components(x, layers);
  fs::create_directories(out_dir);
  for (auto& [layer, cm] : captures) {
    const Shape& ms = cm.maps.shape();  // (1, heads*rank, h, w, d)
    Tensor<float> maps = cm.maps.reshape({ms[1], ms[2], ms[3], ms[4]});
    const std::string base = (fs::path(out_dir) / ("layer" + std::to_string(layer))).string();
    save_ftensor_file(base + "_components.ft", maps);
    save_ftensor_file(base + "_channel_factors.ft", cm.channel_factors);
    std::cout << "layer " << layer << ": " << ms[1] << " component maps of "
              << ms[2] << "x" << ms[3] << "x" << ms[4] << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Factorizer: NMF-based volumetric segmentation toolkit"};
  app.require_subcommand(1);

  std::string config, data_dir, out_dir, ckpt, pred_dir, out_path, plan = "all";
  std::string case_id, layers = "1";
  std::vector<std::string> sets;
  int64_t seed = -1, count = -1;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config, "key = value configuration file");
    cmd->add_option("--set", sets, "override a config key (key=value), repeatable");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--out", out_dir, "output dataset directory")->required();
  gen->add_option("--count", count, "number of samples");
  gen->add_option("--seed", seed, "generation seed");
  add_common(gen);

  CLI::App* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--data", data_dir, "training dataset directory")->required();
  tr->add_option("--out", out_dir, "run output directory")->required();
  tr->add_option("--seed", seed, "training / model seed");
  add_common(tr);

  CLI::App* inf = app.add_subcommand("infer", "sliding-window inference");
  inf->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  inf->add_option("--data", data_dir, "dataset directory")->required();
  inf->add_option("--out", out_dir, "prediction output directory")->required();
  inf->add_option("--seed", seed, "override the stored factor-init seed");
  add_common(inf);

  CLI::App* ev = app.add_subcommand("eval", "score predictions against ground truth");
  ev->add_option("--data", data_dir, "dataset directory (ground truth)")->required();
  ev->add_option("--pred", pred_dir, "prediction directory")->required();
  ev->add_option("--out", out_path, "report file (stdout when omitted)");
  ev->add_option("--seed", seed, "accepted for interface symmetry (evaluation is deterministic)");

  CLI::App* ab = app.add_subcommand("ablate", "inference-time ablation sweeps");
  ab->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  ab->add_option("--data", data_dir, "eval dataset directory")->required();
  ab->add_option("--plan", plan, "keep-first|leave-one-out|t-sweep|r-sweep|all");
  ab->add_option("--out", out_path, "table file (stdout when omitted)");
  ab->add_option("--seed", seed, "override the stored factor-init seed");
  add_common(ab);

  CLI::App* ins = app.add_subcommand("inspect-components",
                                     "dump per-head NMF factor maps as FTensor files");
  ins->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  ins->add_option("--data", data_dir, "dataset directory")->required();
  ins->add_option("--case", case_id, "case id (default: first)");
  ins->add_option("--layers", layers, "comma-separated 1-based NMF layer indices");
  ins->add_option("--out", out_dir, "output directory")->required();
  ins->add_option("--seed", seed, "override the stored factor-init seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(out_dir, config, sets, count, seed);
    if (tr->parsed()) return cmd_train(data_dir, out_dir, config, sets, seed);
    if (inf->parsed()) return cmd_infer(ckpt, data_dir, out_dir, config, sets, seed);
    if (ev->parsed()) return cmd_eval(data_dir, pred_dir, out_path);
    if (ab->parsed()) return cmd_ablate(ckpt, data_dir, plan, out_path, config, sets, seed);
    if (ins->parsed()) return cmd_inspect(ckpt, data_dir, case_id, layers, out_dir, seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
