#pragma once

#include <array>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "factorizer/blocks.hpp"

namespace factorizer {

struct FactorizerConfig {
  int64_t in_channels = 2;
  int64_t base_channels = 32;  // channels after the stem; doubled per stage
  int64_t out_channels = 3;    // logit channels
  MatricizeMode mode = MatricizeMode::kSW;
  int64_t head_dim = 8;  // E
  int64_t patch = 8;     // window edge P at full resolution
  NmfConfig nmf;
  int64_t blocks_per_stage = 1;
  bool deep_supervision = true;
  bool positional_embedding = true;
  int64_t patch_size = 64;  // training spatial extent (cubic)
};

inline constexpr int kNumStages = 4;  // resolution drops to 1/16 in the bridge

/// Matricize geometry actually used at resolution level `s` (0 = full
/// resolution, kNumStages = bridge). The window shrinks to the spatial
/// extent where needed; a shifted window degenerates to a plain local
/// window when the shrunken edge has no integral half-shift.
inline MatricizeConfig stage_matricize(const FactorizerConfig& cfg, int s) {
  MatricizeConfig m;
  m.head_dim = cfg.head_dim;
  m.mode = cfg.mode;
  if (cfg.mode == MatricizeMode::kGlobal) return m;
  const int64_t extent = cfg.patch_size >> s;
  m.patch = std::min(cfg.patch, extent);
  if (cfg.mode == MatricizeMode::kSW && (m.patch < 2 || m.patch % 2 != 0))
    m.mode = MatricizeMode::kLocal;
  return m;
}

inline void validate_config(const FactorizerConfig& cfg) {
  if (cfg.in_channels < 1 || cfg.out_channels < 1 || cfg.base_channels < 1)
    throw ConfigError("channel counts must be positive");
  if (cfg.patch_size < 16 || cfg.patch_size % 16 != 0)
    throw ConfigError("patch_size must be a positive multiple of 16, got " +
                      std::to_string(cfg.patch_size));
  if (cfg.blocks_per_stage < 1) throw ConfigError("blocks_per_stage must be >= 1");
  for (int s = 0; s <= kNumStages; ++s) {
    const int64_t channels = cfg.base_channels << s;
    if (channels % cfg.head_dim != 0)
      throw ConfigError("head_dim " + std::to_string(cfg.head_dim) +
                        " must divide stage channels " + std::to_string(channels) +
                        " (stage " + std::to_string(s) + ")");
    MatricizeConfig m = stage_matricize(cfg, s);
    if (m.mode != MatricizeMode::kGlobal) {
      const int64_t extent = cfg.patch_size >> s;
      if (extent % m.patch != 0)
        throw ConfigError("stage " + std::to_string(s) + " extent " + std::to_string(extent) +
                          " must be a multiple of window " + std::to_string(m.patch));
    }
  }
}

struct NmfOverride {
  std::optional<int64_t> iterations;
  std::optional<int64_t> rank;
  std::optional<NmfSolver> solver;
  bool any() const { return iterations.has_value() || rank.has_value() || solver.has_value(); }
};

template <typename T>
struct NetworkOutput {
  Var<T> logits;            // (B, out_channels, H, W, D)
  std::vector<Var<T>> aux;  // deep supervision: {1/2 res, 1/4 res}
};

/// Spatial factor maps of one NMF layer arranged back into image space
/// (one map per head x rank component), plus the channel-side factors.
template <typename T>
struct ComponentMaps {
  Tensor<T> maps;             // (B, heads*rank, H, W, D)
  Tensor<T> channel_factors;  // (B', M, R)
};

template <typename T>
struct ConvParams {
  Var<T> weight;
  Var<T> bias;
};

template <typename T>
class FactorizerModel {
 public:
  static FactorizerModel build(const FactorizerConfig& cfg, uint64_t seed) {
    return build_ablated(cfg, seed, true, true);
  }

  /// Variant with subblocks removed at construction (trained-from-scratch
  /// ablations). Removed subblocks carry no parameters.
  static FactorizerModel build_ablated(const FactorizerConfig& cfg, uint64_t seed,
                                       bool with_nmf, bool with_mlp) {
    validate_config(cfg);
    FactorizerModel m;
    m.cfg_ = cfg;
    m.seed_ = seed;
    m.with_nmf_ = with_nmf;
    m.with_mlp_ = with_mlp;
    std::mt19937_64 rng(seed);
    m.build_body(rng);
    return m;
  }

  NetworkOutput<T> forward(const Var<T>& x, bool training) {
    return forward_impl(x, training, nullptr, nullptr);
  }

  /// Inference pass returning the spatial NMF factor maps of the requested
  /// layers (1-based forward order).
  std::map<int, ComponentMaps<T>> capture_components(const Var<T>& x,
                                                     const std::vector<int>& layers) {
    std::set<int> request;
    for (int l : layers) {
      check_layer_index(l);
      request.insert(l);
    }
    std::map<int, ComponentMaps<T>> out;
    NoGradGuard ng;
    forward_impl(x, false, &request, &out);
    return out;
  }

  const FactorizerConfig& config() const { return cfg_; }
  uint64_t seed() const { return seed_; }
  uint64_t step() const { return step_; }
  void set_step(uint64_t step) { step_ = step; }
  /// Reseeds the NMF factor-initialization stream (weights untouched).
  void set_seed(uint64_t seed) { seed_ = seed; }

  std::vector<std::pair<std::string, Var<T>>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Var<T>>>& parameters() const { return params_; }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, v] : params_) n += v.value().numel();
    return n;
  }

  Var<T> param(const std::string& name) const {
    for (const auto& [n, v] : params_)
      if (n == name) return v;
    throw UsageError("unknown parameter '" + name + "'");
  }

  int nmf_layer_count() const { return static_cast<int>(short_circuited_.size()); }

  /// Replace the NMF subblock of the given layers (1-based, forward order)
  /// by the identity on their residual path. Non-destructive.
  void short_circuit(const std::vector<int>& layer_indices) {
    for (int l : layer_indices) {
      check_layer_index(l);
      short_circuited_[l - 1] = 1;
    }
  }

  void clear_short_circuits() { short_circuited_.assign(short_circuited_.size(), 0); }

  void override_nmf(std::optional<int64_t> iterations, std::optional<int64_t> rank,
                    std::optional<NmfSolver> solver) {
    override_ = NmfOverride{iterations, rank, solver};
  }

  void clear_overrides() { override_ = NmfOverride{}; }

 private:
  struct Stage {
    std::vector<FactorizerBlock<T>> blocks;
  };

  Var<T> reg(const std::string& name, Tensor<T> t) {
    Var<T> v = make_param(std::move(t));
    params_.emplace_back(name, v);
    return v;
  }

  void reg_existing(const std::string& name, const Var<T>& v) {
    params_.emplace_back(name, v);
  }

  Stage make_stage(const std::string& prefix, int64_t channels, int level,
                   std::mt19937_64& rng) {
    Stage st;
    for (int64_t i = 0; i < cfg_.blocks_per_stage; ++i) {
      FactorizerBlock<T> b = make_factorizer_block<T>(channels, stage_matricize(cfg_, level),
                                                      cfg_.nmf, with_nmf_, with_mlp_, rng);
      const std::string bp = prefix + ".block" + std::to_string(i) + ".";
      if (b.has_nmf) {
        reg_existing(bp + "norm1.gain", b.norm1.gain);
        reg_existing(bp + "norm1.offset", b.norm1.offset);
        reg_existing(bp + "nmf_in.weight", b.wnmf.in_proj.weight);
        reg_existing(bp + "nmf_in.bias", b.wnmf.in_proj.bias);
        reg_existing(bp + "nmf_out.weight", b.wnmf.out_proj.weight);
        reg_existing(bp + "nmf_out.bias", b.wnmf.out_proj.bias);
      }
      if (b.has_mlp) {
        reg_existing(bp + "norm2.gain", b.norm2.gain);
        reg_existing(bp + "norm2.offset", b.norm2.offset);
        reg_existing(bp + "mlp_in.weight", b.mlp_in.weight);
        reg_existing(bp + "mlp_in.bias", b.mlp_in.bias);
        reg_existing(bp + "mlp_out.weight", b.mlp_out.weight);
        reg_existing(bp + "mlp_out.bias", b.mlp_out.bias);
      }
      st.blocks.push_back(std::move(b));
    }
    return st;
  }

  void build_body(std::mt19937_64& rng) {
    const int64_t c0 = cfg_.base_channels;
    stem_.weight = reg("stem.weight", fan_in_uniform<T>({c0, cfg_.in_channels, 3, 3, 3},
                                                        cfg_.in_channels * 27, rng));
    stem_.bias = reg("stem.bias", Tensor<T>::zeros({c0}));
    for (int s = 0; s < kNumStages; ++s) {
      const int64_t c = c0 << s;
      enc_.push_back(make_stage("enc" + std::to_string(s), c, s, rng));
      ConvParams<T> down;
      down.weight = reg("down" + std::to_string(s) + ".weight",
                        fan_in_uniform<T>({2 * c, c, 2, 2, 2}, c * 8, rng));
      down.bias = reg("down" + std::to_string(s) + ".bias", Tensor<T>::zeros({2 * c}));
      down_.push_back(down);
    }
    const int64_t cb = c0 << kNumStages;
    if (cfg_.positional_embedding) {
      const int64_t e = cfg_.patch_size / 16;
      pos_embed_ = reg("bridge.pos_embed", gaussian_init<T>({cb, e, e, e}, 0.02, rng));
    }
    bridge_ = make_stage("bridge", cb, kNumStages, rng);
    for (int s = kNumStages - 1; s >= 0; --s) {
      const int64_t c = c0 << s;
      up_[s].weight = reg("up" + std::to_string(s) + ".weight",
                          fan_in_uniform<T>({2 * c, c, 2, 2, 2}, 2 * c * 8, rng));
      up_[s].bias = reg("up" + std::to_string(s) + ".bias", Tensor<T>::zeros({c}));
      fuse_[s] = make_pointwise<T>(2 * c, c, rng);
      reg_existing("fuse" + std::to_string(s) + ".weight", fuse_[s].weight);
      reg_existing("fuse" + std::to_string(s) + ".bias", fuse_[s].bias);
      dec_[s] = make_stage("dec" + std::to_string(s), c, s, rng);
    }
    for (int k = 0; k < 3; ++k) {
      heads_[k] = make_pointwise<T>(c0 << k, cfg_.out_channels, rng);
      reg_existing("head" + std::to_string(k) + ".weight", heads_[k].weight);
      reg_existing("head" + std::to_string(k) + ".bias", heads_[k].bias);
    }
    short_circuited_.assign(count_nmf_layers(), 0);
  }

  int count_nmf_layers() const {
    int n = 0;
    auto count_stage = [&n](const Stage& st) {
      for (const auto& b : st.blocks)
        if (b.has_nmf) ++n;
    };
    for (const Stage& st : enc_) count_stage(st);
    count_stage(bridge_);
    for (int s = kNumStages - 1; s >= 0; --s) count_stage(dec_[s]);
    return n;
  }

  void check_layer_index(int l) const {
    if (l < 1 || l > nmf_layer_count())
      throw UsageError("NMF layer index " + std::to_string(l) + " outside 1.." +
                       std::to_string(nmf_layer_count()));
  }

  Var<T> run_stage(const Stage& st, Var<T> cur, int& nmf_counter, const std::set<int>* request,
                   std::map<int, ComponentMaps<T>>* captures) {
    for (const FactorizerBlock<T>& b : st.blocks) {
      NmfRuntime rt;
      if (!b.has_nmf) {
        rt.enabled = false;
        cur = b.forward(cur, rt);
        continue;
      }
      ++nmf_counter;
      rt.seed = mix_seed(seed_, static_cast<uint64_t>(nmf_counter), step_);
      rt.enabled = !short_circuited_[nmf_counter - 1];
      if (override_.any()) {
        rt.iterations_override = override_.iterations;
        rt.rank_override = override_.rank;
        rt.solver_override = override_.solver;
      }
      const bool want = request && request->count(nmf_counter) && rt.enabled;
      if (!want) {
        cur = b.forward(cur, rt);
        continue;
      }
      FactorPair<T> fp;
      MatricizedBatch<T> meta;
      cur = b.forward(cur, rt, &fp, &meta);
      // Arrange the spatial factor G back into image space: its R columns
      // become the matrix rows and the reshape is inverted as usual.
      ComponentMaps<T> cm;
      cm.channel_factors = fp.f.value();
      MatricizedBatch<T> comp;
      comp.matrices = constant(fp.g.value().transpose_last2());  // (B', R, N)
      comp.original_shape = meta.original_shape;
      comp.config = meta.config;
      cm.maps = dematricize(comp).value();
      (*captures)[nmf_counter] = std::move(cm);
    }
    return cur;
  }

  NetworkOutput<T> forward_impl(const Var<T>& x, bool training, const std::set<int>* request,
                                std::map<int, ComponentMaps<T>>* captures) {
    const Shape& s = x.shape();
    if (s.size() != 5)
      throw ConfigError("forward expects (B, C, H, W, D), got " + shape_str(s));
    if (s[1] != cfg_.in_channels)
      throw ConfigError("input has " + std::to_string(s[1]) + " channels, model expects " +
                        std::to_string(cfg_.in_channels));
    for (int d = 2; d < 5; ++d)
      if (s[d] % 16 != 0)
        throw ConfigError("spatial extents must be multiples of 16, got " + shape_str(s));
    if (cfg_.positional_embedding)
      for (int d = 2; d < 5; ++d)
        if (s[d] != cfg_.patch_size)
          throw ConfigError("positional embedding fixes input extents to " +
                            std::to_string(cfg_.patch_size) + ", got " + shape_str(s));

    int nmf_counter = 0;
    Var<T> cur = conv3d(x, stem_.weight, stem_.bias, 1, 1);
    std::vector<Var<T>> skips;
    for (int st = 0; st < kNumStages; ++st) {
      cur = run_stage(enc_[st], cur, nmf_counter, request, captures);
      skips.push_back(cur);
      cur = conv3d(cur, down_[st].weight, down_[st].bias, 2, 0);
    }
    if (cfg_.positional_embedding) cur = add_positional_embedding(cur, pos_embed_);
    cur = run_stage(bridge_, cur, nmf_counter, request, captures);

    NetworkOutput<T> out;
    const bool want_aux = training && cfg_.deep_supervision;
    out.aux.resize(want_aux ? 2 : 0);
    for (int st = kNumStages - 1; st >= 0; --st) {
      cur = conv3d_transposed(cur, up_[st].weight, up_[st].bias, 2, 0);
      cur = concat<T>({cur, skips[st]}, 1);
      cur = fuse_[st].forward(cur);
      cur = run_stage(dec_[st], cur, nmf_counter, request, captures);
      if (st == 2 && want_aux) out.aux[1] = heads_[2].forward(cur);
      if (st == 1 && want_aux) out.aux[0] = heads_[1].forward(cur);
      if (st == 0) out.logits = heads_[0].forward(cur);
    }
    return out;
  }

  FactorizerConfig cfg_;
  uint64_t seed_ = 0;
  uint64_t step_ = 0;
  bool with_nmf_ = true;
  bool with_mlp_ = true;
  ConvParams<T> stem_;
  std::vector<Stage> enc_;
  std::vector<ConvParams<T>> down_;
  Stage bridge_;
  Var<T> pos_embed_;
  std::array<ConvParams<T>, kNumStages> up_;
  std::array<PointwiseConv<T>, kNumStages> fuse_;
  std::array<Stage, kNumStages> dec_;
  std::array<PointwiseConv<T>, 3> heads_;
  std::vector<char> short_circuited_;
  NmfOverride override_;
  std::vector<std::pair<std::string, Var<T>>> params_;
};

}  // namespace factorizer
