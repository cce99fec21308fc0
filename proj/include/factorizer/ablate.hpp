#pragma once

#include "factorizer/data.hpp"
#include "factorizer/infer.hpp"

namespace factorizer {

enum class AblationPlan { kKeepFirst, kLeaveOneOut, kTSweep, kRankSweep, kAll };

AblationPlan ablation_plan_from_string(const std::string& s);

struct AblationRow {
  std::string plan;
  std::string param;   // swept value (k, layer, T or R)
  std::string solver;  // "-" unless sweeping ranks
  std::vector<double> class_dice;
  double mean_dice = 0.0;
  double mean_hd95 = 0.0;  // over defined entries
  int64_t hd95_undefined = 0;
};

/// Mean metrics of the model as currently configured over an eval set
/// (samples must already be preprocessed).
AblationRow evaluate_model(FactorizerModel<float>& model,
                           const std::vector<VolumeSample>& eval_set, const InferConfig& icfg,
                           int64_t classes);

/// Runs the requested sweep family over the eval set. Overrides are applied
/// per configuration and cleared afterwards; the model leaves unmodified.
/// Rank requests above the feasible per-layer rank are clamped inside the
/// layers; the table reports the requested value.
std::vector<AblationRow> run_ablations(FactorizerModel<float>& model,
                                       const std::vector<VolumeSample>& eval_set,
                                       AblationPlan plan, const InferConfig& icfg);

std::string ablation_table(const std::vector<AblationRow>& rows, int64_t classes);

}  // namespace factorizer
