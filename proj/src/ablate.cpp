#include "factorizer/ablate.hpp"

#include <numeric>
#include <sstream>

namespace factorizer {

AblationPlan ablation_plan_from_string(const std::string& s) {
  if (s == "keep-first") return AblationPlan::kKeepFirst;
  if (s == "leave-one-out") return AblationPlan::kLeaveOneOut;
  if (s == "t-sweep") return AblationPlan::kTSweep;
  if (s == "r-sweep") return AblationPlan::kRankSweep;
  if (s == "all") return AblationPlan::kAll;
  throw ConfigError("unknown ablation plan '" + s +
                    "' (expected keep-first|leave-one-out|t-sweep|r-sweep|all)");
}

AblationRow evaluate_model(FactorizerModel<float>& model,
                           const std::vector<VolumeSample>& eval_set, const InferConfig& icfg,
                           int64_t classes) {
  std::vector<EvalCase> cases;
  cases.reserve(eval_set.size());
  for (const VolumeSample& s : eval_set) {
    InferenceOutput out = sliding_window_infer(model, s.image, icfg);
    EvalCase c;
    c.case_id = s.id;
    c.label = s.label;
    c.class_masks = std::move(out.class_masks);
    c.spacing = s.spacing;
    cases.push_back(std::move(c));
  }
  std::vector<CaseClassMetrics> rows = evaluate_cases(cases, classes);

  AblationRow out;
  out.class_dice.assign(classes, 0.0);
  std::vector<int64_t> class_n(classes, 0);
  double hd_sum = 0.0;
  int64_t hd_n = 0;
  for (const CaseClassMetrics& r : rows) {
    out.class_dice[r.cls - 1] += r.dice;
    ++class_n[r.cls - 1];
    if (r.hd.defined) {
      hd_sum += r.hd.value;
      ++hd_n;
    } else {
      ++out.hd95_undefined;
    }
  }
  double total = 0.0;
  int64_t total_n = 0;
  for (int64_t k = 0; k < classes; ++k) {
    total += out.class_dice[k];
    total_n += class_n[k];
    if (class_n[k]) out.class_dice[k] /= class_n[k];
  }
  out.mean_dice = total_n ? total / total_n : 0.0;
  out.mean_hd95 = hd_n ? hd_sum / hd_n : 0.0;
  return out;
}

namespace {

AblationRow tagged(AblationRow row, std::string plan, std::string param, std::string solver) {
  row.plan = std::move(plan);
  row.param = std::move(param);
  row.solver = std::move(solver);
  return row;
}

}  // namespace

std::vector<AblationRow> run_ablations(FactorizerModel<float>& model,
                                       const std::vector<VolumeSample>& eval_set,
                                       AblationPlan plan, const InferConfig& icfg) {
  std::vector<VolumeSample> prepared;
  prepared.reserve(eval_set.size());
  for (const VolumeSample& s : eval_set) prepared.push_back(preprocess(s));
  const int64_t classes = icfg.activation == Activation::kSoftmax
                              ? model.config().out_channels - 1
                              : model.config().out_channels;
  model.clear_short_circuits();
  model.clear_overrides();

  std::vector<AblationRow> rows;
  auto eval_now = [&](const std::string& p, const std::string& param, const std::string& sol) {
    rows.push_back(tagged(evaluate_model(model, prepared, icfg, classes), p, param, sol));
  };

  eval_now("baseline", "-", "-");

  const int layers = model.nmf_layer_count();
  const bool all = plan == AblationPlan::kAll;
  if (all || plan == AblationPlan::kKeepFirst) {
    for (int keep = 0; keep <= layers; ++keep) {
      std::vector<int> off;
      for (int l = keep + 1; l <= layers; ++l) off.push_back(l);
      model.short_circuit(off);
      eval_now("keep-first", std::to_string(keep), "-");
      model.clear_short_circuits();
    }
  }
  if (all || plan == AblationPlan::kLeaveOneOut) {
    for (int l = 1; l <= layers; ++l) {
      model.short_circuit({l});
      eval_now("leave-one-out", std::to_string(l), "-");
      model.clear_short_circuits();
    }
  }
  if (all || plan == AblationPlan::kTSweep) {
    for (int64_t t = 1; t <= 20; ++t) {
      model.override_nmf(t, std::nullopt, std::nullopt);
      eval_now("t-sweep", std::to_string(t), "-");
      model.clear_overrides();
    }
  }
  if (all || plan == AblationPlan::kRankSweep) {
    for (NmfSolver solver : {NmfSolver::kMU, NmfSolver::kHALS}) {
      for (int64_t r : {1, 2, 4, 8}) {
        model.override_nmf(std::nullopt, r, solver);
        eval_now("r-sweep", std::to_string(r), to_string(solver));
        model.clear_overrides();
      }
    }
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows, int64_t classes) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "plan\tparam\tsolver";
  for (int64_t k = 1; k <= classes; ++k) os << "\tdice_class_" << k;
  os << "\tmean_dice\tmean_hd95\thd95_undefined\n";
  for (const AblationRow& r : rows) {
    os << r.plan << '\t' << r.param << '\t' << r.solver;
    for (double d : r.class_dice) os << '\t' << d;
    os << '\t' << r.mean_dice << '\t' << r.mean_hd95 << '\t' << r.hd95_undefined << '\n';
  }
  return os.str();
}

}  // namespace factorizer
