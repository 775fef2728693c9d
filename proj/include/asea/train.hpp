#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "asea/checkpoint.hpp"
#include "asea/model.hpp"
#include "asea/skeleton.hpp"

namespace asea {

enum class OptimizerKind { Adam, SgdMomentum };
enum class Schedule { Constant, StepDecay };

inline std::string to_string(OptimizerKind o) { return o == OptimizerKind::Adam ? "adam" : "sgd"; }
inline std::string to_string(Schedule s) { return s == Schedule::Constant ? "constant" : "step"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd" || s == "sgd-momentum") return OptimizerKind::SgdMomentum;
  throw ConfigError("unknown optimizer '" + s + "' (expected adam or sgd)");
}

inline Schedule parse_schedule(const std::string& s) {
  if (s == "constant") return Schedule::Constant;
  if (s == "step" || s == "step-decay") return Schedule::StepDecay;
  throw ConfigError("unknown lr schedule '" + s + "' (expected constant or step)");
}

struct TrainSpec {
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  std::size_t epochs = 60;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  Schedule schedule = Schedule::Constant;
  std::size_t step_size = 20;  // epochs between decays
  double step_gamma = 0.1;
  std::size_t max_steps = 0;  // 0: no cap
  bool eval_every_epoch = true;

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (schedule == Schedule::StepDecay && (step_size == 0 || !(step_gamma > 0.0))) {
      throw ConfigError("step decay needs a positive step size and factor");
    }
  }

  double lr_at(std::size_t epoch) const {
    if (schedule == Schedule::Constant) return lr;
    return lr * std::pow(step_gamma, static_cast<double>(epoch / step_size));
  }
};

inline nlohmann::json spec_to_json(const TrainSpec& s) {
  return {{"optimizer", to_string(s.optimizer)}, {"lr", s.lr},
          {"weight_decay", s.weight_decay},     {"momentum", s.momentum},
          {"epochs", s.epochs},                 {"batch_size", s.batch_size},
          {"seed", s.seed},                     {"schedule", to_string(s.schedule)},
          {"step_size", s.step_size},           {"step_gamma", s.step_gamma},
          {"max_steps", s.max_steps}};
}

/// Adam (bias-corrected) or SGD with heavy-ball momentum. Weight decay is
/// added to the gradient of parameters registered with decay enabled.
class Optimizer {
 public:
  Optimizer(ParamSet params, const TrainSpec& spec) : params_(std::move(params)), spec_(spec) {
    for (const auto& p : params_.params) {
      m_.emplace_back(p.var.value().size(), 0.0);
      if (spec_.optimizer == OptimizerKind::Adam) v_.emplace_back(p.var.value().size(), 0.0);
    }
  }

  void zero_grad() { params_.zero_grad(); }

  void step(double lr) {
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.params.size(); ++k) {
      auto& p = params_.params[k];
      const Tensor g = p.var.grad();
      auto& w = p.var.mutable_value().storage();
      const double wd = p.decay ? spec_.weight_decay : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i] + wd * w[i];
        if (spec_.optimizer == OptimizerKind::Adam) {
          m_[k][i] = b1 * m_[k][i] + (1.0 - b1) * gi;
          v_[k][i] = b2 * v_[k][i] + (1.0 - b2) * gi * gi;
          w[i] -= lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps);
        } else {
          m_[k][i] = spec_.momentum * m_[k][i] + gi;
          w[i] -= lr * m_[k][i];
        }
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  ParamSet params_;
  TrainSpec spec_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct EvalResult {
  std::size_t samples = 0;
  double accuracy = 0.0;
  std::optional<double> top5;  // only defined for >= 5 classes
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<std::size_t> predictions;
  double loss = 0.0;
  std::size_t correct = 0, top5_hits = 0;
};

/// Metrics from logits [B,K]; ties resolve to the lowest class index.
inline EvalResult metrics_from_logits(const Tensor& logits, const std::vector<std::size_t>& labels) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (labels.size() != B) throw DataError("label count does not match the logits");
  EvalResult r;
  r.samples = B;
  r.confusion.assign(K, std::vector<std::size_t>(K, 0));
  std::size_t hit5 = 0, correct = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= K) throw ConfigError("label " + std::to_string(labels[b]) + " outside the model's " +
                                          std::to_string(K) + " classes");
    std::size_t best = 0, rank = 0;
    const double target = logits.at({b, labels[b]});
    for (std::size_t k = 0; k < K; ++k) {
      const double v = logits.at({b, k});
      if (v > logits.at({b, best})) best = k;
      if (v > target || (v == target && k < labels[b])) ++rank;
    }
    r.predictions.push_back(best);
    ++r.confusion[labels[b]][best];
    if (best == labels[b]) ++correct;
    if (rank < 5) ++hit5;
  }
  r.correct = correct;
  r.top5_hits = hit5;
  r.accuracy = B ? static_cast<double>(correct) / static_cast<double>(B) : 0.0;
  if (K >= 5) r.top5 = B ? static_cast<double>(hit5) / static_cast<double>(B) : 0.0;
  return r;
}

inline void merge_into(EvalResult& acc, const EvalResult& part) {
  if (acc.confusion.empty()) acc.confusion = part.confusion;
  else
    for (std::size_t i = 0; i < acc.confusion.size(); ++i)
      for (std::size_t j = 0; j < acc.confusion.size(); ++j) acc.confusion[i][j] += part.confusion[i][j];
  acc.predictions.insert(acc.predictions.end(), part.predictions.begin(), part.predictions.end());
  acc.samples += part.samples;
  acc.correct += part.correct;
  acc.top5_hits += part.top5_hits;
}

inline void finish_metrics(EvalResult& r) {
  std::size_t trace = 0;
  for (std::size_t i = 0; i < r.confusion.size(); ++i) trace += r.confusion[i][i];
  r.accuracy = r.samples ? static_cast<double>(trace) / static_cast<double>(r.samples) : 0.0;
  if (r.confusion.size() >= 5) r.top5 = r.samples ? static_cast<double>(r.top5_hits) / static_cast<double>(r.samples) : 0.0;
}

inline nlohmann::json eval_to_json(const EvalResult& r) {
  nlohmann::json j = {{"samples", r.samples}, {"accuracy", r.accuracy}, {"loss", r.loss},
                      {"confusion", r.confusion}, {"predictions", r.predictions}};
  j["top5"] = r.top5 ? nlohmann::json(*r.top5) : nlohmann::json("n/a");
  return j;
}

/// Inference over a sequence list in fixed order.
inline EvalResult evaluate(AseaModel& model, const std::vector<SkeletonSequence>& seqs, std::size_t batch_size = 16) {
  if (seqs.empty()) throw DataError("evaluation set is empty");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  for (const auto& s : seqs) {
    if (s.label >= model.config.num_classes) {
      throw ConfigError("class-count mismatch: sample label " + std::to_string(s.label) + " but the model has " +
                        std::to_string(model.config.num_classes) + " classes");
    }
    if (s.joints() != model.graph.n_joints) {
      throw ConfigError("skeleton mismatch: data has " + std::to_string(s.joints()) + " joints, model expects " +
                        std::to_string(model.graph.n_joints));
    }
  }
  NoGradGuard ng;
  EvalResult acc;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < seqs.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(seqs.size(), start + batch_size); ++i) idx.push_back(i);
    Batch b = make_batch(seqs, idx);
    ForwardResult fr = model.forward(b, false);
    EvalResult part = metrics_from_logits(fr.logits.value(), b.labels);
    loss_sum += cross_entropy(fr.logits, b.labels).value().item() * static_cast<double>(idx.size());
    merge_into(acc, part);
  }
  finish_metrics(acc);
  acc.loss = loss_sum / static_cast<double>(acc.samples);
  return acc;
}

/// Checks the corpus class list against the model before evaluating.
inline EvalResult evaluate(AseaModel& model, const Corpus& corpus, std::size_t batch_size = 16) {
  if (corpus.class_names.size() != model.config.num_classes) {
    throw ConfigError("class-count mismatch: data has " + std::to_string(corpus.class_names.size()) +
                      " classes, model has " + std::to_string(model.config.num_classes));
  }
  return evaluate(model, corpus.sequences, batch_size);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double task_loss = 0.0, reg_loss = 0.0, total_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> eval_accuracy;
  double alpha_thresh = 0.0;
  double lr = 0.0;
};

struct RunReport {
  std::vector<EpochRecord> epochs;
  std::size_t steps = 0;
  EvalResult final_eval;  // eval set when given, otherwise the training set
  bool final_on_eval_set = false;
  std::vector<double> alpha_trajectory;
  double wall_clock_s = 0.0;
  nlohmann::json config;
  nlohmann::json spec;
};

/// Deterministic content first; wall-clock time lives under "timing".
inline nlohmann::json report_to_json(const RunReport& r) {
  nlohmann::json ep = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    ep.push_back({{"epoch", e.epoch},
                  {"task_loss", e.task_loss},
                  {"reg_loss", e.reg_loss},
                  {"total_loss", e.total_loss},
                  {"train_accuracy", e.train_accuracy},
                  {"eval_accuracy", e.eval_accuracy ? nlohmann::json(*e.eval_accuracy) : nlohmann::json(nullptr)},
                  {"alpha_thresh", e.alpha_thresh},
                  {"lr", e.lr}});
  }
  return {{"config", r.config},
          {"spec", r.spec},
          {"steps", r.steps},
          {"epochs", ep},
          {"alpha_trajectory", r.alpha_trajectory},
          {"final", eval_to_json(r.final_eval)},
          {"final_split", r.final_on_eval_set ? "eval" : "train"},
          {"timing", {{"wall_clock_s", r.wall_clock_s}}}};
}

inline bool parameters_finite(AseaModel& model) {
  for (const auto& p : model.parameters().params)
    if (!p.var.value().all_finite()) return false;
  return true;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains `model` in place on `train_set`; `eval_set` may be empty.
inline RunReport train(AseaModel& model, const std::vector<SkeletonSequence>& train_set,
                       const std::vector<SkeletonSequence>& eval_set, const TrainSpec& spec,
                       const EpochCallback& on_epoch = {}) {
  spec.validate();
  if (train_set.empty()) throw DataError("training set is empty");
  std::set<std::size_t> classes;
  for (const auto& s : train_set) {
    if (s.label >= model.config.num_classes) {
      throw ConfigError("class-count mismatch: training label " + std::to_string(s.label) + " but the model has " +
                        std::to_string(model.config.num_classes) + " classes");
    }
    classes.insert(s.label);
  }
  if (classes.size() < 2) throw DataError("training set must contain at least 2 classes");

  const auto t0 = std::chrono::steady_clock::now();
  RunReport rep;
  rep.config = config_to_json(model.config);
  rep.spec = spec_to_json(spec);
  Optimizer opt(model.parameters(), spec);
  Rng shuffle_rng(spec.seed ^ 0x5deece66dULL);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  bool capped = false;
  for (std::size_t epoch = 0; epoch < spec.epochs && !capped; ++epoch) {
    shuffle_rng.shuffle(order);
    const double lr = spec.lr_at(epoch);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    double task = 0.0, reg = 0.0;
    std::size_t seen = 0, correct = 0, batches = 0;
    for (std::size_t start = 0; start < order.size(); start += spec.batch_size) {
      if (spec.max_steps && opt.steps() >= spec.max_steps) {
        capped = true;
        break;
      }
      std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                   order.begin() + static_cast<long>(std::min(order.size(), start + spec.batch_size)));
      Batch b = make_batch(train_set, idx);
      const std::size_t step = opt.steps() + 1;
      const std::string where = "step " + std::to_string(step) + " (epoch " + std::to_string(epoch + 1) + ")";
      std::optional<ForwardResult> fr;
      try {
        fr = model.forward(b, true);
      } catch (const ContractError& e) {
        // Forward contracts only fail on non-finite intermediates.
        throw NumericError("non-finite values at " + where + ": " + e.what());
      }
      LossParts lp = total_loss(model, *fr, b.labels);
      if (!std::isfinite(lp.total.value().item())) throw NumericError("non-finite loss at " + where);
      opt.zero_grad();
      backward(lp.total);
      opt.step(lr);
      if (!parameters_finite(model)) throw NumericError("parameters became non-finite at " + where);
      task += lp.task;
      reg += lp.reg;
      ++batches;
      EvalResult m = metrics_from_logits(fr->logits.value(), b.labels);
      correct += m.correct;
      seen += m.samples;
    }
    if (batches == 0) break;
    rec.task_loss = task / static_cast<double>(batches);
    rec.reg_loss = reg / static_cast<double>(batches);
    rec.total_loss = rec.task_loss + rec.reg_loss;
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    rec.alpha_thresh = model.atnac.alpha_thresh.value().item();
    if (!std::isfinite(rec.alpha_thresh)) {
      throw NumericError("alpha_thresh became non-finite after step " + std::to_string(opt.steps()));
    }
    if (!eval_set.empty() && spec.eval_every_epoch) rec.eval_accuracy = evaluate(model, eval_set, spec.batch_size).accuracy;
    rep.alpha_trajectory.push_back(rec.alpha_thresh);
    rep.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  rep.steps = opt.steps();
  rep.final_on_eval_set = !eval_set.empty();
  rep.final_eval = evaluate(model, eval_set.empty() ? train_set : eval_set, spec.batch_size);
  rep.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

/// Subjects present on both sides of a split.
inline std::vector<std::string> leaked_subjects(const std::vector<SkeletonSequence>& seqs, const Split& split) {
  std::set<std::string> tr, both;
  for (auto i : split.train) tr.insert(seqs.at(i).subject);
  for (auto i : split.test)
    if (tr.count(seqs.at(i).subject)) both.insert(seqs.at(i).subject);
  return {both.begin(), both.end()};
}

inline std::vector<SkeletonSequence> gather(const std::vector<SkeletonSequence>& seqs,
                                            const std::vector<std::size_t>& idx) {
  std::vector<SkeletonSequence> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(seqs.at(i));
  return out;
}

struct FoldReport {
  std::size_t fold = 0;
  std::vector<std::string> train_subjects, test_subjects;
  std::vector<std::string> leaked;
  RunReport report;
};

struct CvReport {
  std::vector<FoldReport> folds;
  double mean_accuracy = 0.0;
};

/// One freshly initialised model per fold.
inline CvReport cross_validate(const AseaConfig& cfg, const std::vector<SkeletonSequence>& seqs,
                               const std::vector<Split>& folds, const TrainSpec& spec,
                               const std::function<void(const FoldReport&)>& on_fold = {}) {
  if (folds.empty()) throw ConfigError("cross-validation needs at least one fold");
  CvReport cv;
  double sum = 0.0;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    FoldReport fr;
    fr.fold = f;
    std::set<std::string> tr, te;
    for (auto i : folds[f].train) tr.insert(seqs.at(i).subject);
    for (auto i : folds[f].test) te.insert(seqs.at(i).subject);
    fr.train_subjects.assign(tr.begin(), tr.end());
    fr.test_subjects.assign(te.begin(), te.end());
    fr.leaked = leaked_subjects(seqs, folds[f]);
    if (!fr.leaked.empty()) throw DataError("fold " + std::to_string(f) + " leaks subject " + fr.leaked.front());
    AseaModel model(cfg);
    fr.report = train(model, gather(seqs, folds[f].train), gather(seqs, folds[f].test), spec);
    sum += fr.report.final_eval.accuracy;
    if (on_fold) on_fold(fr);
    cv.folds.push_back(std::move(fr));
  }
  cv.mean_accuracy = sum / static_cast<double>(cv.folds.size());
  return cv;
}

inline nlohmann::json cv_to_json(const CvReport& cv) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : cv.folds) {
    folds.push_back({{"fold", f.fold},
                     {"train_subjects", f.train_subjects},
                     {"test_subjects", f.test_subjects},
                     {"leaked_subjects", f.leaked},
                     {"accuracy", f.report.final_eval.accuracy},
                     {"report", report_to_json(f.report)}});
  }
  std::vector<double> acc;
  for (const auto& f : cv.folds) acc.push_back(f.report.final_eval.accuracy);
  return {{"folds", folds}, {"fold_accuracies", acc}, {"mean_accuracy", cv.mean_accuracy}};
}

enum class Arm { NoneBaseline, AllNodeEa, Atnac, Velocity };

inline std::string to_string(Arm a) {
  switch (a) {
    case Arm::NoneBaseline: return "none-baseline";
    case Arm::AllNodeEa: return "all-node-ea";
    case Arm::Atnac: return "atnac";
    case Arm::Velocity: return "velocity";
  }
  return "atnac";
}

inline Arm parse_arm(const std::string& s) {
  if (s == "none-baseline") return Arm::NoneBaseline;
  if (s == "all-node-ea") return Arm::AllNodeEa;
  if (s == "atnac") return Arm::Atnac;
  if (s == "velocity") return Arm::Velocity;
  throw ConfigError("unknown ablation arm '" + s + "' (expected none-baseline, all-node-ea, atnac or velocity)");
}

inline AseaConfig arm_config(AseaConfig cfg, Arm a) {
  switch (a) {
    case Arm::NoneBaseline:
      cfg.strategy = Strategy::None;
      cfg.use_ea = false;
      break;
    case Arm::AllNodeEa:
      cfg.strategy = Strategy::None;
      cfg.use_ea = true;
      break;
    case Arm::Atnac:
      cfg.strategy = Strategy::Atnac;
      cfg.use_ea = true;
      break;
    case Arm::Velocity:
      cfg.strategy = Strategy::Velocity;
      cfg.use_ea = true;
      break;
  }
  return cfg;
}

struct AblationRow {
  Arm arm;
  double accuracy = 0.0;
  std::size_t params = 0;
  RunReport report;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::string expectation;  // reference ordering check, informational
};

inline std::string ordering_note(const std::vector<AblationRow>& rows) {
  auto find = [&](Arm a) -> std::optional<double> {
    for (const auto& r : rows)
      if (r.arm == a) return r.accuracy;
    return std::nullopt;
  };
  auto at = find(Arm::Atnac), ea = find(Arm::AllNodeEa), base = find(Arm::NoneBaseline);
  if (!at || !ea || !base) return "reference ordering atnac >= all-node-ea >= none-baseline not checked (arm missing)";
  const bool holds = *at >= *ea && *ea >= *base;
  return std::string("reference ordering atnac >= all-node-ea >= none-baseline ") + (holds ? "holds" : "does not hold");
}

/// Every arm uses the same config, spec and seeds; only the selection/attention switches differ.
inline AblationTable ablate(const AseaConfig& cfg, const std::vector<SkeletonSequence>& train_set,
                            const std::vector<SkeletonSequence>& test_set, const TrainSpec& spec,
                            const std::vector<Arm>& arms,
                            const std::function<void(const AblationRow&)>& on_row = {}) {
  if (arms.size() < 2) throw ConfigError("ablation needs at least 2 strategies, got " + std::to_string(arms.size()));
  std::set<Arm> uniq(arms.begin(), arms.end());
  if (uniq.size() != arms.size()) throw ConfigError("ablation strategies must be distinct");
  AblationTable table;
  for (Arm a : arms) {
    AseaModel model(arm_config(cfg, a));
    AblationRow row{a, 0.0, count_params(model).total, {}};
    row.report = train(model, train_set, test_set, spec);
    row.accuracy = row.report.final_eval.accuracy;
    if (on_row) on_row(row);
    table.rows.push_back(std::move(row));
  }
  table.expectation = ordering_note(table.rows);
  return table;
}

inline nlohmann::json ablation_to_json(const AblationTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"strategy", to_string(r.arm)},
                    {"accuracy", r.accuracy},
                    {"params", r.params},
                    {"report", report_to_json(r.report)}});
  }
  return {{"rows", rows}, {"expectation", t.expectation}};
}

inline std::string ablation_to_csv(const AblationTable& t) {
  std::ostringstream os;
  os << "strategy,accuracy,params,final_task_loss\n";
  for (const auto& r : t.rows) {
    os << to_string(r.arm) << ',' << std::setprecision(6) << std::fixed << r.accuracy << ',' << r.params << ','
       << (r.report.epochs.empty() ? 0.0 : r.report.epochs.back().task_loss) << '\n';
  }
  return os.str();
}

/// Normalizes each clip and optionally resamples it to a fixed frame count.
inline std::vector<SkeletonSequence> prepare_sequences(const std::vector<SkeletonSequence>& seqs,
                                                       std::size_t frames = 0) {
  std::vector<SkeletonSequence> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(frames ? resample(normalize(s), frames) : normalize(s));
  return out;
}

}  // namespace asea
