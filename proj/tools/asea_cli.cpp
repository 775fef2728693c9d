#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "asea/checkpoint.hpp"
#include "asea/config.hpp"
#include "asea/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kOther = 1, kUsage = 2, kData = 3, kNumeric = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) h = (h ^ c) * 0x100000001b3ull;
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw asea::DataError("cannot write " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void require_dir(const std::string& what, const std::string& path) {
  if (path.empty()) throw UsageError(what + " is required");
  if (!fs::is_directory(path)) throw UsageError(what + " directory not found: " + path);
}

// Options shared by every command that trains.
struct RunOptions {
  std::string config_file;
  std::vector<std::string> sets;
  std::string data, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
};

void add_run_options(CLI::App* cmd, RunOptions& o) {
  cmd->add_option("--config", o.config_file, "key = value config file (see README for keys)");
  cmd->add_option("--data", o.data, "corpus directory (SBU layout, optionally with a synthetic manifest.json)")->required();
  cmd->add_option("--out", o.out, "output directory")->required();
  cmd->add_option("--set", o.sets, "override one config key, as key=value (repeatable)");
  cmd->add_option("--seed", o.seed, "seed for initialisation and shuffling (same as --set seed=S)");
  cmd->add_option("--epochs", o.epochs, "epoch count (same as --set epochs=E)");
}

asea::RunConfig resolve(const RunOptions& o) {
  asea::RunConfig cfg;
  if (!o.config_file.empty()) {
    if (!fs::is_regular_file(o.config_file)) throw UsageError("config file not found: " + o.config_file);
    asea::apply_config_file(cfg, o.config_file);
  }
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    asea::apply_setting(cfg, asea::detail::trim(kv.substr(0, eq)), asea::detail::trim(kv.substr(eq + 1)));
  }
  if (o.seed) asea::apply_setting(cfg, "seed", std::to_string(*o.seed));
  if (o.epochs) asea::apply_setting(cfg, "epochs", std::to_string(*o.epochs));
  return cfg;
}

struct LoadedData {
  asea::Corpus corpus;
  std::vector<asea::SkeletonSequence> prepared;
};

// Class count follows the corpus unless pinned explicitly.
LoadedData load_for(asea::RunConfig& cfg, const std::string& dir) {
  require_dir("--data", dir);
  if (cfg.model.skeleton == asea::SkeletonKind::Custom && cfg.model.custom_graph.is_null() && !cfg.graph_file.empty()) {
    cfg.model.custom_graph = asea::graph_to_json(asea::load_graph_file(cfg.graph_file));
  }
  LoadedData d;
  d.corpus = asea::load_corpus(dir, asea::graph_for(cfg.model).n_joints);
  const std::size_t K = d.corpus.class_names.size();
  if (!cfg.is_set("num_classes")) {
    cfg.model.num_classes = K;
  } else if (cfg.model.num_classes != K) {
    throw asea::ConfigError("class-count mismatch: config sets num_classes = " + std::to_string(cfg.model.num_classes) +
                            " but the corpus has " + std::to_string(K) + " classes");
  }
  asea::finalize_config(cfg);
  d.prepared = asea::prepare_sequences(d.corpus.sequences, cfg.frames);
  return d;
}

void log_config(const std::string& command, const asea::RunConfig& cfg) {
  std::cerr << "asea " << command << ": resolved config " << asea::run_config_to_json(cfg).dump() << '\n';
}

asea::EpochCallback epoch_logger(const std::string& tag, std::size_t epochs) {
  return [tag, epochs](const asea::EpochRecord& e) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << tag << "epoch " << e.epoch << "/" << epochs << " loss " << e.total_loss
       << " task " << e.task_loss << " reg " << e.reg_loss << " train_acc " << e.train_accuracy;
    if (e.eval_accuracy) os << " eval_acc " << *e.eval_accuracy;
    os << " alpha " << e.alpha_thresh << " lr " << std::setprecision(6) << e.lr;
    std::cerr << os.str() << '\n';
  };
}

std::string metrics_csv(const asea::RunReport& r) {
  std::ostringstream os;
  os << "epoch,task_loss,reg_loss,total_loss,train_accuracy,eval_accuracy,alpha_thresh,lr\n";
  os << std::setprecision(17);
  for (const auto& e : r.epochs) {
    os << e.epoch << ',' << e.task_loss << ',' << e.reg_loss << ',' << e.total_loss << ',' << e.train_accuracy << ',';
    if (e.eval_accuracy) os << *e.eval_accuracy;
    os << ',' << e.alpha_thresh << ',' << e.lr << '\n';
  }
  return os.str();
}

json with_run_config(json report, const asea::RunConfig& cfg) {
  report["run_config"] = asea::run_config_to_json(cfg);
  return report;
}

// ---------------------------------------------------------------------------

struct SynthOptions {
  std::string out;
  std::vector<std::string> classes = asea::synth_class_names();
  std::size_t samples = 50;
  std::uint64_t seed = 1;
  std::size_t frames = 32;
  double noise = 0.01;
  std::size_t pairs = 10;
};

int cmd_synth(const SynthOptions& o) {
  if (o.samples == 0) throw UsageError("--samples must be at least 1");
  asea::SynthSpec spec;
  spec.classes = o.classes;
  spec.samples_per_class = o.samples;
  spec.frames = o.frames;
  spec.noise = o.noise;
  spec.pairs = o.pairs;
  const auto seqs = asea::synthesize(spec, o.seed);
  const json manifest = asea::write_synthetic_corpus(o.out, seqs, spec, o.seed);
  std::cout << "wrote " << seqs.size() << " clips to " << o.out << " (manifest " << fnv1a_hex(manifest.dump(2) + "\n")
            << ")\n";
  return kOk;
}

int cmd_train(const RunOptions& o, const std::string& eval_dir) {
  asea::RunConfig cfg = resolve(o);
  LoadedData d = load_for(cfg, o.data);
  log_config("train", cfg);

  std::vector<asea::SkeletonSequence> train_set, eval_set;
  if (!eval_dir.empty()) {
    require_dir("--eval-data", eval_dir);
    asea::Corpus ec = asea::load_corpus(eval_dir, asea::graph_for(cfg.model).n_joints);
    if (ec.class_names.size() != cfg.model.num_classes) {
      throw asea::ConfigError("class-count mismatch: eval corpus has " + std::to_string(ec.class_names.size()) +
                              " classes but the model has " + std::to_string(cfg.model.num_classes));
    }
    train_set = d.prepared;
    eval_set = asea::prepare_sequences(ec.sequences, cfg.frames);
  } else {
    const asea::Split sp = asea::stratified_split(d.prepared, cfg.train_fraction, cfg.split_seed);
    train_set = asea::gather(d.prepared, sp.train);
    eval_set = asea::gather(d.prepared, sp.test);
  }
  std::cerr << "asea train: " << train_set.size() << " training clips, " << eval_set.size() << " evaluation clips\n";

  asea::AseaModel model(cfg.model);
  const asea::RunReport rep = asea::train(model, train_set, eval_set, cfg.train, epoch_logger("", cfg.train.epochs));

  const fs::path out(o.out);
  asea::save_checkpoint(model, out / "model",
                        {{"frames", cfg.frames},
                         {"class_names", d.corpus.class_names},
                         {"run_config", asea::run_config_to_json(cfg)}});
  write_json(out / "report.json", with_run_config(asea::report_to_json(rep), cfg));
  write_json(out / "config.json", asea::run_config_to_json(cfg));
  write_text(out / "metrics.csv", metrics_csv(rep));
  std::cout << std::fixed << std::setprecision(4) << "final " << (rep.final_on_eval_set ? "eval" : "train")
            << " accuracy " << rep.final_eval.accuracy << " (" << rep.final_eval.correct << "/" << rep.final_eval.samples
            << ") after " << rep.steps << " steps\n";
  std::cerr << "asea train: wall clock " << std::setprecision(1) << rep.wall_clock_s << " s\n";
  return kOk;
}

fs::path checkpoint_dir(const std::string& path) {
  if (fs::is_regular_file(fs::path(path) / "model" / "manifest.json")) return fs::path(path) / "model";
  return path;
}

int cmd_eval(const std::string& model_path, const std::string& data, const std::string& out) {
  require_dir("--data", data);
  if (model_path.empty() || !fs::exists(model_path)) throw UsageError("--model not found: " + model_path);
  const fs::path dir = checkpoint_dir(model_path);
  const json manifest = asea::read_manifest(dir);
  asea::AseaModel model = asea::load_checkpoint(dir);
  const json extra = manifest.value("extra", json::object());
  const std::size_t frames = extra.value("frames", std::size_t{0});
  asea::Corpus corpus = asea::load_corpus(data, model.graph.n_joints);
  corpus.sequences = asea::prepare_sequences(corpus.sequences, frames);
  const asea::EvalResult r = asea::evaluate(model, corpus);
  json j = asea::eval_to_json(r);
  j["class_names"] = corpus.class_names;
  j["config"] = asea::config_to_json(model.config);
  j["checkpoint"] = dir.generic_string();
  if (!out.empty()) write_json(out, j);
  std::cout << std::fixed << std::setprecision(4) << "accuracy " << r.accuracy << " (" << r.correct << "/" << r.samples
            << ")";
  if (r.top5) std::cout << " top5 " << *r.top5;
  std::cout << '\n';
  return kOk;
}

int cmd_cv(const RunOptions& o, std::optional<std::size_t> k) {
  asea::RunConfig cfg = resolve(o);
  if (k) asea::apply_setting(cfg, "folds", std::to_string(*k));
  LoadedData d = load_for(cfg, o.data);
  log_config("cv", cfg);
  const auto folds = asea::make_folds(d.prepared, cfg.folds, cfg.split_seed);
  const fs::path out(o.out);
  const asea::CvReport cv = asea::cross_validate(cfg.model, d.prepared, folds, cfg.train, [&](const asea::FoldReport& f) {
    const fs::path fd = out / ("fold_" + std::to_string(f.fold + 1));
    write_json(fd / "report.json", with_run_config(asea::report_to_json(f.report), cfg));
    write_text(fd / "metrics.csv", metrics_csv(f.report));
    std::cout << std::fixed << std::setprecision(4) << "fold " << f.fold + 1 << "/" << folds.size() << " accuracy "
              << f.report.final_eval.accuracy << " test subjects " << f.test_subjects.size() << " leaked "
              << f.leaked.size() << std::endl;
  });
  json j = asea::cv_to_json(cv);
  j["run_config"] = asea::run_config_to_json(cfg);
  write_json(out / "cv.json", j);
  std::cout << std::fixed << std::setprecision(4) << "mean accuracy " << cv.mean_accuracy << " over " << cv.folds.size()
            << " folds\n";
  return kOk;
}

int cmd_ablate(const RunOptions& o, const std::string& strategies) {
  asea::RunConfig cfg = resolve(o);
  std::vector<asea::Arm> arms;
  std::stringstream ss(strategies);
  std::string item;
  while (std::getline(ss, item, ',')) arms.push_back(asea::parse_arm(asea::detail::trim(item)));
  LoadedData d = load_for(cfg, o.data);
  log_config("ablate", cfg);
  const asea::Split sp = asea::stratified_split(d.prepared, cfg.train_fraction, cfg.split_seed);
  const auto train_set = asea::gather(d.prepared, sp.train), test_set = asea::gather(d.prepared, sp.test);
  const fs::path out(o.out);
  const asea::AblationTable t = asea::ablate(cfg.model, train_set, test_set, cfg.train, arms, [&](const asea::AblationRow& r) {
    const fs::path ad = out / asea::to_string(r.arm);
    write_json(ad / "report.json", with_run_config(asea::report_to_json(r.report), cfg));
    write_text(ad / "metrics.csv", metrics_csv(r.report));
    std::cout << std::fixed << std::setprecision(4) << asea::to_string(r.arm) << " accuracy " << r.accuracy << " params "
              << r.params << " wall clock " << std::setprecision(1) << r.report.wall_clock_s << " s" << std::endl;
  });
  json j = asea::ablation_to_json(t);
  j["run_config"] = asea::run_config_to_json(cfg);
  write_json(out / "ablation.json", j);
  write_text(out / "ablation.csv", asea::ablation_to_csv(t));
  std::cout << t.expectation << " (reference, not gated)\n";
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t seeds, const std::string& corrupt, const std::string& out) {
  if (seeds == 0) throw UsageError("--seeds must be at least 1");
  if (!corrupt.empty()) {
    std::optional<asea::Op> op;
    for (int i = 0; i <= static_cast<int>(asea::Op::GraphAggregate); ++i)
      if (asea::op_name(static_cast<asea::Op>(i)) == corrupt) op = static_cast<asea::Op>(i);
    if (!op) throw UsageError("unknown op '" + corrupt + "'");
    asea::set_corrupted_backward(op);
    std::cerr << "asea gradcheck: backward of " << corrupt << " deliberately corrupted\n";
  }
  const asea::GradCheckOptions opt;
  std::vector<std::string> failing;
  json runs = json::array();
  for (std::uint64_t s = seed; s < seed + seeds; ++s) {
    const auto checks = asea::run_gradcheck_suite(s, opt);
    std::cout << "seed " << s << '\n';
    for (const auto& m : checks) {
      std::cout << "  " << std::left << std::setw(12) << m.module << " max_rel_error " << std::scientific
                << std::setprecision(3) << m.max_rel_error() << (m.passed() ? "  ok" : "  FAIL") << '\n';
      for (const auto& f : m.failing()) failing.push_back("seed " + std::to_string(s) + " " + m.module + " " + f);
    }
    runs.push_back(asea::gradcheck_to_json(checks, s));
  }
  if (!out.empty()) {
    write_json(out, {{"config", asea::config_to_json(asea::gradcheck_config(seed))},
                     {"tolerance", opt.tolerance},
                     {"step", opt.step},
                     {"runs", runs}});
  }
  if (!failing.empty()) {
    std::cerr << "gradient check failed (tolerance " << opt.tolerance << ") for:\n";
    for (const auto& f : failing) std::cerr << "  " << f << '\n';
    return kNumeric;
  }
  std::cout << "all modules within " << opt.tolerance << '\n';
  return kOk;
}

// Joints per person implied by the first data row of a clip file.
std::optional<std::size_t> sniff_joints(const fs::path& file) {
  std::ifstream in(file);
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fields = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
    if (fields < 1 + asea::kPersons * asea::kCoordDims || (fields - 1) % (asea::kPersons * asea::kCoordDims) != 0) {
      return std::nullopt;
    }
    return (fields - 1) / (asea::kPersons * asea::kCoordDims);
  }
  return std::nullopt;
}

int cmd_inspect(const std::string& model_path, const std::string& sample, const std::vector<std::string>& emit,
                const std::string& skeleton) {
  if (model_path.empty() || !fs::exists(model_path)) throw UsageError("--model not found: " + model_path);
  if (!fs::is_regular_file(sample)) throw UsageError("--sample file not found: " + sample);
  const fs::path dir = checkpoint_dir(model_path);
  const json manifest = asea::read_manifest(dir);
  std::optional<asea::SkeletonKind> expected;
  if (!skeleton.empty()) expected = asea::parse_skeleton_kind(skeleton);
  asea::AseaModel model = asea::load_checkpoint(dir, expected);
  const std::size_t N = model.graph.n_joints;
  if (auto n = sniff_joints(sample); n && *n != N) {
    throw asea::ConfigError("skeleton mismatch: sample has " + std::to_string(*n) + " joints per person but the model's " +
                            asea::to_string(model.config.skeleton) + " skeleton has " + std::to_string(N));
  }
  asea::SkeletonSequence seq;
  if (!asea::read_sbu_clip(sample, seq, N)) throw asea::DataError("sample clip is empty: " + sample);
  const std::size_t frames = manifest.value("extra", json::object()).value("frames", std::size_t{0});
  const auto prepared = asea::prepare_sequences({seq}, frames);
  const asea::Batch b = asea::make_batch(prepared);

  asea::NoGradGuard ng;
  asea::ForwardResult fr = model.forward(b, false, true);
  const json cfg = asea::config_to_json(model.config);
  const json& names = model.graph.names;

  json masks = {{"sample", sample},
                {"config", cfg},
                {"strategy", asea::to_string(model.config.strategy)},
                {"alpha_thresh", model.atnac.alpha_thresh.value().item()},
                {"joint_names", names},
                {"frames", prepared[0].frames()},
                {"persons", asea::selection_to_json(fr.selection, asea::kPersons, model.graph.names)}};
  json attn = {{"sample", sample}, {"config", cfg}, {"joint_names", names}};
  if (fr.attention) {
    attn["attention"] = asea::attention_to_json(*fr.attention, 0, model.graph.names);
  } else {
    attn["attention"] = nullptr;
    attn["note"] = "model was trained without the attention module";
  }
  write_json(emit.at(0), masks);
  write_json(emit.at(1), attn);
  const std::vector<double> logits(fr.logits.value().data().begin(), fr.logits.value().data().end());
  const auto pred = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  std::cout << "predicted class " << pred;
  const json extra = manifest.value("extra", json::object());
  if (extra.contains("class_names") && pred < extra["class_names"].size())
    std::cout << " (" << extra["class_names"][pred].get<std::string>() << ")";
  std::cout << '\n';
  for (std::size_t m = 0; m < asea::kPersons; ++m) {
    std::cout << "person " << m << " active joints:";
    for (auto n : fr.selection.active(m)) std::cout << ' ' << model.graph.names[n];
    std::cout << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Skeleton-based two-person interaction recognition with active node selection and external attention"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "asea 1.0.0");

  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "write a procedural two-person corpus in the SBU layout");
  synth->add_option("--out", so.out, "output directory")->required();
  synth->add_option("--classes", so.classes, "class list (approach, depart, handshake, wave)")->delimiter(',')->capture_default_str();
  synth->add_option("--samples", so.samples, "clips per class")->capture_default_str();
  synth->add_option("--seed", so.seed, "generator seed")->capture_default_str();
  synth->add_option("--frames", so.frames, "frames per clip")->capture_default_str();
  synth->add_option("--noise", so.noise, "joint jitter standard deviation")->capture_default_str();
  synth->add_option("--pairs", so.pairs, "distinct participant pairs")->capture_default_str();

  RunOptions train_o;
  std::string eval_data;
  auto* trn = app.add_subcommand("train", "train a model; writes model/, report.json, config.json, metrics.csv");
  add_run_options(trn, train_o);
  trn->add_option("--eval-data", eval_data, "separate evaluation corpus (default: stratified holdout of --data)");

  std::string ev_model, ev_data, ev_out;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a corpus");
  ev->add_option("--model", ev_model, "checkpoint directory (or a train --out directory)")->required();
  ev->add_option("--data", ev_data, "corpus directory")->required();
  ev->add_option("--out", ev_out, "write metrics JSON here");

  RunOptions cv_o;
  std::optional<std::size_t> cv_k;
  auto* cv = app.add_subcommand("cv", "k-fold cross-validation over participant pairs; writes cv.json and fold_*/");
  add_run_options(cv, cv_o);
  cv->add_option("--k", cv_k, "number of folds (same as --set folds=K, default 5)");

  RunOptions ab_o;
  std::string strategies = "none-baseline,all-node-ea,atnac,velocity";
  auto* ab = app.add_subcommand("ablate", "train each selection strategy on one split; writes ablation.json/.csv");
  add_run_options(ab, ab_o);
  ab->add_option("--strategies", strategies, "comma-separated arms")->capture_default_str();

  std::uint64_t gc_seed = 1;
  std::size_t gc_seeds = 1;
  std::string gc_corrupt, gc_out;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op, module and model parameter");
  gc->add_option("--seed", gc_seed, "first seed")->capture_default_str();
  gc->add_option("--seeds", gc_seeds, "number of consecutive seeds to check")->capture_default_str();
  gc->add_option("--out", gc_out, "write per-entry results as JSON");
  gc->add_option("--corrupt-op", gc_corrupt, "scale the backward pass of this op by 1.5 (negative control)")->group("");

  std::string in_model, in_sample, in_skeleton;
  std::vector<std::string> in_emit;
  auto* ins = app.add_subcommand("inspect", "export node selection and attention for one clip");
  ins->add_option("--model", in_model, "checkpoint directory (or a train --out directory)")->required();
  ins->add_option("--sample", in_sample, "clip file in the SBU text format")->required();
  ins->add_option("--emit", in_emit, "output paths: MASKS.json ATTN.json")->expected(2)->required();
  ins->add_option("--skeleton", in_skeleton, "require the checkpoint to use this skeleton (sbu15, ntu25, custom)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return cmd_synth(so);
    if (*trn) return cmd_train(train_o, eval_data);
    if (*ev) return cmd_eval(ev_model, ev_data, ev_out);
    if (*cv) return cmd_cv(cv_o, cv_k);
    if (*ab) return cmd_ablate(ab_o, strategies);
    if (*gc) return cmd_gradcheck(gc_seed, gc_seeds, gc_corrupt, gc_out);
    if (*ins) return cmd_inspect(in_model, in_sample, in_emit, in_skeleton);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const asea::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const asea::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const asea::Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kUsage;
}
