#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "asea/atnac.hpp"
#include "asea/attention.hpp"
#include "asea/intra_gcn.hpp"
#include "asea/skeleton.hpp"

namespace asea {

enum class Strategy { Atnac, Velocity, None };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Atnac: return "atnac";
    case Strategy::Velocity: return "velocity";
    case Strategy::None: return "none";
  }
  return "none";
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "atnac") return Strategy::Atnac;
  if (s == "velocity") return Strategy::Velocity;
  if (s == "none") return Strategy::None;
  throw ConfigError("unknown selection strategy '" + s + "' (expected atnac, velocity or none)");
}

inline std::string to_string(MaskMode m) { return m == MaskMode::Soft ? "soft" : "hard"; }

inline MaskMode parse_mask_mode(const std::string& s) {
  if (s == "soft") return MaskMode::Soft;
  if (s == "hard") return MaskMode::Hard;
  throw ConfigError("unknown mask mode '" + s + "' (expected soft or hard)");
}

struct AseaConfig {
  SkeletonKind skeleton = SkeletonKind::Sbu15;
  nlohmann::json custom_graph;  // {"names", "edges"} when skeleton == custom
  std::vector<std::size_t> widths = {16, 16, 32, 32};
  std::size_t reduction = 2;
  bool double_tconv = false;
  double alpha_refine_init = 0.1;
  double gamma = 1.0;
  double alpha_init = 0.5;
  double alpha_target = 0.5;
  double lambda = 0.1;
  double beta_scale = 0.1;
  std::size_t attn_dim = 0;  // 0: half the encoder output width
  std::size_t num_classes = 8;
  Strategy strategy = Strategy::Atnac;
  bool use_ea = true;
  MaskMode training_mask = MaskMode::Soft;
  std::uint64_t seed = 1;

  void validate() const {
    if (widths.empty()) throw ConfigError("encoder widths must list at least one block");
    for (auto w : widths)
      if (w == 0 || w % 4 != 0) throw ConfigError("encoder width " + std::to_string(w) + " must be a positive multiple of 4");
    if (num_classes < 2) throw ConfigError("class count must be at least 2");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
    if (!(gamma >= 0.0)) throw ConfigError("gamma must be non-negative");
    if (!(beta_scale > 0.0)) throw ConfigError("beta_scale must be positive");
    if (reduction == 0) throw ConfigError("reduction ratio must be positive");
  }
};

inline nlohmann::json config_to_json(const AseaConfig& c) {
  nlohmann::json j = {{"skeleton", to_string(c.skeleton)},
                      {"widths", c.widths},
                      {"reduction", c.reduction},
                      {"double_tconv", c.double_tconv},
                      {"alpha_refine_init", c.alpha_refine_init},
                      {"gamma", c.gamma},
                      {"alpha_init", c.alpha_init},
                      {"alpha_target", c.alpha_target},
                      {"lambda", c.lambda},
                      {"beta_scale", c.beta_scale},
                      {"attn_dim", c.attn_dim},
                      {"num_classes", c.num_classes},
                      {"strategy", to_string(c.strategy)},
                      {"use_ea", c.use_ea},
                      {"training_mask", to_string(c.training_mask)},
                      {"seed", c.seed}};
  if (c.skeleton == SkeletonKind::Custom) j["custom_graph"] = c.custom_graph;
  return j;
}

inline AseaConfig config_from_json(const nlohmann::json& j) {
  AseaConfig c;
  try {
    c.skeleton = parse_skeleton_kind(j.at("skeleton").get<std::string>());
    if (c.skeleton == SkeletonKind::Custom) c.custom_graph = j.at("custom_graph");
    c.widths = j.at("widths").get<std::vector<std::size_t>>();
    c.reduction = j.at("reduction").get<std::size_t>();
    c.double_tconv = j.at("double_tconv").get<bool>();
    c.alpha_refine_init = j.at("alpha_refine_init").get<double>();
    c.gamma = j.at("gamma").get<double>();
    c.alpha_init = j.at("alpha_init").get<double>();
    c.alpha_target = j.at("alpha_target").get<double>();
    c.lambda = j.at("lambda").get<double>();
    c.beta_scale = j.at("beta_scale").get<double>();
    c.attn_dim = j.at("attn_dim").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.strategy = parse_strategy(j.at("strategy").get<std::string>());
    c.use_ea = j.at("use_ea").get<bool>();
    c.training_mask = parse_mask_mode(j.at("training_mask").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("invalid model configuration: ") + ex.what());
  }
  c.validate();
  return c;
}

inline SkeletonGraph graph_for(const AseaConfig& c) {
  return c.skeleton == SkeletonKind::Custom ? graph_from_json(c.custom_graph) : build_graph(c.skeleton);
}

struct ForwardResult {
  Var logits;  // [B, classes]
  NodeSelection selection;
  std::optional<AttentionRecord> attention;
  Tensor pool_weights;  // [B,T,N*M] value of the pooling weights
};

struct AseaModel {
  AseaConfig config;
  SkeletonGraph graph;
  std::vector<EncoderBlock> encoder;
  AtnacParams atnac;
  std::optional<EaParams> ea;
  MsTemporalParams post_tcn;
  Linear classifier;

  explicit AseaModel(const AseaConfig& cfg) : config(cfg) {
    config.validate();
    graph = graph_for(config);
    Rng rng(config.seed);
    EncoderConfig ec;
    ec.widths = config.widths;
    ec.reduction = config.reduction;
    ec.double_tconv = config.double_tconv;
    ec.alpha_refine_init = config.alpha_refine_init;
    encoder = make_encoder(rng, ec, init_adjacency(graph));
    const std::size_t C = config.widths.back();
    atnac.gamma = config.gamma;
    atnac.beta_scale = config.beta_scale;
    atnac.training_mask = config.training_mask;
    atnac.alpha_thresh = Var::parameter(Tensor::scalar(config.alpha_init));
    if (config.use_ea) ea = EaParams(rng, C, config.attn_dim);
    post_tcn = MsTemporalParams(rng, C, C, config.double_tconv);
    classifier = Linear(rng, C, config.num_classes);
  }

  std::size_t channels() const { return config.widths.back(); }

  ParamSet parameters() {
    ParamSet ps;
    for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].collect("encoder" + std::to_string(i), ps);
    if (config.strategy != Strategy::None) atnac.collect("atnac", ps);
    if (ea) ea->collect("ea", ps);
    post_tcn.collect("post_tcn", ps);
    classifier.collect("classifier", ps);
    return ps;
  }

  /// data [B,3,T,M,N], pad [B,T].
  ForwardResult forward(const Tensor& data, const Tensor& pad, bool training, bool record_attention = false) {
    const Shape& ds = data.shape();
    if (ds.size() != 5 || ds[1] != kCoordDims || ds[3] != kPersons) {
      throw ConfigError("model input must be [B,3,T,2,N], got " + shape_str(ds));
    }
    if (ds[4] != graph.n_joints) {
      throw ConfigError("input has " + std::to_string(ds[4]) + " joints but the model skeleton has " +
                        std::to_string(graph.n_joints));
    }
    const std::size_t B = ds[0], T = ds[2], M = ds[3], N = ds[4], C = channels();
    if (pad.shape() != Shape{B, T}) throw ConfigError("pad mask must be " + shape_str({B, T}));

    // Persons stacked on the batch axis: row b*M+m.
    Tensor stacked = permute(data, {0, 3, 1, 2, 4}).reshaped({B * M, kCoordDims, T, N});
    Tensor row_pad(Shape{B * M, T});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t t = 0; t < T; ++t) row_pad.at({b * M + m, t}) = pad.at({b, t});

    Var h = encoder_forward(Var::constant(stacked), encoder, training);

    ForwardResult res;
    switch (config.strategy) {
      case Strategy::Atnac: res.selection = select_nodes(h, &row_pad, atnac, training); break;
      case Strategy::Velocity: res.selection = select_by_velocity(stacked, &row_pad, atnac, training); break;
      case Strategy::None: res.selection = select_all(B * M, N); break;
    }

    Var h5 = permute(reshape(h, {B, M, C, T, N}), {0, 2, 3, 1, 4});  // [B,C,T,M,N]
    Var masks = reshape(res.selection.effective_mask, {B, M, N});
    Var y = h5;
    if (ea) {
      AttentionRecord rec;
      y = ea_forward(h5, masks, *ea, record_attention ? &rec : nullptr);
      if (record_attention) res.attention = std::move(rec);
    }
    Var z = reshape(concat_persons(y), {B, C, T, N * M});  // node index n*M+m
    Var z2 = relu(add(ms_temporal_forward(z, post_tcn), z));

    // Masked average over frames and (joint, person) nodes.
    Var node_w = reshape(permute(masks, {0, 2, 1}), {B, 1, 1, N * M});
    Var frame_w = Var::constant(pad.reshaped({B, 1, T, 1}));
    Var w = mul(frame_w, node_w);  // [B,1,T,N*M]
    Var pooled = div(sum(mul(z2, w), {2, 3}), reshape(sum(w, {1, 2, 3}), {B, 1}));
    res.logits = classifier(pooled);
    res.pool_weights = w.value().reshaped({B, T, N * M});
    return res;
  }

  ForwardResult forward(const Batch& b, bool training, bool record_attention = false) {
    return forward(b.data, b.pad_mask, training, record_attention);
  }
};

struct LossParts {
  Var total;
  double task = 0.0;
  double reg = 0.0;
};

/// Mean softmax cross-entropy.
inline Var cross_entropy(const Var& logits, const std::vector<std::size_t>& labels) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (labels.size() != B) throw DataError("label count does not match the batch");
  Tensor onehot(Shape{B, K});
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= K) {
      throw DataError("label " + std::to_string(labels[b]) + " out of range for " + std::to_string(K) + " classes");
    }
    onehot.at({b, labels[b]}) = -1.0 / static_cast<double>(B);
  }
  return sum_all(mul(log_softmax(logits, 1), Var::constant(onehot)));
}

/// L_total = CE + lambda * (alpha - alpha_target)^2.
inline LossParts total_loss(const Var& logits, const std::vector<std::size_t>& labels, const Var& alpha_thresh,
                            double lambda, double alpha_target) {
  LossParts lp;
  Var task = cross_entropy(logits, labels);
  Var diff = sub(alpha_thresh, Var::constant(Tensor::scalar(alpha_target)));
  Var reg = scale(square(diff), lambda);
  lp.total = add(task, reg);
  lp.task = task.value().item();
  lp.reg = reg.value().item();
  return lp;
}

inline LossParts total_loss(AseaModel& model, const ForwardResult& fr, const std::vector<std::size_t>& labels) {
  const double lambda = model.config.strategy == Strategy::None ? 0.0 : model.config.lambda;
  return total_loss(fr.logits, labels, model.atnac.alpha_thresh, lambda, model.config.alpha_target);
}

struct ParamCount {
  std::size_t total = 0;
  std::map<std::string, std::size_t> by_module;
};

inline ParamCount count_params(AseaModel& model) {
  ParamCount pc;
  for (const auto& p : model.parameters().params) {
    const std::size_t n = p.var.value().size();
    pc.total += n;
    pc.by_module[p.name.substr(0, p.name.find('.'))] += n;
  }
  return pc;
}

inline ParamCount count_params(const AseaConfig& cfg) {
  AseaModel m(cfg);
  return count_params(m);
}

}  // namespace asea
