#include "glfusion/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace glf {

using nlohmann::json;

std::string to_string(ReadoutKind kind) {
  switch (kind) {
    case ReadoutKind::None:
      return "none";
    case ReadoutKind::NodeClassify:
      return "node_classify";
    case ReadoutKind::EdgeClassify:
      return "edge_classify";
    case ReadoutKind::GraphClassify:
      return "graph_classify";
    case ReadoutKind::GraphRegress:
      return "graph_regress";
  }
  return "none";
}

ReadoutKind readout_kind_from_string(const std::string& name) {
  for (ReadoutKind k : {ReadoutKind::None, ReadoutKind::NodeClassify, ReadoutKind::EdgeClassify,
                        ReadoutKind::GraphClassify, ReadoutKind::GraphRegress}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown readout kind '" + name + "'");
}

void ModelConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0) throw ConfigError("model sizes must be positive");
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (vocab_size <= token::kReservedCount) throw ConfigError("vocab_size must exceed the reserved tokens");
  if (max_positions <= 0) throw ConfigError("max_positions must be positive");
  if (node_text_length < 0 || edge_text_length < 0) throw ConfigError("text lengths must be non-negative");
  for (const auto* ids : {&mpnn_layers, &cross_attention_layers}) {
    for (int id : *ids) {
      if (id < 0 || id >= n_layers) throw ConfigError("layer id " + std::to_string(id) + " outside [0, n_layers)");
    }
  }
  if (!text_predictor() && !gnn_predictor()) throw ConfigError("at least one predictor must be enabled");
  if (readout != ReadoutKind::None && readout != ReadoutKind::GraphRegress && readout_classes <= 0) {
    throw ConfigError("classification readout needs readout_classes > 0");
  }
}

json ModelConfig::to_json() const {
  return json{{"d_model", d_model},
              {"n_layers", n_layers},
              {"n_heads", n_heads},
              {"vocab_size", vocab_size},
              {"max_positions", max_positions},
              {"node_text_length", node_text_length},
              {"edge_text_length", edge_text_length},
              {"mpnn_layers", mpnn_layers},
              {"cross_attention_layers", cross_attention_layers},
              {"readout", to_string(readout)},
              {"readout_classes", readout_classes},
              {"lm_weight", lm_weight},
              {"gnn_weight", gnn_weight},
              {"ablation",
               {{"no_cross_attention", ablation.no_cross_attention},
                {"no_gate", ablation.no_gate},
                {"no_multi_aggregators", ablation.no_multi_aggregators},
                {"no_gnn_predictor", ablation.no_gnn_predictor},
                {"no_text_predictor", ablation.no_text_predictor}}},
              {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  try {
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_positions = j.at("max_positions").get<int>();
    c.node_text_length = j.at("node_text_length").get<int>();
    c.edge_text_length = j.at("edge_text_length").get<int>();
    c.mpnn_layers = j.at("mpnn_layers").get<std::vector<int>>();
    c.cross_attention_layers = j.at("cross_attention_layers").get<std::vector<int>>();
    c.readout = readout_kind_from_string(j.at("readout").get<std::string>());
    c.readout_classes = j.at("readout_classes").get<int>();
    c.lm_weight = j.at("lm_weight").get<double>();
    c.gnn_weight = j.at("gnn_weight").get<double>();
    const json& a = j.at("ablation");
    c.ablation.no_cross_attention = a.at("no_cross_attention").get<bool>();
    c.ablation.no_gate = a.at("no_gate").get<bool>();
    c.ablation.no_multi_aggregators = a.at("no_multi_aggregators").get<bool>();
    c.ablation.no_gnn_predictor = a.at("no_gnn_predictor").get<bool>();
    c.ablation.no_text_predictor = a.at("no_text_predictor").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  return c;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

Parameter& GlFusionModel::make(const std::string& name, int rows, int cols, double stddev, bool decay) {
  std::mt19937_64 rng(config_.seed ^ fnv1a(name));
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix init(rows, cols);
  for (Eigen::Index i = 0; i < init.size(); ++i) init.data()[i] = stddev == 0.0 ? 0.0 : normal(rng);
  return store_.create(name, std::move(init), decay);
}

Parameter& GlFusionModel::make_constant(const std::string& name, int rows, int cols, double value, bool decay) {
  return store_.create(name, Matrix::Constant(rows, cols, value), decay);
}

LayerNormParams GlFusionModel::make_norm(const std::string& prefix) {
  return {&make_constant(prefix + ".gain", 1, config_.d_model, 1.0), &make_constant(prefix + ".bias", 1, config_.d_model, 0.0)};
}

GlFusionModel::GlFusionModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const int d = config_.d_model;
  const double embed_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double hidden_std = 1.0 / std::sqrt(4.0 * d);
  const double residual_scale = 1.0 / std::sqrt(2.0 * config_.n_layers);

  token_embedding_ = &make("embed.tokens", config_.vocab_size, d, embed_std, false);
  position_embedding_ = &make("embed.positions", config_.max_positions, d, embed_std, false);
  node_text_position_ = &make("embed.node_text_positions", std::max(config_.node_text_length, 1), d, embed_std, false);
  node_input_projection_ = &make("embed.node_projection", d, d, in_std);

  const std::set<int> mpnn(config_.mpnn_layers.begin(), config_.mpnn_layers.end());
  const std::set<int> cross(config_.cross_attention_layers.begin(), config_.cross_attention_layers.end());
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    FusionLayerParams layer;
    layer.attention_norm = make_norm(p + "attention_norm");
    layer.attention.query = &make(p + "attention.query", d, d, in_std);
    layer.attention.key = &make(p + "attention.key", d, d, in_std);
    layer.attention.value = &make(p + "attention.value", d, d, in_std);
    layer.attention.output = &make(p + "attention.output", d, d, in_std * residual_scale);
    layer.attention.heads = config_.n_heads;
    layer.feed_forward_norm = make_norm(p + "ffn_norm");
    layer.feed_forward.hidden = &make(p + "ffn.hidden", d, 4 * d, in_std);
    layer.feed_forward.hidden_bias = &make_constant(p + "ffn.hidden_bias", 1, 4 * d, 0.0);
    layer.feed_forward.output = &make(p + "ffn.output", 4 * d, d, hidden_std * residual_scale);
    layer.feed_forward.output_bias = &make_constant(p + "ffn.output_bias", 1, d, 0.0);
    if (mpnn.count(l)) {
      MessagePassingParams mp;
      const int agg_in = config_.ablation.no_multi_aggregators ? d : 3 * d;
      mp.norm = make_norm(p + "mpnn.norm");
      mp.node_projection = &make(p + "mpnn.node_projection", d, d, in_std);
      mp.node_bias = &make_constant(p + "mpnn.node_bias", 1, d, 0.0);
      mp.aggregate_projection = &make(p + "mpnn.aggregate_projection", agg_in, d, 1.0 / std::sqrt(static_cast<double>(agg_in)));
      mp.aggregate_bias = &make_constant(p + "mpnn.aggregate_bias", 1, d, 0.0);
      if (!config_.ablation.no_gate) mp.gate = &make_constant(p + "mpnn.gate", 1, d, 0.0);
      layer.message_passing = mp;
    }
    if (cross.count(l) && !config_.ablation.no_cross_attention) {
      CrossAttentionParams ca;
      ca.norm = make_norm(p + "cross.norm");
      ca.query1 = &make(p + "cross.query1", d, d, in_std);
      ca.key1 = &make(p + "cross.key1", d, d, in_std);
      ca.query2 = &make(p + "cross.query2", d, d, in_std);
      ca.key2 = &make(p + "cross.key2", d, d, in_std);
      ca.output = &make_constant(p + "cross.output", d, d, 0.0, true);
      layer.cross_attention = ca;
    }
    layers_.push_back(layer);
  }
  final_norm_ = make_norm("final_norm");
  if (config_.text_predictor()) {
    lm_head_ = &make("lm_head.weight", d, config_.vocab_size, 0.02);
    lm_bias_ = &make_constant("lm_head.bias", 1, config_.vocab_size, 0.0);
  }
  if (config_.gnn_predictor()) {
    const int out = config_.readout == ReadoutKind::GraphRegress ? 1 : config_.readout_classes;
    readout_weight_ = &make("readout.weight", d, out, in_std);
    readout_bias_ = &make_constant("readout.bias", 1, out, 0.0);
  }
}

PreparedInput GlFusionModel::prepare(const MixedSequence& sequence, const TextAttributedGraph& graph,
                                     const std::vector<int>& focus) const {
  if (sequence.num_nodes != graph.num_nodes) throw ConfigError("sequence and graph disagree on node count");
  if (graph.num_nodes > 0 && graph.node_text_length != config_.node_text_length) {
    throw ConfigError("graph L_n " + std::to_string(graph.node_text_length) + " differs from model L_n " +
                      std::to_string(config_.node_text_length));
  }
  PreparedInput in;
  in.sequence = sequence;
  in.masks = build_masks(sequence);
  for (const MixedToken& t : sequence.tokens) {
    int id = token::kUnk;
    switch (t.kind) {
      case MixedToken::Kind::Text:
        id = t.value;
        break;
      case MixedToken::Kind::GraphStart:
        id = token::kGraphStart;
        break;
      case MixedToken::Kind::Node:
        id = token::kNode;
        break;
      case MixedToken::Kind::GraphEnd:
        id = token::kGraphEnd;
        break;
    }
    if (id < 0 || id >= config_.vocab_size) throw ConfigError("token id " + std::to_string(id) + " outside vocabulary");
    in.token_ids.push_back(id);
  }
  for (int p : sequence.positions) {
    if (p >= config_.max_positions) {
      throw ConfigError("position " + std::to_string(p) + " exceeds max positions " + std::to_string(config_.max_positions));
    }
  }
  const int n = graph.num_nodes;
  const int ln = config_.node_text_length;
  in.node_text_rows.resize(static_cast<size_t>(n));
  for (int v = 0; v < n; ++v) {
    for (int k = 0; k < ln; ++k) {
      const TokenId tok = graph.node_text(v, k);
      in.node_text_ids.push_back(tok);
      in.node_text_slots.push_back(k);
      in.node_text_valid.push_back(tok != token::kPad);
      if (tok != token::kPad) in.node_text_rows[static_cast<size_t>(v)].push_back(v * ln + k);
    }
  }
  in.incoming.resize(static_cast<size_t>(n));
  for (size_t e = 0; e < graph.edges.size(); ++e) {
    const Edge& edge = graph.edges[e];
    if (edge.source < 0 || edge.source >= n || edge.target < 0 || edge.target >= n) {
      throw ConfigError("edge " + std::to_string(e) + " references a missing node");
    }
    in.edge_sources.push_back(edge.source);
    in.incoming[static_cast<size_t>(edge.target)].push_back(static_cast<int>(e));
    std::vector<int> rows;
    for (TokenId t : edge.text) {
      rows.push_back(static_cast<int>(in.edge_token_ids.size()));
      in.edge_token_ids.push_back(t);
    }
    in.edge_token_rows.push_back(std::move(rows));
  }
  for (int f : focus) {
    if (f < 0 || f >= n) throw ConfigError("focus node " + std::to_string(f) + " out of range");
  }
  in.focus = focus;
  return in;
}

GraphInputs GlFusionModel::embed(Tape& tape, const PreparedInput& in, Var& sequence_rows) const {
  Var table = tape.parameter(*token_embedding_);
  Var positions = tape.parameter(*position_embedding_);
  sequence_rows = add(gather_rows(table, in.token_ids), gather_rows(positions, in.sequence.positions));

  GraphInputs g;
  g.sequence = &in.sequence;
  g.masks = &in.masks;
  g.node_text_length = config_.node_text_length;
  g.node_text_valid = in.node_text_valid;
  g.edge_sources = in.edge_sources;
  g.incoming = in.incoming;
  g.node_text = add(gather_rows(table, in.node_text_ids), gather_rows(tape.parameter(*node_text_position_), in.node_text_slots));
  const int n = in.sequence.num_nodes;
  if (n > 0) {
    Var summary = linear(segment_mean(g.node_text, in.node_text_rows), *node_input_projection_);
    sequence_rows = add(sequence_rows, scatter_rows(summary, in.sequence.node_slots, in.sequence.length()));
  }
  g.edge_embeddings = segment_mean(gather_rows(table, in.edge_token_ids), in.edge_token_rows);
  return g;
}

TwinOutput GlFusionModel::forward(Tape& tape, const PreparedInput& in) const {
  Var t;
  GraphInputs graph = embed(tape, in, t);
  const LayerOptions options{!config_.ablation.no_gate, !config_.ablation.no_multi_aggregators};
  for (const FusionLayerParams& layer : layers_) t = fusion_layer_forward(t, graph, layer, options);
  Var final_rows = apply_layer_norm(t, final_norm_);

  TwinOutput out;
  if (lm_head_) out.lm_logits = linear(final_rows, *lm_head_, lm_bias_);
  const int n = in.sequence.num_nodes;
  out.node_representations = gather_rows(final_rows, in.sequence.node_slots);
  if (readout_weight_ && n > 0) {
    switch (config_.readout) {
      case ReadoutKind::NodeClassify:
        out.readout = linear(out.node_representations, *readout_weight_, readout_bias_);
        break;
      case ReadoutKind::EdgeClassify: {
        if (in.focus.size() != 2) throw ConfigError("edge readout needs a focus pair");
        Var pair = hadamard(gather_rows(out.node_representations, {in.focus[0]}),
                            gather_rows(out.node_representations, {in.focus[1]}));
        out.readout = linear(pair, *readout_weight_, readout_bias_);
        break;
      }
      case ReadoutKind::GraphClassify:
      case ReadoutKind::GraphRegress: {
        std::vector<int> all(static_cast<size_t>(n));
        for (int v = 0; v < n; ++v) all[static_cast<size_t>(v)] = v;
        out.readout = linear(segment_mean(out.node_representations, Segments{all}), *readout_weight_, readout_bias_);
        break;
      }
      case ReadoutKind::None:
        break;
    }
  }
  return out;
}

Var GlFusionModel::joint_loss(const TwinOutput& out, const PreparedInput& in, const LossTargets& targets) const {
  std::optional<Var> total;
  bool supervised = false;
  if (out.has_lm() && config_.lm_weight != 0.0) {
    const auto count = std::count_if(targets.next_tokens.begin(), targets.next_tokens.end(), [](int t) { return t >= 0; });
    if (count > 0) {
      Var lm = scale(cross_entropy_rows(out.lm_logits, targets.next_tokens), config_.lm_weight / static_cast<double>(count));
      total = lm;
      supervised = true;
    }
  }
  if (out.has_readout() && config_.gnn_weight != 0.0 && !std::holds_alternative<std::monostate>(targets.label)) {
    Var gnn;
    if (config_.readout == ReadoutKind::GraphRegress) {
      const double y = std::holds_alternative<double>(targets.label) ? std::get<double>(targets.label)
                                                                     : static_cast<double>(std::get<int>(targets.label));
      gnn = squared_error(out.readout, Matrix(Matrix::Constant(1, 1, y)));
    } else {
      if (!std::holds_alternative<int>(targets.label)) throw ConfigError("classification readout needs an integer label");
      const int label = std::get<int>(targets.label);
      if (label < 0 || label >= out.readout.cols()) throw ConfigError("label " + std::to_string(label) + " out of range");
      std::vector<int> rows(static_cast<size_t>(out.readout.rows()), -1);
      if (config_.readout == ReadoutKind::NodeClassify) {
        if (in.focus.empty()) throw ConfigError("node readout needs a focus node");
        rows[static_cast<size_t>(in.focus[0])] = label;
      } else {
        rows[0] = label;
      }
      gnn = cross_entropy_rows(out.readout, rows);
    }
    gnn = scale(gnn, config_.gnn_weight);
    total = total ? add(*total, gnn) : gnn;
    supervised = true;
  }
  if (!supervised) throw ConfigError("joint_loss: no supervision present");
  return *total;
}

double lm_cross_entropy(const Matrix& logits, const std::vector<int>& next_tokens) {
  double loss = 0.0;
  int count = 0;
  for (size_t i = 0; i < next_tokens.size(); ++i) {
    const int t = next_tokens[i];
    if (t < 0) continue;
    const auto row = logits.row(static_cast<Eigen::Index>(i));
    const double top = row.maxCoeff();
    loss += top + std::log((row.array() - top).exp().sum()) - row(t);
    ++count;
  }
  return count ? loss / count : 0.0;
}

int greedy_token(const Eigen::Ref<const Eigen::RowVectorXd>& logits) {
  int best = -1;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    if (j == token::kPad || j == token::kGraphStart || j == token::kNode || j == token::kGraphEnd) continue;
    if (best < 0 || logits(j) > logits(best)) best = static_cast<int>(j);
  }
  return best;
}

Tokens generate(const GlFusionModel& model, const Tokens& prompt, const TextAttributedGraph& graph,
                const Tokens& question, int max_new_tokens) {
  if (!model.config().text_predictor()) throw ConfigError("generate: text predictor is disabled");
  const int max_len = model.config().max_positions + graph.num_nodes + 2;
  const MixedSequence base = assemble_sequence(prompt, graph, question, max_len);
  const int room = model.config().max_positions - 1 - (base.positions.empty() ? -1 : base.positions.back());
  const int budget = std::min(max_new_tokens, room);
  Tokens produced;
  for (int step = 0; step < budget; ++step) {
    const MixedSequence seq = append_text(base, produced, max_len);
    Tape tape(false);
    const TwinOutput out = model.forward(tape, model.prepare(seq, graph));
    const int best = greedy_token(out.lm_logits.value().row(seq.length() - 1));
    if (best == token::kEos) break;
    produced.push_back(best);
  }
  return produced;
}

int ensemble_predict(const Eigen::Ref<const Eigen::RowVectorXd>& readout_logits,
                     const Eigen::Ref<const Eigen::RowVectorXd>& lm_logits, const std::vector<Tokens>& verbalizer) {
  if (static_cast<Eigen::Index>(verbalizer.size()) != readout_logits.cols()) {
    throw ConfigError("ensemble_predict: verbalizer has " + std::to_string(verbalizer.size()) + " classes, readout " +
                      std::to_string(readout_logits.cols()));
  }
  Eigen::RowVectorXd lm(readout_logits.cols());
  for (size_t c = 0; c < verbalizer.size(); ++c) {
    if (verbalizer[c].size() != 1) throw ConfigError("ensemble_predict: multi-token verbalization is unsupported");
    const TokenId t = verbalizer[c][0];
    if (t < 0 || t >= lm_logits.cols()) throw ConfigError("ensemble_predict: verbalizer token out of range");
    lm(static_cast<Eigen::Index>(c)) = lm_logits(t);
  }
  auto log_softmax = [](const Eigen::RowVectorXd& x) {
    const double top = x.maxCoeff();
    return Eigen::RowVectorXd((x.array() - top - std::log((x.array() - top).exp().sum())).matrix());
  };
  const Eigen::RowVectorXd score = log_softmax(readout_logits) + log_softmax(lm);
  Eigen::Index best = 0;
  score.maxCoeff(&best);
  return static_cast<int>(best);
}

}  // namespace glf
