#include "glfusion/layers.hpp"

#include <cmath>

namespace glf {

namespace {
thread_local std::uint64_t score_evaluations = 0;
}

std::uint64_t cross_attention_score_count() { return score_evaluations; }
void reset_cross_attention_score_count() { score_evaluations = 0; }

Parameter& ParameterStore::create(std::string name, Matrix init, bool decay) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name " + name);
  params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(init), decay));
  return *params_.back();
}

Parameter* ParameterStore::find(const std::string& name) {
  for (auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

Var linear(const Var& x, Parameter& weight, Parameter* bias) {
  Tape& tape = x.tape();
  Var y = matmul(x, tape.parameter(weight));
  if (bias) y = add_row(y, tape.parameter(*bias));
  return y;
}

Var apply_layer_norm(const Var& x, const LayerNormParams& p) {
  Tape& tape = x.tape();
  return layer_norm(x, tape.parameter(*p.gain), tape.parameter(*p.bias));
}

Var masked_self_attention(const Var& input, const BoolMatrix& mask, const SelfAttentionParams& p) {
  if (mask.rows() != input.rows() || mask.cols() != input.rows()) {
    throw DimensionError("masked_self_attention: mask " + shape_string(mask) + " for sequence " +
                         shape_string(input.value()));
  }
  const Eigen::Index d = input.cols();
  if (p.heads <= 0 || d % p.heads != 0) throw DimensionError("masked_self_attention: width not divisible by heads");
  const Eigen::Index head_dim = d / p.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Var q = linear(input, *p.query);
  Var k = linear(input, *p.key);
  Var v = linear(input, *p.value);
  std::vector<Var> heads;
  heads.reserve(static_cast<size_t>(p.heads));
  for (int h = 0; h < p.heads; ++h) {
    Var qh = p.heads == 1 ? q : slice_cols(q, h * head_dim, head_dim);
    Var kh = p.heads == 1 ? k : slice_cols(k, h * head_dim, head_dim);
    Var vh = p.heads == 1 ? v : slice_cols(v, h * head_dim, head_dim);
    Var weights = masked_softmax_rows(scale(matmul_transposed(qh, kh), inv_sqrt), mask);
    heads.push_back(matmul(weights, vh));
  }
  Var merged = p.heads == 1 ? heads.front() : concat_cols(heads);
  return linear(merged, *p.output);
}

Var message_passing(const Var& node_states, const GraphInputs& graph, const MessagePassingParams& p,
                    bool multi_aggregators) {
  if (static_cast<size_t>(node_states.rows()) != graph.incoming.size()) {
    throw DimensionError("message_passing: " + std::to_string(graph.incoming.size()) + " neighborhoods for " +
                         shape_string(node_states.value()));
  }
  if (graph.edge_embeddings.rows() != static_cast<Eigen::Index>(graph.edge_sources.size())) {
    throw DimensionError("message_passing: edge embeddings do not match edge list");
  }
  for (int s : graph.edge_sources) {
    if (s < 0 || s >= node_states.rows()) {
      throw DimensionError("message_passing: edge references missing node " + std::to_string(s));
    }
  }
  Var messages = hadamard(gather_rows(node_states, graph.edge_sources), graph.edge_embeddings);
  Var aggregated = multi_aggregators
                       ? concat_cols<double>({segment_mean(messages, graph.incoming), segment_max(messages, graph.incoming),
                                              segment_std(messages, graph.incoming)})
                       : segment_mean(messages, graph.incoming);
  return linear(aggregated, *p.aggregate_projection, p.aggregate_bias);
}

Var gated_update(const Var& token_rows, const Var& node_update, const Var& gate) {
  Var g = tanh(matmul_transposed(token_rows, gate));
  return add(token_rows, scale_rows(node_update, g));
}

Var graph_text_cross_attention(const Var& input, const GraphInputs& graph, const CrossAttentionParams& p) {
  const MixedSequence& seq = *graph.sequence;
  const int n = seq.num_nodes;
  const int ln = graph.node_text_length;
  const Eigen::Index d = input.cols();
  const int len = seq.length();
  if (input.rows() != len) throw DimensionError("graph_text_cross_attention: input rows do not match sequence");
  if (graph.node_text.rows() != static_cast<Eigen::Index>(n) * ln || graph.node_text.cols() != d) {
    throw DimensionError("graph_text_cross_attention: node text " + shape_string(graph.node_text.value()) +
                         " does not match " + std::to_string(n) + " nodes of length " + std::to_string(ln));
  }
  const BoolMatrix& cross = graph.masks->cross_mask;
  if (cross.rows() != len || cross.cols() != n) throw DimensionError("graph_text_cross_attention: cross mask shape");

  Tape& tape = input.tape();
  Var zero = tape.constant(Matrix::Zero(len, d));
  if (n == 0) return linear(zero, *p.output);

  // Stage 1 pairs: node rows first (one own-text pair each), then every
  // text row with visible nodes, n pairs each in node order.
  std::vector<SegmentQuery> stage1;
  std::vector<int> node_rows;
  std::vector<int> text_rows;
  for (int i = 0; i < len; ++i) {
    const MixedToken& tok = seq.tokens[static_cast<size_t>(i)];
    if (tok.kind == MixedToken::Kind::Node) {
      stage1.push_back({i, tok.value * ln, ln});
      node_rows.push_back(i);
    }
  }
  for (int i = 0; i < len; ++i) {
    if (!seq.tokens[static_cast<size_t>(i)].is_text() || !cross.row(i).any()) continue;
    text_rows.push_back(i);
    for (int v = 0; v < n; ++v) {
      if (cross(i, v)) stage1.push_back({i, v * ln, ln});
    }
  }

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Var q1 = linear(input, *p.query1);
  Var k1 = linear(graph.node_text, *p.key1);
  Var extracted = attend_segments(q1, k1, graph.node_text, stage1, graph.node_text_valid, inv_sqrt_d, &score_evaluations);

  std::vector<int> node_pair_rows(node_rows.size());
  for (size_t k = 0; k < node_rows.size(); ++k) node_pair_rows[k] = static_cast<int>(k);
  Var updates = scatter_rows(gather_rows(extracted, node_pair_rows), node_rows, len);

  if (!text_rows.empty()) {
    std::vector<SegmentQuery> stage2;
    int at = static_cast<int>(node_rows.size());
    for (int i : text_rows) {
      const int count = static_cast<int>(cross.row(i).count());
      stage2.push_back({i, at, count});
      at += count;
    }
    Var q2 = linear(input, *p.query2);
    Var k2 = linear(extracted, *p.key2);
    std::vector<char> all_valid(static_cast<size_t>(extracted.rows()), 1);
    Var text_part = attend_segments(q2, k2, extracted, stage2, all_valid, 1.0, &score_evaluations);
    updates = add(updates, scatter_rows(text_part, text_rows, len));
  }
  return linear(updates, *p.output);
}

Var feed_forward(const Var& input, const FeedForwardParams& p) {
  return linear(gelu(linear(input, *p.hidden, p.hidden_bias)), *p.output, p.output_bias);
}

Var fusion_layer_forward(const Var& t_in, const GraphInputs& graph, const FusionLayerParams& p,
                         const LayerOptions& options) {
  const MixedSequence& seq = *graph.sequence;
  Var t = add(t_in, masked_self_attention(apply_layer_norm(t_in, p.attention_norm), graph.masks->self_mask, p.attention));

  if (p.message_passing && seq.num_nodes > 0) {
    const MessagePassingParams& mp = *p.message_passing;
    Var normed_nodes = gather_rows(apply_layer_norm(t, mp.norm), seq.node_slots);
    Var states = linear(normed_nodes, *mp.node_projection, mp.node_bias);
    Var update = message_passing(states, graph, mp, options.multi_aggregators);
    if (options.gate) {
      Var token_rows = gather_rows(t, seq.node_slots);
      update = scale_rows(update, tanh(matmul_transposed(token_rows, t.tape().parameter(*mp.gate))));
    }
    t = add(t, scatter_rows(update, seq.node_slots, seq.length()));
  }

  if (p.cross_attention) {
    t = add(t, graph_text_cross_attention(apply_layer_norm(t, p.cross_attention->norm), graph, *p.cross_attention));
  }

  return add(t, feed_forward(apply_layer_norm(t, p.feed_forward_norm), p.feed_forward));
}

}  // namespace glf
