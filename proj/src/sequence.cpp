#include "glfusion/sequence.hpp"

#include <sstream>

namespace glf {

std::vector<int> assign_positions(const std::vector<MixedToken>& tokens) {
  std::vector<int> pos(tokens.size(), 0);
  int next = 0;
  bool in_graph = false;
  int graph_pos = 0;
  for (size_t i = 0; i < tokens.size(); ++i) {
    switch (tokens[i].kind) {
      case MixedToken::Kind::GraphStart:
        in_graph = true;
        graph_pos = next++;
        pos[i] = graph_pos;
        break;
      case MixedToken::Kind::Node:
        pos[i] = graph_pos;
        break;
      case MixedToken::Kind::GraphEnd:
        in_graph = false;
        pos[i] = graph_pos;
        break;
      case MixedToken::Kind::Text:
        pos[i] = in_graph ? graph_pos : next++;
        break;
    }
  }
  return pos;
}

MixedSequence make_sequence(std::vector<MixedToken> tokens, int num_nodes) {
  MixedSequence seq;
  seq.num_nodes = num_nodes;
  seq.node_slots.assign(static_cast<size_t>(num_nodes), -1);
  int start = -1, end = -1;
  for (size_t i = 0; i < tokens.size(); ++i) {
    const MixedToken& t = tokens[i];
    const int at = static_cast<int>(i);
    switch (t.kind) {
      case MixedToken::Kind::GraphStart:
        if (start >= 0) throw SequenceError("only one graph per sequence is supported");
        start = at;
        break;
      case MixedToken::Kind::GraphEnd:
        if (start < 0 || end >= 0) throw SequenceError("<graph_end> without matching <graph_start>");
        end = at;
        break;
      case MixedToken::Kind::Node:
        if (start < 0 || end >= 0) throw SequenceError("node token outside the graph span");
        if (t.value < 0 || t.value >= num_nodes) {
          throw SequenceError("node token " + std::to_string(t.value) + " out of range");
        }
        if (seq.node_slots[static_cast<size_t>(t.value)] >= 0) {
          throw SequenceError("node " + std::to_string(t.value) + " appears twice");
        }
        seq.node_slots[static_cast<size_t>(t.value)] = at;
        break;
      case MixedToken::Kind::Text:
        if (start >= 0 && end < 0) throw SequenceError("text token inside the graph span");
        break;
    }
  }
  if (start >= 0 && end < 0) throw SequenceError("unterminated graph span");
  for (int v = 0; v < num_nodes; ++v) {
    if (seq.node_slots[static_cast<size_t>(v)] < 0) throw SequenceError("node " + std::to_string(v) + " missing");
  }
  if (start < 0 && num_nodes > 0) throw SequenceError("nodes given without a graph span");
  if (start >= 0) seq.graph_span = std::make_pair(start, end);
  seq.positions = assign_positions(tokens);
  seq.tokens = std::move(tokens);
  return seq;
}

MixedSequence assemble_sequence(const Tokens& prompt, const TextAttributedGraph& graph, const Tokens& question,
                                int max_length) {
  std::vector<MixedToken> tokens;
  tokens.reserve(prompt.size() + question.size() + static_cast<size_t>(graph.num_nodes) + 3);
  tokens.push_back(MixedToken::text(token::kBos));
  for (TokenId t : prompt) tokens.push_back(MixedToken::text(t));
  tokens.push_back(MixedToken::graph_start());
  for (int v = 0; v < graph.num_nodes; ++v) tokens.push_back(MixedToken::node(v));
  tokens.push_back(MixedToken::graph_end());
  for (TokenId t : question) tokens.push_back(MixedToken::text(t));
  if (static_cast<int>(tokens.size()) > max_length) {
    throw SequenceError("sequence length " + std::to_string(tokens.size()) + " exceeds maximum " +
                        std::to_string(max_length));
  }
  return make_sequence(std::move(tokens), graph.num_nodes);
}

MixedSequence append_text(const MixedSequence& seq, const Tokens& extra, int max_length) {
  if (seq.length() + static_cast<int>(extra.size()) > max_length) {
    throw SequenceError("sequence length " + std::to_string(seq.length() + static_cast<int>(extra.size())) +
                        " exceeds maximum " + std::to_string(max_length));
  }
  MixedSequence out = seq;
  int next = seq.positions.empty() ? 0 : seq.positions.back() + 1;
  for (TokenId t : extra) {
    out.tokens.push_back(MixedToken::text(t));
    out.positions.push_back(next++);
  }
  return out;
}

BoolMatrix build_self_mask(const MixedSequence& seq) {
  const int len = seq.length();
  BoolMatrix mask = BoolMatrix::Constant(len, len, false);
  for (int i = 0; i < len; ++i) mask.row(i).head(i + 1).setConstant(true);
  if (seq.graph_span) {
    const auto [gs, ge] = *seq.graph_span;
    for (int i = gs; i <= ge; ++i) {
      mask.row(i).setConstant(false);
      mask.row(i).head(gs).setConstant(true);
      mask.row(i).segment(gs, ge - gs + 1).setConstant(true);
    }
  }
  return mask;
}

BoolMatrix build_cross_mask(const MixedSequence& seq) {
  const int len = seq.length();
  BoolMatrix mask = BoolMatrix::Constant(len, seq.num_nodes, false);
  if (!seq.graph_span) return mask;
  for (int v = 0; v < seq.num_nodes; ++v) mask(seq.node_slots[static_cast<size_t>(v)], v) = true;
  for (int i = seq.graph_span->second + 1; i < len; ++i) mask.row(i).setConstant(true);
  return mask;
}

AttentionMaskPair build_masks(const MixedSequence& seq) { return {build_self_mask(seq), build_cross_mask(seq)}; }

std::string render_mask(const BoolMatrix& mask, const MixedSequence& seq, const Vocabulary* vocab) {
  std::ostringstream os;
  for (Eigen::Index i = 0; i < mask.rows(); ++i) {
    for (Eigen::Index j = 0; j < mask.cols(); ++j) os << (mask(i, j) ? '#' : '.');
    os << "  ";
    if (i < seq.length()) {
      const MixedToken& t = seq.tokens[static_cast<size_t>(i)];
      switch (t.kind) {
        case MixedToken::Kind::Text:
          os << (vocab ? vocab->word(t.value) : std::to_string(t.value));
          break;
        case MixedToken::Kind::GraphStart:
          os << "<graph_start>";
          break;
        case MixedToken::Kind::Node:
          os << "<node:" << t.value << ">";
          break;
        case MixedToken::Kind::GraphEnd:
          os << "<graph_end>";
          break;
      }
      os << " @" << seq.positions[static_cast<size_t>(i)];
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace glf
