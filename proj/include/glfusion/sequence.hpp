#pragma once

// Mixed graph/text input sequences, shared positional indices, and the two
// attention masks of the structure-aware layers.

#include "glfusion/autodiff.hpp"
#include "glfusion/tag.hpp"

#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace glf {

class SequenceError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct MixedToken {
  enum class Kind { Text, GraphStart, Node, GraphEnd };
  Kind kind = Kind::Text;
  int value = 0;  // token id for Text, node index for Node

  static MixedToken text(TokenId id) { return {Kind::Text, id}; }
  static MixedToken graph_start() { return {Kind::GraphStart, 0}; }
  static MixedToken node(int v) { return {Kind::Node, v}; }
  static MixedToken graph_end() { return {Kind::GraphEnd, 0}; }

  bool is_text() const { return kind == Kind::Text; }
  bool is_graph() const { return kind != Kind::Text; }
  bool operator==(const MixedToken&) const = default;
};

struct MixedSequence {
  std::vector<MixedToken> tokens;
  std::vector<int> positions;
  std::optional<std::pair<int, int>> graph_span;  // inclusive [GraphStart, GraphEnd]
  int num_nodes = 0;
  std::vector<int> node_slots;  // node v sits at tokens[node_slots[v]]

  int length() const { return static_cast<int>(tokens.size()); }
  /// Index one past GraphEnd, or 0 when there is no graph.
  int text_after_graph_begin() const { return graph_span ? graph_span->second + 1 : 0; }
};

/// Validates structure (at most one graph, every node exactly once inside
/// it) and fills positions, graph_span and node_slots.
MixedSequence make_sequence(std::vector<MixedToken> tokens, int num_nodes);

/// <bos>, prompt, <graph_start>, nodes in storage order, <graph_end>, question.
MixedSequence assemble_sequence(const Tokens& prompt, const TextAttributedGraph& graph, const Tokens& question,
                                int max_length);

/// Returns seq with extra text tokens appended.
MixedSequence append_text(const MixedSequence& seq, const Tokens& extra, int max_length);

/// Text tokens count up from 0; the whole graph span shares the GraphStart
/// index and the next text token continues one past it.
std::vector<int> assign_positions(const std::vector<MixedToken>& tokens);

struct AttentionMaskPair {
  BoolMatrix self_mask;   // L x L, row = query
  BoolMatrix cross_mask;  // L x n, row = query token, column = node
};

BoolMatrix build_self_mask(const MixedSequence& seq);
BoolMatrix build_cross_mask(const MixedSequence& seq);
AttentionMaskPair build_masks(const MixedSequence& seq);

/// ASCII grid ('#' permitted, '.' blocked) with a token legend per row.
std::string render_mask(const BoolMatrix& mask, const MixedSequence& seq, const Vocabulary* vocab = nullptr);

}  // namespace glf
