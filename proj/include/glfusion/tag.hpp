#pragma once

// Text-attributed graphs, the closed word-level vocabulary, and task text.

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

namespace glf {

using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;
using TokenMatrix = Eigen::Matrix<TokenId, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace token {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kGraphStart = 2;
inline constexpr TokenId kNode = 3;
inline constexpr TokenId kGraphEnd = 4;
inline constexpr TokenId kBos = 5;
inline constexpr TokenId kEos = 6;
inline constexpr int kReservedCount = 7;
}  // namespace token

class VocabularyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Vocabulary {
 public:
  /// Reserved tokens occupy ids 0..6; `words` follow in order.
  explicit Vocabulary(const std::vector<std::string>& words = {});

  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  TokenId id(std::string_view word) const;
  const std::string& word(TokenId id) const;
  bool contains(std::string_view word) const;
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  Tokens tokenize(std::string_view text) const;
  std::string detokenize(const Tokens& tokens) const;

 private:
  void add(const std::string& word);
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

class PaddingError : public std::length_error {
 public:
  using std::length_error::length_error;
};

/// Right-pads with <pad> to exactly `length` tokens.
Tokens pad_to(const Tokens& tokens, int length);
/// Drops trailing <pad> tokens.
Tokens strip_padding(const Tokens& tokens);

struct Edge {
  int source = 0;
  int target = 0;
  Tokens text;

  bool operator==(const Edge&) const = default;
};

struct TextAttributedGraph {
  int num_nodes = 0;
  int node_text_length = 0;  // L_n
  int edge_text_length = 0;  // L_e
  std::vector<Edge> edges;
  TokenMatrix node_text;  // num_nodes x node_text_length, pad-filled

  TextAttributedGraph() = default;
  TextAttributedGraph(int n, int ln, int le)
      : num_nodes(n), node_text_length(ln), edge_text_length(le), node_text(TokenMatrix::Constant(n, ln, token::kPad)) {}

  void set_node_text(int node, const Tokens& tokens);
  Tokens node_tokens(int node) const;  // pad-stripped
  void add_edge(int source, int target, Tokens text = {});

  bool operator==(const TextAttributedGraph& o) const {
    return num_nodes == o.num_nodes && node_text_length == o.node_text_length &&
           edge_text_length == o.edge_text_length && edges == o.edges && node_text == o.node_text;
  }
};

struct GraphIssue {
  std::string message;
  int node = -1;
  int edge = -1;
};

/// First invariant violation, or nullopt when the graph is well formed.
std::optional<GraphIssue> validate_graph(const TextAttributedGraph& g, bool allow_self_loops = false);

using Label = std::variant<std::monostate, int, double>;

struct TaskText {
  Tokens prompt;
  Tokens question;
  std::optional<Tokens> target;
  Label label;
  // Nodes the readout is asked about (one for node tasks, two for pairs).
  std::vector<int> focus;

  bool has_label() const { return !std::holds_alternative<std::monostate>(label); }
};

struct Instance {
  TextAttributedGraph graph;
  TaskText text;
};

}  // namespace glf
