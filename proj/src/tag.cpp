#include "glfusion/tag.hpp"

#include <fstream>
#include <sstream>

namespace glf {

namespace {
const std::vector<std::string>& reserved_words() {
  static const std::vector<std::string> words = {"<pad>",       "<unk>", "<graph_start>", "<node>",
                                                 "<graph_end>", "<bos>", "<eos>"};
  return words;
}
}  // namespace

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  for (const auto& w : reserved_words()) add(w);
  for (const auto& w : words) {
    if (!contains(w)) add(w);
  }
}

void Vocabulary::add(const std::string& word) {
  if (word.empty() || word.find_first_of(" \t\n\r") != std::string::npos) {
    throw VocabularyError("vocabulary word must be non-empty without whitespace: '" + word + "'");
  }
  index_.emplace(word, static_cast<TokenId>(words_.size()));
  words_.push_back(word);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw VocabularyError("cannot open vocabulary file " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  const auto& reserved = reserved_words();
  if (lines.size() < reserved.size()) throw VocabularyError(path + ": missing reserved tokens");
  for (size_t i = 0; i < reserved.size(); ++i) {
    if (lines[i] != reserved[i]) {
      throw VocabularyError(path + ": line " + std::to_string(i + 1) + " must be " + reserved[i]);
    }
  }
  Vocabulary v;
  for (size_t i = reserved.size(); i < lines.size(); ++i) {
    if (v.contains(lines[i])) throw VocabularyError(path + ": duplicate word " + lines[i]);
    v.add(lines[i]);
  }
  return v;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw VocabularyError("cannot write vocabulary file " + path);
  for (const auto& w : words_) out << w << '\n';
}

TokenId Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? token::kUnk : it->second;
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id < 0 || id >= size()) return words_[token::kUnk];
  return words_[static_cast<size_t>(id)];
}

bool Vocabulary::contains(std::string_view word) const { return index_.count(std::string(word)) != 0; }

Tokens Vocabulary::tokenize(std::string_view text) const {
  Tokens out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(id(w));
  return out;
}

std::string Vocabulary::detokenize(const Tokens& tokens) const {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += word(tokens[i]);
  }
  return out;
}

Tokens pad_to(const Tokens& tokens, int length) {
  if (static_cast<int>(tokens.size()) > length) {
    throw PaddingError("pad_to: sequence of length " + std::to_string(tokens.size()) + " exceeds " +
                       std::to_string(length));
  }
  Tokens out = tokens;
  out.resize(static_cast<size_t>(length), token::kPad);
  return out;
}

Tokens strip_padding(const Tokens& tokens) {
  Tokens out = tokens;
  while (!out.empty() && out.back() == token::kPad) out.pop_back();
  return out;
}

void TextAttributedGraph::set_node_text(int node, const Tokens& tokens) {
  const Tokens padded = pad_to(tokens, node_text_length);
  for (int k = 0; k < node_text_length; ++k) node_text(node, k) = padded[static_cast<size_t>(k)];
}

Tokens TextAttributedGraph::node_tokens(int node) const {
  Tokens row(node_text.row(node).data(), node_text.row(node).data() + node_text.cols());
  return strip_padding(row);
}

void TextAttributedGraph::add_edge(int source, int target, Tokens text) {
  edges.push_back(Edge{source, target, std::move(text)});
}

std::optional<GraphIssue> validate_graph(const TextAttributedGraph& g, bool allow_self_loops) {
  if (g.num_nodes < 0) return GraphIssue{"negative node count", -1, -1};
  if (g.node_text.rows() != g.num_nodes) {
    return GraphIssue{"node_text has " + std::to_string(g.node_text.rows()) + " rows for " +
                          std::to_string(g.num_nodes) + " nodes",
                      -1, -1};
  }
  if (g.num_nodes > 0 && g.node_text.cols() != g.node_text_length) {
    return GraphIssue{"node_text rows are not padded to L_n = " + std::to_string(g.node_text_length), 0, -1};
  }
  for (int v = 0; v < g.num_nodes; ++v) {
    bool in_padding = false;
    for (int k = 0; k < g.node_text.cols(); ++k) {
      const TokenId t = g.node_text(v, k);
      if (t < 0) return GraphIssue{"negative token id in node text", v, -1};
      if (t == token::kPad) {
        in_padding = true;
      } else if (in_padding) {
        return GraphIssue{"node text has a token after padding", v, -1};
      }
    }
  }
  for (size_t e = 0; e < g.edges.size(); ++e) {
    const Edge& edge = g.edges[e];
    const int ei = static_cast<int>(e);
    if (edge.source < 0 || edge.source >= g.num_nodes) {
      return GraphIssue{"edge source " + std::to_string(edge.source) + " out of range", edge.source, ei};
    }
    if (edge.target < 0 || edge.target >= g.num_nodes) {
      return GraphIssue{"edge target " + std::to_string(edge.target) + " out of range", edge.target, ei};
    }
    if (!allow_self_loops && edge.source == edge.target) return GraphIssue{"self loop", edge.source, ei};
    if (static_cast<int>(edge.text.size()) > g.edge_text_length) {
      return GraphIssue{"edge text longer than L_e = " + std::to_string(g.edge_text_length), -1, ei};
    }
  }
  return std::nullopt;
}

}  // namespace glf
