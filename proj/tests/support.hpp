#pragma once

#include "glfusion/autodiff.hpp"
#include "glfusion/model.hpp"
#include "glfusion/tag.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace glf::testing {

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

struct GradientReport {
  double worst = 0.0;
  std::string where;
  int checked = 0;
};

/// Compares tape gradients with fourth-order central differences (step 1e-4). `loss`
/// builds a scalar on the given tape. Tensors with more than `full_limit`
/// entries are spot-checked at `samples` random coordinates.
inline GradientReport check_gradients(const std::vector<Parameter*>& params,
                                      const std::function<Var(Tape&)>& loss, int full_limit = 64, int samples = 24,
                                      std::uint64_t seed = 7) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var l = loss(tape);
    tape.backward(l);
    tape.accumulate_parameter_gradients();
  }
  auto evaluate = [&] {
    Tape tape(false);
    return loss(tape).value()(0, 0);
  };
  GradientReport report;
  std::mt19937_64 rng(seed);
  const double h = 1e-4;
  for (Parameter* p : params) {
    std::vector<Eigen::Index> coords;
    if (p->value.size() <= full_limit) {
      for (Eigen::Index i = 0; i < p->value.size(); ++i) coords.push_back(i);
    } else {
      std::uniform_int_distribution<Eigen::Index> pick(0, p->value.size() - 1);
      for (int s = 0; s < samples; ++s) coords.push_back(pick(rng));
    }
    for (Eigen::Index i : coords) {
      double& x = p->value.data()[i];
      const double saved = x;
      auto at = [&](double offset) {
        x = saved + offset;
        return evaluate();
      };
      const double numeric = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
      x = saved;
      const double analytic = p->grad.data()[i];
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-4});
      ++report.checked;
      if (rel > report.worst) {
        report.worst = rel;
        report.where = p->name + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic) + " numeric " +
                       std::to_string(numeric);
      }
    }
  }
  for (Parameter* p : params) p->zero_grad();
  return report;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return INFINITY;
  return (a - b).cwiseAbs().maxCoeff();
}

/// Small vocabulary: reserved words plus w0..w{count-1}.
inline Vocabulary toy_vocabulary(int count) {
  std::vector<std::string> words;
  for (int i = 0; i < count; ++i) words.push_back("w" + std::to_string(i));
  return Vocabulary(words);
}

/// Random graph with random node/edge text over ids [kReservedCount, vocab).
inline TextAttributedGraph random_graph(std::mt19937_64& rng, int n, int ln, int le, int vocab, double p = 0.4) {
  TextAttributedGraph g(n, ln, le);
  std::uniform_int_distribution<int> word(token::kReservedCount, vocab - 1);
  std::uniform_int_distribution<int> length(0, ln);
  std::uniform_int_distribution<int> edge_length(0, le);
  std::bernoulli_distribution coin(p);
  for (int v = 0; v < n; ++v) {
    Tokens t;
    const int len = length(rng);
    for (int k = 0; k < len; ++k) t.push_back(word(rng));
    g.set_node_text(v, t);
  }
  for (int u = 0; u < n; ++u) {
    for (int v = 0; v < n; ++v) {
      if (u == v || !coin(rng)) continue;
      Tokens t;
      const int len = edge_length(rng);
      for (int k = 0; k < len; ++k) t.push_back(word(rng));
      g.add_edge(u, v, t);
    }
  }
  return g;
}

inline Tokens random_text(std::mt19937_64& rng, int length, int vocab) {
  std::uniform_int_distribution<int> word(token::kReservedCount, vocab - 1);
  Tokens t;
  for (int k = 0; k < length; ++k) t.push_back(word(rng));
  return t;
}

inline ModelConfig small_config(int vocab, int ln, int le, int d = 16, int layers = 2) {
  ModelConfig c;
  c.d_model = d;
  c.n_layers = layers;
  c.n_heads = 2;
  c.vocab_size = vocab;
  c.max_positions = 32;
  c.node_text_length = ln;
  c.edge_text_length = le;
  c.mpnn_layers.clear();
  c.cross_attention_layers.clear();
  for (int l = 0; l < layers; ++l) (l % 2 == 0 ? c.mpnn_layers : c.cross_attention_layers).push_back(l);
  return c;
}

/// Random instance sized for `cfg`: prompt, graph of n nodes, question.
inline Instance random_instance(std::mt19937_64& rng, const ModelConfig& cfg, int min_nodes = 1, int max_nodes = 6) {
  Instance inst;
  std::uniform_int_distribution<int> nodes(min_nodes, max_nodes), words(1, 4);
  inst.graph = random_graph(rng, nodes(rng), cfg.node_text_length, cfg.edge_text_length, cfg.vocab_size);
  inst.text.prompt = random_text(rng, words(rng), cfg.vocab_size);
  inst.text.question = random_text(rng, words(rng), cfg.vocab_size);
  return inst;
}

/// Node v of `g` becomes node perm[v]; edges keep their order.
inline TextAttributedGraph permute_graph(const TextAttributedGraph& g, const std::vector<int>& perm) {
  TextAttributedGraph out(g.num_nodes, g.node_text_length, g.edge_text_length);
  for (int v = 0; v < g.num_nodes; ++v) out.node_text.row(perm[static_cast<size_t>(v)]) = g.node_text.row(v);
  for (const Edge& e : g.edges) out.add_edge(perm[static_cast<size_t>(e.source)], perm[static_cast<size_t>(e.target)], e.text);
  return out;
}

/// Random well-formed mixed token list: text, optionally one graph span with
/// shuffled node ids, then more text. `n` receives the node count.
inline std::vector<MixedToken> fuzz_tokens(std::mt19937_64& rng, int& n) {
  std::uniform_int_distribution<int> len(0, 6), nodes(0, 6), word(7, 40);
  std::bernoulli_distribution has_graph(0.85);
  std::vector<MixedToken> out;
  const int pre = len(rng);
  for (int k = 0; k < pre; ++k) out.push_back(MixedToken::text(word(rng)));
  n = 0;
  if (has_graph(rng)) {
    n = nodes(rng);
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    out.push_back(MixedToken::graph_start());
    for (int v : order) out.push_back(MixedToken::node(v));
    out.push_back(MixedToken::graph_end());
    const int post = len(rng);
    for (int k = 0; k < post; ++k) out.push_back(MixedToken::text(word(rng)));
  }
  return out;
}

/// Gives every zero-initialized parameter (gates, cross output projection,
/// biases) small random values so gradient and equivariance checks exercise
/// every path.
inline void perturb_parameters(GlFusionModel& model, std::uint64_t seed, double scale = 0.2) {
  std::mt19937_64 rng(seed);
  for (Parameter* p : model.parameters().all()) {
    p->value += random_matrix(rng, p->value.rows(), p->value.cols(), scale);
  }
}

}  // namespace glf::testing
