#include "glfusion/tasks.hpp"

#include <algorithm>
#include <random>
#include <set>

namespace glf {

using nlohmann::json;

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Degree:
      return "degree";
    case TaskKind::Edge:
      return "edge";
    case TaskKind::NodeText:
      return "node_text";
  }
  return "degree";
}

TaskKind task_kind_from_string(const std::string& name) {
  for (TaskKind k : {TaskKind::Degree, TaskKind::Edge, TaskKind::NodeText}) {
    if (to_string(k) == name) return k;
  }
  throw GeneratorError("unknown task '" + name + "' (expected degree, edge or node_text)");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::Train:
      return "train";
    case Split::Val:
      return "val";
    case Split::Test:
      return "test";
  }
  return "train";
}

void GeneratorConfig::validate() const {
  if (min_nodes < 1 || max_nodes < min_nodes) throw GeneratorError("node count range is empty");
  if (max_nodes > static_cast<int>(node_name_words().size())) {
    throw GeneratorError("at most " + std::to_string(node_name_words().size()) + " nodes have distinct names");
  }
  if (min_edge_probability < 0.0 || max_edge_probability > 1.0 || max_edge_probability < min_edge_probability) {
    throw GeneratorError("edge probability range must lie in [0, 1]");
  }
  if (min_sentence_words < 1 || max_sentence_words < min_sentence_words) throw GeneratorError("sentence length range is empty");
  if (max_degree < 0) throw GeneratorError("max_degree must be non-negative");
  if (max_degree > 19) throw GeneratorError("degree verbalizer covers 0..19");
  if (train_count < 0 || val_count < 0 || test_count < 0) throw GeneratorError("split sizes must be non-negative");
}

int GeneratorConfig::count(Split split) const {
  switch (split) {
    case Split::Train:
      return train_count;
    case Split::Val:
      return val_count;
    case Split::Test:
      return test_count;
  }
  return 0;
}

json GeneratorConfig::to_json() const {
  return json{{"task", to_string(task)},
              {"min_nodes", min_nodes},
              {"max_nodes", max_nodes},
              {"min_edge_probability", min_edge_probability},
              {"max_edge_probability", max_edge_probability},
              {"min_sentence_words", min_sentence_words},
              {"max_sentence_words", max_sentence_words},
              {"max_degree", max_degree},
              {"train_count", train_count},
              {"val_count", val_count},
              {"test_count", test_count},
              {"seed", seed}};
}

GeneratorConfig GeneratorConfig::from_json(const json& j) {
  GeneratorConfig c;
  try {
    c.task = task_kind_from_string(j.at("task").get<std::string>());
    c.min_nodes = j.at("min_nodes").get<int>();
    c.max_nodes = j.at("max_nodes").get<int>();
    c.min_edge_probability = j.at("min_edge_probability").get<double>();
    c.max_edge_probability = j.at("max_edge_probability").get<double>();
    c.min_sentence_words = j.at("min_sentence_words").get<int>();
    c.max_sentence_words = j.at("max_sentence_words").get<int>();
    c.max_degree = j.at("max_degree").get<int>();
    c.train_count = j.at("train_count").get<int>();
    c.val_count = j.at("val_count").get<int>();
    c.test_count = j.at("test_count").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw GeneratorError(std::string("malformed generator config: ") + e.what());
  }
  c.validate();
  return c;
}

const std::vector<std::string>& node_name_words() {
  static const std::vector<std::string> names = {
      "alpha", "bravo",  "charlie", "delta",  "echo",    "foxtrot", "golf",   "hotel",  "india",
      "juliet", "kilo",  "lima",    "mike",   "november", "oscar",  "papa",   "quebec", "romeo",
      "sierra", "tango", "uniform", "victor", "whiskey", "xray",    "yankee", "zulu"};
  return names;
}

const std::vector<std::string>& sentence_words() {
  static const std::vector<std::string> words = {
      "apple",  "river",  "stone",  "cloud",  "green",  "quiet",  "bright", "small",  "large",  "warm",
      "cold",   "fast",   "slow",   "tree",   "house",  "road",   "bird",   "fish",   "dog",    "cat",
      "horse",  "mouse",  "lamp",   "book",   "paper",  "glass",  "water",  "fire",   "earth",  "wind",
      "light",  "dark",   "red",    "blue",   "yellow", "white",  "black",  "old",    "new",    "young",
      "happy",  "sad",    "calm",   "loud",   "soft",   "hard",   "sweet",  "bitter", "round",  "flat",
      "tall",   "short",  "deep",   "wide",   "narrow", "heavy",  "empty",  "full",   "rich",   "poor",
      "runs",   "jumps",  "sings",  "reads",  "writes", "sleeps", "eats",   "drinks", "walks",  "swims",
      "flies",  "builds", "opens",  "closes", "finds",  "keeps",  "holds",  "moves",  "turns",  "falls",
      "city",   "village", "forest", "mountain", "valley", "ocean", "island", "desert", "garden", "field",
      "window", "door",   "table",  "chair",  "bottle", "basket", "candle", "mirror", "pillow", "blanket",
      "morning", "evening", "winter", "summer", "spring", "autumn", "night", "day",  "week",   "year",
      "king",   "queen",  "farmer", "doctor", "teacher", "sailor", "painter", "baker", "hunter", "singer",
      "gold",   "silver", "iron",   "copper", "silk",   "wool",   "cotton", "clay",   "sand",   "salt"};
  return words;
}

namespace {

const std::vector<std::string>& template_words() {
  static const std::vector<std::string> words = {"here", "is",   "a",       "graph", "what", "the", "degree",
                                                 "of",   "node", "there",   "an",    "edge", "between", "and",
                                                 "text", "?",    "linked"};
  return words;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::mt19937_64 instance_rng(const GeneratorConfig& cfg, Split split, int index) {
  std::uint64_t s = splitmix64(cfg.seed);
  s = splitmix64(s ^ (static_cast<std::uint64_t>(split) + 1) * 0x1000193ULL);
  s = splitmix64(s ^ static_cast<std::uint64_t>(index));
  return std::mt19937_64(s);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Tokens words_to_tokens(const Vocabulary& vocab, const std::vector<std::string>& words) {
  Tokens out;
  for (const auto& w : words) {
    const TokenId id = vocab.id(w);
    if (id == token::kUnk) throw GeneratorError("word '" + w + "' missing from vocabulary");
    out.push_back(id);
  }
  return out;
}

struct RandomGraph {
  int n = 0;
  std::vector<std::vector<char>> adjacent;
};

RandomGraph erdos_renyi(const GeneratorConfig& cfg, std::mt19937_64& rng) {
  RandomGraph g;
  g.n = uniform_int(rng, cfg.min_nodes, cfg.max_nodes);
  const double p = std::uniform_real_distribution<double>(cfg.min_edge_probability, cfg.max_edge_probability)(rng);
  std::bernoulli_distribution coin(p);
  g.adjacent.assign(static_cast<size_t>(g.n), std::vector<char>(static_cast<size_t>(g.n), 0));
  for (int u = 0; u < g.n; ++u) {
    for (int v = u + 1; v < g.n; ++v) {
      if (coin(rng)) g.adjacent[static_cast<size_t>(u)][static_cast<size_t>(v)] = g.adjacent[static_cast<size_t>(v)][static_cast<size_t>(u)] = 1;
    }
  }
  return g;
}

/// Builds the text-attributed graph: distinct names, random sentences,
/// both directions of every undirected edge.
TextAttributedGraph to_tag(const RandomGraph& rg, const GeneratorConfig& cfg, const Vocabulary& vocab,
                           std::mt19937_64& rng, bool distinct_sentences) {
  TextAttributedGraph g(rg.n, cfg.node_text_length(), cfg.edge_text_length());
  std::vector<std::string> names = node_name_words();
  std::shuffle(names.begin(), names.end(), rng);
  const auto& pool = sentence_words();
  std::set<std::vector<std::string>> seen;
  for (int v = 0; v < rg.n; ++v) {
    std::vector<std::string> sentence;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000) throw GeneratorError("could not draw distinct node sentences");
      sentence.clear();
      const int len = uniform_int(rng, cfg.min_sentence_words, cfg.max_sentence_words);
      for (int k = 0; k < len; ++k) sentence.push_back(pool[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))]);
      if (!distinct_sentences || seen.insert(sentence).second) break;
    }
    std::vector<std::string> text{names[static_cast<size_t>(v)]};
    text.insert(text.end(), sentence.begin(), sentence.end());
    g.set_node_text(v, words_to_tokens(vocab, text));
  }
  const Tokens edge_text = words_to_tokens(vocab, {"linked"});
  for (int u = 0; u < rg.n; ++u) {
    for (int v = u + 1; v < rg.n; ++v) {
      if (rg.adjacent[static_cast<size_t>(u)][static_cast<size_t>(v)]) {
        g.add_edge(u, v, edge_text);
        g.add_edge(v, u, edge_text);
      }
    }
  }
  return g;
}

TokenId name_of(const TextAttributedGraph& g, int v) { return g.node_text(v, 0); }

void verify_or_throw(TaskKind task, const Instance& inst, const Vocabulary& vocab) {
  const std::string problem = check_instance(task, inst, vocab);
  if (!problem.empty()) throw GeneratorError("generated instance failed its oracle: " + problem);
}

}  // namespace

Vocabulary synthetic_vocabulary() {
  std::vector<std::string> words;
  for (int d = 0; d <= 19; ++d) words.push_back(std::to_string(d));
  words.push_back("yes");
  words.push_back("no");
  for (const auto& w : node_name_words()) words.push_back(w);
  for (const auto& w : template_words()) words.push_back(w);
  for (const auto& w : sentence_words()) words.push_back(w);
  return Vocabulary(words);
}

std::vector<Instance> generate_degree_task(const GeneratorConfig& cfg, Split split, const Vocabulary& vocab) {
  cfg.validate();
  std::vector<Instance> out;
  const Tokens prompt = words_to_tokens(vocab, {"here", "is", "a", "graph"});
  for (int i = 0; i < cfg.count(split); ++i) {
    auto rng = instance_rng(cfg, split, i);
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000) throw GeneratorError("degree task: every draw exceeded max_degree " + std::to_string(cfg.max_degree));
      const RandomGraph rg = erdos_renyi(cfg, rng);
      const int node = uniform_int(rng, 0, rg.n - 1);
      int degree = 0;
      for (char a : rg.adjacent[static_cast<size_t>(node)]) degree += a;
      if (degree > cfg.max_degree) continue;
      Instance inst;
      inst.graph = to_tag(rg, cfg, vocab, rng, false);
      inst.text.prompt = prompt;
      inst.text.question = words_to_tokens(vocab, {"what", "is", "the", "degree", "of", "node"});
      inst.text.question.push_back(name_of(inst.graph, node));
      inst.text.question.push_back(vocab.id("?"));
      inst.text.target = words_to_tokens(vocab, {std::to_string(degree)});
      inst.text.label = degree;
      inst.text.focus = {node};
      verify_or_throw(cfg.task, inst, vocab);
      out.push_back(std::move(inst));
      break;
    }
  }
  return out;
}

std::vector<Instance> generate_edge_task(const GeneratorConfig& cfg, Split split, const Vocabulary& vocab) {
  cfg.validate();
  std::vector<Instance> out;
  const Tokens prompt = words_to_tokens(vocab, {"here", "is", "a", "graph"});
  for (int i = 0; i < cfg.count(split); ++i) {
    auto rng = instance_rng(cfg, split, i);
    // Even indices ask about a linked pair, odd ones about an unlinked pair.
    const bool want_edge = (i % 2) == 0;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000) {
        throw GeneratorError(std::string("edge task: no ") + (want_edge ? "connected" : "unconnected") +
                             " pair after 1000 graphs; widen the edge probability range");
      }
      const RandomGraph rg = erdos_renyi(cfg, rng);
      std::vector<std::pair<int, int>> pairs;
      for (int u = 0; u < rg.n; ++u) {
        for (int v = 0; v < rg.n; ++v) {
          if (u != v && (rg.adjacent[static_cast<size_t>(u)][static_cast<size_t>(v)] != 0) == want_edge) pairs.emplace_back(u, v);
        }
      }
      if (pairs.empty()) continue;
      const auto [u, v] = pairs[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(pairs.size()) - 1))];
      Instance inst;
      inst.graph = to_tag(rg, cfg, vocab, rng, false);
      inst.text.prompt = prompt;
      inst.text.question = words_to_tokens(vocab, {"is", "there", "an", "edge", "between", "node"});
      inst.text.question.push_back(name_of(inst.graph, u));
      inst.text.question.push_back(vocab.id("and"));
      inst.text.question.push_back(vocab.id("node"));
      inst.text.question.push_back(name_of(inst.graph, v));
      inst.text.question.push_back(vocab.id("?"));
      inst.text.target = words_to_tokens(vocab, {want_edge ? "yes" : "no"});
      inst.text.label = want_edge ? 1 : 0;
      inst.text.focus = {u, v};
      verify_or_throw(cfg.task, inst, vocab);
      out.push_back(std::move(inst));
      break;
    }
  }
  return out;
}

std::vector<Instance> generate_node_text_task(const GeneratorConfig& cfg, Split split, const Vocabulary& vocab) {
  cfg.validate();
  std::vector<Instance> out;
  const Tokens prompt = words_to_tokens(vocab, {"here", "is", "a", "graph"});
  for (int i = 0; i < cfg.count(split); ++i) {
    auto rng = instance_rng(cfg, split, i);
    const RandomGraph rg = erdos_renyi(cfg, rng);
    const int node = uniform_int(rng, 0, rg.n - 1);
    Instance inst;
    inst.graph = to_tag(rg, cfg, vocab, rng, true);
    inst.text.prompt = prompt;
    inst.text.question = words_to_tokens(vocab, {"what", "is", "the", "text", "of", "node"});
    inst.text.question.push_back(name_of(inst.graph, node));
    inst.text.question.push_back(vocab.id("?"));
    inst.text.target = inst.graph.node_tokens(node);
    inst.text.focus = {node};
    verify_or_throw(cfg.task, inst, vocab);
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<Instance> generate_task(const GeneratorConfig& cfg, Split split, const Vocabulary& vocab) {
  switch (cfg.task) {
    case TaskKind::Degree:
      return generate_degree_task(cfg, split, vocab);
    case TaskKind::Edge:
      return generate_edge_task(cfg, split, vocab);
    case TaskKind::NodeText:
      return generate_node_text_task(cfg, split, vocab);
  }
  return {};
}

std::string check_instance(TaskKind task, const Instance& inst, const Vocabulary& vocab) {
  if (auto issue = validate_graph(inst.graph)) return "invalid graph: " + issue->message;
  const auto& focus = inst.text.focus;
  if (!inst.text.target) return "missing target";
  const Tokens& target = *inst.text.target;
  switch (task) {
    case TaskKind::Degree: {
      if (focus.size() != 1) return "degree instance needs one focus node";
      int degree = 0;
      for (const Edge& e : inst.graph.edges) degree += e.target == focus[0];
      if (target != Tokens{vocab.id(std::to_string(degree))}) return "target does not spell degree " + std::to_string(degree);
      if (!std::holds_alternative<int>(inst.text.label) || std::get<int>(inst.text.label) != degree) return "label mismatch";
      return {};
    }
    case TaskKind::Edge: {
      if (focus.size() != 2) return "edge instance needs a focus pair";
      const bool linked = std::any_of(inst.graph.edges.begin(), inst.graph.edges.end(), [&](const Edge& e) {
        return e.source == focus[0] && e.target == focus[1];
      });
      if (target != Tokens{vocab.id(linked ? "yes" : "no")}) return "target disagrees with edge membership";
      if (!std::holds_alternative<int>(inst.text.label) || std::get<int>(inst.text.label) != (linked ? 1 : 0)) {
        return "label mismatch";
      }
      return {};
    }
    case TaskKind::NodeText: {
      if (focus.size() != 1) return "node text instance needs one focus node";
      if (target != inst.graph.node_tokens(focus[0])) return "target is not the node's text";
      return {};
    }
  }
  return "unknown task";
}

std::vector<Tokens> class_verbalizer(TaskKind task, const GeneratorConfig& cfg, const Vocabulary& vocab) {
  std::vector<Tokens> out;
  switch (task) {
    case TaskKind::Degree:
      for (int d = 0; d <= cfg.max_degree; ++d) out.push_back({vocab.id(std::to_string(d))});
      break;
    case TaskKind::Edge:
      out.push_back({vocab.id("no")});
      out.push_back({vocab.id("yes")});
      break;
    case TaskKind::NodeText:
      break;
  }
  return out;
}

void configure_readout(TaskKind task, const GeneratorConfig& cfg, ModelConfig& model) {
  switch (task) {
    case TaskKind::Degree:
      model.readout = ReadoutKind::NodeClassify;
      model.readout_classes = cfg.max_degree + 1;
      break;
    case TaskKind::Edge:
      model.readout = ReadoutKind::EdgeClassify;
      model.readout_classes = 2;
      break;
    case TaskKind::NodeText:
      model.readout = ReadoutKind::None;
      model.readout_classes = 0;
      break;
  }
}

double score(const std::vector<Tokens>& predictions, const std::vector<Tokens>& references) {
  if (predictions.size() != references.size()) {
    throw std::invalid_argument("score: " + std::to_string(predictions.size()) + " predictions for " +
                                std::to_string(references.size()) + " references");
  }
  if (references.empty()) return 1.0;
  size_t hits = 0;
  for (size_t i = 0; i < references.size(); ++i) hits += predictions[i] == references[i];
  return static_cast<double>(hits) / static_cast<double>(references.size());
}

double score(const std::vector<int>& predictions, const std::vector<int>& references) {
  if (predictions.size() != references.size()) {
    throw std::invalid_argument("score: " + std::to_string(predictions.size()) + " predictions for " +
                                std::to_string(references.size()) + " references");
  }
  if (references.empty()) return 1.0;
  size_t hits = 0;
  for (size_t i = 0; i < references.size(); ++i) hits += predictions[i] == references[i];
  return static_cast<double>(hits) / static_cast<double>(references.size());
}

double token_level_score(const std::vector<Tokens>& predictions, const std::vector<Tokens>& references) {
  if (predictions.size() != references.size()) throw std::invalid_argument("token_level_score: length mismatch");
  size_t hits = 0, total = 0;
  for (size_t i = 0; i < references.size(); ++i) {
    for (size_t k = 0; k < references[i].size(); ++k) {
      hits += k < predictions[i].size() && predictions[i][k] == references[i][k];
    }
    total += references[i].size();
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 1.0;
}

}  // namespace glf
