#include "glfusion/dataset.hpp"

#include <fstream>

namespace glf {

using nlohmann::json;

namespace {

json words_of(const Tokens& tokens, const Vocabulary& vocab) {
  json out = json::array();
  for (TokenId t : tokens) out.push_back(vocab.word(t));
  return out;
}

Tokens tokens_of(const json& words, const Vocabulary& vocab, const char* field) {
  if (!words.is_array()) throw DatasetError(std::string("field '") + field + "' must be an array of words");
  Tokens out;
  for (const auto& w : words) {
    if (!w.is_string()) throw DatasetError(std::string("field '") + field + "' holds a non-string token");
    out.push_back(vocab.id(w.get<std::string>()));
  }
  return out;
}

}  // namespace

json instance_to_json(const Instance& instance, const Vocabulary& vocab) {
  const TextAttributedGraph& g = instance.graph;
  json graph;
  graph["n"] = g.num_nodes;
  graph["L_n"] = g.node_text_length;
  graph["L_e"] = g.edge_text_length;
  graph["edges"] = json::array();
  for (const Edge& e : g.edges) graph["edges"].push_back(json::array({e.source, e.target, words_of(e.text, vocab)}));
  graph["node_text"] = json::array();
  for (int v = 0; v < g.num_nodes; ++v) graph["node_text"].push_back(words_of(g.node_tokens(v), vocab));

  json record;
  record["graph"] = std::move(graph);
  record["prompt"] = words_of(instance.text.prompt, vocab);
  record["question"] = words_of(instance.text.question, vocab);
  if (instance.text.target) record["target"] = words_of(*instance.text.target, vocab);
  if (const int* l = std::get_if<int>(&instance.text.label)) record["label"] = *l;
  if (const double* l = std::get_if<double>(&instance.text.label)) record["label"] = *l;
  if (!instance.text.focus.empty()) record["focus"] = instance.text.focus;
  return record;
}

Instance instance_from_json(const json& record, const Vocabulary& vocab) {
  try {
    const json& graph = record.at("graph");
    const int n = graph.at("n").get<int>();
    const int ln = graph.at("L_n").get<int>();
    const int le = graph.at("L_e").get<int>();
    Instance inst;
    inst.graph = TextAttributedGraph(n, ln, le);
    for (const auto& e : graph.at("edges")) {
      if (!e.is_array() || e.size() != 3) throw DatasetError("edge must be [source, target, [tokens]]");
      inst.graph.add_edge(e[0].get<int>(), e[1].get<int>(), tokens_of(e[2], vocab, "edges"));
    }
    const json& texts = graph.at("node_text");
    if (!texts.is_array() || static_cast<int>(texts.size()) != n) {
      throw DatasetError("node_text must have one row per node");
    }
    for (int v = 0; v < n; ++v) inst.graph.set_node_text(v, tokens_of(texts[static_cast<size_t>(v)], vocab, "node_text"));

    if (auto issue = validate_graph(inst.graph)) throw DatasetError("invalid graph: " + issue->message);
    inst.text.prompt = tokens_of(record.at("prompt"), vocab, "prompt");
    inst.text.question = tokens_of(record.at("question"), vocab, "question");
    if (record.contains("target")) inst.text.target = tokens_of(record["target"], vocab, "target");
    if (record.contains("label")) {
      const json& l = record["label"];
      if (l.is_number_integer()) {
        inst.text.label = l.get<int>();
      } else if (l.is_number()) {
        inst.text.label = l.get<double>();
      } else {
        throw DatasetError("label must be a number");
      }
    }
    if (record.contains("focus")) inst.text.focus = record["focus"].get<std::vector<int>>();
    if (!inst.text.target && !inst.text.has_label()) throw DatasetError("record has neither target nor label");
    return inst;
  } catch (const json::exception& e) {
    throw DatasetError(std::string("malformed record: ") + e.what());
  } catch (const PaddingError& e) {
    throw DatasetError(std::string("malformed record: ") + e.what());
  }
}

void write_dataset(const std::string& path, const std::vector<Instance>& instances, const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot write dataset file " + path);
  for (const Instance& inst : instances) out << instance_to_json(inst, vocab).dump() << '\n';
  if (!out) throw DatasetError("write failed for " + path);
}

std::vector<Instance> read_dataset(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open dataset file " + path);
  std::vector<Instance> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(instance_from_json(json::parse(line), vocab));
    } catch (const json::exception& e) {
      throw DatasetError(path + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const DatasetError& e) {
      throw DatasetError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace glf
