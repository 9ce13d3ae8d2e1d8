#include "doctest.h"

#include "glfusion/dataset.hpp"
#include "glfusion/tag.hpp"
#include "glfusion/tasks.hpp"
#include "support.hpp"

#include <filesystem>
#include <fstream>

using namespace glf;

TEST_CASE("tokenize and detokenize round trip") {
  const Vocabulary vocab({"node", "degree", "three"});
  CHECK(vocab.tokenize("").empty());
  CHECK(vocab.detokenize({}) == "");
  const Tokens t = vocab.tokenize("node degree three");
  REQUIRE(t.size() == 3);
  CHECK(vocab.detokenize(t) == "node degree three");
  CHECK(vocab.tokenize("node unknownword")[1] == token::kUnk);
  CHECK(vocab.tokenize("  node\t degree ") == vocab.tokenize("node degree"));
}

TEST_CASE("generated sentences round trip through the tokenizer") {
  const Vocabulary vocab = synthetic_vocabulary();
  GeneratorConfig cfg;
  cfg.task = TaskKind::NodeText;
  cfg.train_count = 80;
  int sentences = 0;
  for (const Instance& inst : generate_task(cfg, Split::Train, vocab)) {
    for (int v = 0; v < inst.graph.num_nodes && sentences < 1000; ++v, ++sentences) {
      const std::string text = vocab.detokenize(inst.graph.node_tokens(v));
      CHECK(vocab.detokenize(vocab.tokenize(text)) == text);
      CHECK(vocab.tokenize(text) == inst.graph.node_tokens(v));
    }
  }
  CHECK(sentences == 1000);
}

TEST_CASE("reserved ids are dense and stable across save/load") {
  const Vocabulary vocab({"alpha", "beta"});
  CHECK(vocab.id("<pad>") == token::kPad);
  CHECK(vocab.id("<unk>") == token::kUnk);
  CHECK(vocab.id("<graph_start>") == token::kGraphStart);
  CHECK(vocab.id("<node>") == token::kNode);
  CHECK(vocab.id("<graph_end>") == token::kGraphEnd);
  CHECK(vocab.id("<bos>") == token::kBos);
  CHECK(vocab.id("<eos>") == token::kEos);
  CHECK(vocab.id("alpha") == token::kReservedCount);
  const auto path = std::filesystem::temp_directory_path() / "glf_vocab_test.txt";
  vocab.save(path.string());
  const Vocabulary loaded = Vocabulary::load(path.string());
  CHECK(loaded.words() == vocab.words());
  std::filesystem::remove(path);
}

TEST_CASE("pad_to") {
  CHECK(pad_to({10, 11}, 4) == Tokens{10, 11, token::kPad, token::kPad});
  CHECK(pad_to({10, 11, 12, 13}, 4) == Tokens{10, 11, 12, 13});
  try {
    pad_to({1, 2, 3, 4, 5}, 4);
    FAIL("expected PaddingError");
  } catch (const PaddingError& e) {
    CHECK(std::string(e.what()).find("5") != std::string::npos);
  }
}

TEST_CASE("validate_graph diagnostics") {
  CHECK_FALSE(validate_graph(TextAttributedGraph(0, 3, 1)).has_value());

  TextAttributedGraph g(3, 2, 1);
  g.add_edge(0, 5);
  auto issue = validate_graph(g);
  REQUIRE(issue.has_value());
  CHECK(issue->edge == 0);
  CHECK(issue->message.find("out of range") != std::string::npos);

  TextAttributedGraph loop(2, 2, 1);
  loop.add_edge(1, 1);
  REQUIRE(validate_graph(loop).has_value());
  CHECK_FALSE(validate_graph(loop, true).has_value());

  TextAttributedGraph long_edge(2, 2, 1);
  long_edge.add_edge(0, 1, {8, 9});
  REQUIRE(validate_graph(long_edge).has_value());

  TextAttributedGraph gap(1, 3, 0);
  gap.node_text(0, 0) = token::kPad;
  gap.node_text(0, 1) = 9;
  auto gap_issue = validate_graph(gap);
  REQUIRE(gap_issue.has_value());
  CHECK(gap_issue->node == 0);
}

TEST_CASE("generated graphs are valid") {
  const Vocabulary vocab = synthetic_vocabulary();
  int count = 0;
  for (TaskKind task : {TaskKind::Degree, TaskKind::Edge, TaskKind::NodeText}) {
    GeneratorConfig cfg;
    cfg.task = task;
    cfg.train_count = 334;
    for (const Instance& inst : generate_task(cfg, Split::Train, vocab)) {
      CHECK_FALSE(validate_graph(inst.graph).has_value());
      for (int v = 0; v < inst.graph.num_nodes; ++v) CHECK(inst.graph.node_text.row(v).size() == inst.graph.node_text_length);
      for (const Edge& e : inst.graph.edges) CHECK(static_cast<int>(e.text.size()) <= inst.graph.edge_text_length);
      ++count;
    }
  }
  CHECK(count >= 1000);
}

TEST_CASE("dataset file round trip is field-exact") {
  const Vocabulary vocab = testing::toy_vocabulary(30);
  std::mt19937_64 rng(4);
  std::vector<Instance> instances;
  for (int i = 0; i < 20; ++i) {
    Instance inst;
    inst.graph = testing::random_graph(rng, i % 6, 4, 2, vocab.size());
    inst.text.prompt = testing::random_text(rng, 3, vocab.size());
    inst.text.question = testing::random_text(rng, 2, vocab.size());
    if (i % 3 != 0) inst.text.target = testing::random_text(rng, 2, vocab.size());
    if (i % 3 == 0) inst.text.label = i;
    if (i % 3 == 1) inst.text.label = 0.25 * i;
    if (inst.graph.num_nodes > 0) inst.text.focus = {0};
    instances.push_back(inst);
  }
  const auto path = std::filesystem::temp_directory_path() / "glf_dataset_test.jsonl";
  write_dataset(path.string(), instances, vocab);
  const auto loaded = read_dataset(path.string(), vocab);
  REQUIRE(loaded.size() == instances.size());
  for (size_t i = 0; i < instances.size(); ++i) {
    CHECK(loaded[i].graph == instances[i].graph);
    CHECK(loaded[i].text.prompt == instances[i].text.prompt);
    CHECK(loaded[i].text.question == instances[i].text.question);
    CHECK(loaded[i].text.target == instances[i].text.target);
    CHECK(loaded[i].text.label == instances[i].text.label);
    CHECK(loaded[i].text.focus == instances[i].text.focus);
  }
  std::filesystem::remove(path);
}

TEST_CASE("malformed dataset records are reported") {
  const Vocabulary vocab = testing::toy_vocabulary(5);
  CHECK_THROWS_AS(instance_from_json(nlohmann::json::parse(R"({"prompt": []})"), vocab), DatasetError);
  CHECK_THROWS_AS(instance_from_json(nlohmann::json::parse(
                                         R"({"graph": {"n": 2, "L_n": 1, "L_e": 0, "edges": [[0, 7, []]], "node_text": [[], []]},
                                             "prompt": [], "question": [], "label": 1})"),
                                     vocab),
                  DatasetError);
  CHECK_THROWS_AS(instance_from_json(nlohmann::json::parse(
                                         R"({"graph": {"n": 0, "L_n": 1, "L_e": 0, "edges": [], "node_text": []},
                                             "prompt": [], "question": []})"),
                                     vocab),
                  DatasetError);
}
