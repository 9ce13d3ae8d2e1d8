#pragma once

// Synthetic graph-property tasks: node degree, edge existence and node-text
// retrieval, with the oracles every generated instance is checked against.

#include "glfusion/model.hpp"
#include "glfusion/tag.hpp"

#include "json.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace glf {

enum class TaskKind { Degree, Edge, NodeText };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& name);

enum class Split { Train, Val, Test };
std::string to_string(Split split);

class GeneratorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GeneratorConfig {
  TaskKind task = TaskKind::Degree;
  int min_nodes = 5;
  int max_nodes = 20;
  double min_edge_probability = 0.2;
  double max_edge_probability = 0.4;
  int min_sentence_words = 3;
  int max_sentence_words = 8;
  int max_degree = 19;
  int train_count = 4000;
  int val_count = 200;
  int test_count = 500;
  std::uint64_t seed = 1;

  void validate() const;
  int count(Split split) const;
  /// Node text is the name word followed by the sentence.
  int node_text_length() const { return max_sentence_words + 1; }
  int edge_text_length() const { return 1; }
  nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);
};

/// Closed vocabulary of the synthetic tasks (about 200 words).
Vocabulary synthetic_vocabulary();
const std::vector<std::string>& node_name_words();
const std::vector<std::string>& sentence_words();

std::vector<Instance> generate_degree_task(const GeneratorConfig& cfg, Split split, const Vocabulary& vocab);
std::vector<Instance> generate_edge_task(const GeneratorConfig& cfg, Split split, const Vocabulary& vocab);
std::vector<Instance> generate_node_text_task(const GeneratorConfig& cfg, Split split, const Vocabulary& vocab);
std::vector<Instance> generate_task(const GeneratorConfig& cfg, Split split, const Vocabulary& vocab);

/// Re-derives the answer from the graph and compares it with the stored
/// target and label. Returns an empty string when they agree.
std::string check_instance(TaskKind task, const Instance& instance, const Vocabulary& vocab);

/// One single-token verbalization per readout class.
std::vector<Tokens> class_verbalizer(TaskKind task, const GeneratorConfig& cfg, const Vocabulary& vocab);

/// Readout head and class count used for a task.
void configure_readout(TaskKind task, const GeneratorConfig& cfg, ModelConfig& model);

/// Fraction of positions where prediction equals reference. Throws on a
/// length mismatch; an empty list scores 1.
double score(const std::vector<Tokens>& predictions, const std::vector<Tokens>& references);
double score(const std::vector<int>& predictions, const std::vector<int>& references);
/// Secondary metric: matching tokens at equal offsets over the reference length.
double token_level_score(const std::vector<Tokens>& predictions, const std::vector<Tokens>& references);

}  // namespace glf
