#pragma once

// The assembled twin model: embeddings, the structure-aware layer stack,
// the language-model head and the graph readout head.

#include "glfusion/autodiff.hpp"
#include "glfusion/layers.hpp"
#include "glfusion/sequence.hpp"
#include "glfusion/tag.hpp"

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace glf {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ReadoutKind { None, NodeClassify, EdgeClassify, GraphClassify, GraphRegress };

std::string to_string(ReadoutKind kind);
ReadoutKind readout_kind_from_string(const std::string& name);

struct AblationFlags {
  bool no_cross_attention = false;
  bool no_gate = false;
  bool no_multi_aggregators = false;
  bool no_gnn_predictor = false;
  bool no_text_predictor = false;

  bool operator==(const AblationFlags&) const = default;
};

struct ModelConfig {
  int d_model = 64;
  int n_layers = 8;
  int n_heads = 4;
  int vocab_size = 0;
  int max_positions = 64;
  int node_text_length = 0;  // L_n
  int edge_text_length = 0;  // L_e
  std::vector<int> mpnn_layers{0, 2, 4, 6};
  std::vector<int> cross_attention_layers{1, 3, 5, 7};
  ReadoutKind readout = ReadoutKind::None;
  int readout_classes = 0;
  double lm_weight = 1.0;
  double gnn_weight = 1.0;
  AblationFlags ablation;
  std::uint64_t seed = 1;

  bool text_predictor() const { return !ablation.no_text_predictor; }
  bool gnn_predictor() const { return !ablation.no_gnn_predictor && readout != ReadoutKind::None; }

  /// Throws ConfigError on the first inconsistency.
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

/// Constant per-instance inputs: the sequence, its masks, flattened
/// node/edge text and neighborhoods.
struct PreparedInput {
  MixedSequence sequence;
  AttentionMaskPair masks;
  std::vector<int> token_ids;           // embedding row per sequence token
  std::vector<int> node_text_ids;       // n * L_n, row-major
  std::vector<int> node_text_slots;     // position index within node text
  std::vector<char> node_text_valid;
  Segments node_text_rows;              // valid rows per node
  std::vector<int> edge_token_ids;      // all edge text tokens, concatenated
  Segments edge_token_rows;             // per edge
  std::vector<int> edge_sources;
  Segments incoming;
  std::vector<int> focus;
};

struct TwinOutput {
  Var lm_logits;             // L x vocab, when the text predictor is enabled
  Var node_representations;  // n x d
  Var readout;               // task-shaped, when the GNN predictor is enabled
  bool has_lm() const { return lm_logits.valid(); }
  bool has_readout() const { return readout.valid(); }
};

struct LossTargets {
  // Next-token targets per sequence row; -1 where unsupervised.
  std::vector<int> next_tokens;
  Label label;
};

class GlFusionModel {
 public:
  explicit GlFusionModel(ModelConfig config);
  GlFusionModel(const GlFusionModel&) = delete;
  GlFusionModel& operator=(const GlFusionModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }

  PreparedInput prepare(const MixedSequence& sequence, const TextAttributedGraph& graph,
                        const std::vector<int>& focus = {}) const;

  /// Places embeddings on the tape: sequence rows (L x d) and node text (n*L_n x d).
  GraphInputs embed(Tape& tape, const PreparedInput& input, Var& sequence_rows) const;
  TwinOutput forward(Tape& tape, const PreparedInput& input) const;

  Var joint_loss(const TwinOutput& out, const PreparedInput& input, const LossTargets& targets) const;

  const FusionLayerParams& layer(int i) const { return layers_[static_cast<size_t>(i)]; }

 private:
  Parameter& make(const std::string& name, int rows, int cols, double stddev, bool decay = true);
  Parameter& make_constant(const std::string& name, int rows, int cols, double value, bool decay = false);
  LayerNormParams make_norm(const std::string& prefix);

  ModelConfig config_;
  ParameterStore store_;
  Parameter* token_embedding_ = nullptr;
  Parameter* position_embedding_ = nullptr;
  Parameter* node_text_position_ = nullptr;
  Parameter* node_input_projection_ = nullptr;
  std::vector<FusionLayerParams> layers_;
  LayerNormParams final_norm_;
  Parameter* lm_head_ = nullptr;
  Parameter* lm_bias_ = nullptr;
  Parameter* readout_weight_ = nullptr;
  Parameter* readout_bias_ = nullptr;
};

/// Mean next-token cross-entropy of the supervised rows (0 when none).
double lm_cross_entropy(const Matrix& logits, const std::vector<int>& next_tokens);

/// Highest-scoring token that generation may emit (never pad or a graph token).
int greedy_token(const Eigen::Ref<const Eigen::RowVectorXd>& logits);

/// Greedy decoding after the question; stops at <eos> or the token budget.
/// Graph tokens are never produced.
Tokens generate(const GlFusionModel& model, const Tokens& prompt, const TextAttributedGraph& graph,
                const Tokens& question, int max_new_tokens);

/// Argmax of log_softmax(readout) + log_softmax(lm logits restricted to the
/// verbalizer tokens). Every class needs a one-token verbalization.
int ensemble_predict(const Eigen::Ref<const Eigen::RowVectorXd>& readout_logits,
                     const Eigen::Ref<const Eigen::RowVectorXd>& lm_logits, const std::vector<Tokens>& verbalizer);

}  // namespace glf
