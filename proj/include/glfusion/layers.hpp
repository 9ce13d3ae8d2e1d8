#pragma once

// Blocks of the structure-aware transformer layer: masked self-attention,
// gated multi-aggregator message passing and two-stage graph-text
// cross-attention, plus the pre-norm composition of one layer.

#include "glfusion/autodiff.hpp"
#include "glfusion/sequence.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace glf {

/// Owns named parameters; addresses stay stable for the store's lifetime.
class ParameterStore {
 public:
  Parameter& create(std::string name, Matrix init, bool decay = true);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

struct LayerNormParams {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;
};

struct SelfAttentionParams {
  Parameter* query = nullptr;   // d x d
  Parameter* key = nullptr;     // d x d
  Parameter* value = nullptr;   // d x d
  Parameter* output = nullptr;  // d x d
  int heads = 1;
};

struct FeedForwardParams {
  Parameter* hidden = nullptr;       // d x 4d
  Parameter* hidden_bias = nullptr;  // 1 x 4d
  Parameter* output = nullptr;       // 4d x d
  Parameter* output_bias = nullptr;  // 1 x d
};

struct MessagePassingParams {
  LayerNormParams norm;
  Parameter* node_projection = nullptr;       // d x d
  Parameter* node_bias = nullptr;             // 1 x d
  Parameter* aggregate_projection = nullptr;  // 3d x d (d x d with a single aggregator)
  Parameter* aggregate_bias = nullptr;        // 1 x d
  Parameter* gate = nullptr;                  // 1 x d, zero at init
};

struct CrossAttentionParams {
  LayerNormParams norm;
  Parameter* query1 = nullptr;  // d x d
  Parameter* key1 = nullptr;
  Parameter* query2 = nullptr;
  Parameter* key2 = nullptr;
  Parameter* output = nullptr;  // d x d, zero at init
};

struct FusionLayerParams {
  LayerNormParams attention_norm;
  SelfAttentionParams attention;
  LayerNormParams feed_forward_norm;
  FeedForwardParams feed_forward;
  std::optional<MessagePassingParams> message_passing;
  std::optional<CrossAttentionParams> cross_attention;
};

struct LayerOptions {
  bool gate = true;
  bool multi_aggregators = true;
};

/// Graph-side inputs of one instance, already placed on the tape.
struct GraphInputs {
  const MixedSequence* sequence = nullptr;
  const AttentionMaskPair* masks = nullptr;
  Var node_text;                       // (n * L_n) x d, node v owns rows [v*L_n, (v+1)*L_n)
  std::vector<char> node_text_valid;   // per row of node_text: false for padding
  int node_text_length = 0;
  Var edge_embeddings;                 // |E| x d
  std::vector<int> edge_sources;       // source node per edge row
  Segments incoming;                   // per node: edge rows whose target is that node
};

Var linear(const Var& x, Parameter& weight, Parameter* bias = nullptr);
Var apply_layer_norm(const Var& x, const LayerNormParams& p);

/// Multi-head attention under `mask`; includes the output projection but no
/// residual. `input` is expected to be normalized and position-encoded.
Var masked_self_attention(const Var& input, const BoolMatrix& mask, const SelfAttentionParams& p);

/// Messages h_src * e over in-edges, reduced by [mean | max | std] (or mean
/// only) and projected back to d. A node without in-edges reduces to zeros.
Var message_passing(const Var& node_states, const GraphInputs& graph, const MessagePassingParams& p,
                    bool multi_aggregators = true);

/// t + tanh(t . gate^T) * h, row by row.
Var gated_update(const Var& token_rows, const Var& node_update, const Var& gate);

/// Two-stage cross-attention from sequence rows to per-node text. Returns
/// the projected L x d update (without the residual).
Var graph_text_cross_attention(const Var& input, const GraphInputs& graph, const CrossAttentionParams& p);

Var feed_forward(const Var& input, const FeedForwardParams& p);

Var fusion_layer_forward(const Var& t, const GraphInputs& graph, const FusionLayerParams& p,
                         const LayerOptions& options = {});

/// Number of attention scores computed by cross-attention on this thread.
std::uint64_t cross_attention_score_count();
void reset_cross_attention_score_count();

}  // namespace glf
