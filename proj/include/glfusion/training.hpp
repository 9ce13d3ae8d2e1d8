#pragma once

// Training loop, evaluation and run-directory bookkeeping.

#include "glfusion/model.hpp"
#include "glfusion/optim.hpp"
#include "glfusion/tag.hpp"

#include "json.hpp"

#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace glf {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Hash of the library sources this binary was built from.
const char* source_hash();

struct TrainConfig {
  std::int64_t max_steps = 3000;
  int batch_size = 8;
  int eval_interval = 250;
  int eval_limit = 200;  // validation instances scored at each evaluation
  int log_interval = 50;
  double clip_norm = 1.0;
  int warmup_steps = 100;
  bool cosine_decay = true;
  double min_lr_fraction = 0.1;
  int max_answer_tokens = 12;
  AdamWSettings optimizer;
  std::uint64_t seed = 1;
  // Stop early as if interrupted (schedule unchanged); -1 runs to max_steps.
  std::int64_t stop_after = -1;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Multiplier on the base learning rate at `step` (linear warmup, then
/// optional cosine decay down to min_lr_fraction).
double learning_rate_scale(const TrainConfig& cfg, std::int64_t step);

/// Dataset indices for `step`: epochs are seeded permutations, so the batch
/// depends only on (seed, step, dataset size).
std::vector<int> batch_indices(std::uint64_t seed, std::int64_t step, int batch_size, int dataset_size);

struct Example {
  PreparedInput input;
  LossTargets targets;
  int answer_begin = 0;  // first sequence row holding the target text
};

/// Sequence = <bos> prompt graph question target <eos>; next-token
/// supervision covers the target and <eos>.
Example make_example(const GlFusionModel& model, const Instance& instance);

struct Prediction {
  Tokens text;
  std::optional<int> gnn;
  std::optional<int> ensemble;
};

Prediction predict(const GlFusionModel& model, const Instance& instance, const std::vector<Tokens>& verbalizer,
                   int max_new_tokens);

struct EvalReport {
  int count = 0;
  std::optional<double> llm;
  std::optional<double> llm_tokens;  // token-level match of the generated text
  std::optional<double> gnn;
  std::optional<double> ensemble;
  std::vector<Prediction> predictions;

  /// LLM accuracy when available, otherwise GNN accuracy.
  double primary() const;
  /// Breaks ties in primary(): GNN accuracy, else token-level LLM accuracy.
  double secondary() const;
  nlohmann::json to_json() const;
};

/// Scores the first `limit` instances (all when limit < 0).
EvalReport evaluate(const GlFusionModel& model, const std::vector<Instance>& instances,
                    const std::vector<Tokens>& verbalizer, int limit = -1, int max_new_tokens = 12);

struct MetricRecord {
  std::int64_t step = 0;
  std::string split;
  std::string predictor;
  std::string metric;
  double value = 0.0;
  double wall_ms = 0.0;
};

class MetricsLog {
 public:
  MetricsLog() = default;
  MetricsLog(const std::string& path, bool append);
  void write(const MetricRecord& record);

 private:
  std::ofstream out_;
};

std::vector<MetricRecord> read_metrics(const std::string& path);

struct TrainResult {
  std::int64_t steps = 0;
  std::int64_t best_step = -1;
  double best_val = -1.0;
  double best_secondary = -1.0;
  std::string best_checkpoint;
  std::string final_checkpoint;
  EvalReport final_val;
};

/// Trains in place. Writes metrics.jsonl, latest.ckpt (with optimizer state),
/// best.ckpt and final.ckpt under run_dir. A non-finite loss writes
/// last_good.ckpt and throws TrainingError. When `resume` is given the run
/// continues from its step counter.
TrainResult train_model(GlFusionModel& model, const std::vector<Instance>& train, const std::vector<Instance>& val,
                        const std::vector<Tokens>& verbalizer, const TrainConfig& cfg, const std::string& run_dir,
                        const OptimizerState* resume = nullptr, const nlohmann::json& resume_metadata = {});

}  // namespace glf
