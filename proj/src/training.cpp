#include "glfusion/training.hpp"

#include "glfusion/checkpoint.hpp"
#include "glfusion/tasks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <utility>

#ifndef GLF_SOURCE_HASH
#define GLF_SOURCE_HASH "unknown"
#endif

namespace glf {

using nlohmann::json;

const char* source_hash() { return GLF_SOURCE_HASH; }

void TrainConfig::validate() const {
  if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (eval_interval < 1 || log_interval < 1) throw ConfigError("eval_interval and log_interval must be positive");
  if (clip_norm <= 0.0) throw ConfigError("clip_norm must be positive");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be non-negative");
  if (min_lr_fraction < 0.0 || min_lr_fraction > 1.0) throw ConfigError("min_lr_fraction must lie in [0, 1]");
  if (optimizer.learning_rate <= 0.0) throw ConfigError("learning rate must be positive");
  if (max_answer_tokens < 1) throw ConfigError("max_answer_tokens must be positive");
}

json TrainConfig::to_json() const {
  return json{{"max_steps", max_steps},
              {"batch_size", batch_size},
              {"eval_interval", eval_interval},
              {"eval_limit", eval_limit},
              {"log_interval", log_interval},
              {"clip_norm", clip_norm},
              {"warmup_steps", warmup_steps},
              {"cosine_decay", cosine_decay},
              {"min_lr_fraction", min_lr_fraction},
              {"max_answer_tokens", max_answer_tokens},
              {"learning_rate", optimizer.learning_rate},
              {"weight_decay", optimizer.weight_decay},
              {"beta1", optimizer.beta1},
              {"beta2", optimizer.beta2},
              {"epsilon", optimizer.epsilon},
              {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    take("max_steps", c.max_steps);
    take("batch_size", c.batch_size);
    take("eval_interval", c.eval_interval);
    take("eval_limit", c.eval_limit);
    take("log_interval", c.log_interval);
    take("clip_norm", c.clip_norm);
    take("warmup_steps", c.warmup_steps);
    take("cosine_decay", c.cosine_decay);
    take("min_lr_fraction", c.min_lr_fraction);
    take("max_answer_tokens", c.max_answer_tokens);
    take("learning_rate", c.optimizer.learning_rate);
    take("weight_decay", c.optimizer.weight_decay);
    take("beta1", c.optimizer.beta1);
    take("beta2", c.optimizer.beta2);
    take("epsilon", c.optimizer.epsilon);
    take("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed training config: ") + e.what());
  }
  c.validate();
  return c;
}

double learning_rate_scale(const TrainConfig& cfg, std::int64_t step) {
  if (step < cfg.warmup_steps) return static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps + 1);
  if (!cfg.cosine_decay || cfg.max_steps <= cfg.warmup_steps) return 1.0;
  const double progress =
      std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.max_steps - cfg.warmup_steps));
  return cfg.min_lr_fraction + (1.0 - cfg.min_lr_fraction) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::vector<int> epoch_permutation(std::uint64_t seed, std::int64_t epoch, int size) {
  std::vector<int> perm(static_cast<size_t>(size));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(mix(mix(seed) ^ static_cast<std::uint64_t>(epoch)));
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

int argmax(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  Eigen::Index best = 0;
  row.maxCoeff(&best);
  return static_cast<int>(best);
}

}  // namespace

std::vector<int> batch_indices(std::uint64_t seed, std::int64_t step, int batch_size, int dataset_size) {
  if (dataset_size <= 0) throw TrainingError("cannot draw a batch from an empty training set");
  std::vector<int> out;
  std::int64_t cached_epoch = -1;
  std::vector<int> perm;
  for (int b = 0; b < batch_size; ++b) {
    const std::int64_t global = step * batch_size + b;
    const std::int64_t epoch = global / dataset_size;
    if (epoch != cached_epoch) {
      perm = epoch_permutation(seed, epoch, dataset_size);
      cached_epoch = epoch;
    }
    out.push_back(perm[static_cast<size_t>(global % dataset_size)]);
  }
  return out;
}

Example make_example(const GlFusionModel& model, const Instance& instance) {
  const int max_len = model.config().max_positions + instance.graph.num_nodes + 2;
  const MixedSequence base = assemble_sequence(instance.text.prompt, instance.graph, instance.text.question, max_len);
  Example ex;
  ex.answer_begin = base.length();
  MixedSequence seq = base;
  if (instance.text.target && model.config().text_predictor()) {
    Tokens answer = *instance.text.target;
    answer.push_back(token::kEos);
    seq = append_text(base, answer, max_len);
  }
  ex.input = model.prepare(seq, instance.graph, instance.text.focus);
  ex.targets.next_tokens.assign(static_cast<size_t>(seq.length()), -1);
  for (int i = ex.answer_begin - 1; i + 1 < seq.length() && seq.length() > base.length(); ++i) {
    ex.targets.next_tokens[static_cast<size_t>(i)] = seq.tokens[static_cast<size_t>(i + 1)].value;
  }
  ex.targets.label = instance.text.label;
  return ex;
}

Prediction predict(const GlFusionModel& model, const Instance& instance, const std::vector<Tokens>& verbalizer,
                   int max_new_tokens) {
  const ModelConfig& cfg = model.config();
  const int max_len = cfg.max_positions + instance.graph.num_nodes + 2;
  const MixedSequence base = assemble_sequence(instance.text.prompt, instance.graph, instance.text.question, max_len);
  Prediction p;
  Tape tape(false);
  const TwinOutput out = model.forward(tape, model.prepare(base, instance.graph, instance.text.focus));
  std::optional<Eigen::RowVectorXd> readout_row;
  if (out.has_readout()) {
    const int row = cfg.readout == ReadoutKind::NodeClassify && !instance.text.focus.empty() ? instance.text.focus[0] : 0;
    readout_row = out.readout.value().row(row);
    if (cfg.readout != ReadoutKind::GraphRegress) p.gnn = argmax(*readout_row);
  }
  if (!out.has_lm()) return p;
  const Eigen::RowVectorXd first = out.lm_logits.value().row(base.length() - 1);
  if (readout_row && p.gnn && static_cast<Eigen::Index>(verbalizer.size()) == readout_row->cols()) {
    p.ensemble = ensemble_predict(*readout_row, first, verbalizer);
  }
  const int room = cfg.max_positions - 1 - base.positions.back();
  const int budget = std::min(max_new_tokens, room);
  if (budget <= 0) return p;
  int next = greedy_token(first);
  while (next != token::kEos && static_cast<int>(p.text.size()) < budget) {
    p.text.push_back(next);
    if (static_cast<int>(p.text.size()) == budget) break;
    const MixedSequence seq = append_text(base, p.text, max_len);
    Tape step_tape(false);
    const TwinOutput step = model.forward(step_tape, model.prepare(seq, instance.graph, instance.text.focus));
    next = greedy_token(step.lm_logits.value().row(seq.length() - 1));
  }
  return p;
}

double EvalReport::primary() const {
  if (llm) return *llm;
  if (gnn) return *gnn;
  return 0.0;
}

double EvalReport::secondary() const {
  if (llm && gnn) return *gnn;
  if (llm_tokens) return *llm_tokens;
  return 0.0;
}

json EvalReport::to_json() const {
  json j{{"count", count}};
  if (llm) j["llm"] = *llm;
  if (llm_tokens) j["llm_tokens"] = *llm_tokens;
  if (gnn) j["gnn"] = *gnn;
  if (ensemble) j["ensemble"] = *ensemble;
  return j;
}

EvalReport evaluate(const GlFusionModel& model, const std::vector<Instance>& instances,
                    const std::vector<Tokens>& verbalizer, int limit, int max_new_tokens) {
  const size_t n = limit < 0 ? instances.size() : std::min(instances.size(), static_cast<size_t>(limit));
  EvalReport report;
  report.count = static_cast<int>(n);
  std::vector<Tokens> texts, references;
  std::vector<int> gnn, ensemble, labels;
  bool has_gnn = false, has_ensemble = false;
  for (size_t i = 0; i < n; ++i) {
    const Instance& inst = instances[i];
    Prediction p = predict(model, inst, verbalizer, max_new_tokens);
    if (model.config().text_predictor() && inst.text.target) {
      texts.push_back(p.text);
      references.push_back(*inst.text.target);
    }
    if (std::holds_alternative<int>(inst.text.label)) {
      const int label = std::get<int>(inst.text.label);
      if (p.gnn) {
        has_gnn = true;
        gnn.push_back(*p.gnn);
      }
      if (p.ensemble) {
        has_ensemble = true;
        ensemble.push_back(*p.ensemble);
      }
      labels.push_back(label);
    }
    report.predictions.push_back(std::move(p));
  }
  if (!references.empty()) {
    report.llm = score(texts, references);
    report.llm_tokens = token_level_score(texts, references);
  }
  if (has_gnn && gnn.size() == labels.size()) report.gnn = score(gnn, labels);
  if (has_ensemble && ensemble.size() == labels.size()) report.ensemble = score(ensemble, labels);
  return report;
}

MetricsLog::MetricsLog(const std::string& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc) {
  if (!out_) throw TrainingError("cannot open metrics log " + path);
}

void MetricsLog::write(const MetricRecord& r) {
  if (!out_.is_open()) return;
  out_ << json{{"step", r.step}, {"split", r.split}, {"predictor", r.predictor}, {"metric", r.metric},
               {"value", r.value}, {"wall_ms", r.wall_ms}}
              .dump()
       << '\n';
  out_.flush();
}

std::vector<MetricRecord> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw TrainingError("cannot open metrics log " + path);
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    out.push_back({j.at("step").get<std::int64_t>(), j.at("split").get<std::string>(), j.at("predictor").get<std::string>(),
                   j.at("metric").get<std::string>(), j.at("value").get<double>(), j.at("wall_ms").get<double>()});
  }
  return out;
}

namespace {

void log_report(MetricsLog& log, std::int64_t step, const std::string& split, const EvalReport& r, double wall) {
  if (r.llm) log.write({step, split, "llm", "accuracy", *r.llm, wall});
  if (r.llm_tokens) log.write({step, split, "llm", "token_accuracy", *r.llm_tokens, wall});
  if (r.gnn) log.write({step, split, "gnn", "accuracy", *r.gnn, wall});
  if (r.ensemble) log.write({step, split, "ensemble", "accuracy", *r.ensemble, wall});
}

}  // namespace

TrainResult train_model(GlFusionModel& model, const std::vector<Instance>& train, const std::vector<Instance>& val,
                        const std::vector<Tokens>& verbalizer, const TrainConfig& cfg, const std::string& run_dir,
                        const OptimizerState* resume, const json& resume_metadata) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(run_dir);
  const auto params = model.parameters().all();
  OptimizerState state = resume ? *resume : make_optimizer_state(params, cfg.optimizer);
  if (state.first_moment.size() != params.size()) throw TrainingError("resume state does not match the model");

  TrainResult result;
  result.best_checkpoint = (fs::path(run_dir) / "best.ckpt").string();
  result.final_checkpoint = (fs::path(run_dir) / "final.ckpt").string();
  const std::string latest = (fs::path(run_dir) / "latest.ckpt").string();
  if (resume) {
    result.best_step = resume_metadata.value("best_step", std::int64_t{-1});
    result.best_val = resume_metadata.value("best_val", -1.0);
    result.best_secondary = resume_metadata.value("best_secondary", -1.0);
  }
  MetricsLog log((fs::path(run_dir) / "metrics.jsonl").string(), true);
  const auto start = std::chrono::steady_clock::now();
  const double wall_offset = resume ? resume_metadata.value("wall_ms", 0.0) : 0.0;
  auto wall = [&] { return wall_offset + elapsed_ms(start); };

  auto metadata = [&](std::int64_t step) {
    return json{{"step", step}, {"best_step", result.best_step}, {"best_val", result.best_val},
                {"best_secondary", result.best_secondary},
                {"wall_ms", wall()}, {"seed", cfg.seed}, {"source_hash", source_hash()}};
  };
  auto run_eval = [&](std::int64_t step) {
    if (val.empty()) return;
    EvalReport r = evaluate(model, val, verbalizer, cfg.eval_limit, cfg.max_answer_tokens);
    log_report(log, step, "val", r, wall());
    if (std::make_pair(r.primary(), r.secondary()) > std::make_pair(result.best_val, result.best_secondary)) {
      result.best_val = r.primary();
      result.best_secondary = r.secondary();
      result.best_step = step;
      save_checkpoint(result.best_checkpoint, model, nullptr, metadata(step));
    }
    result.final_val = std::move(r);
  };

  if (!resume) run_eval(0);
  double lm_sum = 0.0, gnn_sum = 0.0;
  int window = 0;
  const std::int64_t last = cfg.stop_after >= 0 ? std::min(cfg.stop_after, cfg.max_steps) : cfg.max_steps;
  for (std::int64_t step = state.step; step < last; ++step) {
    const std::vector<int> batch = batch_indices(cfg.seed, step, cfg.batch_size, static_cast<int>(train.size()));
    for (int idx : batch) {
      const Example ex = make_example(model, train[static_cast<size_t>(idx)]);
      Tape tape;
      const TwinOutput out = model.forward(tape, ex.input);
      Var loss = model.joint_loss(out, ex.input, ex.targets);
      const double value = loss.value()(0, 0);
      if (!std::isfinite(value)) {
        for (Parameter* p : params) p->zero_grad();
        const std::string good = (fs::path(run_dir) / "last_good.ckpt").string();
        save_checkpoint(good, model, &state, metadata(step));
        throw TrainingError("non-finite loss at step " + std::to_string(step) + " on training instance " +
                            std::to_string(idx) + "; parameters before this step saved to " + good);
      }
      if (out.has_lm()) lm_sum += lm_cross_entropy(out.lm_logits.value(), ex.targets.next_tokens);
      if (out.has_readout() && std::holds_alternative<int>(ex.targets.label)) {
        const int row = model.config().readout == ReadoutKind::NodeClassify ? ex.input.focus[0] : 0;
        const Eigen::RowVectorXd r = out.readout.value().row(row);
        const double top = r.maxCoeff();
        gnn_sum += top + std::log((r.array() - top).exp().sum()) - r(std::get<int>(ex.targets.label));
      }
      tape.backward(loss);
      tape.accumulate_parameter_gradients(1.0 / static_cast<double>(batch.size()));
    }
    window += static_cast<int>(batch.size());
    const double norm = clip_gradient_norm(params, cfg.clip_norm);
    if (!std::isfinite(norm)) {
      for (Parameter* p : params) p->zero_grad();
      const std::string good = (fs::path(run_dir) / "last_good.ckpt").string();
      save_checkpoint(good, model, &state, metadata(step));
      throw TrainingError("non-finite gradient norm at step " + std::to_string(step) + "; parameters saved to " + good);
    }
    adamw_step(state, params, learning_rate_scale(cfg, step));
    const std::int64_t done = step + 1;
    if (done % cfg.log_interval == 0 || done == cfg.max_steps) {
      if (model.config().text_predictor()) log.write({done, "train", "llm", "loss", lm_sum / window, wall()});
      if (model.config().gnn_predictor()) log.write({done, "train", "gnn", "loss", gnn_sum / window, wall()});
      lm_sum = gnn_sum = 0.0;
      window = 0;
    }
    if (done % cfg.eval_interval == 0 || done == cfg.max_steps || done == last) {
      run_eval(done);
      save_checkpoint(latest, model, &state, metadata(done));
    }
  }
  result.steps = state.step;
  save_checkpoint(result.final_checkpoint, model, &state, metadata(state.step));
  if (result.best_step < 0) save_checkpoint(result.best_checkpoint, model, nullptr, metadata(state.step));
  return result;
}

}  // namespace glf
