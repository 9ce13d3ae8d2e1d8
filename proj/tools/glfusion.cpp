// glfusion: generate | train | eval | ablate | render-mask
//
// Runs live under --out, or under $GLF_RUN_ROOT/<name> (default ./runs/<name>).
// A --config JSON file is applied after the flags, so its values win.
#include "CLI11.hpp"
#include "glfusion/checkpoint.hpp"
#include "glfusion/dataset.hpp"
#include "glfusion/sequence.hpp"
#include "glfusion/tasks.hpp"
#include "glfusion/training.hpp"
#include "json.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

using namespace glf;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << std::setw(2) << j << "\n";
}

std::string hash_hex(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) h = (h ^ c) * 1099511628211ULL;
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << h;
  return ss.str();
}

std::string run_root() {
  const char* env = std::getenv("GLF_RUN_ROOT");
  return env && *env ? env : "runs";
}

std::string split_file(const std::string& data, Split split) { return (fs::path(data) / (to_string(split) + ".jsonl")).string(); }

// ---- generate -----------------------------------------------------------

struct GenerateArgs {
  GeneratorConfig gen;
  std::string task = "degree";
  std::string out;
  std::string config;
};

void cmd_generate(GenerateArgs a) {
  a.gen.task = task_kind_from_string(a.task);
  if (!a.config.empty()) {
    json merged = a.gen.to_json();
    merged.update(read_json(a.config));
    a.gen = GeneratorConfig::from_json(merged);
  }
  a.gen.validate();
  fs::create_directories(a.out);
  const Vocabulary vocab = synthetic_vocabulary();
  vocab.save((fs::path(a.out) / "vocab.txt").string());
  json meta{{"generator", a.gen.to_json()}, {"source_hash", source_hash()}, {"files", json::object()}};
  for (Split split : {Split::Train, Split::Val, Split::Test}) {
    const auto instances = generate_task(a.gen, split, vocab);
    for (size_t i = 0; i < instances.size(); ++i) {
      const std::string problem = check_instance(a.gen.task, instances[i], vocab);
      if (!problem.empty()) throw GeneratorError(to_string(split) + " instance " + std::to_string(i) + ": " + problem);
    }
    write_dataset(split_file(a.out, split), instances, vocab);
    meta["files"][to_string(split)] = {{"path", to_string(split) + ".jsonl"}, {"count", instances.size()}};
  }
  write_json((fs::path(a.out) / "metadata.json").string(), meta);
  std::cout << "wrote " << a.out << " (" << to_string(a.gen.task) << ", seed " << a.gen.seed << ")\n";
}

// ---- datasets and run configs -------------------------------------------

struct Dataset {
  GeneratorConfig gen;
  Vocabulary vocab;
  std::string path;
};

Dataset open_dataset(const std::string& path) {
  Dataset d;
  d.path = path;
  const json meta = read_json((fs::path(path) / "metadata.json").string());
  d.gen = GeneratorConfig::from_json(meta.at("generator"));
  d.vocab = Vocabulary::load((fs::path(path) / "vocab.txt").string());
  return d;
}

struct ModelFlags {
  int d_model = 64, n_layers = 8, n_heads = 4;
  double lm_weight = 1.0, gnn_weight = 1.0;
  AblationFlags ablation;
};

void add_model_flags(CLI::App* cmd, ModelFlags& m) {
  cmd->add_option("--d-model", m.d_model, "Model width")->capture_default_str();
  cmd->add_option("--layers", m.n_layers, "Transformer layers")->capture_default_str();
  cmd->add_option("--heads", m.n_heads, "Attention heads")->capture_default_str();
  cmd->add_option("--lm-weight", m.lm_weight, "Language-model loss weight")->capture_default_str();
  cmd->add_option("--gnn-weight", m.gnn_weight, "Readout loss weight")->capture_default_str();
  cmd->add_flag("--no-cross-attention", m.ablation.no_cross_attention);
  cmd->add_flag("--no-gate", m.ablation.no_gate);
  cmd->add_flag("--no-multi-aggregators", m.ablation.no_multi_aggregators);
  cmd->add_flag("--no-gnn-pred", m.ablation.no_gnn_predictor);
  cmd->add_flag("--no-text-pred", m.ablation.no_text_predictor);
}

void add_train_flags(CLI::App* cmd, TrainConfig& t) {
  cmd->add_option("--steps", t.max_steps, "Optimizer steps")->capture_default_str();
  cmd->add_option("--batch-size", t.batch_size, "Instances per step")->capture_default_str();
  cmd->add_option("--learning-rate", t.optimizer.learning_rate, "AdamW learning rate")->capture_default_str();
  cmd->add_option("--weight-decay", t.optimizer.weight_decay, "AdamW weight decay")->capture_default_str();
  cmd->add_option("--eval-interval", t.eval_interval, "Steps between validation passes")->capture_default_str();
  cmd->add_option("--eval-limit", t.eval_limit, "Validation instances per pass")->capture_default_str();
  cmd->add_option("--warmup-steps", t.warmup_steps, "Linear warmup steps")->capture_default_str();
  cmd->add_option("--seed", t.seed, "Seed for initialization and batches")->capture_default_str();
  cmd->add_option("--stop-after", t.stop_after, "Stop after this step as if interrupted (see --resume)");
}

ModelConfig model_config(const ModelFlags& f, const Dataset& data, std::uint64_t seed) {
  ModelConfig m;
  m.d_model = f.d_model;
  m.n_layers = f.n_layers;
  m.n_heads = f.n_heads;
  m.mpnn_layers.clear();
  m.cross_attention_layers.clear();
  for (int l = 0; l < f.n_layers; ++l) (l % 2 == 0 ? m.mpnn_layers : m.cross_attention_layers).push_back(l);
  m.lm_weight = f.lm_weight;
  m.gnn_weight = f.gnn_weight;
  m.ablation = f.ablation;
  m.vocab_size = data.vocab.size();
  m.node_text_length = data.gen.node_text_length();
  m.edge_text_length = data.gen.edge_text_length();
  m.seed = seed;
  configure_readout(data.gen.task, data.gen, m);
  return m;
}

/// The complete description of a run, stored as config.json.
struct RunConfig {
  std::string data;
  ModelConfig model;
  TrainConfig train;

  json to_json() const {
    return json{{"data", fs::absolute(data).string()}, {"model", model.to_json()}, {"train", train.to_json()},
                {"seed", train.seed}, {"source_hash", source_hash()}};
  }
  static RunConfig from_json(const json& j) {
    RunConfig r;
    r.data = j.at("data").get<std::string>();
    r.model = ModelConfig::from_json(j.at("model"));
    r.train = TrainConfig::from_json(j.at("train"));
    return r;
  }
};

/// Overlays a --config file onto the run: keys "model" and "train" patch
/// the corresponding objects, "data" replaces the dataset path.
RunConfig apply_config_file(RunConfig run, const std::string& path) {
  if (path.empty()) return run;
  const json overlay = read_json(path);
  json base = run.to_json();
  if (overlay.contains("data")) base["data"] = overlay["data"];
  if (overlay.contains("model")) base["model"].update(overlay["model"], true);
  if (overlay.contains("train")) base["train"].update(overlay["train"], true);
  if (overlay.contains("seed")) base["train"]["seed"] = overlay["seed"];
  return RunConfig::from_json(base);
}

void check_compatible(const ModelConfig& m, const Dataset& data) {
  if (m.vocab_size != data.vocab.size()) {
    throw ConfigError("model vocabulary has " + std::to_string(m.vocab_size) + " words, dataset " +
                      std::to_string(data.vocab.size()));
  }
  if (m.node_text_length != data.gen.node_text_length() || m.edge_text_length != data.gen.edge_text_length()) {
    throw ConfigError("model text lengths differ from the dataset's");
  }
  ModelConfig expected = m;
  configure_readout(data.gen.task, data.gen, expected);
  if (m.gnn_predictor() && (expected.readout != m.readout || expected.readout_classes != m.readout_classes)) {
    throw ConfigError("model readout does not match task " + to_string(data.gen.task));
  }
}

// ---- train --------------------------------------------------------------

struct TrainArgs {
  std::string data, out, name = "run", config;
  ModelFlags model;
  TrainConfig train;
  bool resume = false;
};

std::string run_directory(const std::string& out, const std::string& name) {
  return out.empty() ? (fs::path(run_root()) / name).string() : out;
}

TrainResult train_run(const RunConfig& run, const std::string& dir, bool resume) {
  const Dataset data = open_dataset(run.data);
  check_compatible(run.model, data);
  const auto train = read_dataset(split_file(run.data, Split::Train), data.vocab);
  const auto val = read_dataset(split_file(run.data, Split::Val), data.vocab);
  const auto verbalizer = class_verbalizer(data.gen.task, data.gen, data.vocab);
  GlFusionModel model(run.model);
  if (!resume) {
    fs::create_directories(dir);
    write_json((fs::path(dir) / "config.json").string(), run.to_json());
    return train_model(model, train, val, verbalizer, run.train, dir);
  }
  const Checkpoint ck = read_checkpoint((fs::path(dir) / "latest.ckpt").string());
  if (!ck.optimizer) throw CheckpointError("latest.ckpt carries no optimizer state");
  restore_parameters(model, ck);
  std::cout << "resuming at step " << ck.optimizer->step << "\n";
  return train_model(model, train, val, verbalizer, run.train, dir, &*ck.optimizer, ck.metadata);
}

void cmd_train(const TrainArgs& a) {
  const std::string dir = run_directory(a.out, a.name);
  RunConfig run;
  if (a.resume) {
    run = RunConfig::from_json(read_json((fs::path(dir) / "config.json").string()));
    run.train.stop_after = a.train.stop_after;
  } else {
    if (a.data.empty()) throw std::runtime_error("--data is required");
    run.data = a.data;
    run.train = a.train;
    run.model = model_config(a.model, open_dataset(a.data), a.train.seed);
    run = apply_config_file(run, a.config);
    run.train.stop_after = a.train.stop_after;
    run.model.validate();
    run.train.validate();
  }
  const TrainResult r = train_run(run, dir, a.resume);
  std::cout << "trained " << r.steps << " steps; best val " << r.best_val << " at step " << r.best_step << "\n"
            << "best: " << r.best_checkpoint << "\nfinal: " << r.final_checkpoint << "\n";
}

// ---- eval ---------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, data, split = "test", report;
  int limit = -1;
  int max_answer_tokens = 12;
};

json eval_report(const GlFusionModel& model, const Dataset& data, Split split, int limit, int max_answer_tokens,
                 const json& metadata) {
  const auto instances = read_dataset(split_file(data.path, split), data.vocab);
  const EvalReport r = evaluate(model, instances, class_verbalizer(data.gen.task, data.gen, data.vocab), limit,
                                max_answer_tokens);
  json predictors = json::object();
  if (r.llm) predictors["llm"] = {{"accuracy", *r.llm}, {"exact_match", *r.llm}, {"token_accuracy", *r.llm_tokens}};
  if (r.gnn) predictors["gnn"] = {{"accuracy", *r.gnn}};
  if (r.ensemble) predictors["ensemble"] = {{"accuracy", *r.ensemble}};
  return json{{"task", to_string(data.gen.task)},
              {"split", to_string(split)},
              {"count", r.count},
              {"predictors", predictors},
              {"seed", model.config().seed},
              {"config_hash", hash_hex(model.config().to_json().dump())},
              {"checkpoint_step", metadata.value("step", -1)},
              {"source_hash", source_hash()}};
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw std::runtime_error("unknown split '" + s + "'");
}

void cmd_eval(const EvalArgs& a) {
  const Checkpoint ck = read_checkpoint(a.checkpoint);
  const auto model = model_from_checkpoint(ck);
  const Dataset data = open_dataset(a.data);
  check_compatible(model->config(), data);
  const json report = eval_report(*model, data, split_from_string(a.split), a.limit, a.max_answer_tokens, ck.metadata);
  std::cout << std::setw(2) << report << "\n";
  if (!a.report.empty()) write_json(a.report, report);
}

// ---- ablate -------------------------------------------------------------

void cmd_ablate(const TrainArgs& a) {
  if (a.data.empty()) throw std::runtime_error("--data is required");
  const std::string root = run_directory(a.out, a.name + "_ablation");
  fs::create_directories(root);
  const Dataset data = open_dataset(a.data);
  RunConfig base;
  base.data = a.data;
  base.train = a.train;
  base.model = model_config(a.model, data, a.train.seed);
  base.model.ablation = {};
  base = apply_config_file(base, a.config);

  const std::vector<std::pair<std::string, bool AblationFlags::*>> variants{
      {"full", nullptr},
      {"no_cross_attention", &AblationFlags::no_cross_attention},
      {"no_gate", &AblationFlags::no_gate},
      {"no_multi_aggregators", &AblationFlags::no_multi_aggregators},
      {"no_gnn_pred", &AblationFlags::no_gnn_predictor},
      {"no_text_pred", &AblationFlags::no_text_predictor},
  };
  json table = json::array();
  for (const auto& [name, flag] : variants) {
    RunConfig run = base;
    if (flag) run.model.ablation.*flag = true;
    const std::string dir = (fs::path(root) / name).string();
    json row{{"variant", name}, {"run_dir", dir}};
    try {
      run.model.validate();
      const TrainResult r = train_run(run, dir, false);
      const Checkpoint ck = read_checkpoint(r.best_checkpoint);
      const auto model = model_from_checkpoint(ck);
      row["report"] = eval_report(*model, data, Split::Test, -1, run.train.max_answer_tokens, ck.metadata);
    } catch (const std::exception& e) {
      row["error"] = e.what();
      std::cerr << name << ": " << e.what() << "\n";
    }
    table.push_back(row);
    write_json((fs::path(root) / "comparison.json").string(), table);
  }

  std::ostringstream md;
  md << "| variant | LLM | GNN | ensemble |\n|---|---|---|---|\n";
  for (const json& row : table) {
    auto cell = [&](const char* p) -> std::string {
      if (!row.contains("report")) return "error";
      const json& preds = row["report"]["predictors"];
      if (!preds.contains(p)) return "-";
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.2f", 100.0 * preds[p]["accuracy"].get<double>());
      return buf;
    };
    md << "| " << row["variant"].get<std::string>() << " | " << cell("llm") << " | " << cell("gnn") << " | "
       << cell("ensemble") << " |\n";
  }
  std::ofstream((fs::path(root) / "comparison.md").string()) << md.str();
  std::cout << md.str();
}

// ---- render-mask --------------------------------------------------------

void cmd_render_mask(const std::string& data_path, const std::string& split, int index, bool cross) {
  const Dataset data = open_dataset(data_path);
  const auto instances = read_dataset(split_file(data_path, split_from_string(split)), data.vocab);
  if (index < 0 || index >= static_cast<int>(instances.size())) throw std::runtime_error("index out of range");
  const Instance& inst = instances[static_cast<size_t>(index)];
  const MixedSequence seq = assemble_sequence(inst.text.prompt, inst.graph, inst.text.question, 4096);
  const AttentionMaskPair masks = build_masks(seq);
  std::cout << render_mask(cross ? masks.cross_mask : masks.self_mask, seq);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"glfusion: synthetic graph tasks, training and evaluation"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Write train/val/test splits, vocabulary and metadata");
  g->add_option("--task", gen.task, "degree | edge | node_text")->capture_default_str();
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.gen.seed)->capture_default_str();
  g->add_option("--train-count", gen.gen.train_count)->capture_default_str();
  g->add_option("--val-count", gen.gen.val_count)->capture_default_str();
  g->add_option("--test-count", gen.gen.test_count)->capture_default_str();
  g->add_option("--min-nodes", gen.gen.min_nodes)->capture_default_str();
  g->add_option("--max-nodes", gen.gen.max_nodes)->capture_default_str();
  g->add_option("--min-edge-probability", gen.gen.min_edge_probability)->capture_default_str();
  g->add_option("--max-edge-probability", gen.gen.max_edge_probability)->capture_default_str();
  g->add_option("--config", gen.config, "JSON file overriding the flags");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train on a generated dataset");
  t->add_option("--data", tr.data, "Dataset directory from 'generate'");
  t->add_option("--out", tr.out, "Run directory (default $GLF_RUN_ROOT/<name>)");
  t->add_option("--name", tr.name, "Run name under the run root")->capture_default_str();
  t->add_option("--config", tr.config, "JSON file overriding the flags");
  t->add_flag("--resume", tr.resume, "Continue from latest.ckpt in the run directory");
  add_model_flags(t, tr.model);
  add_train_flags(t, tr.train);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--split", ev.split, "train | val | test")->capture_default_str();
  e->add_option("--limit", ev.limit, "Score only the first N instances");
  e->add_option("--report", ev.report, "Write the JSON report here");

  TrainArgs ab;
  auto* a = app.add_subcommand("ablate", "Train the full model and the five single-flag ablations");
  a->add_option("--data", ab.data)->required();
  a->add_option("--out", ab.out, "Root directory for the six runs");
  a->add_option("--name", ab.name)->capture_default_str();
  a->add_option("--config", ab.config, "JSON file overriding the flags");
  add_model_flags(a, ab.model);
  add_train_flags(a, ab.train);

  std::string mask_data, mask_split = "train";
  int mask_index = 0;
  bool mask_cross = false;
  auto* m = app.add_subcommand("render-mask", "Print the attention mask of one instance");
  m->add_option("--data", mask_data)->required();
  m->add_option("--split", mask_split)->capture_default_str();
  m->add_option("--index", mask_index)->capture_default_str();
  m->add_flag("--cross", mask_cross, "Show the graph-text cross mask instead");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*g) cmd_generate(gen);
    if (*t) cmd_train(tr);
    if (*e) cmd_eval(ev);
    if (*a) cmd_ablate(ab);
    if (*m) cmd_render_mask(mask_data, mask_split, mask_index, mask_cross);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
