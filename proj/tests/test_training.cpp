#include "doctest.h"

#include "glfusion/checkpoint.hpp"
#include "glfusion/tasks.hpp"
#include "glfusion/training.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

using namespace glf;
namespace fs = std::filesystem;

namespace {

struct Setup {
  Vocabulary vocab = synthetic_vocabulary();
  GeneratorConfig gen;
  ModelConfig model;
  std::vector<Instance> train, val;
  std::vector<Tokens> verbalizer;
};

Setup setup(TaskKind task, int train_count, int val_count) {
  Setup s;
  s.gen.task = task;
  s.gen.min_nodes = 5;
  s.gen.max_nodes = 6;
  s.gen.train_count = train_count;
  s.gen.val_count = val_count;
  s.model.d_model = 16;
  s.model.n_layers = 2;
  s.model.n_heads = 2;
  s.model.mpnn_layers = {0};
  s.model.cross_attention_layers = {1};
  s.model.vocab_size = s.vocab.size();
  s.model.node_text_length = s.gen.node_text_length();
  s.model.edge_text_length = s.gen.edge_text_length();
  configure_readout(task, s.gen, s.model);
  s.train = generate_task(s.gen, Split::Train, s.vocab);
  s.val = generate_task(s.gen, Split::Val, s.vocab);
  s.verbalizer = class_verbalizer(task, s.gen, s.vocab);
  return s;
}

TrainConfig quick(std::int64_t steps) {
  TrainConfig c;
  c.max_steps = steps;
  c.batch_size = 2;
  c.eval_interval = 5;
  c.eval_limit = 4;
  c.log_interval = 1;
  c.warmup_steps = 2;
  return c;
}

std::string run_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("glf_train_" + name);
  fs::remove_all(p);
  return p.string();
}

std::vector<std::string> lines(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST_CASE("batches depend only on seed, step and dataset size") {
  CHECK(batch_indices(3, 17, 4, 10) == batch_indices(3, 17, 4, 10));
  CHECK(batch_indices(3, 17, 4, 10) != batch_indices(4, 17, 4, 10));
  std::multiset<int> epoch;
  for (int step = 0; step < 5; ++step) {
    for (int i : batch_indices(9, step, 2, 10)) epoch.insert(i);
  }
  CHECK(epoch == std::multiset<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  CHECK_THROWS(batch_indices(1, 0, 2, 0));
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  c.max_steps = 1100;
  c.warmup_steps = 100;
  CHECK(learning_rate_scale(c, 0) == doctest::Approx(1.0 / 101));
  CHECK(learning_rate_scale(c, 49) == doctest::Approx(50.0 / 101));
  CHECK(learning_rate_scale(c, 100) == doctest::Approx(1.0));
  CHECK(learning_rate_scale(c, 600) == doctest::Approx(0.55));
  CHECK(learning_rate_scale(c, 1100) == doctest::Approx(0.1));
  c.cosine_decay = false;
  CHECK(learning_rate_scale(c, 1000) == 1.0);
}

TEST_CASE("config round trip and validation") {
  TrainConfig c = quick(7);
  c.optimizer.learning_rate = 0.003;
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.max_steps == 7);
  CHECK(back.optimizer.learning_rate == 0.003);
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("examples supervise exactly the answer and <eos>") {
  Setup s = setup(TaskKind::Degree, 1, 0);
  GlFusionModel model(s.model);
  const Instance& inst = s.train[0];
  const Example ex = make_example(model, inst);
  const auto& next = ex.targets.next_tokens;
  const auto& tokens = ex.input.sequence.tokens;
  int supervised = 0;
  for (size_t i = 0; i < next.size(); ++i) {
    if (next[i] < 0) continue;
    ++supervised;
    CHECK(static_cast<int>(i) >= ex.answer_begin - 1);
    if (i + 1 < tokens.size()) CHECK(tokens[i + 1].value == next[i]);
  }
  CHECK(supervised == static_cast<int>(inst.text.target->size()) + 1);
  CHECK(next[next.size() - 2] == token::kEos);
  CHECK(ex.input.focus == inst.text.focus);
}

TEST_CASE("zero steps only evaluates and writes the initial checkpoints") {
  Setup s = setup(TaskKind::Degree, 4, 4);
  GlFusionModel model(s.model);
  const std::string dir = run_dir("zero");
  const TrainResult r = train_model(model, s.train, s.val, s.verbalizer, quick(0), dir);
  CHECK(r.steps == 0);
  CHECK(fs::exists(fs::path(dir) / "final.ckpt"));
  CHECK(fs::exists(fs::path(dir) / "best.ckpt"));
  for (const MetricRecord& m : read_metrics((fs::path(dir) / "metrics.jsonl").string())) CHECK(m.step == 0);
  fs::remove_all(dir);
}

TEST_CASE("initial language-model loss is close to ln V") {
  Setup s = setup(TaskKind::Degree, 8, 0);
  GlFusionModel model(s.model);
  const std::string dir = run_dir("initial");
  train_model(model, s.train, s.val, s.verbalizer, quick(1), dir);
  const auto metrics = read_metrics((fs::path(dir) / "metrics.jsonl").string());
  bool seen = false;
  for (const MetricRecord& m : metrics) {
    if (m.split == "train" && m.predictor == "llm") {
      CHECK(m.value == doctest::Approx(std::log(static_cast<double>(s.vocab.size()))).epsilon(0.03));
      seen = true;
    }
    CHECK((m.predictor == "llm" || m.predictor == "gnn" || m.predictor == "ensemble"));
  }
  CHECK(seen);
  fs::remove_all(dir);
}

TEST_CASE("a resumed run matches an uninterrupted run") {
  Setup s = setup(TaskKind::Edge, 12, 4);
  const std::string whole = run_dir("whole"), part = run_dir("part");
  GlFusionModel a(s.model);
  train_model(a, s.train, s.val, s.verbalizer, quick(10), whole);

  GlFusionModel b(s.model);
  TrainConfig first = quick(10);
  first.stop_after = 5;
  train_model(b, s.train, s.val, s.verbalizer, first, part);
  const Checkpoint ck = read_checkpoint((fs::path(part) / "latest.ckpt").string());
  REQUIRE(ck.optimizer.has_value());
  CHECK(ck.optimizer->step == 5);
  GlFusionModel c(s.model);
  restore_parameters(c, ck);
  train_model(c, s.train, s.val, s.verbalizer, quick(10), part, &*ck.optimizer, ck.metadata);

  const auto pa = a.parameters().all(), pc = c.parameters().all();
  REQUIRE(pa.size() == pc.size());
  bool identical = true;
  for (size_t i = 0; i < pa.size(); ++i) identical = identical && pa[i]->value == pc[i]->value;
  CHECK(identical);
  fs::remove_all(whole);
  fs::remove_all(part);
}

TEST_CASE("metrics are appended, never rewritten") {
  Setup s = setup(TaskKind::Degree, 4, 2);
  const std::string dir = run_dir("append");
  GlFusionModel model(s.model);
  train_model(model, s.train, s.val, s.verbalizer, quick(2), dir);
  const auto before = lines((fs::path(dir) / "metrics.jsonl").string());
  GlFusionModel again(s.model);
  train_model(again, s.train, s.val, s.verbalizer, quick(2), dir);
  const auto after = lines((fs::path(dir) / "metrics.jsonl").string());
  REQUIRE(after.size() == 2 * before.size());
  CHECK(std::equal(before.begin(), before.end(), after.begin()));
  fs::remove_all(dir);
}

TEST_CASE("a non-finite loss aborts and keeps the last good parameters") {
  Setup s = setup(TaskKind::Degree, 4, 0);
  const std::string dir = run_dir("nan");
  GlFusionModel model(s.model);
  model.parameters().find("lm_head.bias")->value(0, 9) = std::nan("");
  CHECK_THROWS_AS(train_model(model, s.train, s.val, s.verbalizer, quick(3), dir), TrainingError);
  CHECK(fs::exists(fs::path(dir) / "last_good.ckpt"));
  fs::remove_all(dir);
}

TEST_CASE("evaluation scores agree with recomputation") {
  Setup s = setup(TaskKind::Edge, 0, 12);
  GlFusionModel model(s.model);
  const EvalReport r = evaluate(model, s.val, s.verbalizer);
  REQUIRE(r.count == 12);
  REQUIRE(r.predictions.size() == 12);
  std::vector<Tokens> text, refs;
  std::vector<int> gnn, ens, labels;
  for (size_t i = 0; i < s.val.size(); ++i) {
    text.push_back(r.predictions[i].text);
    refs.push_back(*s.val[i].text.target);
    gnn.push_back(*r.predictions[i].gnn);
    ens.push_back(*r.predictions[i].ensemble);
    labels.push_back(std::get<int>(s.val[i].text.label));
  }
  CHECK(*r.llm == score(text, refs));
  CHECK(*r.gnn == score(gnn, labels));
  CHECK(*r.ensemble == score(ens, labels));
  CHECK(r.primary() == *r.llm);
  CHECK(evaluate(model, s.val, s.verbalizer, 5).count == 5);
}

TEST_CASE("ties in the primary metric fall back to the readout, then to token-level matches") {
  EvalReport r;
  r.llm = 0.5;
  r.llm_tokens = 0.5;
  r.gnn = 0.8;
  CHECK(r.primary() == 0.5);
  CHECK(r.secondary() == 0.8);
  r.gnn.reset();
  r.llm_tokens = 0.25;
  CHECK(r.secondary() == 0.25);
  EvalReport g;
  g.gnn = 0.7;
  CHECK(g.primary() == 0.7);
  CHECK(g.secondary() == 0.0);
}

TEST_CASE("without the text predictor no language-model metrics are logged") {
  Setup s = setup(TaskKind::Degree, 4, 2);
  s.model.ablation.no_text_predictor = true;
  GlFusionModel model(s.model);
  const std::string dir = run_dir("notext");
  train_model(model, s.train, s.val, s.verbalizer, quick(2), dir);
  for (const MetricRecord& m : read_metrics((fs::path(dir) / "metrics.jsonl").string())) {
    CHECK(m.predictor == "gnn");
  }
  const EvalReport r = evaluate(model, s.val, s.verbalizer);
  CHECK_FALSE(r.llm.has_value());
  CHECK(r.primary() == *r.gnn);
  fs::remove_all(dir);
}

TEST_CASE("a small model memorizes a few instances") {
  Setup s = setup(TaskKind::Degree, 4, 0);
  s.model.d_model = 32;
  s.model.n_heads = 4;
  GlFusionModel model(s.model);
  TrainConfig c = quick(150);
  c.batch_size = 4;
  c.eval_interval = 1000;
  c.log_interval = 50;
  c.warmup_steps = 10;
  c.optimizer.learning_rate = 3e-3;
  c.optimizer.weight_decay = 0.0;
  const std::string dir = run_dir("memorize");
  train_model(model, s.train, s.val, s.verbalizer, c, dir);
  const EvalReport r = evaluate(model, s.train, s.verbalizer);
  CHECK(*r.llm == 1.0);
  CHECK(*r.gnn == 1.0);
  fs::remove_all(dir);
}
