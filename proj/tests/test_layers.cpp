#include "doctest.h"

#include "glfusion/layers.hpp"
#include "glfusion/model.hpp"
#include "reference.hpp"
#include "support.hpp"

#include <cmath>
#include <memory>
#include <random>

using namespace glf;
using glf::testing::max_abs_diff;
using glf::testing::random_matrix;

namespace {

struct Fixture {
  ModelConfig cfg;
  std::unique_ptr<GlFusionModel> model;
  TextAttributedGraph graph;
  MixedSequence seq;
  PreparedInput in;
};

Fixture make_fixture(std::uint64_t seed, int n, bool perturb, int d = 8, int layers = 2) {
  std::mt19937_64 rng(seed);
  Fixture f;
  const int vocab = 30, ln = 4, le = 2;
  f.cfg = testing::small_config(vocab, ln, le, d, layers);
  f.model = std::make_unique<GlFusionModel>(f.cfg);
  if (perturb) testing::perturb_parameters(*f.model, seed + 1);
  f.graph = testing::random_graph(rng, n, ln, le, vocab, 0.5);
  f.seq = assemble_sequence(testing::random_text(rng, 2, vocab), f.graph, testing::random_text(rng, 3, vocab), 64);
  f.in = f.model->prepare(f.seq, f.graph);
  return f;
}

Parameter& param(Fixture& f, const std::string& name) { return *f.model->parameters().find(name); }

}  // namespace

TEST_CASE("self-attention: single token returns its projected value") {
  std::mt19937_64 rng(1);
  Fixture f = make_fixture(1, 0, true);
  const SelfAttentionParams& p = f.model->layer(0).attention;
  const Matrix x = random_matrix(rng, 1, 8);
  Tape tape;
  const Matrix out = masked_self_attention(tape.constant(x), BoolMatrix::Constant(1, 1, true), p).value();
  CHECK(max_abs_diff(out, x * p.value->value * p.output->value) <= 1e-14);
}

TEST_CASE("self-attention: text-only input matches a dense causal reference") {
  std::mt19937_64 rng(2);
  Fixture f = make_fixture(2, 0, true);
  const SelfAttentionParams& p = f.model->layer(0).attention;
  const Matrix x = random_matrix(rng, 6, 8);
  BoolMatrix causal(6, 6);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) causal(i, j) = j <= i;
  Tape tape;
  const Matrix out = masked_self_attention(tape.constant(x), causal, p).value();
  const Matrix expect = ref::self_attention(x, [](int i, int j) { return j <= i; }, p.query->value, p.key->value,
                                            p.value->value, p.output->value, p.heads);
  CHECK(max_abs_diff(out, expect) <= 1e-10);

  Matrix zeroed = x;
  zeroed.bottomRows(2).setZero();
  Tape tape2;
  const Matrix out2 = masked_self_attention(tape2.constant(zeroed), causal, p).value();
  CHECK(out2.topRows(4) == out.topRows(4));
  CHECK_THROWS_AS(masked_self_attention(tape2.constant(x), BoolMatrix::Constant(5, 5, true), p), DimensionError);
}

TEST_CASE("message passing: aggregator conventions") {
  const int d = 3;
  Tape tape;
  Parameter bias("b", Matrix::Constant(1, d, 0.25));
  auto selector = [&](int block) {
    Matrix w = Matrix::Zero(3 * d, d);
    w.block(block * d, 0, d, d).setIdentity();
    return w;
  };
  Matrix h(2, d);
  h << 1, -2, 3, 0.5, 0.5, 0.5;
  GraphInputs g;
  g.edge_embeddings = tape.constant(Matrix::Ones(1, d));
  g.edge_sources = {0};
  g.incoming = {{}, {0}};  // node 1 has the single in-neighbor 0; node 0 has none
  for (int block = 0; block < 3; ++block) {
    Parameter w("w", selector(block));
    MessagePassingParams p;
    p.aggregate_projection = &w;
    p.aggregate_bias = &bias;
    const Matrix out = message_passing(tape.constant(h), g, p).value();
    CHECK(out.row(0) == bias.value.row(0));
    const Eigen::RowVectorXd expect = block == 2 ? Eigen::RowVectorXd::Zero(d) : Eigen::RowVectorXd(h.row(0));
    CHECK(max_abs_diff(out.row(1) - bias.value.row(0), expect) == 0.0);
  }
  GraphInputs bad = g;
  bad.edge_sources = {4};
  Parameter w("w", selector(0));
  MessagePassingParams p;
  p.aggregate_projection = &w;
  CHECK_THROWS_AS(message_passing(tape.constant(h), bad, p), DimensionError);
}

TEST_CASE("message passing: random 6-node graph matches a per-node loop oracle") {
  Fixture f = make_fixture(3, 6, true);
  std::mt19937_64 rng(3);
  const MessagePassingParams& p = *f.model->layer(0).message_passing;
  Tape tape;
  Var rows;
  GraphInputs g = f.model->embed(tape, f.in, rows);
  const Matrix h = random_matrix(rng, 6, 8);
  for (bool multi : {true, false}) {
    Parameter narrow("narrow", random_matrix(rng, 8, 8));
    MessagePassingParams q = p;
    if (!multi) q.aggregate_projection = &narrow;
    const Matrix out = message_passing(tape.constant(h), g, q, multi).value();
    const Matrix expect = ref::message_passing(h, f.graph.edges, g.edge_embeddings.value(), q.aggregate_projection->value,
                                               q.aggregate_bias->value, multi);
    CHECK(max_abs_diff(out, expect) <= 1e-10);
  }
}

TEST_CASE("gated update") {
  std::mt19937_64 rng(4);
  Tape tape;
  const Matrix t = random_matrix(rng, 1, 4), h = random_matrix(rng, 1, 4);
  Var tv = tape.constant(t), hv = tape.constant(h);
  CHECK(gated_update(tv, hv, tape.constant(Matrix::Zero(1, 4))).value() == t);
  const Matrix big = t / t.squaredNorm() * 1e3;
  CHECK(max_abs_diff(gated_update(tv, hv, tape.constant(big)).value(), t + h) <= 1e-12);
  const Matrix half = t / t.squaredNorm() * 0.5;
  const Matrix out = gated_update(tv, hv, tape.constant(half)).value();
  for (int j = 0; j < 4; ++j) CHECK(out(0, j) == doctest::Approx(t(0, j) + std::tanh(0.5) * h(0, j)).epsilon(1e-14));
}

TEST_CASE("cross-attention matches the nested-loop oracle") {
  for (int n : {2, 3, 5}) {
    Fixture f = make_fixture(10 + n, n, true);
    std::mt19937_64 rng(n);
    const CrossAttentionParams& p = *f.model->layer(1).cross_attention;
    Tape tape;
    Var rows;
    GraphInputs g = f.model->embed(tape, f.in, rows);
    const Matrix input = random_matrix(rng, f.seq.length(), 8);
    const Matrix out = graph_text_cross_attention(tape.constant(input), g, p).value();
    const ref::RuleOracle rules(f.seq.tokens);
    const Matrix expect = ref::cross_attention(input, g.node_text.value(), g.node_text_valid, 4, rules, n, p.query1->value,
                                               p.key1->value, p.query2->value, p.key2->value, p.output->value);
    CHECK(max_abs_diff(out, expect) <= 1e-10);
    for (int i = 0; i < f.seq.graph_span->first; ++i) CHECK(out.row(i).isZero(0.0));
  }
}

TEST_CASE("cross-attention: node rows read only their own text") {
  Fixture f = make_fixture(20, 4, true);
  std::mt19937_64 rng(20);
  CrossAttentionParams p = *f.model->layer(1).cross_attention;
  Parameter identity("identity", Matrix::Identity(8, 8));
  p.output = &identity;
  Tape tape;
  Var rows;
  GraphInputs g = f.model->embed(tape, f.in, rows);
  Matrix x = random_matrix(rng, 16, 8);
  const std::vector<char> all_valid(16, 1);
  g.node_text_valid = all_valid;
  const Matrix input = random_matrix(rng, f.seq.length(), 8);

  // Node 2 text rows all identical: its extraction is that row whatever the weights.
  for (int k = 0; k < 4; ++k) x.row(8 + k) = x.row(8);
  g.node_text = tape.constant(x);
  const Matrix out = graph_text_cross_attention(tape.constant(input), g, p).value();
  CHECK(max_abs_diff(out.row(f.seq.node_slots[2]), x.row(8)) <= 1e-15);

  for (int v = 0; v < 4; ++v) {
    Matrix only = Matrix::Zero(16, 8);
    only.middleRows(v * 4, 4) = x.middleRows(v * 4, 4);
    GraphInputs gv = g;
    gv.node_text = tape.constant(only);
    const Matrix out_v = graph_text_cross_attention(tape.constant(input), gv, p).value();
    CHECK(out_v.row(f.seq.node_slots[static_cast<size_t>(v)]) == out.row(f.seq.node_slots[static_cast<size_t>(v)]));
  }
}

TEST_CASE("cross-attention: shape errors") {
  Fixture f = make_fixture(21, 3, true);
  Tape tape;
  Var rows;
  GraphInputs g = f.model->embed(tape, f.in, rows);
  g.node_text = tape.constant(Matrix::Zero(5, 8));
  CHECK_THROWS_AS(graph_text_cross_attention(tape.constant(Matrix::Zero(f.seq.length(), 8)), g,
                                             *f.model->layer(1).cross_attention),
                  DimensionError);
}

TEST_CASE("cross-attention score count grows with n * L_n * L") {
  std::vector<std::uint64_t> counts;
  for (int n : {2, 4, 8}) {
    Fixture f = make_fixture(30, n, false);
    Tape tape;
    Var rows;
    GraphInputs g = f.model->embed(tape, f.in, rows);
    g.node_text_valid.assign(g.node_text_valid.size(), 1);
    reset_cross_attention_score_count();
    graph_text_cross_attention(rows, g, *f.model->layer(1).cross_attention);
    counts.push_back(cross_attention_score_count());
  }
  // Fixed prompt/question length: 4 text rows after the graph (3 question + none), n rows per node.
  for (size_t k = 1; k < counts.size(); ++k) CHECK(counts[k] == 2 * counts[k - 1]);
}

TEST_CASE("fusion layer: new blocks at zero init leave the plain layer unchanged") {
  Fixture f = make_fixture(40, 5, false, 8, 2);
  for (int l = 0; l < 2; ++l) {
    FusionLayerParams plain = f.model->layer(l);
    plain.message_passing.reset();
    plain.cross_attention.reset();
    Tape tape;
    Var rows;
    GraphInputs g = f.model->embed(tape, f.in, rows);
    const Matrix full = fusion_layer_forward(rows, g, f.model->layer(l)).value();
    const Matrix base = fusion_layer_forward(rows, g, plain).value();
    CHECK(full == base);
  }
}

TEST_CASE("fusion layer with both blocks matches the straight-line reference") {
  std::mt19937_64 rng(41);
  ModelConfig cfg = testing::small_config(30, 4, 2, 8, 1);
  cfg.mpnn_layers = {0};
  cfg.cross_attention_layers = {0};
  for (bool ablate : {false, true}) {
    cfg.ablation.no_gate = ablate;
    cfg.ablation.no_multi_aggregators = ablate;
    GlFusionModel model(cfg);
    testing::perturb_parameters(model, 41);
    const TextAttributedGraph graph = testing::random_graph(rng, 3, 4, 2, 30, 0.6);
    const MixedSequence seq = assemble_sequence(testing::random_text(rng, 2, 30), graph, testing::random_text(rng, 3, 30), 64);
    Tape tape;
    const TwinOutput out = model.forward(tape, model.prepare(seq, graph));
    const ref::Output expect = ref::forward(model, seq, graph, {});
    CHECK(max_abs_diff(out.lm_logits.value(), expect.lm_logits) <= 1e-10);
    CHECK(max_abs_diff(out.node_representations.value(), expect.nodes) <= 1e-10);
  }
}

TEST_CASE("block gradients match finite differences") {
  Fixture f = make_fixture(50, 4, true);
  std::mt19937_64 rng(50);
  const FusionLayerParams& mp_layer = f.model->layer(0);
  const FusionLayerParams& cross_layer = f.model->layer(1);
  Parameter input("input", random_matrix(rng, f.seq.length(), 8));
  const Matrix w = random_matrix(rng, f.seq.length(), 8);
  auto weighted = [&](const Var& x, const Matrix& m) { return sum(hadamard(x, x.tape().constant(m))); };
  auto collect = [&](const std::string& prefix) {
    std::vector<Parameter*> out{&input};
    for (Parameter* p : f.model->parameters().all()) {
      if (p->name.rfind(prefix, 0) == 0) out.push_back(p);
    }
    return out;
  };

  SUBCASE("self-attention") {
    auto r = testing::check_gradients(collect("layers.0.attention."), [&](Tape& t) {
      return weighted(masked_self_attention(t.parameter(input), f.in.masks.self_mask, mp_layer.attention), w);
    });
    CHECK_MESSAGE(r.worst <= 1e-5, r.where);
  }
  SUBCASE("message passing with gate") {
    const Matrix wn = random_matrix(rng, 4, 8);
    Parameter nodes("nodes", random_matrix(rng, 4, 8));
    auto params = collect("layers.0.mpnn.");
    params.push_back(&nodes);
    params.push_back(&param(f, "embed.tokens"));
    auto r = testing::check_gradients(params, [&](Tape& t) {
      Var rows;
      GraphInputs g = f.model->embed(t, f.in, rows);
      Var update = message_passing(t.parameter(nodes), g, *mp_layer.message_passing);
      return weighted(gated_update(t.parameter(nodes), update, t.parameter(*mp_layer.message_passing->gate)), wn);
    });
    CHECK_MESSAGE(r.worst <= 1e-5, r.where);
  }
  SUBCASE("cross-attention") {
    auto params = collect("layers.1.cross.");
    params.push_back(&param(f, "embed.tokens"));
    params.push_back(&param(f, "embed.node_text_positions"));
    auto r = testing::check_gradients(params, [&](Tape& t) {
      Var rows;
      GraphInputs g = f.model->embed(t, f.in, rows);
      return weighted(graph_text_cross_attention(t.parameter(input), g, *cross_layer.cross_attention), w);
    });
    CHECK_MESSAGE(r.worst <= 1e-5, r.where);
  }
  SUBCASE("feed-forward") {
    auto r = testing::check_gradients(collect("layers.0.ffn."), [&](Tape& t) {
      return weighted(feed_forward(t.parameter(input), mp_layer.feed_forward), w);
    });
    CHECK_MESSAGE(r.worst <= 1e-5, r.where);
  }
  SUBCASE("whole fusion layers") {
    auto params = collect("layers.");
    auto r = testing::check_gradients(params, [&](Tape& t) {
      Var rows;
      GraphInputs g = f.model->embed(t, f.in, rows);
      Var x = fusion_layer_forward(t.parameter(input), g, mp_layer);
      return weighted(fusion_layer_forward(x, g, cross_layer), w);
    });
    CHECK_MESSAGE(r.worst <= 1e-5, r.where);
  }
}
