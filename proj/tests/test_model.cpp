#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "reference_model.hpp"
#include "retro/model.hpp"
#include "test_helpers.hpp"

using namespace retro;

namespace {

double max_abs_diff(const Mat<double>& a, const refmodel::Rows& b) {
  double d = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) d = std::max(d, std::abs(a(i, j) - b[i][j]));
  return d;
}

}  // namespace

TEST_CASE("model config validation") {
  auto c = testutil::tiny_config();
  CHECK_NOTHROW(c.validate());
  c.hidden = 9;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = testutil::tiny_config();
  c.max_seq = 10;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = testutil::tiny_config();
  c.cca_layers = {3};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(testutil::tiny_config().as_gpt().is_gpt());
}

TEST_CASE("model config json") {
  const auto c = testutil::tiny_config();
  const auto back = ModelConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK_THROWS_AS(ModelConfig::from_json({{"hiddn", 8}}), ConfigError);
  const auto d = ModelConfig::from_json({{"n_layers", 3}, {"chunk_size", 8}, {"max_seq", 32}});
  CHECK(d.cca_layers == std::vector<int>{2, 3});
  CHECK(d.neighbor_len == 16);
}

TEST_CASE("parameter init is deterministic and shaped") {
  const auto c = testutil::tiny_config();
  auto a = init_params<float>(c, 7);
  auto b = init_params<float>(c, 7);
  auto d = init_params<float>(c, 8);
  auto ra = param_refs(a), rb = param_refs(b), rd = param_refs(d);
  REQUIRE(ra.size() == rb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    CHECK(*ra[i].value == *rb[i].value);
    any_diff = any_diff || *ra[i].value != *rd[i].value;
  }
  CHECK(any_diff);
  CHECK(a.tok_emb.rows() == 257);
  CHECK(a.pos_emb.rows() == c.max_seq);
  CHECK(a.enc_pos_emb.rows() == c.neighbor_len);
  CHECK(a.layers[0].ln_attn.gain.isOnes());
  CHECK(a.layers[0].attn.bq.isZero());
  CHECK(!a.layers[0].has_cca);
  CHECK(a.layers[1].has_cca);
  auto g = init_params<float>(c.as_gpt(), 7);
  CHECK(param_refs(g).size() < ra.size());
}

TEST_CASE("forward shape and argument errors") {
  const auto c = testutil::tiny_config();
  const auto p = init_params<double>(c, 1);
  std::mt19937_64 rng(3);
  const auto toks = testutil::random_tokens(8, rng);
  const auto out = forward(p, toks, testutil::all_valid(8), testutil::random_neighbors(c, 2, rng));
  CHECK(out.rows() == 8);
  CHECK(out.cols() == 257);
  CHECK(all_finite(out));
  const std::vector<Token> six(6, 1);
  CHECK_THROWS_AS(forward(p, six, testutil::all_valid(6), {}), AlignmentError);
  const std::vector<Token> twelve(12, 1);
  CHECK_THROWS_AS(forward(p, twelve, testutil::all_valid(12), {}), LengthError);
  std::vector<Token> bad(8, 1);
  bad[3] = 300;
  CHECK_THROWS_AS(forward(p, bad, testutil::all_valid(8), {}), VocabError);
  CHECK_THROWS_AS(forward(p, toks, testutil::all_valid(7), {}), ShapeError);
}

TEST_CASE("forward matches loop oracle") {
  const auto c = testutil::tiny_config();
  auto p = init_params<double>(c, 11);
  testutil::jitter(p, 12);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 3; ++trial) {
    auto toks = testutil::random_tokens(8, rng);
    auto valid = testutil::all_valid(8);
    if (trial == 2) {
      valid[0] = valid[1] = false;
      toks[0] = toks[1] = kPadId;
    }
    const auto nbs = testutil::random_neighbors(c, 2, rng);
    const auto got = forward(p, toks, valid, nbs);
    CHECK(max_abs_diff(got, refmodel::logits(p, toks, valid, nbs)) < 1e-10);
  }
}

TEST_CASE("forward matches oracle on the smallest cross-attention model") {
  ModelConfig c;
  c.n_layers = 1;
  c.hidden = 2;
  c.n_heads = 1;
  c.chunk_size = 2;
  c.max_seq = 4;
  c.k_neighbors = 1;
  c.cca_layers = {1};
  c.enc_layers = 1;
  c.neighbor_len = 4;
  c.init_std = 0.5;
  auto p = init_params<double>(c, 21);
  testutil::jitter(p, 22, 0.3);
  const std::vector<Token> toks{72, 105, 33, 10};
  const SequenceNeighbors nbs{{Neighbor::from_tokens({104, 105, 33, kPadId})}, {Neighbor::from_tokens({1, 2, 3, 4})}};
  const auto got = forward(p, toks, testutil::all_valid(4), nbs);
  CHECK(max_abs_diff(got, refmodel::logits(p, toks, testutil::all_valid(4), nbs)) < 1e-8);
}

TEST_CASE("chunked cross-attention matches a hand calculation") {
  // m = 2, hidden = 2, one head, one neighbor of two tokens; unit norm gain.
  NormParams<double> norm;
  norm.gain = Mat<double>::Ones(1, 2);
  norm.bias = Mat<double>::Zero(1, 2);
  AttentionParams<double> a;
  a.wq = Mat<double>::Identity(2, 2);
  a.wk = Mat<double>::Identity(2, 2);
  a.wv = Mat<double>::Identity(2, 2);
  a.wo = Mat<double>::Identity(2, 2);
  a.bq = a.bk = a.bv = a.bo = Mat<double>::Zero(1, 2);
  Mat<double> states(4, 2);
  states << 1, 0, 0, 1, 3, 1, 1, 3;
  EncodedNeighbors<double> enc;
  Mat<double> nb(2, 2);
  nb << 1, 2, -1, 0.5;
  enc.states = {{nb}};
  enc.valid = {{{true, true}}};
  const auto out = chunked_cross_attention(norm, a, states, enc, 2, 1, 0.0);

  // Layer norm over 2 features maps (x, y) to (+1, -1) or (-1, +1).
  // Row 2 normalises to q = (1, -1): scores (1*1 - 2, -1 - 0.5) / sqrt(2).
  const double s0 = (1.0 - 2.0) / std::sqrt(2.0), s1 = (-1.0 - 0.5) / std::sqrt(2.0);
  const double w0 = std::exp(s0) / (std::exp(s0) + std::exp(s1)), w1 = 1.0 - w0;
  const double cx = w0 * 1 + w1 * -1, cy = w0 * 2 + w1 * 0.5;
  CHECK(out(2, 0) == doctest::Approx(3 + cx).epsilon(1e-12));
  CHECK(out(2, 1) == doctest::Approx(1 + cy).epsilon(1e-12));
  // Row 3 normalises to q = (-1, 1).
  const double t0 = (-1.0 + 2.0) / std::sqrt(2.0), t1 = (1.0 + 0.5) / std::sqrt(2.0);
  const double u0 = std::exp(t0) / (std::exp(t0) + std::exp(t1)), u1 = 1.0 - u0;
  CHECK(out(3, 0) == doctest::Approx(1 + u0 * 1 + u1 * -1).epsilon(1e-12));
  CHECK(out(3, 1) == doctest::Approx(3 + u0 * 2 + u1 * 0.5).epsilon(1e-12));
  // First chunk passes through exactly.
  CHECK(out.topRows(2) == states.topRows(2));

  EncodedNeighbors<double> none;
  CHECK(chunked_cross_attention(norm, a, states, none, 2, 1, 1e-5) == states);
  CHECK_THROWS_AS(chunked_cross_attention(norm, a, Mat<double>(Mat<double>::Zero(3, 2)), enc, 2, 1, 1e-5),
                  AlignmentError);
}

TEST_CASE("neighbor encoder masking and slot symmetry") {
  const auto c = testutil::tiny_config();
  auto p = init_params<double>(c, 31);
  testutil::jitter(p, 32);
  std::mt19937_64 rng(9);
  auto nb = testutil::random_neighbor(c.neighbor_len, rng, 3);
  auto other = nb;
  // Same pad mask, different token id under it.
  other.tokens[7] = 65;
  const auto e1 = encode_neighbors(p, {{nb, nb}});
  const auto e2 = encode_neighbors(p, {{other, nb}});
  REQUIRE(e1.states.size() == 1);
  REQUIRE(e1.states[0].size() == 2);
  CHECK(e1.states[0][0].rows() == c.neighbor_len);
  CHECK(e1.states[0][0].cols() == c.hidden);
  CHECK(e1.states[0][0].topRows(5) == e2.states[0][0].topRows(5));
  CHECK(e1.states[0][0].bottomRows(3).isZero(0.0));
  CHECK(e1.states[0][0] == e1.states[0][1]);
  CHECK_THROWS_AS(encode_neighbors(p, {{Neighbor::padding(5)}}), ShapeError);
  CHECK_THROWS_AS(encode_neighbors(init_params<double>(c.as_gpt(), 1), {}), ConfigError);
}

TEST_CASE("normalize_neighbors pads and truncates") {
  auto c = testutil::tiny_config();
  SequenceNeighbors in(1);
  in[0].push_back(Neighbor::from_tokens({1, 2, 3}));
  in[0].push_back(Neighbor::from_tokens(std::vector<Token>(12, 4)));
  in[0].push_back(Neighbor::from_tokens({5}));
  const auto out = normalize_neighbors(in, 2, c);
  REQUIRE(out.size() == 2);
  CHECK(out[0].size() == 2);
  CHECK(out[0][0].tokens.size() == 8);
  CHECK(out[0][0].tokens[3] == kPadId);
  CHECK(!out[0][0].valid[3]);
  CHECK(out[0][1].tokens.size() == 8);
  CHECK(out[1][0].tokens == std::vector<Token>(8, kPadId));
}

TEST_CASE("causality: future tokens and current-or-later neighbors are invisible") {
  const auto c = testutil::tiny_config();
  auto p = init_params<float>(c, 41);
  testutil::jitter(p, 42);
  std::mt19937_64 rng(43);
  for (int trial = 0; trial < 10; ++trial) {
    const auto toks = testutil::random_tokens(8, rng);
    const auto nbs = testutil::random_neighbors(c, 2, rng);
    const auto base = forward(p, toks, testutil::all_valid(8), nbs);
    const int t = static_cast<int>(rng() % 8);
    auto t2 = toks;
    for (int i = t + 1; i < 8; ++i) t2[static_cast<std::size_t>(i)] = static_cast<Token>(rng() % 256);
    auto n2 = nbs;
    for (int j = t / c.chunk_size; j < 2; ++j) n2[static_cast<std::size_t>(j)] = testutil::random_neighbors(c, 1, rng)[0];
    const auto pert = forward(p, t2, testutil::all_valid(8), n2);
    CHECK(pert.topRows(t + 1) == base.topRows(t + 1));
  }
}

TEST_CASE("gpt ablation ignores neighbors") {
  const auto c = testutil::tiny_config().as_gpt();
  const auto p = init_params<float>(c, 51);
  std::mt19937_64 rng(52);
  const auto toks = testutil::random_tokens(8, rng);
  const auto a = forward(p, toks, testutil::all_valid(8), testutil::random_neighbors(testutil::tiny_config(), 2, rng));
  const auto b = forward(p, toks, testutil::all_valid(8), {});
  CHECK(a == b);
}

TEST_CASE("lm_loss values") {
  Mat<double> uniform = Mat<double>::Zero(4, 257);
  const std::vector<Token> targets{1, 2, 3, 4};
  CHECK(lm_loss(uniform, targets, {true, true, true, true}) == doctest::Approx(std::log(257.0)).epsilon(1e-12));
  CHECK(lm_loss(uniform, targets, {false, false, false, false}) == 0.0);
  Mat<double> sharp = Mat<double>::Zero(4, 257);
  for (int i = 0; i < 4; ++i) sharp(i, targets[static_cast<std::size_t>(i)]) = 60.0;
  CHECK(lm_loss(sharp, targets, {true, true, true, true}) < 1e-20);

  std::mt19937_64 rng(61);
  std::normal_distribution<double> nd(0, 3);
  Mat<double> logits(5, 257);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = nd(rng);
  const std::vector<Token> t{7, 0, 256, 100, 42};
  const std::vector<bool> mask{true, false, true, true, true};
  double expect = 0;
  for (int r : {0, 2, 3, 4}) {
    double z = 0;
    for (int v = 0; v < 257; ++v) z += std::exp(logits(r, v));
    expect -= logits(r, t[static_cast<std::size_t>(r)]) - std::log(z);
  }
  expect /= 4;
  CHECK(std::abs(lm_loss(logits, t, mask) - expect) < 1e-9);
}

TEST_CASE("gradients match finite differences") {
  const auto c = testutil::tiny_config();
  auto p = init_params<double>(c, 71);
  testutil::jitter(p, 72);
  std::mt19937_64 rng(73);
  Batch batch;
  for (int b = 0; b < 2; ++b) {
    auto toks = testutil::random_tokens(8, rng);
    auto valid = testutil::all_valid(8);
    if (b == 1) {
      valid[0] = false;
      toks[0] = kPadId;
    }
    batch.push_back(TrainingExample::language_modeling(toks, valid, testutil::random_neighbors(c, 2, rng)));
  }
  auto lg = loss_and_grad(p, batch);
  auto grads = param_refs(lg.grads);
  std::vector<Mat<double>> analytic;
  for (auto& g : grads) analytic.push_back(*g.value);
  auto refs = param_refs(p);
  const auto report = grad_check([&] { return batch_loss(p, batch); }, refs, analytic, 1e-4);
  for (const auto& e : report.entries) {
    INFO(e.name);
    CHECK(e.rel_error < 1e-4);
  }
  CHECK(report.passed);
}

TEST_CASE("frozen parameters receive zero gradient") {
  const auto c = testutil::tiny_config();
  auto p = init_params<double>(c, 81);
  std::mt19937_64 rng(82);
  Batch batch{TrainingExample::language_modeling(testutil::random_tokens(8, rng), testutil::all_valid(8),
                                                 testutil::random_neighbors(c, 2, rng))};
  const auto lg = loss_and_grad(p, batch, [](const std::string& n) { return n.rfind("enc", 0) == 0; });
  auto g = lg.grads;
  for (const auto& r : param_refs(g)) {
    if (r.name.rfind("enc", 0) == 0) CHECK(r.value->isZero(0.0));
  }
  CHECK(!g.tok_emb.isZero(0.0));
}

TEST_CASE("training memorises a short corpus") {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden = 32;
  c.n_heads = 4;
  c.chunk_size = 8;
  c.max_seq = 32;
  c.k_neighbors = 2;
  c.cca_layers = {2};
  c.enc_layers = 1;
  c.neighbor_len = 16;
  const std::string text =
      "the quick brown fox jumps over the lazy dog while a small bird sings on the old fence near the "
      "river bank and the sun slowly sets behind the distant hills painting the sky in shades of orange "
      "and purple as the evening breeze carries the scent of pine through the quiet valley below us";
  std::vector<Token> corpus(text.begin(), text.begin() + 256);
  Batch batch;
  for (int s = 0; s < 8; ++s) {
    std::vector<Token> seq(corpus.begin() + s * 32, corpus.begin() + (s + 1) * 32);
    batch.push_back(TrainingExample::language_modeling(seq, testutil::all_valid(32), {}));
  }
  Trainer<float> trainer(init_params<float>(c, 91));
  TrainHyper hyper;
  hyper.adam.lr = 1e-2;
  hyper.adam.weight_decay = 0.0;
  hyper.warmup_steps = 10;
  double first = 0, last = 0;
  for (int step = 0; step < 200; ++step) {
    const auto r = trainer.step(batch, hyper);
    if (step == 0) first = r.loss;
    last = r.loss;
  }
  CHECK(last < 0.1 * first);
}

TEST_CASE("training is deterministic; zero learning rate leaves parameters unchanged") {
  const auto c = testutil::tiny_config();
  std::mt19937_64 rng(101);
  Batch batch{TrainingExample::language_modeling(testutil::random_tokens(8, rng), testutil::all_valid(8),
                                                 testutil::random_neighbors(c, 2, rng))};
  TrainHyper hyper;
  hyper.adam.lr = 1e-2;
  auto run = [&]() {
    Trainer<float> t(init_params<float>(c, 102));
    std::vector<double> trace;
    for (int i = 0; i < 5; ++i) trace.push_back(t.step(batch, hyper).loss);
    return trace;
  };
  CHECK(run() == run());

  hyper.adam.lr = 0.0;
  Trainer<float> t(init_params<float>(c, 103));
  const auto before = t.params;
  const double l0 = t.step(batch, hyper).loss;
  const double l1 = t.step(batch, hyper).loss;
  CHECK(l0 == l1);
  auto a = before;
  auto ra = param_refs(a);
  auto rb = param_refs(t.params);
  for (std::size_t i = 0; i < ra.size(); ++i) CHECK(*ra[i].value == *rb[i].value);
}

TEST_CASE("learning rate schedule") {
  TrainHyper h;
  h.adam.lr = 1.0;
  h.warmup_steps = 4;
  h.total_steps = 14;
  h.min_lr_ratio = 0.1;
  CHECK(h.lr_at(0) == doctest::Approx(0.25));
  CHECK(h.lr_at(3) == doctest::Approx(1.0));
  CHECK(h.lr_at(4) == doctest::Approx(1.0));
  CHECK(h.lr_at(9) == doctest::Approx(0.55));
  CHECK(h.lr_at(14) == doctest::Approx(0.1));
  CHECK(h.lr_at(100) == doctest::Approx(0.1));
}

TEST_CASE("non-finite loss aborts the step") {
  const auto c = testutil::tiny_config();
  auto p = init_params<float>(c, 111);
  p.tok_emb(3, 0) = std::numeric_limits<float>::infinity();
  AdamState<float> opt;
  Batch batch{TrainingExample::language_modeling({3, 3, 3, 3, 3, 3, 3, 3}, testutil::all_valid(8), {})};
  CHECK_THROWS_AS(train_step(p, opt, batch, TrainHyper{}), NumericError);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "retro_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto c = testutil::tiny_config();
  const auto p = init_params<float>(c, 121);
  save_checkpoint(dir / "w.bin", p, {{"seed", 121}});
  auto q = load_checkpoint(dir / "w.bin");
  CHECK(q.config.to_json() == c.to_json());
  auto a = p;
  auto ra = param_refs(a), rq = param_refs(q);
  REQUIRE(ra.size() == rq.size());
  for (std::size_t i = 0; i < ra.size(); ++i) CHECK(*ra[i].value == *rq[i].value);

  std::string bytes = "XXXX";
  {
    std::ofstream(dir / "bad.bin", std::ios::binary) << bytes;
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.bin"), ParseError);
  std::filesystem::remove_all(dir);
}
