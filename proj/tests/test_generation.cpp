#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "retro/generation.hpp"
#include "retro/tokenizer.hpp"
#include "test_helpers.hpp"

using namespace retro;

namespace {

ModelConfig gen_config(int m, int max_seq) {
  ModelConfig c = testutil::tiny_config();
  c.chunk_size = m;
  c.max_seq = max_seq;
  c.neighbor_len = 2 * m;
  return c;
}

/// Pins the first normalized feature to 1 and gives EOT a large negative
/// weight on it, so generation never stops early.
void suppress_eot(RetroParams<float>& p) {
  p.ln_final.gain.data()[0] = 0.0f;
  p.ln_final.bias.data()[0] = 1.0f;
  p.tok_emb.row(kEotId).setZero();
  p.tok_emb(kEotId, 0) = -50.0f;
}

RetroParams<float> gen_model(const ModelConfig& c, std::uint64_t seed) {
  auto p = init_params<float>(c, seed);
  testutil::jitter(p, seed + 1, 0.3);
  suppress_eot(p);
  return p;
}

class CountingRetriever : public Retriever {
 public:
  explicit CountingRetriever(Retriever& inner) : inner_(inner) {}
  std::vector<ChunkNeighbors> retrieve(const std::vector<std::vector<Token>>& chunks) override {
    ++calls;
    for (const auto& c : chunks) seen.push_back(c);
    return inner_.retrieve(chunks);
  }
  int calls = 0;
  std::vector<std::vector<Token>> seen;

 private:
  Retriever& inner_;
};

ChunkNeighbors fixed_neighbors(const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ChunkNeighbors n;
  for (int j = 0; j < c.k_neighbors; ++j) n.push_back(testutil::random_neighbor(c.neighbor_len, rng, j));
  return n;
}

SamplingParams greedy(int n) {
  SamplingParams s;
  s.strategy = SamplingParams::Strategy::greedy;
  s.max_tokens = n;
  return s;
}

}  // namespace

TEST_CASE("left_pad formula") {
  CHECK(left_pad(std::vector<Token>(3, 1), 64).left_pad_count == 61);
  CHECK(left_pad(std::vector<Token>(3, 1), 64).tokens.size() == 64);
  CHECK(left_pad(std::vector<Token>(64, 1), 64).left_pad_count == 0);
  const auto p70 = left_pad(std::vector<Token>(70, 1), 64);
  CHECK(p70.left_pad_count == 58);
  CHECK(p70.tokens.size() == 128);
  for (int m : {2, 3, 4, 8, 64}) {
    for (int n = 0; n <= 4 * m; ++n) {
      std::vector<Token> ctx(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) ctx[static_cast<std::size_t>(i)] = static_cast<Token>(i % 200);
      const auto r = left_pad(ctx, m);
      CHECK(r.left_pad_count == (m - n % m) % m);
      CHECK(r.tokens.size() % static_cast<std::size_t>(m) == 0);
      CHECK(std::equal(ctx.begin(), ctx.end(), r.tokens.begin() + r.left_pad_count));
      CHECK(std::all_of(r.tokens.begin(), r.tokens.begin() + r.left_pad_count, [](Token t) { return t == kPadId; }));
    }
  }
  CHECK_THROWS_AS(left_pad(std::vector<Token>(3, 1), 1), ConfigError);
}

TEST_CASE("sample_token") {
  std::mt19937_64 rng(1);
  const std::vector<double> l{1.0, 2.0, 0.5};
  CHECK(sample_token(l, greedy(1), rng) == 1);
  CHECK(sample_token(std::vector<double>{3.0, 3.0, 1.0}, greedy(1), rng) == 0);

  const std::vector<double> probs{0.5, 0.3, 0.15, 0.05};
  std::vector<double> logits;
  for (double p : probs) logits.push_back(std::log(p));
  const auto support = nucleus_support(logits, 0.9);
  CHECK(support == std::vector<Token>{0, 1, 2});
  CHECK(nucleus_support(logits, 1.0).size() == 4);

  SamplingParams s;
  s.p = 0.9;
  std::vector<int> counts(4, 0);
  for (int i = 0; i < 20000; ++i) ++counts[static_cast<std::size_t>(sample_token(logits, s, rng))];
  CHECK(counts[3] == 0);
  // Renormalised over {0,1,2}: 0.5/0.95.
  CHECK(std::abs(counts[0] / 20000.0 - 0.5 / 0.95) < 0.02);

  s.p = 1.0;
  std::fill(counts.begin(), counts.end(), 0);
  for (int i = 0; i < 20000; ++i) ++counts[static_cast<std::size_t>(sample_token(logits, s, rng))];
  CHECK(counts[3] > 0);
  CHECK(std::abs(counts[3] / 20000.0 - 0.05) < 0.01);

  SamplingParams bad;
  bad.p = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("sampling params json") {
  SamplingParams s = greedy(7);
  s.seed = 42;
  const auto back = SamplingParams::from_json(s.to_json());
  CHECK(back.to_json() == s.to_json());
  CHECK_THROWS_AS(SamplingParams::from_json({{"top_p", 0.5}}), ConfigError);
}

TEST_CASE("query count equals ceil(tokens / step)") {
  {
    const auto c = gen_config(4, 16);
    const auto model = gen_model(c, 3);
    ConstantRetriever inner(fixed_neighbors(c, 4));
    CountingRetriever counting(inner);
    GenerationSession session(model, &counting, 2);
    const std::vector<Token> prompt{10, 20, 30, 40, 50};
    const auto r = session.generate(prompt, greedy(10));
    CHECK(r.tokens.size() == 10);
    CHECK(r.queries == 5);
    CHECK(counting.calls == 5);
  }
  {
    const auto c = gen_config(64, 128);
    const auto model = gen_model(c, 5);
    ConstantRetriever inner(fixed_neighbors(c, 6));
    CountingRetriever counting(inner);
    GenerationSession session(model, &counting, 64);
    std::mt19937_64 rng(7);
    const auto prompt = testutil::random_tokens(70, rng);
    const auto r = session.generate(prompt, greedy(200));
    CHECK(r.tokens.size() == 200);
    CHECK(r.queries == 4);
    CHECK(counting.calls == 4);
  }
  for (int s = 1; s <= 4; ++s) {
    for (int n : {1, 3, 4, 9, 13}) {
      const auto c = gen_config(4, 16);
      const auto model = gen_model(c, 8);
      ConstantRetriever inner(fixed_neighbors(c, 9));
      GenerationSession session(model, &inner, s);
      const auto r = session.generate(std::vector<Token>{1, 2, 3}, greedy(n));
      CHECK(r.queries == (n + s - 1) / s);
    }
  }
}

TEST_CASE("constant neighbors make greedy output independent of the retrieval step") {
  const auto c = gen_config(4, 16);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto model = gen_model(c, 20 + seed);
    ConstantRetriever r(fixed_neighbors(c, 40 + seed));
    std::mt19937_64 rng(60 + seed);
    const auto prompt = testutil::random_tokens(1 + seed * 3, rng);
    std::vector<std::vector<Token>> outs;
    for (int s : {1, 2, 4}) {
      GenerationSession session(model, &r, s);
      outs.push_back(session.generate(prompt, greedy(30)).tokens);
    }
    CHECK(outs[0] == outs[1]);
    CHECK(outs[0] == outs[2]);
  }
}

TEST_CASE("the rightmost complete chunk is always queried") {
  const auto c = gen_config(4, 16);
  const auto model = gen_model(c, 11);
  ConstantRetriever inner(fixed_neighbors(c, 12));
  CountingRetriever counting(inner);
  GenerationSession session(model, &counting, 1);
  const std::vector<Token> prompt{5, 6, 7, 8, 9, 10, 11, 12};
  const auto r = session.generate(prompt, greedy(1));
  REQUIRE(counting.calls == 1);
  REQUIRE(counting.seen.size() == 2);
  CHECK(counting.seen[1] == std::vector<Token>{9, 10, 11, 12});
  CHECK(counting.seen[0] == std::vector<Token>{5, 6, 7, 8});
}

TEST_CASE("generation output excludes pads and respects limits") {
  const auto c = gen_config(4, 16);
  const auto model = gen_model(c, 13);
  GenerationSession session(model, nullptr, 4);
  SamplingParams s;
  s.seed = 3;
  s.max_tokens = 25;
  const auto r = session.generate(std::vector<Token>{65, 66, 67}, s);
  CHECK(r.tokens.size() == 25);
  CHECK(std::none_of(r.tokens.begin(), r.tokens.end(), [](Token t) { return t == kPadId; }));
  CHECK(r.queries == 0);
  GenerationSession again(model, nullptr, 4);
  CHECK(again.generate(std::vector<Token>{65, 66, 67}, s).tokens == r.tokens);

  CHECK_THROWS_AS(session.generate(std::vector<Token>{}, s), ArgumentError);
  CHECK_THROWS_AS(session.generate(std::vector<Token>(17, 1), s), LengthError);
  CHECK_THROWS_AS(GenerationSession(model, nullptr, 5), ConfigError);
  CHECK_THROWS_AS(GenerationSession(model, nullptr, 0), ConfigError);
}

TEST_CASE("generation stops at end of text") {
  const auto c = gen_config(4, 16);
  auto model = init_params<float>(c, 14);
  // Only EOT has a positive logit.
  model.ln_final.gain.setZero();
  model.ln_final.bias.setConstant(1.0f);
  model.tok_emb.setConstant(-1.0f);
  model.tok_emb.row(kEotId).setConstant(1.0f);
  GenerationSession session(model, nullptr, 4);
  const auto r = session.generate(std::vector<Token>{1, 2}, greedy(10));
  CHECK(r.hit_eot);
  CHECK(r.tokens.empty());
}

TEST_CASE("qa templates") {
  const std::string q = "who invented the first home video security system";
  const std::vector<Evidence> ev{
      {"Sanders Associates", "Sanders Associates Sanders Associates was a defense contractor in Nashua, New Hampshire"},
      {"Video Camera Tube", "Video camera tubes were devices based on the cathode ray tube"},
      {"e3", "three"},
      {"e4", "four"},
      {"e5", "five"}};
  const auto a = format_qa(q, ev, QaTemplate::A, 4);
  const std::string prefix =
      "title: Sanders Associates, source: Sanders Associates Sanders Associates was a defense contractor";
  CHECK(a.decoder_text.rfind(prefix, 0) == 0);
  CHECK(a.decoder_text.find("\n question: " + q + " \n answer:") != std::string::npos);
  REQUIRE(a.encoder_evidences.size() == 4);
  CHECK(a.encoder_evidences[0].title == "Video Camera Tube");
  CHECK(a.encoder_evidences[3].title == "e5");

  const auto b = format_qa(q, ev, QaTemplate::B, 2);
  CHECK(b.decoder_text == "question: who invented the first home video security system \n answer:");
  REQUIRE(b.encoder_evidences.size() == 2);
  CHECK(b.encoder_evidences[0].title == "Sanders Associates");

  for (const auto& text : {a.decoder_text, b.decoder_text}) {
    std::size_t count = 0;
    for (auto pos = text.find(q); pos != std::string::npos; pos = text.find(q, pos + 1)) ++count;
    CHECK(count == 1);
  }
  CHECK_THROWS_AS(format_qa(q, {}, QaTemplate::A, 2), ArgumentError);
  CHECK(format_qa(q, {}, QaTemplate::B, 2).encoder_evidences.empty());
  CHECK(parse_template("B") == QaTemplate::B);
  CHECK_THROWS_AS(parse_template("C"), ConfigError);

  const auto nb = evidence_neighbors(b.encoder_evidences, 16);
  REQUIRE(nb.size() == 2);
  CHECK(nb[0].tokens.size() == 16);
  CHECK(nb[1].tokens == encode("Video camera tub"));
}

TEST_CASE("read qa jsonl") {
  testutil::TempDir dir("qa_read");
  {
    std::ofstream out(dir / "qa.jsonl");
    out << R"({"question":"q1","answers":["a"],"passages":[{"title":"t","text":"x"}]})" << "\n";
    out << R"({"question":"q2"})" << "\n";
  }
  const auto qa = read_qa_jsonl(dir / "qa.jsonl");
  REQUIRE(qa.size() == 2);
  CHECK(qa[0].passages[0].text == "x");
  CHECK(qa[1].answers.empty());
}

TEST_CASE("batch_pad_qa layout") {
  const QaPair s{{1, 2, 3}, {4, 5, 6, 7, 8}};
  const auto b = batch_pad_qa({s}, 64, 256);
  REQUIRE(b.tokens.size() == 1);
  CHECK(b.tokens[0].size() == 128);
  CHECK(b.chunks == 2);
  CHECK(std::count(b.loss_mask[0].begin(), b.loss_mask[0].end(), true) == 5);
  CHECK(b.tokens[0][61] == 1);
  CHECK(b.tokens[0][64] == 4);
  CHECK(b.tokens[0][69] == kPadId);
  CHECK(std::count(b.valid[0].begin(), b.valid[0].end(), true) == 8);

  const QaPair longer{std::vector<Token>(70, 9), {4}};
  const auto two = batch_pad_qa({s, longer}, 64, 256);
  CHECK(two.chunks == 3);
  CHECK(two.tokens[0].size() == 192);
  CHECK(std::all_of(two.tokens[0].begin() + 128, two.tokens[0].end(), [](Token t) { return t == kPadId; }));
  CHECK(two.neighbor_slots[0] == std::vector<bool>{true, true, false});
  CHECK(two.neighbor_slots[1] == std::vector<bool>{true, true, true});

  CHECK_THROWS_AS(batch_pad_qa({QaPair{{1}, {}}}, 64, 256), ArgumentError);
  CHECK_THROWS_AS(batch_pad_qa({longer}, 64, 128), LengthError);
}

TEST_CASE("batched qa loss equals the batch-of-one loss") {
  ModelConfig c = gen_config(4, 24);
  const auto model = gen_model(c, 30);
  std::mt19937_64 rng(31);
  std::vector<QaPair> samples;
  std::vector<ChunkNeighbors> nbs;
  for (int i = 0; i < 4; ++i) {
    samples.push_back({testutil::random_tokens(1 + rng() % 7, rng), testutil::random_tokens(1 + rng() % 6, rng)});
    nbs.push_back(fixed_neighbors(c, 100 + static_cast<std::uint64_t>(i)));
  }
  const auto batch = qa_examples(batch_pad_qa(samples, c.chunk_size, c.max_seq), nbs);
  const auto together = example_nll(model, batch);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto alone = qa_examples(batch_pad_qa({samples[i]}, c.chunk_size, c.max_seq), {nbs[i]});
    const auto single = example_nll(model, alone);
    const double n = static_cast<double>(samples[i].answer.size());
    CHECK(std::abs(together[i] / n - single[0] / n) < 1e-6);
  }
}
