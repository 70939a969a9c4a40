#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <random>

#include "retro/binary_io.hpp"
#include "retro/pipeline.hpp"
#include "test_helpers.hpp"

using namespace retro;

namespace {

int run(const std::string& args, const std::filesystem::path& log = "/dev/null") {
  const std::string cmd = std::string(RETRO_BIN) + " " + args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_toy_corpus(const std::filesystem::path& p, int docs) {
  const char* words[] = {"the", "a", "cat", "dog", "sat", "ran", "on", "under", "mat", "log", "red", "blue"};
  std::mt19937_64 rng(1);
  std::ofstream out(p);
  for (int i = 0; i < docs; ++i) {
    std::string text;
    const int n = 10 + static_cast<int>(rng() % 30);
    for (int w = 0; w < n; ++w) text += std::string(w ? " " : "") + words[rng() % 12];
    out << nlohmann::json{{"id", "d" + std::to_string(i)}, {"text", text}}.dump() << "\n";
  }
}

const nlohmann::json kSmokeConfig = {
    {"seed", 7},
    {"datastore", {{"chunk_size", 16}, {"embed_dim", 32}}},
    {"index", {{"ncentroids", 8}, {"M", 4}, {"nprobe_default", 4}}},
    {"model",
     {{"n_layers", 2}, {"hidden", 16}, {"n_heads", 2}, {"chunk_size", 16}, {"max_seq", 64}, {"k_neighbors", 2},
      {"cca_layers", {2}}, {"enc_layers", 1}}},
    {"training", {{"steps", 100}, {"batch_size", 2}, {"lr", 3e-3}}},
    {"generation", {{"max_tokens", 40}}}};

}  // namespace

TEST_CASE("run config parsing") {
  CHECK_THROWS_AS(RunConfig::from_json({{"datastore", nlohmann::json::object()}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"seed", 1}, {"extra", 2}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"seed", 1}, {"training", {{"stepz", 2}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"seed", 1}, {"generation", {{"top_p", 2}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"seed", "x"}}), ConfigError);

  const auto c = RunConfig::from_json(kSmokeConfig);
  CHECK(c.seed == 7);
  CHECK(c.index.seed == 7);
  CHECK(c.generation.sampling.seed == 7);
  CHECK(c.model.neighbor_len == 32);
  CHECK(c.echo()["source"] == kSmokeConfig);
  CHECK(RunConfig::from_json(c.to_json()).to_json() == c.to_json());
  c.validate();

  auto bad = kSmokeConfig;
  bad["model"]["chunk_size"] = 8;
  CHECK_THROWS_AS(RunConfig::from_json(bad).validate(), ConfigError);
}

TEST_CASE("document windows") {
  const auto w = document_windows({{"a", std::string(70, 'x')}, {"b", "y"}}, 16, 64);
  REQUIRE(w.size() == 2);
  CHECK(w[0].length == 64);
  CHECK(w[1].length == 6);
  CHECK(w[1].tokens.size() == 16);
  CHECK(w[1].tokens[6] == kPadId);
}

TEST_CASE("cli exit codes") {
  CHECK(run("--help") == 0);
  CHECK(run("train --help") == 0);
  CHECK(run("--version") == 0);
  CHECK(run("") == 2);
  CHECK(run("frobnicate") == 2);
  CHECK(run("build-db --corpus x --out y --bogus") == 2);
  CHECK(run("build-db --out y") == 2);
  testutil::TempDir dir("cli_codes");
  CHECK(run("build-db --corpus " + (dir / "missing.jsonl").string() + " --out " + (dir / "db").string()) == 1);
  write_file(dir / "cfg.json", R"({"datastore": {}})");
  write_toy_corpus(dir / "c.jsonl", 3);
  CHECK(run("build-db --corpus " + (dir / "c.jsonl").string() + " --out " + (dir / "db").string() + " --config " +
            (dir / "cfg.json").string()) == 1);
  write_file(dir / "cfg.json", R"({"seed": 1, "datastore": {"chunk": 3}})");
  CHECK(run("build-db --corpus " + (dir / "c.jsonl").string() + " --out " + (dir / "db").string() + " --config " +
            (dir / "cfg.json").string()) == 1);
}

TEST_CASE("end-to-end smoke pipeline is reproducible") {
  testutil::TempDir dir("cli_smoke");
  write_toy_corpus(dir / "corpus.jsonl", 50);
  write_file(dir / "cfg.json", kSmokeConfig.dump());
  write_file(dir / "prompts.jsonl", R"({"prompt": "the cat", "answers": ["sat"]})"
                                    "\n"
                                    R"({"prompt": "a red dog"})"
                                    "\n");
  const auto cfg = (dir / "cfg.json").string();
  const auto corpus = (dir / "corpus.jsonl").string();

  std::vector<std::map<std::string, std::string>> runs;
  for (const std::string tag : {"r1", "r2"}) {
    const auto base = dir / tag;
    std::filesystem::create_directories(base);
    const auto db = (base / "db").string();
    const auto log = base / "log.txt";
    REQUIRE(run("build-db --corpus " + corpus + " --out " + db + " --chunk-size 16 --dim 32 --config " + cfg, log) == 0);
    REQUIRE(run("build-index --db " + db + " --ncentroids 8 --M 4 --bits 8 --nprobe 4 --config " + cfg, log) == 0);
    REQUIRE(run("train --config " + cfg + " --corpus " + corpus + " --db " + db + " --out " + (base / "model.bin").string(),
                log) == 0);
    REQUIRE(run("generate --config " + cfg + " --checkpoint " + (base / "model.bin").string() + " --db " + db +
                    " --prompts " + (dir / "prompts.jsonl").string() + " --out " + (base / "gen.jsonl").string() +
                    " --retrieval-step 16 --top-p 0.9 --max-tokens 40 --k 2",
                log) == 0);
    REQUIRE(run("eval --config " + cfg + " --generations " + (base / "gen.jsonl").string() + " --checkpoint " +
                    (base / "model.bin").string() + " --corpus " + corpus + " --db " + db + " --out " +
                    (base / "metrics.json").string(),
                log) == 0);

    const auto metrics = nlohmann::json::parse(read_file(base / "metrics.json"));
    for (const auto& key : kAllMetrics) CHECK(metrics.contains(key));
    CHECK(metrics["repetition"].is_number());
    CHECK(metrics["perplexity"].is_number());
    CHECK(metrics["perplexity"].get<double>() < 257.0);
    CHECK(metrics["exact_match"].is_number());
    CHECK(metrics["config"]["source"] == kSmokeConfig);
    CHECK(metrics["tool_version"] == kToolVersion);

    const auto ckpt = load_checkpoint(base / "model.bin");
    CHECK(ckpt.config.chunk_size == 16);
    CHECK(AnnIndex::load(base / "db" / "index.bin").meta()["echo"]["source"] == kSmokeConfig);
    CHECK(nlohmann::json::parse(read_file(base / "db" / "manifest.json"))["echo"]["source"] == kSmokeConfig);

    std::map<std::string, std::string> sums;
    for (const char* f : {"db/chunks.bin", "db/embeds.bin", "db/manifest.json", "db/run_manifest.json", "db/index.bin",
                          "db/index.bin.manifest.json", "model.bin", "model.bin.manifest.json", "gen.jsonl",
                          "metrics.json", "metrics.json.manifest.json"}) {
      sums[f] = file_crc32_hex(base / f);
    }
    runs.push_back(sums);
  }
  CHECK(runs[0] == runs[1]);
}

TEST_CASE("qa fine-tuning and evaluation from the command line") {
  testutil::TempDir dir("cli_qa");
  write_toy_corpus(dir / "corpus.jsonl", 10);
  auto cfg_json = kSmokeConfig;
  cfg_json["training"]["steps"] = 400;
  cfg_json["model"]["hidden"] = 32;
  write_file(dir / "cfg.json", cfg_json.dump());
  {
    std::ofstream out(dir / "qa.jsonl");
    for (int i = 0; i < 4; ++i) {
      const std::string ans = i % 2 ? "red" : "blue";
      out << nlohmann::json{{"question", "color of " + std::to_string(i)},
                            {"answers", {ans}},
                            {"passages", {{{"title", "t" + std::to_string(i)}, {"text", "it is " + ans}}}}}
                 .dump()
          << "\n";
    }
  }
  const auto cfg = (dir / "cfg.json").string();
  const auto log = dir / "log.txt";
  REQUIRE(run("train --config " + cfg + " --corpus " + (dir / "corpus.jsonl").string() + " --steps 5 --out " +
                  (dir / "m.bin").string(),
              log) == 0);
  REQUIRE(run("finetune-qa --config " + cfg + " --data " + (dir / "qa.jsonl").string() + " --checkpoint " +
                  (dir / "m.bin").string() + " --out " + (dir / "qa.bin").string() + " --template A",
              log) == 0);
  REQUIRE(run("qa-eval --config " + cfg + " --data " + (dir / "qa.jsonl").string() + " --checkpoint " +
                  (dir / "qa.bin").string() + " --template A --out " + (dir / "report.json").string(),
              log) == 0);
  const auto report = nlohmann::json::parse(read_file(dir / "report.json"));
  CHECK(report["scored"] == 4);
  // Memorised training answers.
  CHECK(report["exact_match"].get<double>() == 1.0);
  CHECK(run("qa-eval --data " + (dir / "qa.jsonl").string() + " --checkpoint " + (dir / "qa.bin").string() +
            " --template C") == 1);
}
