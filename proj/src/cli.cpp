// The `retro` command line: one subcommand per pipeline stage.

#include <fstream>
#include <iostream>
#include <memory>
#include <optional>

#include <CLI11.hpp>

#include "retro/binary_io.hpp"
#include "retro/pipeline.hpp"
#include "retro/tokenizer.hpp"

namespace retro {

namespace {

namespace fs = std::filesystem;

RunConfig base_config(const std::string& config_path, std::optional<std::uint64_t> seed) {
  RunConfig c = config_path.empty() ? RunConfig::with_seed(seed.value_or(0)) : RunConfig::load(config_path);
  if (seed && !config_path.empty()) {
    // An explicit --seed replaces the run seed and everything derived from it.
    auto src = c.source;
    src["seed"] = *seed;
    c = RunConfig::from_json(src);
  }
  return c;
}

fs::path sidecar(const fs::path& artifact) { return fs::path(artifact.string() + ".manifest.json"); }

struct Retrieval {
  std::optional<Datastore> datastore;
  std::optional<AnnIndex> index;
  std::unique_ptr<IndexRetriever> retriever;
};

/// Opens the datastore and index when the model retrieves. A RETRO model
/// without --db runs with empty neighbors.
void open_retrieval(Retrieval& r, const ModelConfig& model, const std::string& db, const std::string& index_path,
                    int k, int nprobe, bool exclude_self, const std::string& command) {
  if (model.is_gpt()) return;
  if (db.empty()) {
    log_warning(command + ": model has cross-attention but no --db was given; neighbors are empty");
    return;
  }
  r.datastore.emplace(Datastore::open(db));
  if (r.datastore->chunk_size() != model.chunk_size) {
    throw ConfigError(command + ": datastore chunk size " + std::to_string(r.datastore->chunk_size()) +
                      " differs from the model chunk size " + std::to_string(model.chunk_size));
  }
  r.index.emplace(AnnIndex::load(index_path.empty() ? fs::path(db) / "index.bin" : fs::path(index_path)));
  r.retriever = std::make_unique<IndexRetriever>(*r.datastore, *r.index, k, nprobe, exclude_self);
}

std::vector<GenerationRecord> read_prompts(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open prompts file " + path.string());
  std::vector<GenerationRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      GenerationRecord r;
      r.prompt = j.at("prompt").get<std::string>();
      if (j.contains("answers")) r.answers = j.at("answers").get<std::vector<std::string>>();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Retrieval-augmented language modeling toolkit.", "retro"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  std::string config_path, corpus, out, db, index_path, checkpoint, data, prompt, prompts, generations;
  std::optional<std::uint64_t> seed;
  std::optional<int> chunk_size, dim, ncentroids, M, bits, nprobe, rerank, steps, retrieval_step, max_tokens, k;
  std::optional<double> top_p;
  std::string tmpl = "A";
  bool greedy = false;
  std::vector<std::string> metrics;

  const auto add_config = [&](CLI::App* s) {
    s->add_option("--config", config_path, "Run configuration JSON")->check(CLI::ExistingFile);
    s->add_option("--seed", seed, "Override the run seed");
  };

  auto* build_db = app.add_subcommand("build-db", "Chunk and embed a JSONL corpus into a datastore");
  build_db->add_option("--corpus", corpus, "Corpus JSONL ({\"id\", \"text\"} per line)")->required();
  build_db->add_option("--out", out, "Output directory")->required();
  build_db->add_option("--chunk-size", chunk_size, "Tokens per chunk");
  build_db->add_option("--dim", dim, "Embedding dimension");
  add_config(build_db);

  auto* build_index = app.add_subcommand("build-index", "Train and fill an IVF-PQ index over a datastore");
  build_index->add_option("--db", db, "Datastore directory")->required();
  build_index->add_option("--out", out, "Index file (default <db>/index.bin)");
  build_index->add_option("--ncentroids", ncentroids, "Inverted lists");
  build_index->add_option("--M", M, "PQ subquantizers");
  build_index->add_option("--bits", bits, "Bits per PQ code");
  build_index->add_option("--nprobe", nprobe, "Default lists probed per query");
  build_index->add_option("--rerank", rerank, "Exact re-rank depth (0 off, -1 all)");
  add_config(build_index);

  auto* train = app.add_subcommand("train", "Train a model on a corpus with retrieved neighbors");
  train->add_option("--corpus", corpus, "Training corpus JSONL")->required();
  train->add_option("--out", out, "Checkpoint path")->required();
  train->add_option("--db", db, "Datastore directory");
  train->add_option("--index", index_path, "Index file (default <db>/index.bin)");
  train->add_option("--steps", steps, "Optimizer steps");
  add_config(train);

  auto* finetune = app.add_subcommand("finetune-qa", "Fine-tune a checkpoint on QA samples");
  finetune->add_option("--data", data, "QA JSONL")->required();
  finetune->add_option("--checkpoint", checkpoint, "Starting checkpoint")->required();
  finetune->add_option("--out", out, "Output checkpoint")->required();
  finetune->add_option("--template", tmpl, "Prompt template A or B");
  finetune->add_option("--k", k, "Evidence passages for the encoder");
  finetune->add_option("--steps", steps, "Optimizer steps");
  add_config(finetune);

  auto* generate = app.add_subcommand("generate", "Sample continuations");
  generate->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  auto* prompt_opt = generate->add_option("--prompt", prompt, "Single prompt text");
  auto* prompts_opt = generate->add_option("--prompts", prompts, "Prompts JSONL ({\"prompt\"} per line)");
  prompt_opt->excludes(prompts_opt);
  generate->add_option("--out", out, "Generations JSONL");
  generate->add_option("--db", db, "Datastore directory");
  generate->add_option("--index", index_path, "Index file (default <db>/index.bin)");
  generate->add_option("--retrieval-step", retrieval_step, "Tokens generated between neighbor refreshes");
  generate->add_option("--top-p", top_p, "Nucleus mass");
  generate->add_option("--max-tokens", max_tokens, "Maximum generated tokens");
  generate->add_option("--k", k, "Neighbors per chunk");
  generate->add_flag("--greedy", greedy, "Greedy decoding");
  add_config(generate);

  auto* eval = app.add_subcommand("eval", "Score a generations file");
  eval->add_option("--generations", generations, "Generations JSONL")->required();
  eval->add_option("--metrics", metrics, "Comma-separated subset of repetition,selfbleu,zipf,perplexity,exact_match")
      ->delimiter(',');
  eval->add_option("--out", out, "Metrics JSON (default stdout)");
  eval->add_option("--checkpoint", checkpoint, "Model for perplexity");
  eval->add_option("--corpus", corpus, "Held-out corpus for perplexity");
  eval->add_option("--db", db, "Datastore directory");
  eval->add_option("--index", index_path, "Index file (default <db>/index.bin)");
  add_config(eval);

  auto* qa_eval = app.add_subcommand("qa-eval", "Exact match of greedy answers on QA samples");
  qa_eval->add_option("--data", data, "QA JSONL")->required();
  qa_eval->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  qa_eval->add_option("--template", tmpl, "Prompt template A or B");
  qa_eval->add_option("--k", k, "Evidence passages for the encoder");
  qa_eval->add_option("--max-tokens", max_tokens, "Maximum answer tokens");
  qa_eval->add_option("--out", out, "Report JSON (default stdout)");
  add_config(qa_eval);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    RunConfig cfg = base_config(config_path, seed);

    if (build_db->parsed()) {
      if (chunk_size) cfg.datastore.chunk_size = *chunk_size;
      if (dim) cfg.datastore.embed_dim = *dim;
      cfg.datastore.validate();
      const auto res = build_datastore(corpus, cfg.datastore, out, cfg.echo());
      const fs::path dir(out);
      write_run_manifest(dir / "run_manifest.json", "build-db", cfg,
                         {dir / "chunks.bin", dir / "embeds.bin", dir / "manifest.json"});
      std::cout << "wrote " << res.num_chunks << " chunks to " << out << "\n";
      return 0;
    }

    if (build_index->parsed()) {
      if (ncentroids) cfg.index.ncentroids = *ncentroids;
      if (M) cfg.index.num_subquantizers = *M;
      if (bits) cfg.index.bits_per_code = *bits;
      if (nprobe) cfg.index.nprobe_default = *nprobe;
      if (rerank) cfg.index.rerank_R = *rerank;
      const auto ds = Datastore::open(db);
      const fs::path path = out.empty() ? fs::path(db) / "index.bin" : fs::path(out);
      auto index = AnnIndex::train(ds.embeddings(), cfg.index);
      std::vector<std::int64_t> ids(static_cast<std::size_t>(ds.size()));
      for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(i);
      index.add(ds.embeddings(), ids);
      index.save(path, cfg.echo());
      write_run_manifest(sidecar(path), "build-index", cfg, {path});
      std::cout << "indexed " << index.size() << " vectors into " << cfg.index.ncentroids << " lists: " << path.string()
                << "\n";
      return 0;
    }

    if (train->parsed()) {
      if (steps) cfg.training.steps = *steps;
      cfg.training.validate();
      Retrieval r;
      open_retrieval(r, cfg.model, db, index_path, cfg.model.k_neighbors, cfg.training.nprobe, cfg.training.exclude_self,
                     "train");
      const auto windows = document_windows(read_corpus_jsonl(corpus), cfg.model.chunk_size, cfg.model.max_seq);
      const auto batch = lm_examples(windows, cfg.model, r.retriever.get());
      auto params = init_params<float>(cfg.model, cfg.seed);
      const auto log = train_model(params, batch, cfg.training, cfg.seed);
      for (std::size_t s = 0; s < log.losses.size(); ++s) {
        if ((s + 1) % static_cast<std::size_t>(cfg.training.log_every) == 0 || s + 1 == log.losses.size()) {
          std::cerr << "step " << s + 1 << " loss " << log.losses[s] << "\n";
        }
      }
      save_checkpoint(out, params, cfg.echo());
      write_run_manifest(sidecar(out), "train", cfg, {out});
      std::cout << "trained " << cfg.training.steps << " steps on " << batch.size() << " windows; final loss "
                << log.final_loss << "\n";
      return 0;
    }

    if (finetune->parsed()) {
      if (steps) cfg.training.steps = *steps;
      auto params = load_checkpoint(checkpoint);
      const auto t = parse_template(tmpl);
      const auto set = qa_training_set(read_qa_jsonl(data), t, k.value_or(params.config.k_neighbors), params.config);
      Batch batch;
      for (std::size_t i = 0; i < set.pairs.size(); ++i) {
        const auto one = qa_examples(batch_pad_qa({set.pairs[i]}, params.config.chunk_size, params.config.max_seq),
                                     {set.neighbors[i]});
        batch.push_back(one.front());
      }
      const auto log = train_model(params, batch, cfg.training, cfg.seed);
      save_checkpoint(out, params, cfg.echo());
      write_run_manifest(sidecar(out), "finetune-qa", cfg, {out});
      std::cout << "fine-tuned " << cfg.training.steps << " steps on " << batch.size() << " samples; final loss "
                << log.final_loss << "\n";
      return 0;
    }

    if (generate->parsed()) {
      auto& g = cfg.generation;
      if (top_p) g.sampling.p = *top_p;
      if (max_tokens) g.sampling.max_tokens = *max_tokens;
      if (greedy) g.sampling.strategy = SamplingParams::Strategy::greedy;
      if (retrieval_step) g.retrieval_step = *retrieval_step;
      g.sampling.validate();
      if (prompt.empty() && prompts.empty()) throw ArgumentError("generate: give --prompt or --prompts");
      const auto model = load_checkpoint(checkpoint);
      int step = g.retrieval_step;
      if (!retrieval_step && step > model.config.chunk_size) step = model.config.chunk_size;
      Retrieval r;
      open_retrieval(r, model.config, db, index_path, k.value_or(model.config.k_neighbors), g.nprobe, g.exclude_self,
                     "generate");
      auto records = prompts.empty() ? std::vector<GenerationRecord>{GenerationRecord{prompt, "", {}, {}}}
                                     : read_prompts(prompts);
      GenerationSession session(model, r.retriever.get(), step);
      for (std::size_t i = 0; i < records.size(); ++i) {
        SamplingParams sp = g.sampling;
        sp.seed = g.sampling.seed + i;
        auto ids = encode(records[i].prompt);
        if (ids.empty()) throw ArgumentError("generate: prompt " + std::to_string(i) + " is empty");
        const auto res = session.generate(ids, sp);
        records[i].tokens = res.tokens;
        records[i].continuation = decode(res.tokens);
      }
      if (!out.empty()) {
        write_generations_jsonl(out, records);
        write_run_manifest(sidecar(out), "generate", cfg, {out});
        std::cout << "wrote " << records.size() << " generations to " << out << "\n";
      } else {
        for (const auto& rec : records) std::cout << rec.continuation << "\n";
      }
      return 0;
    }

    if (eval->parsed()) {
      if (!metrics.empty()) cfg.eval.metrics = metrics;
      cfg.eval.validate();
      const auto records = read_generations_jsonl(generations);
      std::optional<RetroParams<float>> model;
      std::optional<Batch> ppl;
      if (!checkpoint.empty()) model.emplace(load_checkpoint(checkpoint));
      if (model && !corpus.empty()) {
        Retrieval r;
        open_retrieval(r, model->config, db, index_path, model->config.k_neighbors, cfg.training.nprobe,
                       cfg.training.exclude_self, "eval");
        ppl.emplace(lm_examples(document_windows(read_corpus_jsonl(corpus), model->config.chunk_size, model->config.max_seq),
                                model->config, r.retriever.get()));
      }
      auto report = compute_metrics(records, cfg.eval, cfg.seed, model ? &*model : nullptr, ppl ? &*ppl : nullptr);
      report["seed"] = cfg.seed;
      report["tool_version"] = kToolVersion;
      report["config"] = cfg.echo();
      if (out.empty()) {
        std::cout << report.dump(2) << "\n";
      } else {
        write_file(out, report.dump(2) + "\n");
        write_run_manifest(sidecar(out), "eval", cfg, {out});
      }
      return 0;
    }

    if (qa_eval->parsed()) {
      const auto model = load_checkpoint(checkpoint);
      const auto t = parse_template(tmpl);
      const auto samples = read_qa_jsonl(data);
      if (samples.empty()) throw ArgumentError("qa-eval: no samples");
      double hits = 0;
      int scored = 0;
      nlohmann::json predictions = nlohmann::json::array();
      for (const auto& s : samples) {
        const auto pred = answer_question(model, s, t, k.value_or(model.config.k_neighbors), max_tokens.value_or(32));
        predictions.push_back(pred);
        if (s.answers.empty()) continue;
        hits += exact_match(pred, s.answers);
        ++scored;
      }
      nlohmann::json report{{"exact_match", scored > 0 ? nlohmann::json(hits / scored) : nlohmann::json(nullptr)},
                            {"scored", scored},
                            {"predictions", predictions},
                            {"seed", cfg.seed},
                            {"tool_version", kToolVersion},
                            {"config", cfg.echo()}};
      if (out.empty()) {
        std::cout << report.dump(2) << "\n";
      } else {
        write_file(out, report.dump(2) + "\n");
        write_run_manifest(sidecar(out), "qa-eval", cfg, {out});
      }
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace retro
