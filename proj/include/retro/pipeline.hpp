#pragma once

// Run configuration and the end-to-end steps shared by the command line tool
// and the acceptance runner.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "retro/ann_index.hpp"
#include "retro/datastore.hpp"
#include "retro/evalharness.hpp"
#include "retro/generation.hpp"
#include "retro/model.hpp"

namespace retro {

struct TrainingSection {
  int steps = 100;
  int batch_size = 4;
  AdamHyper adam;
  double clip_norm = 1.0;
  int warmup_steps = 0;
  double min_lr_ratio = 0.1;
  bool cosine = true;  // decay over `steps` after warmup
  int nprobe = 0;      // 0 uses the index default
  bool exclude_self = false;
  int log_every = 10;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainingSection from_json(const nlohmann::json& j);
  TrainHyper hyper() const;
};

struct GenerationSection {
  SamplingParams sampling;
  int retrieval_step = 64;
  int nprobe = 0;
  bool exclude_self = false;

  nlohmann::json to_json() const;
  static GenerationSection from_json(const nlohmann::json& j, std::uint64_t default_seed);
};

inline const std::vector<std::string> kAllMetrics{"repetition", "selfbleu", "zipf", "perplexity", "exact_match"};

struct EvalSection {
  std::vector<std::string> metrics = kAllMetrics;
  int selfbleu_samples = 1000;
  bool mc_length_normalize = false;

  void validate() const;
  nlohmann::json to_json() const;
  static EvalSection from_json(const nlohmann::json& j);
};

/// Top-level run document. Unknown keys are rejected at every level and
/// "seed" is required. Section seeds that are not given explicitly default to
/// the run seed.
struct RunConfig {
  std::uint64_t seed = 0;
  DatastoreConfig datastore;
  IndexConfig index;
  ModelConfig model = ModelConfig::desk_default();
  TrainingSection training;
  GenerationSection generation;
  EvalSection eval;
  nlohmann::json source;  // the document as parsed

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  /// Defaults with only the seed given.
  static RunConfig with_seed(std::uint64_t seed);

  /// Cross-section checks (chunk sizes and neighbor lengths agree).
  void validate() const;
  nlohmann::json to_json() const;
  /// Embedded into every artifact: the source document and the resolved values.
  nlohmann::json echo() const;
};

// ---------------------------------------------------------------------------
// data

/// Tokenized documents cut into windows of at most max_seq tokens, each
/// right-padded to a chunk boundary.
struct Window {
  std::vector<Token> tokens;
  int length = 0;  // real tokens
};

std::vector<Window> document_windows(const std::vector<CorpusDocument>& docs, int chunk_size, int max_seq);

/// LM examples with per-chunk neighbors from `retriever` (none when null or
/// when the model has no cross-attention).
Batch lm_examples(const std::vector<Window>& windows, const ModelConfig& config, Retriever* retriever);

struct TrainLog {
  std::vector<double> losses;
  double final_loss = 0.0;
};

/// Plain minibatch loop: epoch-wise shuffles drawn from `seed`.
TrainLog train_model(RetroParams<float>& params, const Batch& data, const TrainingSection& section,
                     std::uint64_t seed);

/// QA samples rendered with `tmpl` as (context, answer) pairs plus encoder
/// evidence. The answer is " <first gold>\n"; contexts too long for max_seq
/// lose tokens from the left.
struct QaTrainingSet {
  std::vector<QaPair> pairs;
  std::vector<ChunkNeighbors> neighbors;
};

QaTrainingSet qa_training_set(const std::vector<QaSample>& samples, QaTemplate tmpl, int k, const ModelConfig& config);

/// Greedy answer: generation up to the first newline, trimmed.
std::string answer_question(const RetroParams<float>& model, const QaSample& sample, QaTemplate tmpl, int k,
                            int max_tokens);

// ---------------------------------------------------------------------------
// artifacts

/// Metric name to value; a metric that could not be computed is null.
nlohmann::json compute_metrics(const std::vector<GenerationRecord>& records, const EvalSection& section,
                               std::uint64_t seed, const RetroParams<float>* model, const Batch* ppl_batch);

/// Writes {tool_version, command, seed, echo, artifacts: {file name: crc32}}.
void write_run_manifest(const std::filesystem::path& path, const std::string& command, const RunConfig& config,
                        const std::vector<std::filesystem::path>& artifacts);

/// Command-line entry point. Returns the process exit code.
int run_cli(int argc, const char* const* argv);

}  // namespace retro
