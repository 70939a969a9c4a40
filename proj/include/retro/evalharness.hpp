#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "retro/common.hpp"
#include "retro/model.hpp"

namespace retro {

struct GenerationRecord {
  std::string prompt;
  std::string continuation;
  std::vector<Token> tokens;
  std::vector<std::string> answers;  // optional gold answers
};

std::vector<GenerationRecord> read_generations_jsonl(const std::filesystem::path& path);
void write_generations_jsonl(const std::filesystem::path& path, const std::vector<GenerationRecord>& records);

/// True iff some phrase of >= 2 tokens repeats >= 3 times back to back at the
/// very end of `tokens`.
bool is_repetitive(std::span<const Token> tokens);
double repetition_rate(const std::vector<GenerationRecord>& records);

struct BleuStats {
  double precisions[4] = {0, 0, 0, 0};  // smoothed
  double brevity_penalty = 1.0;
  double score = 0.0;
};

/// BLEU-4 of `hypothesis` against `references`: clipped n-gram counts with
/// add-one smoothing at every order, brevity penalty from the closest
/// reference length.
BleuStats bleu4(std::span<const Token> hypothesis, const std::vector<std::vector<Token>>& references);

double self_bleu(const std::vector<GenerationRecord>& records, int sample_n, std::mt19937_64& rng);

double zipf_coefficient(const std::vector<GenerationRecord>& records);
/// Same fit on an explicit frequency table.
double zipf_from_counts(std::vector<double> counts);

/// exp of the mean next-token NLL over the batch's targets.
double perplexity(const RetroParams<float>& model, const Batch& batch);
double perplexity(const RetroParams<double>& model, const Batch& batch);

std::string normalize_answer(const std::string& s);
int exact_match(const std::string& prediction, const std::vector<std::string>& golds);

struct McInstance {
  std::string question;
  std::vector<std::string> candidates;
  int gold_index = 0;
};

struct McOptions {
  bool length_normalize = false;
};

/// Candidate log-probabilities given the question as left-padded context.
template <typename Scalar>
std::vector<double> multiple_choice_scores(const RetroParams<Scalar>& model, const McInstance& instance,
                                           const McOptions& options = {}, const ChunkNeighbors& neighbors = {});

/// Index of the highest score; ties go to the lowest index.
template <typename Scalar>
int multiple_choice(const RetroParams<Scalar>& model, const McInstance& instance, const McOptions& options = {},
                    const ChunkNeighbors& neighbors = {});

}  // namespace retro
