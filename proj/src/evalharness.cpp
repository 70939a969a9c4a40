#include "retro/evalharness.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <unordered_map>

#include <unicode/locid.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include "retro/binary_io.hpp"
#include "retro/generation.hpp"
#include "retro/tokenizer.hpp"

namespace retro {

std::vector<GenerationRecord> read_generations_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open generations file " + path.string());
  std::vector<GenerationRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      GenerationRecord r;
      r.prompt = j.value("prompt", std::string());
      r.continuation = j.at("continuation").get<std::string>();
      r.tokens = j.contains("tokens") ? j.at("tokens").get<std::vector<Token>>() : encode(r.continuation);
      if (j.contains("answers")) r.answers = j.at("answers").get<std::vector<std::string>>();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_generations_jsonl(const std::filesystem::path& path, const std::vector<GenerationRecord>& records) {
  std::string text;
  for (const auto& r : records) {
    nlohmann::json j{{"prompt", r.prompt}, {"continuation", r.continuation}, {"tokens", r.tokens}};
    if (!r.answers.empty()) j["answers"] = r.answers;
    text += j.dump() + "\n";
  }
  write_file(path, text);
}

// ---------------------------------------------------------------------------
// repetition

bool is_repetitive(std::span<const Token> tokens) {
  const std::size_t n = tokens.size();
  for (std::size_t len = 2; 3 * len <= n; ++len) {
    const std::size_t start = n - len;
    bool ok = true;
    for (std::size_t rep = 1; rep < 3 && ok; ++rep) {
      ok = std::equal(tokens.begin() + static_cast<std::ptrdiff_t>(start), tokens.end(),
                      tokens.begin() + static_cast<std::ptrdiff_t>(start - rep * len));
    }
    if (ok) return true;
  }
  return false;
}

double repetition_rate(const std::vector<GenerationRecord>& records) {
  if (records.empty()) throw ArgumentError("repetition_rate: no records");
  std::size_t hits = 0;
  for (const auto& r : records) hits += is_repetitive(r.tokens) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------
// BLEU

namespace {

using NgramCounts = std::map<std::vector<Token>, int>;

NgramCounts ngrams(std::span<const Token> t, std::size_t n) {
  NgramCounts out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) {
    const auto b = t.begin() + static_cast<std::ptrdiff_t>(i);
    ++out[std::vector<Token>(b, b + static_cast<std::ptrdiff_t>(n))];
  }
  return out;
}

BleuStats bleu_from(std::span<const Token> hyp, const std::array<NgramCounts, 4>& max_ref,
                    const std::vector<std::size_t>& ref_lengths) {
  BleuStats s;
  const std::size_t c = hyp.size();
  if (c == 0) return s;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto counts = ngrams(hyp, n);
    double clipped = 0.0, total = 0.0;
    for (const auto& [g, cnt] : counts) {
      total += cnt;
      const auto it = max_ref[n - 1].find(g);
      if (it != max_ref[n - 1].end()) clipped += std::min(cnt, it->second);
    }
    s.precisions[n - 1] = (clipped + 1.0) / (total + 1.0);
    log_sum += std::log(s.precisions[n - 1]) / 4.0;
  }
  std::size_t r = ref_lengths.front();
  for (std::size_t len : ref_lengths) {
    const auto d = [&](std::size_t x) { return x > c ? x - c : c - x; };
    if (d(len) < d(r) || (d(len) == d(r) && len < r)) r = len;
  }
  s.brevity_penalty = c > r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
  s.score = s.brevity_penalty * std::exp(log_sum);
  return s;
}

}  // namespace

BleuStats bleu4(std::span<const Token> hypothesis, const std::vector<std::vector<Token>>& references) {
  if (references.empty()) throw ArgumentError("bleu4: no references");
  std::array<NgramCounts, 4> max_ref;
  std::vector<std::size_t> lengths;
  for (const auto& ref : references) {
    lengths.push_back(ref.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      for (const auto& [g, cnt] : ngrams(ref, n)) {
        auto& slot = max_ref[n - 1][g];
        slot = std::max(slot, cnt);
      }
    }
  }
  return bleu_from(hypothesis, max_ref, lengths);
}

double self_bleu(const std::vector<GenerationRecord>& records, int sample_n, std::mt19937_64& rng) {
  if (records.size() < 2) throw ArgumentError("self_bleu: need at least two records");
  if (sample_n < 1) throw ArgumentError("self_bleu: sample_n must be >= 1");
  if (static_cast<std::size_t>(sample_n) > records.size()) {
    log_warning("self_bleu: sample_n " + std::to_string(sample_n) + " clamped to " + std::to_string(records.size()));
    sample_n = static_cast<int>(records.size());
  }
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (static_cast<std::size_t>(sample_n) < records.size()) std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(sample_n));

  std::vector<std::array<NgramCounts, 4>> counts(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (std::size_t n = 1; n <= 4; ++n) counts[i][n - 1] = ngrams(records[i].tokens, n);
  }
  double total = 0.0;
  for (std::size_t idx : order) {
    std::array<NgramCounts, 4> max_ref;
    std::vector<std::size_t> lengths;
    for (std::size_t j = 0; j < records.size(); ++j) {
      if (j == idx) continue;
      lengths.push_back(records[j].tokens.size());
      for (std::size_t n = 0; n < 4; ++n) {
        for (const auto& [g, cnt] : counts[j][n]) {
          auto& slot = max_ref[n][g];
          slot = std::max(slot, cnt);
        }
      }
    }
    total += bleu_from(records[idx].tokens, max_ref, lengths).score;
  }
  return total / static_cast<double>(order.size());
}

// ---------------------------------------------------------------------------
// Zipf

double zipf_from_counts(std::vector<double> counts) {
  std::erase_if(counts, [](double c) { return !(c > 0.0); });
  if (counts.size() < 2) throw ArgumentError("zipf: need at least two distinct types");
  std::sort(counts.begin(), counts.end(), std::greater<>());
  const auto n = static_cast<Eigen::Index>(counts.size());
  Eigen::VectorXd x(n), y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    x(i) = std::log(static_cast<double>(i + 1));
    y(i) = std::log(counts[static_cast<std::size_t>(i)]);
  }
  const double mx = x.mean(), my = y.mean();
  const double slope = ((x.array() - mx) * (y.array() - my)).sum() / (x.array() - mx).square().sum();
  return -slope;
}

double zipf_coefficient(const std::vector<GenerationRecord>& records) {
  std::unordered_map<Token, double> freq;
  std::size_t total = 0;
  for (const auto& r : records) {
    for (Token t : r.tokens) {
      freq[t] += 1.0;
      ++total;
    }
  }
  if (total < 100) throw ArgumentError("zipf: need at least 100 tokens, got " + std::to_string(total));
  std::vector<double> counts;
  for (const auto& [t, c] : freq) counts.push_back(c);
  return zipf_from_counts(std::move(counts));
}

// ---------------------------------------------------------------------------
// perplexity

namespace {

template <typename Scalar>
double perplexity_impl(const RetroParams<Scalar>& model, const Batch& batch) {
  double targets = 0;
  for (const auto& ex : batch) {
    std::vector<Token> t;
    std::vector<bool> mask;
    shifted_targets(ex, t, mask);
    targets += static_cast<double>(std::count(mask.begin(), mask.end(), true));
  }
  if (targets == 0) throw ArgumentError("perplexity: no target tokens");
  return std::exp(batch_loss(model, batch));
}

}  // namespace

double perplexity(const RetroParams<float>& model, const Batch& batch) { return perplexity_impl(model, batch); }
double perplexity(const RetroParams<double>& model, const Batch& batch) { return perplexity_impl(model, batch); }

// ---------------------------------------------------------------------------
// exact match

namespace {

bool is_punct(UChar32 c) {
  return (U_GET_GC_MASK(c) & U_GC_P_MASK) != 0;
}

}  // namespace

std::string normalize_answer(const std::string& s) {
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(s);
  u.toLower(icu::Locale::getRoot());
  std::vector<icu::UnicodeString> words;
  icu::UnicodeString cur;
  auto flush = [&]() {
    if (cur.isEmpty()) return;
    if (cur != UNICODE_STRING_SIMPLE("a") && cur != UNICODE_STRING_SIMPLE("an") && cur != UNICODE_STRING_SIMPLE("the")) {
      words.push_back(cur);
    }
    cur.remove();
  };
  for (int32_t i = 0; i < u.length();) {
    const UChar32 c = u.char32At(i);
    i += U16_LENGTH(c);
    if (is_punct(c)) continue;
    if (u_isUWhiteSpace(c)) {
      flush();
      continue;
    }
    cur.append(c);
  }
  flush();
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    words[i].toUTF8String(out);
  }
  return out;
}

int exact_match(const std::string& prediction, const std::vector<std::string>& golds) {
  if (golds.empty()) throw ArgumentError("exact_match: no gold answers");
  const auto p = normalize_answer(prediction);
  for (const auto& g : golds) {
    if (normalize_answer(g) == p) return 1;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// multiple choice

template <typename Scalar>
std::vector<double> multiple_choice_scores(const RetroParams<Scalar>& model, const McInstance& instance,
                                           const McOptions& options, const ChunkNeighbors& neighbors) {
  if (instance.candidates.size() < 2) throw ArgumentError("multiple_choice: need at least two candidates");
  if (instance.gold_index < 0 || instance.gold_index >= static_cast<int>(instance.candidates.size())) {
    throw ArgumentError("multiple_choice: gold index out of range");
  }
  const auto question = encode(instance.question);
  std::vector<double> scores;
  for (const auto& cand : instance.candidates) {
    const auto answer = encode(cand);
    if (answer.empty()) throw ArgumentError("multiple_choice: empty candidate");
    const auto padded = batch_pad_qa({{question, answer}}, model.config.chunk_size, model.config.max_seq);
    std::vector<ChunkNeighbors> nbs;
    if (!neighbors.empty()) nbs.push_back(neighbors);
    const auto batch = qa_examples(padded, nbs);
    double logp = -example_nll(model, batch).front();
    if (options.length_normalize) logp /= static_cast<double>(answer.size());
    scores.push_back(logp);
  }
  return scores;
}

template <typename Scalar>
int multiple_choice(const RetroParams<Scalar>& model, const McInstance& instance, const McOptions& options,
                    const ChunkNeighbors& neighbors) {
  const auto scores = multiple_choice_scores(model, instance, options, neighbors);
  return static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

template std::vector<double> multiple_choice_scores<float>(const RetroParams<float>&, const McInstance&,
                                                           const McOptions&, const ChunkNeighbors&);
template std::vector<double> multiple_choice_scores<double>(const RetroParams<double>&, const McInstance&,
                                                            const McOptions&, const ChunkNeighbors&);
template int multiple_choice<float>(const RetroParams<float>&, const McInstance&, const McOptions&,
                                    const ChunkNeighbors&);
template int multiple_choice<double>(const RetroParams<double>&, const McInstance&, const McOptions&,
                                     const ChunkNeighbors&);

}  // namespace retro
