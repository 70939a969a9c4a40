#include "retro/generation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "retro/tokenizer.hpp"

namespace retro {

void SamplingParams::validate() const {
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("sampling: p must be in (0, 1]");
  if (max_tokens < 0) throw ConfigError("sampling: max_tokens must be >= 0");
  if (!(temperature > 0.0)) throw ConfigError("sampling: temperature must be > 0");
}

nlohmann::json SamplingParams::to_json() const {
  return {{"strategy", strategy == Strategy::greedy ? "greedy" : "nucleus"},
          {"p", p},
          {"max_tokens", max_tokens},
          {"seed", seed},
          {"temperature", temperature}};
}

SamplingParams SamplingParams::from_json(const nlohmann::json& j) {
  SamplingParams s;
  for (const auto& [key, v] : j.items()) {
    if (key == "strategy") {
      const auto name = v.get<std::string>();
      if (name == "greedy") s.strategy = Strategy::greedy;
      else if (name == "nucleus") s.strategy = Strategy::nucleus;
      else throw ConfigError("sampling: unknown strategy '" + name + "'");
    } else if (key == "p") s.p = v.get<double>();
    else if (key == "max_tokens") s.max_tokens = v.get<int>();
    else if (key == "seed") s.seed = v.get<std::uint64_t>();
    else if (key == "temperature") s.temperature = v.get<double>();
    else throw ConfigError("sampling: unknown key '" + key + "'");
  }
  s.validate();
  return s;
}

LeftPadded left_pad(std::span<const Token> context, int m) {
  if (m < 2) throw ConfigError("left_pad: chunk size must be >= 2");
  const auto n = static_cast<int>(context.size());
  LeftPadded out;
  out.left_pad_count = (m - n % m) % m;
  out.tokens.assign(static_cast<std::size_t>(out.left_pad_count), kPadId);
  out.tokens.insert(out.tokens.end(), context.begin(), context.end());
  return out;
}

namespace {

std::vector<double> softmax_probs(std::span<const double> logits, double temperature) {
  for (double v : logits) {
    if (!std::isfinite(v)) throw NumericError("sample_token: non-finite logit");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / temperature);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  return p;
}

Token argmax(std::span<const double> logits) {
  // max_element returns the first maximum, i.e. the lowest id.
  return static_cast<Token>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

}  // namespace

std::vector<Token> nucleus_support(std::span<const double> logits, double p, double temperature) {
  if (logits.empty()) throw ArgumentError("nucleus: empty logits");
  const auto probs = softmax_probs(logits, temperature);
  std::vector<Token> order(probs.size());
  std::iota(order.begin(), order.end(), Token{0});
  std::stable_sort(order.begin(), order.end(), [&](Token a, Token b) { return probs[a] > probs[b]; });
  double cum = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    cum += probs[order[keep]];
    ++keep;
    if (cum >= p) break;
  }
  order.resize(keep);
  return order;
}

Token sample_token(std::span<const double> logits, const SamplingParams& params, std::mt19937_64& rng) {
  if (logits.empty()) throw ArgumentError("sample_token: empty logits");
  if (params.strategy == SamplingParams::Strategy::greedy) return argmax(logits);
  const auto probs = softmax_probs(logits, params.temperature);
  const auto support = nucleus_support(logits, params.p, params.temperature);
  double mass = 0.0;
  for (Token t : support) mass += probs[t];
  const double u = std::uniform_real_distribution<double>(0.0, mass)(rng);
  double cum = 0.0;
  for (Token t : support) {
    cum += probs[t];
    if (u < cum) return t;
  }
  return support.back();
}

// ---------------------------------------------------------------------------
// retrievers

IndexRetriever::IndexRetriever(const Datastore& datastore, const AnnIndex& index, int k, int nprobe, bool exclude_self)
    : datastore_(datastore), index_(index), k_(k), nprobe_(nprobe), exclude_self_(exclude_self) {
  if (index.dim() != datastore.config().embed_dim) {
    throw ConfigError("retriever: index dimension differs from datastore embedding dimension");
  }
}

std::vector<ChunkNeighbors> IndexRetriever::retrieve(const std::vector<std::vector<Token>>& chunks) {
  const auto m = static_cast<std::size_t>(datastore_.chunk_size());
  std::vector<ChunkNeighbors> out;
  out.reserve(chunks.size());
  for (const auto& chunk : chunks) {
    std::vector<Token> q = chunk;
    q.resize(m, kPadId);
    const Embedding e = embed_chunk(q, datastore_.config());
    QueryParams params;
    params.k = k_;
    params.nprobe = nprobe_;
    if (exclude_self_) {
      params.top_N = k_ + 8;
      params.filter = [&](std::int64_t id) {
        const auto t = datastore_.fetch_neighbor_tokens(id);
        return !std::equal(q.begin(), q.end(), t.begin());
      };
    }
    const auto result = index_.search(e.data(), params);
    ChunkNeighbors nbs;
    for (const auto& hit : result.hits) {
      nbs.push_back(Neighbor::from_tokens(datastore_.fetch_neighbor_tokens(hit.chunk_id), hit.chunk_id, hit.distance));
    }
    out.push_back(std::move(nbs));
  }
  return out;
}

// ---------------------------------------------------------------------------
// session

GenerationSession::GenerationSession(const RetroParams<float>& model, Retriever* retriever, int retrieval_step)
    : model_(model), retriever_(retriever), step_(retrieval_step), m_(model.config.chunk_size) {
  if (step_ < 1 || step_ > m_) {
    throw ConfigError("generation: retrieval step must be in [1, " + std::to_string(m_) + "]");
  }
}

std::vector<Token> GenerationSession::chunk_tokens(int c) const {
  const auto b = buffer_.begin() + static_cast<std::ptrdiff_t>(c) * m_;
  return {b, b + m_};
}

void GenerationSession::append(Token t) {
  const int len = static_cast<int>(buffer_.size());
  if (fill_ == len && left_pad_ > 0) {
    buffer_.erase(buffer_.begin());
    buffer_.push_back(t);
    --left_pad_;
    return;
  }
  if (fill_ == len) {
    if (len + m_ > model_.config.max_seq) {
      buffer_.erase(buffer_.begin(), buffer_.begin() + m_);
      chunks_.erase(chunks_.begin());
      fill_ -= m_;
    }
    buffer_.insert(buffer_.end(), static_cast<std::size_t>(m_), kPadId);
    chunks_.emplace_back();
  }
  buffer_[static_cast<std::size_t>(fill_)] = t;
  ++fill_;
}

void GenerationSession::refresh() {
  const int complete = fill_ / m_;
  if (complete == 0) return;
  std::vector<int> which;
  std::vector<std::vector<Token>> queries;
  for (int c = 0; c < complete; ++c) {
    auto content = chunk_tokens(c);
    const auto& st = chunks_[static_cast<std::size_t>(c)];
    if (c == complete - 1 || !st.has || st.retrieved_for != content) {
      which.push_back(c);
      queries.push_back(std::move(content));
    }
  }
  auto got = retriever_->retrieve(queries);
  ++queries_;
  if (got.size() != queries.size()) throw IntegrityError("retriever returned the wrong number of neighbor lists");
  for (std::size_t i = 0; i < which.size(); ++i) {
    auto& st = chunks_[static_cast<std::size_t>(which[i])];
    st.retrieved_for = std::move(queries[i]);
    st.neighbors = std::move(got[i]);
    st.has = true;
  }
  latest_ = chunks_[static_cast<std::size_t>(which.back())].neighbors;
  have_latest_ = true;
}

GenerationResult GenerationSession::generate(std::span<const Token> prompt, const SamplingParams& sampling) {
  sampling.validate();
  const auto& cfg = model_.config;
  if (prompt.empty()) throw ArgumentError("generate: empty prompt");
  if (static_cast<int>(prompt.size()) > cfg.max_seq) {
    throw LengthError("generate: prompt of " + std::to_string(prompt.size()) + " tokens exceeds max_seq " +
                      std::to_string(cfg.max_seq));
  }
  auto padded = left_pad(prompt, m_);
  buffer_ = std::move(padded.tokens);
  left_pad_ = padded.left_pad_count;
  fill_ = static_cast<int>(buffer_.size());
  queries_ = 0;
  have_latest_ = false;
  latest_.clear();
  chunks_.assign(buffer_.size() / static_cast<std::size_t>(m_), {});
  const bool retrieving = retriever_ != nullptr && !cfg.is_gpt();

  std::mt19937_64 rng(sampling.seed);
  GenerationResult result;
  std::vector<double> row(static_cast<std::size_t>(cfg.vocab));
  for (int g = 0; g < sampling.max_tokens; ++g) {
    if (retrieving && g % step_ == 0) refresh();
    std::vector<bool> valid(buffer_.size());
    for (int i = 0; i < static_cast<int>(valid.size()); ++i) valid[static_cast<std::size_t>(i)] = i >= left_pad_ && i < fill_;
    SequenceNeighbors nbs(chunks_.size());
    for (std::size_t c = 0; c < chunks_.size(); ++c) {
      // A chunk completed since the last refresh borrows the cached set.
      if (chunks_[c].has) {
        nbs[c] = chunks_[c].neighbors;
      } else if (have_latest_) {
        nbs[c] = latest_;
      }
    }
    const Mat<float> logits = forward<float>(model_, buffer_, valid, nbs);
    for (int v = 0; v < cfg.vocab; ++v) row[static_cast<std::size_t>(v)] = logits(fill_ - 1, v);
    const Token next = sample_token(row, sampling, rng);
    if (next == kEotId) {
      result.hit_eot = true;
      break;
    }
    result.tokens.push_back(next);
    append(next);
  }
  result.queries = queries_;
  return result;
}

// ---------------------------------------------------------------------------
// QA

QaTemplate parse_template(const std::string& s) {
  if (s == "A" || s == "a") return QaTemplate::A;
  if (s == "B" || s == "b") return QaTemplate::B;
  throw ConfigError("unknown QA template '" + s + "'");
}

std::vector<QaSample> read_qa_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open QA file " + path.string());
  std::vector<QaSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      QaSample s;
      s.question = j.at("question").get<std::string>();
      if (j.contains("answers")) s.answers = j.at("answers").get<std::vector<std::string>>();
      if (j.contains("passages")) {
        for (const auto& p : j.at("passages")) {
          s.passages.push_back({p.value("title", std::string()), p.at("text").get<std::string>()});
        }
      }
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

FormattedQa format_qa(const std::string& question, const std::vector<Evidence>& evidences, QaTemplate tmpl, int k) {
  if (k < 0) throw ArgumentError("format_qa: k must be >= 0");
  FormattedQa out;
  std::size_t first = 0;
  if (tmpl == QaTemplate::A) {
    if (evidences.empty()) throw ArgumentError("format_qa: template A needs at least one evidence passage");
    out.decoder_text = "title: " + evidences[0].title + ", source: " + evidences[0].text + " \n question: " + question +
                       " \n answer:";
    first = 1;
  } else {
    out.decoder_text = "question: " + question + " \n answer:";
  }
  const std::size_t last = std::min(evidences.size(), first + static_cast<std::size_t>(k));
  for (std::size_t i = first; i < last; ++i) out.encoder_evidences.push_back(evidences[i]);
  return out;
}

ChunkNeighbors evidence_neighbors(const std::vector<Evidence>& evidences, int length) {
  ChunkNeighbors out;
  for (const auto& e : evidences) {
    auto ids = encode(e.text);
    ids.resize(static_cast<std::size_t>(length), kPadId);
    out.push_back(Neighbor::from_tokens(std::move(ids)));
  }
  return out;
}

QaBatch batch_pad_qa(const std::vector<QaPair>& samples, int m, int max_seq) {
  if (m < 2) throw ConfigError("batch_pad_qa: chunk size must be >= 2");
  QaBatch b;
  for (const auto& s : samples) {
    if (s.answer.empty()) throw ArgumentError("batch_pad_qa: empty answer");
    const auto lp = left_pad(s.context, m);
    const int right = (m - static_cast<int>(s.answer.size()) % m) % m;
    std::vector<Token> toks = lp.tokens;
    toks.insert(toks.end(), s.answer.begin(), s.answer.end());
    toks.insert(toks.end(), static_cast<std::size_t>(right), kPadId);
    if (static_cast<int>(toks.size()) > max_seq) {
      throw LengthError("batch_pad_qa: padded sample of " + std::to_string(toks.size()) + " tokens exceeds max_seq " +
                        std::to_string(max_seq));
    }
    const auto ctx_end = lp.tokens.size();
    const auto ans_end = ctx_end + s.answer.size();
    std::vector<bool> valid(toks.size()), mask(toks.size());
    for (std::size_t i = 0; i < toks.size(); ++i) {
      valid[i] = i >= static_cast<std::size_t>(lp.left_pad_count) && i < ans_end;
      mask[i] = i >= ctx_end && i < ans_end;
    }
    b.tokens.push_back(std::move(toks));
    b.valid.push_back(std::move(valid));
    b.loss_mask.push_back(std::move(mask));
  }
  for (const auto& t : b.tokens) b.chunks = std::max(b.chunks, static_cast<int>(t.size()) / m);
  for (std::size_t i = 0; i < b.tokens.size(); ++i) {
    const int real = static_cast<int>(b.tokens[i].size()) / m;
    const auto total = static_cast<std::size_t>(b.chunks * m);
    b.tokens[i].resize(total, kPadId);
    b.valid[i].resize(total, false);
    b.loss_mask[i].resize(total, false);
    std::vector<bool> slots(static_cast<std::size_t>(b.chunks), false);
    for (int c = 0; c < real; ++c) slots[static_cast<std::size_t>(c)] = true;
    b.neighbor_slots.push_back(std::move(slots));
  }
  return b;
}

Batch qa_examples(const QaBatch& batch, const std::vector<ChunkNeighbors>& neighbors) {
  if (!neighbors.empty() && neighbors.size() != batch.tokens.size()) {
    throw ShapeError("qa_examples: one neighbor list per sample required");
  }
  Batch out;
  for (std::size_t i = 0; i < batch.tokens.size(); ++i) {
    TrainingExample ex;
    ex.tokens = batch.tokens[i];
    ex.valid = batch.valid[i];
    ex.target_mask = batch.loss_mask[i];
    if (!neighbors.empty()) {
      ex.neighbors.resize(static_cast<std::size_t>(batch.chunks));
      for (int c = 0; c < batch.chunks; ++c) {
        if (batch.neighbor_slots[i][static_cast<std::size_t>(c)]) ex.neighbors[static_cast<std::size_t>(c)] = neighbors[i];
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace retro
