#include "retro/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

#include "retro/binary_io.hpp"
#include "retro/tokenizer.hpp"

namespace retro {

namespace {

void require_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, v] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// config sections

void TrainingSection::validate() const {
  if (steps < 0) throw ConfigError("training: steps must be >= 0");
  if (batch_size < 1) throw ConfigError("training: batch_size must be >= 1");
  if (!(clip_norm > 0)) throw ConfigError("training: clip_norm must be > 0");
  if (warmup_steps < 0) throw ConfigError("training: warmup_steps must be >= 0");
  if (!(min_lr_ratio >= 0 && min_lr_ratio <= 1)) throw ConfigError("training: min_lr_ratio must be in [0, 1]");
  if (nprobe < 0) throw ConfigError("training: nprobe must be >= 0");
  if (log_every < 1) throw ConfigError("training: log_every must be >= 1");
  adam.validate();
}

nlohmann::json TrainingSection::to_json() const {
  return {{"steps", steps},
          {"batch_size", batch_size},
          {"lr", adam.lr},
          {"beta1", adam.beta1},
          {"beta2", adam.beta2},
          {"eps", adam.eps},
          {"weight_decay", adam.weight_decay},
          {"clip_norm", clip_norm},
          {"warmup_steps", warmup_steps},
          {"min_lr_ratio", min_lr_ratio},
          {"cosine", cosine},
          {"nprobe", nprobe},
          {"exclude_self", exclude_self},
          {"log_every", log_every}};
}

TrainingSection TrainingSection::from_json(const nlohmann::json& j) {
  require_keys(j, "training",
               {"steps", "batch_size", "lr", "beta1", "beta2", "eps", "weight_decay", "clip_norm", "warmup_steps",
                "min_lr_ratio", "cosine", "nprobe", "exclude_self", "log_every"});
  TrainingSection t;
  t.steps = j.value("steps", t.steps);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.adam.lr = j.value("lr", t.adam.lr);
  t.adam.beta1 = j.value("beta1", t.adam.beta1);
  t.adam.beta2 = j.value("beta2", t.adam.beta2);
  t.adam.eps = j.value("eps", t.adam.eps);
  t.adam.weight_decay = j.value("weight_decay", t.adam.weight_decay);
  t.clip_norm = j.value("clip_norm", t.clip_norm);
  t.warmup_steps = j.value("warmup_steps", t.warmup_steps);
  t.min_lr_ratio = j.value("min_lr_ratio", t.min_lr_ratio);
  t.cosine = j.value("cosine", t.cosine);
  t.nprobe = j.value("nprobe", t.nprobe);
  t.exclude_self = j.value("exclude_self", t.exclude_self);
  t.log_every = j.value("log_every", t.log_every);
  t.validate();
  return t;
}

TrainHyper TrainingSection::hyper() const {
  TrainHyper h;
  h.adam = adam;
  h.clip_norm = clip_norm;
  h.warmup_steps = warmup_steps;
  h.total_steps = cosine ? steps : 0;
  h.min_lr_ratio = min_lr_ratio;
  return h;
}

nlohmann::json GenerationSection::to_json() const {
  auto j = sampling.to_json();
  j["retrieval_step"] = retrieval_step;
  j["nprobe"] = nprobe;
  j["exclude_self"] = exclude_self;
  return j;
}

GenerationSection GenerationSection::from_json(const nlohmann::json& j, std::uint64_t default_seed) {
  if (!j.is_object()) throw ConfigError("generation: expected an object");
  GenerationSection g;
  nlohmann::json rest = j;
  g.retrieval_step = j.value("retrieval_step", g.retrieval_step);
  g.nprobe = j.value("nprobe", g.nprobe);
  g.exclude_self = j.value("exclude_self", g.exclude_self);
  rest.erase("retrieval_step");
  rest.erase("nprobe");
  rest.erase("exclude_self");
  if (!rest.contains("seed")) rest["seed"] = default_seed;
  try {
    g.sampling = SamplingParams::from_json(rest);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("generation: ") + e.what());
  }
  if (g.retrieval_step < 1) throw ConfigError("generation: retrieval_step must be >= 1");
  if (g.nprobe < 0) throw ConfigError("generation: nprobe must be >= 0");
  return g;
}

void EvalSection::validate() const {
  for (const auto& m : metrics) {
    if (std::find(kAllMetrics.begin(), kAllMetrics.end(), m) == kAllMetrics.end()) {
      throw ConfigError("eval: unknown metric '" + m + "'");
    }
  }
  if (selfbleu_samples < 1) throw ConfigError("eval: selfbleu_samples must be >= 1");
}

nlohmann::json EvalSection::to_json() const {
  return {{"metrics", metrics}, {"selfbleu_samples", selfbleu_samples}, {"mc_length_normalize", mc_length_normalize}};
}

EvalSection EvalSection::from_json(const nlohmann::json& j) {
  require_keys(j, "eval", {"metrics", "selfbleu_samples", "mc_length_normalize"});
  EvalSection e;
  e.metrics = j.value("metrics", e.metrics);
  e.selfbleu_samples = j.value("selfbleu_samples", e.selfbleu_samples);
  e.mc_length_normalize = j.value("mc_length_normalize", e.mc_length_normalize);
  e.validate();
  return e;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  try {
    require_keys(j, "config", {"seed", "datastore", "index", "model", "training", "generation", "eval"});
    if (!j.contains("seed")) throw ConfigError("config: 'seed' is required");
    RunConfig c;
    c.source = j;
    c.seed = j.at("seed").get<std::uint64_t>();
    const nlohmann::json empty = nlohmann::json::object();
    c.datastore = DatastoreConfig::from_json(j.value("datastore", empty));
    const auto& ij = j.value("index", empty);
    c.index = IndexConfig::from_json(ij);
    if (!ij.contains("seed")) c.index.seed = c.seed;
    c.model = ModelConfig::from_json(j.value("model", empty));
    c.training = TrainingSection::from_json(j.value("training", empty));
    c.generation = GenerationSection::from_json(j.value("generation", empty), c.seed);
    c.eval = EvalSection::from_json(j.value("eval", empty));
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

RunConfig RunConfig::with_seed(std::uint64_t seed) { return from_json({{"seed", seed}}); }

void RunConfig::validate() const {
  if (model.chunk_size != datastore.chunk_size) {
    throw ConfigError("config: model.chunk_size " + std::to_string(model.chunk_size) + " differs from datastore.chunk_size " +
                      std::to_string(datastore.chunk_size));
  }
  if (!model.is_gpt() && model.neighbor_len != 2 * datastore.chunk_size) {
    throw ConfigError("config: model.neighbor_len must be twice the chunk size (chunk plus continuation)");
  }
}

nlohmann::json RunConfig::to_json() const {
  return {{"seed", seed},
          {"datastore", datastore.to_json()},
          {"index", index.to_json()},
          {"model", model.to_json()},
          {"training", training.to_json()},
          {"generation", generation.to_json()},
          {"eval", eval.to_json()}};
}

nlohmann::json RunConfig::echo() const { return {{"source", source}, {"resolved", to_json()}}; }

// ---------------------------------------------------------------------------
// data

std::vector<Window> document_windows(const std::vector<CorpusDocument>& docs, int chunk_size, int max_seq) {
  if (chunk_size < 2 || max_seq % chunk_size != 0) throw ConfigError("windows: max_seq must be a multiple of the chunk size");
  std::vector<Window> out;
  for (const auto& d : docs) {
    const auto ids = encode(d.text);
    for (std::size_t start = 0; start < ids.size(); start += static_cast<std::size_t>(max_seq)) {
      const std::size_t len = std::min(ids.size() - start, static_cast<std::size_t>(max_seq));
      if (len < 2) continue;  // no prediction target
      Window w;
      w.length = static_cast<int>(len);
      w.tokens.assign(ids.begin() + static_cast<std::ptrdiff_t>(start),
                      ids.begin() + static_cast<std::ptrdiff_t>(start + len));
      const std::size_t m = static_cast<std::size_t>(chunk_size);
      w.tokens.resize((len + m - 1) / m * m, kPadId);
      out.push_back(std::move(w));
    }
  }
  return out;
}

Batch lm_examples(const std::vector<Window>& windows, const ModelConfig& config, Retriever* retriever) {
  Batch out;
  out.reserve(windows.size());
  const auto m = static_cast<std::size_t>(config.chunk_size);
  for (const auto& w : windows) {
    std::vector<bool> valid(w.tokens.size());
    for (std::size_t i = 0; i < valid.size(); ++i) valid[i] = static_cast<int>(i) < w.length;
    SequenceNeighbors nbs;
    if (retriever != nullptr && !config.is_gpt()) {
      std::vector<std::vector<Token>> queries;
      for (std::size_t c = 0; c * m < w.tokens.size(); ++c) {
        queries.emplace_back(w.tokens.begin() + static_cast<std::ptrdiff_t>(c * m),
                             w.tokens.begin() + static_cast<std::ptrdiff_t>((c + 1) * m));
      }
      nbs = retriever->retrieve(queries);
    }
    out.push_back(TrainingExample::language_modeling(w.tokens, std::move(valid), std::move(nbs)));
  }
  return out;
}

TrainLog train_model(RetroParams<float>& params, const Batch& data, const TrainingSection& section, std::uint64_t seed) {
  section.validate();
  if (data.empty()) throw ArgumentError("train: no training examples");
  Trainer<float> trainer(std::move(params));
  const TrainHyper hyper = section.hyper();
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  TrainLog log;
  for (int step = 0; step < section.steps; ++step) {
    Batch batch;
    for (int b = 0; b < section.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(data[order[cursor++]]);
    }
    log.losses.push_back(trainer.step(batch, hyper).loss);
  }
  params = std::move(trainer.params);
  log.final_loss = log.losses.empty() ? 0.0 : log.losses.back();
  return log;
}

QaTrainingSet qa_training_set(const std::vector<QaSample>& samples, QaTemplate tmpl, int k, const ModelConfig& config) {
  QaTrainingSet set;
  for (const auto& s : samples) {
    if (s.answers.empty()) continue;
    const auto f = format_qa(s.question, s.passages, tmpl, k);
    auto context = encode(f.decoder_text);
    auto answer = encode(" " + s.answers.front() + "\n");
    // Long contexts keep their question end so the padded pair fits max_seq.
    const int m = config.chunk_size;
    const int answer_span = (static_cast<int>(answer.size()) + m - 1) / m * m;
    const auto room = static_cast<std::size_t>(std::max(0, config.max_seq - answer_span));
    if (context.size() > room) context.erase(context.begin(), context.end() - static_cast<std::ptrdiff_t>(room));
    set.pairs.push_back({std::move(context), std::move(answer)});
    set.neighbors.push_back(evidence_neighbors(f.encoder_evidences, config.neighbor_len));
  }
  return set;
}

std::string answer_question(const RetroParams<float>& model, const QaSample& sample, QaTemplate tmpl, int k,
                            int max_tokens) {
  const auto& cfg = model.config;
  const auto f = format_qa(sample.question, sample.passages, tmpl, k);
  auto prompt = encode(f.decoder_text);
  // Keep the question end of long prompts and leave one chunk of room.
  const auto keep = static_cast<std::size_t>(cfg.max_seq - cfg.chunk_size);
  if (prompt.size() > keep) prompt.erase(prompt.begin(), prompt.end() - static_cast<std::ptrdiff_t>(keep));
  ConstantRetriever retriever(evidence_neighbors(f.encoder_evidences, cfg.neighbor_len));
  GenerationSession session(model, f.encoder_evidences.empty() ? nullptr : &retriever, cfg.chunk_size);
  SamplingParams greedy;
  greedy.strategy = SamplingParams::Strategy::greedy;
  greedy.max_tokens = max_tokens;
  auto text = decode(session.generate(prompt, greedy).tokens);
  text = text.substr(0, text.find('\n'));
  const auto b = text.find_first_not_of(' ');
  const auto e = text.find_last_not_of(' ');
  return b == std::string::npos ? std::string() : text.substr(b, e - b + 1);
}

// ---------------------------------------------------------------------------
// artifacts

nlohmann::json compute_metrics(const std::vector<GenerationRecord>& records, const EvalSection& section,
                               std::uint64_t seed, const RetroParams<float>* model, const Batch* ppl_batch) {
  section.validate();
  nlohmann::json out;
  for (const auto& name : kAllMetrics) out[name] = nullptr;
  const auto wanted = [&](const std::string& n) {
    return std::find(section.metrics.begin(), section.metrics.end(), n) != section.metrics.end();
  };
  const auto attempt = [&](const std::string& name, auto&& fn) {
    if (!wanted(name)) return;
    try {
      out[name] = fn();
    } catch (const Error& e) {
      log_warning("metric " + name + " unavailable: " + e.what());
    }
  };
  attempt("repetition", [&] { return repetition_rate(records); });
  attempt("selfbleu", [&] {
    std::mt19937_64 rng(seed);
    return self_bleu(records, section.selfbleu_samples, rng);
  });
  attempt("zipf", [&] { return zipf_coefficient(records); });
  attempt("perplexity", [&] {
    if (model == nullptr || ppl_batch == nullptr) throw ArgumentError("needs a checkpoint and an evaluation corpus");
    return perplexity(*model, *ppl_batch);
  });
  attempt("exact_match", [&] {
    double hits = 0;
    int n = 0;
    for (const auto& r : records) {
      if (r.answers.empty()) continue;
      auto pred = r.continuation.substr(0, r.continuation.find('\n'));
      hits += exact_match(pred, r.answers);
      ++n;
    }
    if (n == 0) throw ArgumentError("no record carries gold answers");
    return hits / n;
  });
  return out;
}

void write_run_manifest(const std::filesystem::path& path, const std::string& command, const RunConfig& config,
                        const std::vector<std::filesystem::path>& artifacts) {
  nlohmann::json files = nlohmann::json::object();
  for (const auto& a : artifacts) files[a.filename().string()] = file_crc32_hex(a);
  const nlohmann::json manifest{{"tool_version", kToolVersion},
                                {"command", command},
                                {"seed", config.seed},
                                {"echo", config.echo()},
                                {"artifacts", files}};
  write_file(path, manifest.dump(2) + "\n");
}

}  // namespace retro
